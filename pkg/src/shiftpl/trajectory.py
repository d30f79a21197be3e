"""Trajectory ingestion: CSV adapters, resampling and fixed-length state windows.

Everything inside a :class:`TrajectoryTable` is SI (m, m/s, m/s^2, s).  Rows
are kept sorted by ``(id, frame)``.

Neighbor slots follow a fixed order around the ego vehicle::

    0 preceding        1 following
    2 left-preceding   3 left-alongside   4 left-following
    5 right-preceding  6 right-alongside  7 right-following

Lane ids are opaque integers with the convention that the lane to the left
of lane ``L`` (in the direction of travel) is ``L - 1``.
"""
from __future__ import annotations

import io
import math
import os
from dataclasses import dataclass, field, replace

import numpy as np
import pandas as pd

from shiftpl.errors import ParseError, ResampleError, SchemaError, ValidationError

COLUMNS = ("frame", "id", "x", "y", "vx", "vy", "ax", "ay", "lane", "length", "width")
SLOTS = (
    "preceding",
    "following",
    "left-preceding",
    "left-alongside",
    "left-following",
    "right-preceding",
    "right-alongside",
    "right-following",
)
N_SLOTS = len(SLOTS)
EGO_FEATURES = ("vx", "vy", "ax", "ay", "lane")
NEIGHBOR_FEATURES = ("vx", "vy", "ax", "ay", "d")
DIRECTIONS = ("longitudinal", "lateral")

DEFAULT_T = 12
DEFAULT_DT = 0.2


@dataclass(frozen=True, eq=False)
class TrajectoryTable:
    frame: np.ndarray
    id: np.ndarray
    x: np.ndarray
    y: np.ndarray
    vx: np.ndarray
    vy: np.ndarray
    ax: np.ndarray
    ay: np.ndarray
    lane: np.ndarray
    length: np.ndarray
    width: np.ndarray
    dt: float

    def __post_init__(self):
        if not (self.dt > 0):
            raise ValidationError(f"recording timestep must be > 0, got {self.dt}")
        n = len(self.frame)
        cols = {}
        for name in COLUMNS:
            arr = np.asarray(getattr(self, name))
            if arr.shape != (n,):
                raise ValidationError(f"column {name!r} has shape {arr.shape}, expected ({n},)")
            cols[name] = arr.astype(np.int64 if name in ("frame", "id", "lane") else float)
        order = np.lexsort((cols["frame"], cols["id"]))
        same_vehicle = cols["id"][order][1:] == cols["id"][order][:-1]
        if np.any(same_vehicle & (np.diff(cols["frame"][order]) <= 0)):
            raise ValidationError("duplicate (id, frame) rows")
        for name, arr in cols.items():
            arr = arr[order]
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)

    def __len__(self):
        return len(self.frame)

    def __eq__(self, other):
        if not isinstance(other, TrajectoryTable):
            return NotImplemented
        return self.dt == other.dt and all(np.array_equal(getattr(self, c), getattr(other, c)) for c in COLUMNS)

    @classmethod
    def from_columns(cls, dt, **cols):
        return cls(dt=dt, **{c: np.asarray(cols[c]) for c in COLUMNS})

    def columns(self) -> dict:
        return {c: getattr(self, c) for c in COLUMNS}

    def take(self, mask) -> "TrajectoryTable":
        return TrajectoryTable(dt=self.dt, **{c: v[mask] for c, v in self.columns().items()})

    @property
    def vehicle_ids(self):
        return np.unique(self.id)

    def frames_per_vehicle(self) -> dict:
        ids, counts = np.unique(self.id, return_counts=True)
        return dict(zip(ids.tolist(), counts.tolist()))

    def lane_centers(self) -> dict:
        lanes = np.unique(self.lane)
        return {int(l): float(self.y[self.lane == l].mean()) for l in lanes}

    def to_csv(self, path=None):
        """Write the neutral fixed-header CSV; returns bytes when ``path`` is None."""
        df = pd.DataFrame(self.columns())
        text = df.to_csv(index=False, float_format="%.17g", lineterminator="\n")
        data = text.encode("utf-8")
        if path is None:
            return data
        with open(path, "wb") as fh:
            fh.write(data)
        return path


# ---------------------------------------------------------------------------
# schema maps

@dataclass(frozen=True)
class SchemaMap:
    """How to read one dataset export into the neutral schema.

    ``columns`` maps neutral names to source headers.  ``scale`` converts the
    mapped values to SI.  Neutral columns absent from ``columns`` take the
    constant in ``defaults``; ``ax``/``ay`` absent are differentiated from the
    velocities at the recording rate.
    """

    name: str
    columns: dict
    dt: float | None = None
    scale: dict = field(default_factory=dict)
    defaults: dict = field(default_factory=dict)
    # x/y give the box corner (highD); shift to the center
    corner_origin: bool = False
    # rotate vehicles driving towards -x by 180 degrees (x, y, v, a and lane negated)
    flip_negative_x: bool = False
    # velocity given as speed + heading (degrees) instead of components
    polar_velocity: bool = False
    # two-vehicle ego/leader log (time, speeds, spacing) rather than a track table
    pair_log: bool = False


_BASE_DEFAULTS = {"y": 0.0, "vy": 0.0, "ay": 0.0, "lane": 0, "length": 4.5, "width": 1.8}

SCHEMAS = {
    "neutral": SchemaMap(
        name="neutral",
        columns={c: c for c in COLUMNS},
    ),
    "highd": SchemaMap(
        name="highd",
        columns={
            "frame": "frame",
            "id": "id",
            "x": "x",
            "y": "y",
            "vx": "xVelocity",
            "vy": "yVelocity",
            "ax": "xAcceleration",
            "ay": "yAcceleration",
            "lane": "laneId",
            "length": "width",
            "width": "height",
        },
        dt=1.0 / 25.0,
        corner_origin=True,
        flip_negative_x=True,
    ),
    "citysim": SchemaMap(
        name="citysim",
        columns={
            "frame": "frameNum",
            "id": "carId",
            "x": "carCenterXft",
            "y": "carCenterYft",
            "speed": "speed",
            "heading": "course",
            "lane": "laneId",
        },
        dt=1.0 / 30.0,
        scale={"x": 0.3048, "y": 0.3048, "speed": 0.44704},
        polar_velocity=True,
    ),
    "acc-pair": SchemaMap(
        name="acc-pair",
        columns={
            "time": "time",
            "ego_speed": "ego_speed",
            "lead_speed": "lead_speed",
            "spacing": "spacing",
        },
        pair_log=True,
    ),
}


def get_schema(schema) -> SchemaMap:
    if isinstance(schema, SchemaMap):
        return schema
    try:
        return SCHEMAS[str(schema).lower()]
    except KeyError:
        raise SchemaError(f"unknown schema {schema!r}; known: {', '.join(sorted(SCHEMAS))}") from None


def _read_bytes(source) -> bytes:
    if isinstance(source, bytes):
        return source
    if isinstance(source, (str, os.PathLike)):
        with open(source, "rb") as fh:
            return fh.read()
    return source.read()


def _numeric(df: pd.DataFrame, source_col: str) -> np.ndarray:
    raw = df[source_col].str.strip()
    try:
        # numpy's str->float conversion is correctly rounded, so exports round-trip
        vals = raw.to_numpy(dtype=str).astype(float)
    except ValueError:
        vals = None
    if vals is None or np.isnan(vals).any():
        coerced = pd.to_numeric(raw, errors="coerce")
        bad = np.flatnonzero(coerced.isna().to_numpy())
        row = int(bad[0]) + 1
        raise ParseError(
            f"non-numeric value {raw.iloc[bad[0]]!r} in column {source_col!r} at data row {row}", row=row
        )
    return vals


def _derive_accel(ids, frames, v, dt):
    out = np.zeros_like(v)
    order = np.lexsort((frames, ids))
    sids = ids[order]
    starts = np.flatnonzero(np.r_[True, sids[1:] != sids[:-1]])
    ends = np.r_[starts[1:], len(sids)]
    for s, e in zip(starts, ends):
        idx = order[s:e]
        if e - s >= 2:
            out[idx] = np.gradient(v[idx], frames[idx] * dt)
    return out


def parse_trajectory_csv(source, schema="neutral", dt=None, target_dt=None) -> TrajectoryTable:
    """Read a trajectory CSV (bytes, path or file object) into a neutral table.

    ``dt`` overrides the schema's recording timestep (required for the
    neutral schema, whose fixed header carries no timing).  With ``target_dt``
    the table is additionally decimated via :func:`resample`.
    """
    smap = get_schema(schema)
    data = _read_bytes(source)
    try:
        df = pd.read_csv(io.BytesIO(data), dtype=str, keep_default_na=False, skipinitialspace=True)
    except pd.errors.EmptyDataError:
        raise ParseError("empty file: header row missing") from None
    df.columns = [c.strip() for c in df.columns]
    for neutral, src in smap.columns.items():
        if src not in df.columns:
            raise SchemaError(f"missing column {src!r} (schema {smap.name!r}, field {neutral!r})")

    if smap.pair_log:
        table = _expand_pair_log(df, smap, dt)
    else:
        rec_dt = dt if dt is not None else smap.dt
        if rec_dt is None:
            raise ValidationError(f"schema {smap.name!r} needs an explicit recording timestep (dt)")
        table = _build_table(df, smap, float(rec_dt))
    if target_dt is not None:
        table = resample(table, target_dt)
    return table


def _build_table(df, smap, dt):
    vals = {}
    for neutral, src in smap.columns.items():
        vals[neutral] = _numeric(df, src) * smap.scale.get(neutral, 1.0)
    n = len(df)
    if smap.polar_velocity:
        heading = np.deg2rad(vals.pop("heading"))
        speed = vals.pop("speed")
        vals["vx"] = speed * np.cos(heading)
        vals["vy"] = speed * np.sin(heading)
    defaults = {**_BASE_DEFAULTS, **smap.defaults}
    for c in ("y", "vy", "lane", "length", "width"):
        if c not in vals:
            vals[c] = np.full(n, float(defaults[c]))
    ids = vals["id"].astype(np.int64)
    frames = vals["frame"].astype(np.int64)
    for a, v in (("ax", "vx"), ("ay", "vy")):
        if a not in vals:
            vals[a] = _derive_accel(ids, frames, vals[v], dt)
    if smap.corner_origin:
        vals["x"] = vals["x"] + vals["length"] / 2.0
        vals["y"] = vals["y"] + vals["width"] / 2.0
    if smap.flip_negative_x and n:
        vid, inv = np.unique(ids, return_inverse=True)
        mean_vx = np.bincount(inv, weights=vals["vx"]) / np.bincount(inv)
        flip = mean_vx[inv] < 0
        for c in ("x", "y", "vx", "vy", "ax", "ay", "lane"):
            vals[c] = np.where(flip, -vals[c], vals[c])
    vals["frame"] = frames
    vals["id"] = ids
    vals["lane"] = np.rint(vals["lane"]).astype(np.int64)
    return TrajectoryTable(dt=dt, **{c: vals[c] for c in COLUMNS})


def _expand_pair_log(df, smap, dt):
    t = _numeric(df, smap.columns["time"])
    v_ego = _numeric(df, smap.columns["ego_speed"]) * smap.scale.get("ego_speed", 1.0)
    v_lead = _numeric(df, smap.columns["lead_speed"]) * smap.scale.get("lead_speed", 1.0)
    gap = _numeric(df, smap.columns["spacing"]) * smap.scale.get("spacing", 1.0)
    if len(t) < 2:
        raise ValidationError("pair log needs at least two samples")
    rec_dt = float(dt) if dt is not None else float(np.median(np.diff(t)))
    if not rec_dt > 0:
        raise ValidationError("pair log timestamps must be increasing")
    frames = np.rint((t - t[0]) / rec_dt).astype(np.int64)
    length = float(smap.defaults.get("length", _BASE_DEFAULTS["length"]))
    width = float(smap.defaults.get("width", _BASE_DEFAULTS["width"]))
    # ego position by trapezoidal integration of its speed; leader placed by the bumper gap
    x_ego = np.concatenate([[0.0], np.cumsum(0.5 * (v_ego[1:] + v_ego[:-1]) * np.diff(t))])
    x_lead = x_ego + gap + length
    ones = np.ones(len(t))
    a_ego = np.gradient(v_ego, t)
    a_lead = np.gradient(v_lead, t)
    cols = {
        "frame": np.r_[frames, frames],
        "id": np.r_[ones, 2 * ones].astype(np.int64),
        "x": np.r_[x_ego, x_lead],
        "y": np.zeros(2 * len(t)),
        "vx": np.r_[v_ego, v_lead],
        "vy": np.zeros(2 * len(t)),
        "ax": np.r_[a_ego, a_lead],
        "ay": np.zeros(2 * len(t)),
        "lane": np.zeros(2 * len(t), dtype=np.int64),
        "length": np.full(2 * len(t), length),
        "width": np.full(2 * len(t), width),
    }
    return TrajectoryTable(dt=rec_dt, **cols)


def resample(table: TrajectoryTable, target_dt: float) -> TrajectoryTable:
    """Decimate to ``target_dt`` on a common frame grid; frames are renumbered 0, 1, 2, ..."""
    ratio = float(target_dt) / table.dt
    step = int(round(ratio))
    if step < 1 or abs(ratio - step) > 1e-9 * max(ratio, 1.0):
        raise ResampleError(
            f"target timestep {target_dt} is not an integer multiple of the recording timestep {table.dt}"
        )
    if step == 1:
        return table
    f0 = int(table.frame.min()) if len(table) else 0
    keep = (table.frame - f0) % step == 0
    cols = {c: v[keep] for c, v in table.columns().items()}
    cols["frame"] = (cols["frame"] - f0) // step
    return TrajectoryTable(dt=table.dt * step, **cols)


# ---------------------------------------------------------------------------
# neighbors

def wrap_dx(dx, ring_length):
    """Signed gap on a ring of the given length, folded into about [-R/2, R/2)."""
    if ring_length is None:
        return dx
    return dx - ring_length * np.floor(dx / ring_length + 0.5)


def assign_neighbors(x, y, lane, length, ids=None, ring_length=None, active=None):
    """Slot table ``(N, 8)`` of neighbor indices (-1 = empty slot).

    Same-lane candidates are ahead when their signed longitudinal gap is
    positive (ties broken by id).  In the adjacent lanes a vehicle is
    alongside when its center lies within half the ego length of the ego
    center.  Among several candidates for one slot the smallest |gap| wins,
    then the lower id.  ``active`` restricts the candidate set.
    """
    x = np.asarray(x, dtype=float)
    n = len(x)
    if n < 2:
        return np.full((n, N_SLOTS), -1, dtype=np.int64)
    ids = np.arange(n) if ids is None else np.asarray(ids)
    # work in id order so that argmin's first hit is the lowest id
    order = np.argsort(ids, kind="stable")
    xo = x[order]
    lo = np.asarray(lane)[order]
    dx = wrap_dx(xo[None, :] - xo[:, None], ring_length)
    cand = ~np.eye(n, dtype=bool)
    if active is not None:
        cand &= np.asarray(active, dtype=bool)[order][None, :]
    io = ids[order]
    local = slot_assign(dx, lo[None, :] - lo[:, None], 0.5 * np.asarray(length, dtype=float)[order][:, None],
                        io[None, :] > io[:, None], cand)
    slots = np.full((n, N_SLOTS), -1, dtype=np.int64)
    slots[order] = np.where(local >= 0, order[np.maximum(local, 0)], -1)
    return slots


def slot_assign(dx, dlane, half, id_gt, cand):
    """Vectorized core of :func:`assign_neighbors` on ``(..., n, n)`` arrays.

    Columns must already be in ascending id order.  ``dx`` and ``dlane`` are
    column minus row; ``half`` is half the row vehicle's length.  Returns
    ``(..., n, 8)`` column indices with -1 for empty slots.
    """
    adx = np.abs(dx)
    same = cand & (dlane == 0)
    ahead_same = same & ((dx > 0) | ((dx == 0) & id_gt))
    left = cand & (dlane == -1)
    right = cand & (dlane == 1)
    along = adx <= half
    fwd = dx > half
    back = dx < -half
    masks = (
        ahead_same,
        same & ~ahead_same,
        left & fwd,
        left & along,
        left & back,
        right & fwd,
        right & along,
        right & back,
    )
    out = np.full(dx.shape[:-1] + (N_SLOTS,), -1, dtype=np.int64)
    for s, m in enumerate(masks):
        if not m.any():
            continue
        best = np.argmin(np.where(m, adx, np.inf), axis=-1)
        hit = np.take_along_axis(m, best[..., None], axis=-1)[..., 0]
        out[..., s] = np.where(hit, best, -1)
    return out


def neighbor_features(slots, x, y, vx, vy, ax, ay, length, ring_length=None):
    """Per-slot features ``(N, 8, 5)``, presence ``(N, 8)`` and lengths ``(N, 8)``."""
    n = slots.shape[0]
    present = slots >= 0
    j = np.where(present, slots, 0)
    feats = np.zeros((n, N_SLOTS, 5))
    if n == 0:
        return feats, present, np.zeros((n, N_SLOTS))
    dx = wrap_dx(x[j] - x[:, None], ring_length)
    dy = y[j] - y[:, None]
    feats[..., 0] = vx[j]
    feats[..., 1] = vy[j]
    feats[..., 2] = ax[j]
    feats[..., 3] = ay[j]
    feats[..., 4] = np.hypot(dx, dy)
    feats[~present] = 0.0
    lengths = np.where(present, length[j], 0.0)
    return feats, present, lengths


# ---------------------------------------------------------------------------
# windows

@dataclass(frozen=True, eq=False)
class StateWindow:
    """One predictor input: ``T`` history steps ending just before ``frame``."""

    ego: np.ndarray              # (T, 5)  vx, vy, ax, ay, lane
    neighbors: np.ndarray        # (T, 8, 5) vx, vy, ax, ay, d
    present: np.ndarray          # (T, 8) bool
    neighbor_length: np.ndarray  # (T, 8)
    lat_offset: np.ndarray       # (T,)  y minus lane center
    ego_length: float
    direction: str
    target: float = math.nan
    vehicle_id: int = -1
    frame: int = -1

    @property
    def T(self):
        return self.ego.shape[0]

    def as_batch(self) -> "WindowBatch":
        T = self.T
        return WindowBatch(
            ego=self.ego,
            neighbors=self.neighbors,
            present=self.present,
            neighbor_length=self.neighbor_length,
            lat_offset=self.lat_offset,
            ego_length=np.full(T, self.ego_length),
            end=np.array([T]),
            T=T,
            direction=self.direction,
            target=np.array([self.target], dtype=float),
            vehicle_id=np.array([self.vehicle_id]),
            frame=np.array([self.frame]),
        )


@dataclass(frozen=True, eq=False)
class WindowBatch:
    """Many windows sharing row storage: window ``i`` is rows ``end[i]-T .. end[i]-1``."""

    ego: np.ndarray
    neighbors: np.ndarray
    present: np.ndarray
    neighbor_length: np.ndarray
    lat_offset: np.ndarray
    ego_length: np.ndarray
    end: np.ndarray
    T: int
    direction: str
    target: np.ndarray
    vehicle_id: np.ndarray
    frame: np.ndarray

    def __post_init__(self):
        if self.direction not in DIRECTIONS:
            raise ValidationError(f"direction must be one of {DIRECTIONS}, got {self.direction!r}")

    def __len__(self):
        return len(self.end)

    def __getitem__(self, i) -> StateWindow:
        e = int(self.end[i])
        rows = slice(e - self.T, e)
        return StateWindow(
            ego=self.ego[rows],
            neighbors=self.neighbors[rows],
            present=self.present[rows],
            neighbor_length=self.neighbor_length[rows],
            lat_offset=self.lat_offset[rows],
            ego_length=float(self.ego_length[e - 1]),
            direction=self.direction,
            target=float(self.target[i]),
            vehicle_id=int(self.vehicle_id[i]),
            frame=int(self.frame[i]),
        )

    def __iter__(self):
        for i in range(len(self)):
            yield self[i]

    def history_rows(self) -> np.ndarray:
        """``(W, T)`` row indices of every window."""
        return self.end[:, None] - self.T + np.arange(self.T)[None, :]

    def last_rows(self) -> np.ndarray:
        return self.end - 1

    def subset(self, idx) -> "WindowBatch":
        idx = np.asarray(idx)
        return replace(
            self,
            end=self.end[idx],
            target=self.target[idx],
            vehicle_id=self.vehicle_id[idx],
            frame=self.frame[idx],
        )

    def with_direction(self, direction, target=None) -> "WindowBatch":
        return replace(self, direction=direction, target=self.target if target is None else target)


def frame_features(table: TrajectoryTable, ring_length=None):
    """Row-aligned ego/neighbor features for a whole table."""
    n = len(table)
    neighbors = np.zeros((n, N_SLOTS, 5))
    present = np.zeros((n, N_SLOTS), dtype=bool)
    nlen = np.zeros((n, N_SLOTS))
    order = np.argsort(table.frame, kind="stable")
    fr = table.frame[order]
    starts = np.flatnonzero(np.r_[True, fr[1:] != fr[:-1]])
    ends = np.r_[starts[1:], n]
    for s, e in zip(starts, ends):
        rows = order[s:e]
        slots = assign_neighbors(
            table.x[rows], table.y[rows], table.lane[rows], table.length[rows], ids=table.id[rows], ring_length=ring_length
        )
        f, p, l = neighbor_features(
            slots,
            table.x[rows], table.y[rows], table.vx[rows], table.vy[rows],
            table.ax[rows], table.ay[rows], table.length[rows], ring_length,
        )
        neighbors[rows] = f
        present[rows] = p
        nlen[rows] = l
    centers = table.lane_centers()
    lane_center = np.array([centers[int(l)] for l in table.lane]) if n else np.zeros(0)
    ego = np.column_stack([table.vx, table.vy, table.ax, table.ay, table.lane.astype(float)]) if n else np.zeros((0, 5))
    return ego, neighbors, present, nlen, table.y - lane_center


def build_state_windows(table: TrajectoryTable, T: int = DEFAULT_T, direction: str = "longitudinal",
                        ring_length=None) -> WindowBatch:
    """One window per (vehicle, frame) with ``T`` consecutive history frames.

    The target is the observed acceleration at the window's frame (``ax`` for
    longitudinal, ``ay`` for lateral).  Vehicles with fewer than ``T + 1``
    consecutive frames produce no windows.
    """
    if direction not in DIRECTIONS:
        raise ValidationError(f"direction must be one of {DIRECTIONS}, got {direction!r}")
    T = int(T)
    if T < 1:
        raise ValidationError("window length T must be >= 1")
    ego, neighbors, present, nlen, lat = frame_features(table, ring_length)
    r = np.arange(T, len(table))
    ok = (table.id[r] == table.id[r - T]) & (table.frame[r] - table.frame[r - T] == T)
    end = r[ok]
    target = (table.ax if direction == "longitudinal" else table.ay)[end]
    return WindowBatch(
        ego=ego,
        neighbors=neighbors,
        present=present,
        neighbor_length=nlen,
        lat_offset=lat,
        ego_length=table.length.copy(),
        end=end,
        T=T,
        direction=direction,
        target=np.asarray(target, dtype=float),
        vehicle_id=table.id[end],
        frame=table.frame[end],
    )
