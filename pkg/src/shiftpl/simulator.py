"""Agent-based rollouts on a periodic multi-lane road.

Every agent draws a normalized residual from a residual law each step and
turns it into an acceleration with its predictor's mean and std.  Position and
velocity follow the constant-jerk update between the previous and the new
acceleration::

    v' = v + a dt + (a' - a) dt / 2
    x' = x + v dt + a dt^2 / 2 + (a' - a) dt^2 / 6

Many independent rollouts are stepped together as a batch of worlds of shape
``(W, n)``.  Each world keeps its own RNG and every operation is elementwise
or per world, so a rollout's result does not depend on what it is batched
with.
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from shiftpl._kernels import world_geometry
from shiftpl.distributions import ResidualLaw, law_from_dict
from shiftpl.errors import InsufficientDataError, ValidationError
from shiftpl.predictor import Predictor
from shiftpl.trajectory import (
    DEFAULT_DT,
    DEFAULT_T,
    N_SLOTS,
    TrajectoryTable,
    WindowBatch,
    frame_features,
    wrap_dx,
)
from shiftpl.validation import crash_rate_z_test

METERS_PER_MILE = 1609.344
REAR_END = "rear-end"
LATERAL = "lateral"
SIM_TRUNCATION = 50.0


@dataclass(frozen=True)
class SimConfig:
    dt: float = DEFAULT_DT
    T: int = DEFAULT_T
    steps: int = 300
    lon_clamp: tuple = (-8.0, 5.0)
    lat_clamp: tuple = (-4.0, 4.0)
    lateral: bool = False
    ring_length: float | None = None
    # residual bound applied to laws that carry none of their own (None disables)
    truncation: float | None = SIM_TRUNCATION

    def __post_init__(self):
        object.__setattr__(self, "lon_clamp", tuple(float(v) for v in self.lon_clamp))
        object.__setattr__(self, "lat_clamp", tuple(float(v) for v in self.lat_clamp))
        if not (self.dt > 0 and math.isfinite(self.dt)):
            raise ValidationError(f"dt must be > 0, got {self.dt}")
        if int(self.T) < 1 or int(self.steps) < 0:
            raise ValidationError("T must be >= 1 and steps >= 0")
        for name in ("lon_clamp", "lat_clamp"):
            lo, hi = getattr(self, name)
            if not lo < hi:
                raise ValidationError(f"{name} must be (low, high) with low < high")
        if self.ring_length is not None and not self.ring_length > 0:
            raise ValidationError("ring_length must be > 0")
        if self.truncation is not None and not self.truncation > 0:
            raise ValidationError("truncation bound must be > 0")

    def bounded(self, law: ResidualLaw) -> ResidualLaw:
        """``law`` with the simulator's default bound unless it has its own."""
        if law.truncation is None and self.truncation is not None:
            return law.with_truncation(self.truncation)
        return law

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lon_clamp"] = list(self.lon_clamp)
        d["lat_clamp"] = list(self.lat_clamp)
        return d


def advance(x, v, a_prev, a_next, dt):
    """Constant-jerk position/velocity update over one step."""
    da = a_next - a_prev
    return x + v * dt + 0.5 * a_prev * dt * dt + da * dt * dt / 6.0, v + a_prev * dt + 0.5 * da * dt


# ---------------------------------------------------------------------------
# state

@dataclass(frozen=True)
class VehicleAgent:
    id: int
    x: float
    y: float
    vx: float
    vy: float
    ax: float
    ay: float
    lane: int
    length: float
    width: float
    odometer: float
    alive: bool


@dataclass(frozen=True)
class CrashEvent:
    rollout: int
    step: int
    ids: tuple
    type: str
    x: float
    y: float


@dataclass
class WorldState:
    """A batch of ``W`` worlds with up to ``n`` agents each (padding has ``exists == False``)."""

    step: int
    dt: float
    T: int
    frame0: np.ndarray            # (W,) frame index of the state at step 0
    ring: np.ndarray              # (W,) ring length
    lane_ids: np.ndarray          # sorted lane ids
    lane_y: np.ndarray            # matching lane center y
    ids: np.ndarray               # (W, n) ascending per world, padding last
    exists: np.ndarray
    alive: np.ndarray
    x: np.ndarray
    y: np.ndarray
    vx: np.ndarray
    vy: np.ndarray
    ax: np.ndarray
    ay: np.ndarray
    lane: np.ndarray
    length: np.ndarray
    width: np.ndarray
    odometer: np.ndarray
    contact: np.ndarray           # (W, n, n) pairs currently overlapping
    tainted: np.ndarray           # (W,)
    flagged: np.ndarray           # (W, n) frozen for a non-finite prediction
    rngs: list
    seeds: list
    hist: dict                    # name -> (W, n, HIST_SPAN * T, ...) buffers
    hp: int                       # next write position in the history buffers
    events: list = field(default_factory=list)
    draws: dict = field(default_factory=dict)

    @property
    def time(self) -> float:
        return self.step * self.dt

    @property
    def shape(self):
        return self.x.shape

    def agents(self, w: int = 0) -> list[VehicleAgent]:
        out = []
        for i in np.flatnonzero(self.exists[w]):
            out.append(VehicleAgent(
                int(self.ids[w, i]), float(self.x[w, i]), float(self.y[w, i]), float(self.vx[w, i]),
                float(self.vy[w, i]), float(self.ax[w, i]), float(self.ay[w, i]), int(self.lane[w, i]),
                float(self.length[w, i]), float(self.width[w, i]), float(self.odometer[w, i]), bool(self.alive[w, i]),
            ))
        return out

    def neighbor_table(self):
        """Current ``(W, n, 8)`` slot table (local indices, -1 empty)."""
        return _geometry(self)[0]

    def vmt_meters(self) -> np.ndarray:
        return np.array([float(np.sum(self.odometer[w][self.exists[w]])) for w in range(self.shape[0])])


HIST_FIELDS = ("ego", "neighbors", "present", "nlen", "lat", "elen")
HIST_SPAN = 4          # history buffers hold HIST_SPAN * T rows and rebase when full
DRAW_BLOCK = 64        # residuals are drawn per world in blocks of this many steps


def _lane_center(world_or_ids, lane):
    lane_ids, lane_y = world_or_ids
    i = np.clip(np.searchsorted(lane_ids, lane), 0, len(lane_ids) - 1)
    return np.where(lane_ids[i] == lane, lane_y[i], np.nan)


def _nearest_lane(lane_ids, lane_y, y):
    d = np.abs(y[..., None] - lane_y)
    return lane_ids[np.argmin(d, axis=-1)]


def _geometry(world: WorldState):
    return world_geometry(world.x, world.y, world.vx, world.vy, world.ax, world.ay, world.lane, world.length,
                          world.width, world.ids, world.exists, world.ring)


def _history_rows(world: WorldState, geom) -> dict:
    _, feats, present, nlen, _ = geom
    ego = np.stack([world.vx, world.vy, world.ax, world.ay, world.lane.astype(float)], axis=-1)
    lat = world.y - _lane_center((world.lane_ids, world.lane_y), world.lane)
    return {
        "ego": ego,
        "neighbors": feats,
        "present": present,
        "nlen": nlen,
        "lat": np.nan_to_num(lat),
        "elen": world.length,
    }


def _push_history(world: WorldState, rows: dict):
    T = world.T
    L = HIST_SPAN * T
    if world.hp == L:
        for name in HIST_FIELDS:
            buf = world.hist[name]
            buf[:, :, : T - 1] = buf[:, :, L - T + 1:]
        world.hp = T - 1
    for name in HIST_FIELDS:
        world.hist[name][:, :, world.hp] = rows[name]
    world.hp += 1


def window_batch(world: WorldState, direction="longitudinal") -> tuple[WindowBatch, np.ndarray]:
    """Predictor input for every existing agent (zero-copy views of the history buffers)."""
    W, n = world.shape
    L = HIST_SPAN * world.T
    h = world.hist
    agents = np.flatnonzero(world.exists.ravel())
    frame = np.repeat(world.frame0 + world.step + 1, n)[agents]
    batch = WindowBatch(
        ego=h["ego"].reshape(W * n * L, 5),
        neighbors=h["neighbors"].reshape(W * n * L, N_SLOTS, 5),
        present=h["present"].reshape(W * n * L, N_SLOTS),
        neighbor_length=h["nlen"].reshape(W * n * L, N_SLOTS),
        lat_offset=h["lat"].reshape(W * n * L),
        ego_length=h["elen"].reshape(W * n * L),
        end=agents * L + world.hp,
        T=world.T,
        direction=direction,
        target=np.full(len(agents), np.nan),
        vehicle_id=world.ids.ravel()[agents],
        frame=frame,
    )
    return batch, agents


# ---------------------------------------------------------------------------
# initialization

def _allocate(W, n, T):
    L = HIST_SPAN * T
    return {
        "ego": np.zeros((W, n, L, 5)),
        "neighbors": np.zeros((W, n, L, N_SLOTS, 5)),
        "present": np.zeros((W, n, L, N_SLOTS), dtype=bool),
        "nlen": np.zeros((W, n, L, N_SLOTS)),
        "lat": np.zeros((W, n, L)),
        "elen": np.zeros((W, n, L)),
    }


def _auto_ring(x, lane, length):
    span = float(x.max() - x.min()) if len(x) else 0.0
    _, counts = np.unique(lane, return_counts=True)
    m = int(counts.max()) if len(counts) else 0
    if m >= 2 and span > 0:
        return span * m / (m - 1)
    return span + 100.0 + float(np.max(length, initial=0.0))


def _full_history_rows(table: TrajectoryTable, T: int) -> np.ndarray:
    """Rows ``r`` whose vehicle also has the ``T - 1`` previous consecutive frames."""
    r = np.arange(T - 1, len(table))
    ok = (table.id[r] == table.id[r - (T - 1)]) & (table.frame[r] - table.frame[r - (T - 1)] == T - 1)
    return r[ok]


@dataclass(frozen=True)
class _Seed:
    """One rollout's starting point: agent states plus T history rows."""

    seed: int
    frame: int
    ring: float
    ids: np.ndarray
    state: dict
    hist: dict


def _seed_from_table(table: TrajectoryTable, seed: int, config: SimConfig, rng, features=None) -> _Seed:
    """Pick the seed frame with ``rng`` and clone the vehicles that have ``T`` frames of history there.

    ``features`` may hold precomputed ``frame_features(table, ring)`` for a
    fixed ring length.
    """
    T = int(config.T)
    if len(table) == 0:
        raise InsufficientDataError("cannot initialize a rollout from an empty table")
    rows = _full_history_rows(table, T)
    if rows.size == 0:
        raise InsufficientDataError(f"no vehicle has {T} consecutive frames to seed a rollout")
    frames = np.unique(table.frame[rows])
    f = int(frames[rng.integers(len(frames))])
    last = rows[table.frame[rows] == f]          # ascending id, table sorted by (id, frame)
    ids = table.id[last]
    ring = config.ring_length
    if ring is None:
        ring = _auto_ring(table.x[last], table.lane[last], table.length[last])
    if features is None:
        keep = (table.frame > f - T) & (table.frame <= f)
        sub = table.take(keep)
        ego, nb, present, nlen, _ = frame_features(sub, ring)
        # sub keeps the (id, frame) order, so map table rows to sub rows
        where = np.cumsum(keep) - 1
    else:
        ego, nb, present, nlen = features
        sub = table
        where = np.arange(len(table))
    idx = where[last[:, None] - (T - 1) + np.arange(T)[None, :]]
    centers = table.lane_centers()
    lane_y = np.array([centers[int(l)] for l in sub.lane])
    hist = {"ego": ego[idx], "neighbors": nb[idx], "present": present[idx], "nlen": nlen[idx],
            "lat": (sub.y - lane_y)[idx], "elen": sub.length[idx]}
    state = {c: getattr(table, c)[last].astype(float) for c in ("x", "y", "vx", "vy", "ax", "ay", "length", "width")}
    state["lane"] = table.lane[last].astype(np.int64)
    return _Seed(int(seed), f, float(ring), ids.astype(np.int64), state, hist)


def _assemble(seeds: list[_Seed], rngs, lane_ids, lane_y, config: SimConfig) -> WorldState:
    W = len(seeds)
    n = max(len(s.ids) for s in seeds)
    T = int(config.T)
    pad_id = np.iinfo(np.int64).max
    arr = {c: np.zeros((W, n)) for c in ("x", "y", "vx", "vy", "ax", "ay", "length", "width")}
    lane = np.zeros((W, n), dtype=np.int64)
    ids = np.full((W, n), pad_id, dtype=np.int64)
    exists = np.zeros((W, n), dtype=bool)
    hist = _allocate(W, n, T)
    for w, s in enumerate(seeds):
        m = len(s.ids)
        for c in arr:
            arr[c][w, :m] = s.state[c]
        arr["length"][w, m:] = 1.0
        arr["width"][w, m:] = 1.0
        lane[w, :m] = s.state["lane"]
        ids[w, :m] = s.ids
        exists[w, :m] = True
        for name in HIST_FIELDS:
            hist[name][w, :m, :T] = s.hist[name]
    # padding agents sit far outside every lane and never interact
    arr["y"][~exists] = 1e9
    lane[~exists] = np.iinfo(np.int32).min
    return WorldState(
        step=0, dt=float(config.dt), T=T,
        frame0=np.array([s.frame for s in seeds], dtype=np.int64),
        ring=np.array([s.ring for s in seeds]),
        lane_ids=np.asarray(lane_ids), lane_y=np.asarray(lane_y, dtype=float),
        ids=ids, exists=exists, alive=exists.copy(),
        x=arr["x"], y=arr["y"], vx=arr["vx"], vy=arr["vy"], ax=arr["ax"], ay=arr["ay"],
        lane=lane, length=arr["length"], width=arr["width"],
        odometer=np.zeros((W, n)), contact=np.zeros((W, n, n), dtype=bool),
        tainted=np.zeros(W, dtype=bool), flagged=np.zeros((W, n), dtype=bool),
        rngs=list(rngs), seeds=[s.seed for s in seeds], hist=hist, hp=T,
    )


def _lane_geometry(table: TrajectoryTable):
    centers = table.lane_centers()
    lane_ids = np.array(sorted(centers), dtype=np.int64)
    return lane_ids, np.array([centers[int(l)] for l in lane_ids])


def init_rollouts(table: TrajectoryTable, seeds, config: SimConfig = SimConfig()) -> WorldState:
    """One world per seed.  Each seed's RNG picks the seed frame and then drives the residual draws."""
    seeds = [int(s) for s in seeds]
    if not seeds:
        raise ValidationError("need at least one seed")
    rngs = [np.random.default_rng(s) for s in seeds]
    features = None
    if config.ring_length is not None and len(seeds) > 1:
        features = frame_features(table, config.ring_length)[:4]
    starts = [_seed_from_table(table, s, config, r, features) for s, r in zip(seeds, rngs)]
    lane_ids, lane_y = _lane_geometry(table)
    return _assemble(starts, rngs, lane_ids, lane_y, config)


def init_rollout(table: TrajectoryTable, seed: int, config: SimConfig = SimConfig()) -> WorldState:
    return init_rollouts(table, [seed], config)


def world_from_state(x, y, vx, lane, length, width, ids, ring_length, lane_ids, lane_y,
                     config: SimConfig = SimConfig(), seed: int = 0, frame: int = 0) -> WorldState:
    """Single world whose history is a steady cruise at the given speeds."""
    x = np.asarray(x, dtype=float)
    n = len(x)
    order = np.argsort(ids, kind="stable")
    T = int(config.T)
    ring = float(ring_length)
    cols = {"frame": [], "id": [], "x": [], "y": [], "vx": [], "vy": [], "ax": [], "ay": [],
            "lane": [], "length": [], "width": []}
    for i in order:
        for t in range(T):
            cols["frame"].append(frame - (T - 1) + t)
            cols["id"].append(int(ids[i]))
            cols["x"].append(x[i] - vx[i] * config.dt * (T - 1 - t))
            for c, v in (("y", y[i]), ("vx", vx[i]), ("vy", 0.0), ("ax", 0.0), ("ay", 0.0), ("lane", lane[i]),
                         ("length", length[i]), ("width", width[i])):
                cols[c].append(v)
    table = TrajectoryTable.from_columns(config.dt, **cols)
    cfg = replace(config, ring_length=ring)
    rng = np.random.default_rng(seed)
    start = _seed_from_table(table, seed, cfg, np.random.default_rng(0))
    world = _assemble([start], [rng], lane_ids, lane_y, cfg)
    # lateral offsets against the given lane geometry, not the seed table's lane means
    m = len(start.ids)
    center = _lane_center((world.lane_ids, world.lane_y), world.lane[0, :m])
    world.hist["lat"][0, :m, :T] = (world.y[0, :m] - center)[:, None]
    return world


# ---------------------------------------------------------------------------
# stepping

def _predict(predictor: Predictor, world: WorldState, direction: str):
    W, n = world.shape
    batch, agents = window_batch(world, direction)
    mean = np.zeros(W * n)
    std = np.zeros(W * n)
    if len(agents):
        m, s = predictor.predict_batch(batch)
        mean[agents] = m
        std[agents] = s
    return mean.reshape(W, n), std.reshape(W, n)


def _draw(law: ResidualLaw, world: WorldState, key: str) -> np.ndarray:
    """This step's residuals; each world samples ``DRAW_BLOCK`` steps' worth at a time."""
    W, n = world.shape
    out = np.zeros((W, n))
    cache = world.draws.setdefault(key, [None] * W)
    for w in range(W):
        ex = world.exists[w]
        m = int(ex.sum())
        if not m:
            continue
        block = cache[w]
        if block is None or block[1] >= len(block[0]):
            block = [law.sample(m * DRAW_BLOCK, world.rngs[w]).reshape(DRAW_BLOCK, m), 0]
            cache[w] = block
        out[w, ex] = block[0][block[1]]
        block[1] += 1
    return out


def step(world: WorldState, predictor: Predictor, law: ResidualLaw, dt: float | None = None,
         config: SimConfig = SimConfig(), lat_predictor: Predictor | None = None,
         lat_law: ResidualLaw | None = None) -> WorldState:
    """Advance every world by one step in place and return it."""
    dt = world.dt if dt is None else float(dt)
    if not dt > 0:
        raise ValidationError("dt must be > 0")
    alive = world.alive
    lon_mean, lon_std = _predict(predictor, world, "longitudinal")
    sig = _draw(config.bounded(law), world, "longitudinal")
    a_lon = lon_mean + lon_std * sig
    bad = ~np.isfinite(a_lon)
    lateral = config.lateral and lat_predictor is not None
    if lateral:
        lat_mean, lat_std = _predict(lat_predictor, world, "lateral")
        sig_y = _draw(config.bounded(lat_law or law), world, "lateral")
        a_lat = lat_mean + lat_std * sig_y
        bad |= ~np.isfinite(a_lat)
    newly_bad = bad & alive
    if newly_bad.any():
        world.flagged |= newly_bad
        world.tainted |= newly_bad.any(axis=1)
        alive = alive & ~newly_bad
        _freeze(world, newly_bad)
    a_lon = np.clip(np.where(alive, a_lon, 0.0), *config.lon_clamp)
    x_new, vx_new = advance(world.x, world.vx, world.ax, a_lon, dt)
    # no reversing: a vehicle that would roll backwards stops where it is
    stop = alive & (vx_new < 0)
    if stop.any():
        vx_new = np.where(stop, 0.0, vx_new)
        a_lon = np.where(stop, 0.0, a_lon)
        x_new = np.where(stop, np.maximum(x_new, world.x), x_new)
    vx_new = np.where(alive, vx_new, world.vx)
    x_new = np.where(alive, x_new, world.x)
    if lateral:
        a_lat = np.clip(np.where(alive, a_lat, 0.0), *config.lat_clamp)
        y_new, vy_new = advance(world.y, world.vy, world.ay, a_lat, dt)
        y_new = np.where(alive, y_new, world.y)
        vy_new = np.where(alive, vy_new, world.vy)
    else:
        a_lat = np.zeros_like(a_lon)
        y_new, vy_new = world.y, world.vy
    moved = np.hypot(x_new - world.x, y_new - world.y)
    world.odometer = world.odometer + np.where(alive, moved, 0.0)
    prev_lane = world.lane
    world.x, world.vx = x_new, vx_new
    world.ax = np.where(alive, a_lon, world.ax)
    if lateral:
        world.y, world.vy = y_new, vy_new
        world.ay = np.where(alive, a_lat, world.ay)
        world.lane = np.where(world.exists & alive, _nearest_lane(world.lane_ids, world.lane_y, world.y), world.lane)
    world.step += 1
    geom = _geometry(world)
    if _collide(world, geom[4], prev_lane):
        geom = _geometry(world)
    _push_history(world, _history_rows(world, geom))
    return world


def _freeze(world: WorldState, mask):
    world.alive = world.alive & ~mask
    for name in ("vx", "vy", "ax", "ay"):
        setattr(world, name, np.where(mask, 0.0, getattr(world, name)))


def _collide(world: WorldState, overlap, prev_lane) -> bool:
    """Record new contact episodes and freeze the pairs; True if anything changed."""
    new = overlap & ~world.contact
    world.contact = overlap
    if not new.any():
        return False
    crashed = np.zeros(world.shape, dtype=bool)
    for w, i, j in zip(*np.nonzero(new)):
        kind = REAR_END if prev_lane[w, i] == prev_lane[w, j] else LATERAL
        xm = world.x[w, i] + 0.5 * wrap_dx(world.x[w, j] - world.x[w, i], world.ring[w])
        world.events.append(CrashEvent(
            int(w), int(world.step), (int(world.ids[w, i]), int(world.ids[w, j])), kind,
            float(xm % world.ring[w]), float(0.5 * (world.y[w, i] + world.y[w, j])),
        ))
        crashed[w, i] = crashed[w, j] = True
    _freeze(world, crashed)
    return True


def detect_collisions(world: WorldState) -> list[CrashEvent]:
    """Run the overlap test on the current positions; returns the new events."""
    before = len(world.events)
    _collide(world, _geometry(world)[4], world.lane)
    return world.events[before:]


def run_world(world: WorldState, predictor: Predictor, law: ResidualLaw, config: SimConfig,
              lat_predictor=None, lat_law=None, steps: int | None = None) -> WorldState:
    for _ in range(int(config.steps if steps is None else steps)):
        step(world, predictor, law, config.dt, config, lat_predictor, lat_law)
    return world


# ---------------------------------------------------------------------------
# reports

@dataclass(frozen=True)
class RolloutResult:
    seed: int
    frame: int
    agents: int
    vmt_miles: float
    crashes: int
    tainted: bool
    events: tuple


@dataclass(frozen=True)
class CrashReport:
    vmt_miles: float
    crashes: int
    rate_per_million: float
    breakdown: dict
    config_digest: str
    seeds: tuple
    rollouts: tuple
    events: tuple
    tainted_rollouts: int = 0
    config: dict = field(default_factory=dict)
    ztest: dict | None = None

    def to_dict(self) -> dict:
        return {
            "vmt_miles": self.vmt_miles,
            "crashes": self.crashes,
            "crash_rate_per_million_miles": self.rate_per_million,
            "breakdown": self.breakdown,
            "config_digest": self.config_digest,
            "seeds": list(self.seeds),
            "tainted_rollouts": self.tainted_rollouts,
            "rollouts": [
                {"seed": r.seed, "frame": r.frame, "agents": r.agents, "vmt_miles": r.vmt_miles,
                 "crashes": r.crashes, "tainted": r.tainted}
                for r in self.rollouts
            ],
            "config": self.config,
            **({"ztest": self.ztest} if self.ztest is not None else {}),
        }

    def to_json(self, path=None):
        text = json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"
        if path is None:
            return text
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(text)
        return path

    def events_csv(self, path=None):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["rollout_seed", "step", "id_a", "id_b", "type", "x", "y"])
        for seed, e in self.events:
            w.writerow([seed, e.step, e.ids[0], e.ids[1], e.type, repr(e.x), repr(e.y)])
        text = buf.getvalue()
        if path is None:
            return text
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        return path

    def with_ztest(self, baseline: float) -> "CrashReport":
        t = crash_rate_z_test(baseline, self.crashes, self.vmt_miles)
        return replace(self, ztest=t.to_dict())


def canonical_digest(obj) -> str:
    text = json.dumps(obj, sort_keys=True, separators=(",", ":"), default=_jsonable)
    return hashlib.sha256(text.encode()).hexdigest()


def _jsonable(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"cannot serialize {type(o).__name__}")


def build_report(results: list[RolloutResult], config: dict) -> CrashReport:
    results = sorted(results, key=lambda r: r.seed)
    vmt = float(math.fsum(r.vmt_miles for r in results))
    events = tuple((r.seed, e) for r in results for e in r.events)
    crashes = len(events)
    rear = sum(1 for _, e in events if e.type == REAR_END)
    breakdown = {
        REAR_END: rear,
        LATERAL: crashes - rear,
        f"{REAR_END}_fraction": rear / crashes if crashes else None,
        f"{LATERAL}_fraction": (crashes - rear) / crashes if crashes else None,
    }
    rate = crashes / (vmt / 1e6) if vmt > 0 else math.nan
    return CrashReport(
        vmt_miles=vmt, crashes=crashes, rate_per_million=rate, breakdown=breakdown,
        config_digest=canonical_digest(config), seeds=tuple(r.seed for r in results),
        rollouts=tuple(results), events=events, tainted_rollouts=sum(r.tainted for r in results),
        config=config,
    )


@dataclass(frozen=True)
class RolloutSpec:
    """Everything a batch of rollouts needs; picklable for worker processes."""

    table: TrajectoryTable
    predictor: Predictor
    law: ResidualLaw
    config: SimConfig = SimConfig()
    lat_predictor: Predictor | None = None
    lat_law: ResidualLaw | None = None
    meta: dict = field(default_factory=dict)

    def describe(self, seeds) -> dict:
        return {
            "sim": self.config.to_dict(),
            "law": self.law.to_dict(),
            "lat_law": self.lat_law.to_dict() if self.lat_law is not None else None,
            "predictor": _predictor_tag(self.predictor),
            "lat_predictor": _predictor_tag(self.lat_predictor) if self.lat_predictor is not None else None,
            "dataset_digest": table_digest(self.table),
            "seeds": [int(s) for s in seeds],
            **self.meta,
        }


def _predictor_tag(p):
    return p.to_dict() if hasattr(p, "to_dict") else {"name": p.name, "direction": p.direction}


def table_digest(table: TrajectoryTable) -> str:
    return hashlib.sha256(table.to_csv() + repr(table.dt).encode()).hexdigest()


def _run_chunk(spec: RolloutSpec, seeds) -> list[RolloutResult]:
    world = init_rollouts(spec.table, seeds, spec.config)
    run_world(world, spec.predictor, spec.law, spec.config, spec.lat_predictor, spec.lat_law)
    vmt = world.vmt_meters() / METERS_PER_MILE
    out = []
    for w, seed in enumerate(world.seeds):
        ev = tuple(e for e in world.events if e.rollout == w)
        out.append(RolloutResult(int(seed), int(world.frame0[w]), int(world.exists[w].sum()), float(vmt[w]),
                                 len(ev), bool(world.tainted[w]), tuple(replace(e, rollout=0) for e in ev)))
    return out


def default_workers() -> int:
    env = os.environ.get("SHIFTPL_WORKERS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise ValidationError(f"SHIFTPL_WORKERS must be an integer, got {env!r}") from None
    return 1


def run_rollouts(spec: RolloutSpec, seeds, workers: int | None = None, batch_size: int = 32) -> CrashReport:
    """Independent rollouts, one per seed, merged in seed order."""
    seeds = [int(s) for s in seeds]
    if not seeds:
        raise ValidationError("need at least one seed")
    if len(set(seeds)) != len(seeds):
        raise ValidationError("rollout seeds must be distinct")
    if batch_size < 1:
        raise ValidationError("batch_size must be >= 1")
    workers = default_workers() if workers is None else int(workers)
    chunks = [seeds[i:i + batch_size] for i in range(0, len(seeds), batch_size)]
    results: list[RolloutResult] = []
    if workers <= 1 or len(chunks) == 1:
        for c in chunks:
            results.extend(_run_chunk(spec, c))
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            for part in pool.map(_run_chunk, [spec] * len(chunks), chunks):
                results.extend(part)
    return build_report(results, spec.describe(seeds))


# ---------------------------------------------------------------------------
# synthetic traffic

def ring_traffic_state(n_lanes=3, per_lane=20, gap=None, speed=30.0, tau=1.5, length=4.5, width=1.8,
                       lane_width=3.5, jitter=0.0, seed=0):
    """Evenly spaced vehicles on a ring at the reference rule's equilibrium gap ``tau * speed``."""
    gap = tau * speed if gap is None else gap
    spacing = gap + length
    ring = spacing * per_lane
    rng = np.random.default_rng(seed)
    xs, ys, lanes = [], [], []
    for l in range(n_lanes):
        offset = (l * spacing / n_lanes)
        for k in range(per_lane):
            xs.append(offset + k * spacing + jitter * rng.uniform(-1, 1))
            ys.append(l * lane_width)
            lanes.append(l)
    n = len(xs)
    return {
        "x": np.array(xs), "y": np.array(ys), "vx": np.full(n, float(speed)), "lane": np.array(lanes),
        "length": np.full(n, float(length)), "width": np.full(n, float(width)), "ids": np.arange(1, n + 1),
        "ring_length": ring, "lane_ids": np.arange(n_lanes), "lane_y": np.arange(n_lanes) * lane_width,
    }


def generate_recording(predictor: Predictor, law: ResidualLaw, frames: int, config: SimConfig = SimConfig(),
                       seed: int = 0, **ring_kw) -> tuple[TrajectoryTable, float]:
    """Run the simulator from an equilibrium ring and record every frame as a table.

    The recorded accelerations are the ones the integrator applied, so a replay
    of the recording reproduces it.
    """
    st = ring_traffic_state(**ring_kw)
    ring = st["ring_length"]
    cfg = replace(config, ring_length=ring)
    world = world_from_state(st["x"], st["y"], st["vx"], st["lane"], st["length"], st["width"], st["ids"],
                             ring, st["lane_ids"], st["lane_y"], cfg, seed=seed, frame=cfg.T - 1)
    T = cfg.T
    rows = {c: [] for c in ("frame", "id", "x", "y", "vx", "vy", "ax", "ay", "lane", "length", "width")}

    def record(frame_arrays, fr):
        m = world.exists[0]
        rows["frame"].append(np.full(m.sum(), fr))
        rows["id"].append(world.ids[0, m])
        for c in ("x", "y", "vx", "vy", "ax", "ay", "lane", "length", "width"):
            rows[c].append(frame_arrays[c][0, m])

    # steady-cruise history frames 0..T-1
    for t in range(T):
        back = (T - 1 - t) * cfg.dt
        record({"x": world.x - world.vx * back, "y": world.y, "vx": world.vx, "vy": world.vy, "ax": world.ax,
                "ay": world.ay, "lane": world.lane, "length": world.length, "width": world.width}, t)
    for f in range(frames):
        step(world, predictor, law, cfg.dt, cfg)
        record({c: getattr(world, c) for c in ("x", "y", "vx", "vy", "ax", "ay", "lane", "length", "width")},
               T + f)
    cols = {c: np.concatenate(v) for c, v in rows.items()}
    return TrajectoryTable.from_columns(cfg.dt, **cols), ring


def spec_from_config(cfg: dict, base_dir: str = ".") -> tuple[RolloutSpec, list[int]]:
    """Build a :class:`RolloutSpec` and the seed list from a JSON config mapping."""
    from shiftpl.predictor import load_predictor
    from shiftpl.trajectory import parse_trajectory_csv

    def need(key):
        if key not in cfg:
            raise ValidationError(f"simulation config is missing field '{key}'")
        return cfg[key]

    def resolve(p):
        return p if os.path.isabs(p) else os.path.join(base_dir, p)

    dt = float(cfg.get("dt", DEFAULT_DT))
    table = parse_trajectory_csv(resolve(need("dataset")), cfg.get("schema", "neutral"),
                                 dt=cfg.get("dataset_dt", dt), target_dt=dt)
    predictor = load_predictor(resolve(need("predictor")))
    law_cfg = need("law")
    if not isinstance(law_cfg, dict):
        raise ValidationError("simulation config field 'law' must be an object {type, a, k, truncation}")
    law = law_from_dict(law_cfg)
    clamps = cfg.get("clamps", {})
    sim = SimConfig(
        dt=dt, T=int(cfg.get("T", predictor.T)), steps=int(need("steps")),
        lon_clamp=tuple(clamps.get("longitudinal", (-8.0, 5.0))), lat_clamp=tuple(clamps.get("lateral", (-4.0, 4.0))),
        lateral=bool(cfg.get("lateral", False)), ring_length=cfg.get("ring_length"),
        truncation=cfg.get("truncation", SIM_TRUNCATION),
    )
    lat_pred = load_predictor(resolve(cfg["lat_predictor"])) if cfg.get("lat_predictor") else None
    if sim.lateral and lat_pred is None:
        raise ValidationError("lateral simulation needs a 'lat_predictor' file")
    n = int(need("n_rollouts"))
    if n < 1:
        raise ValidationError("n_rollouts must be >= 1")
    if "seeds" in cfg:
        seeds = [int(s) for s in cfg["seeds"]]
        if len(seeds) != n:
            raise ValidationError(f"config lists {len(seeds)} seeds for {n} rollouts")
    else:
        base = int(cfg.get("seed", 0))
        seeds = [base + i for i in range(n)]
    spec = RolloutSpec(table, predictor, law, sim, lat_pred, None,
                       meta={"dataset": str(cfg["dataset"]), "schema": cfg.get("schema", "neutral")})
    return spec, seeds
