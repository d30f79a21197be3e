"""Mean/std acceleration predictors and residual normalization.

A predictor maps a history window to ``(mean, std)`` of the next-step
acceleration.  The normalized residual is ``(y - mean) / max(std, eps)`` and a
sampled residual is turned back into an acceleration with
``mean + std * sigma``.

:class:`ReferencePredictor` is a deterministic linear rule that makes the
whole pipeline runnable without a trained network::

    longitudinal:  mean = alpha * (v_lead - v) + beta * (gap - tau * v)
    lateral:       mean = -k_offset * lateral_offset - k_damp * vy

``gap`` is the bumper-to-bumper distance to the preceding vehicle (center
distance minus half of both lengths).  Without a preceding vehicle the
longitudinal mean is 0.  The std is looked up from 10 ego-speed bins.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from shiftpl.errors import FitError, ValidationError
from shiftpl.trajectory import DEFAULT_DT, DEFAULT_T, DIRECTIONS, StateWindow, TrajectoryTable, WindowBatch

DEFAULT_EPS = 1e-6
PREDICTOR_FORMAT = "shiftpl-predictor"
PREDICTOR_VERSION = 1

LONGITUDINAL_DEFAULTS = {"alpha": 0.5, "beta": 0.1, "tau": 1.5}
LATERAL_DEFAULTS = {"k_offset": 0.1, "k_damp": 0.5}


@dataclass(frozen=True)
class Prediction:
    mean: float
    std: float

    def __post_init__(self):
        if self.std < 0:
            raise ValidationError(f"predicted std must be >= 0, got {self.std}")


def normalize_residual(y, p: Prediction, eps: float = DEFAULT_EPS):
    if not eps > 0:
        raise ValidationError("eps must be > 0")
    return (y - p.mean) / max(p.std, eps)


def reconstruct(p: Prediction, sigma):
    return p.mean + p.std * sigma


def normalize_residuals(y, mean, std, eps: float = DEFAULT_EPS):
    """Vectorized :func:`normalize_residual`."""
    if not eps > 0:
        raise ValidationError("eps must be > 0")
    return (np.asarray(y, dtype=float) - mean) / np.maximum(std, eps)


# ---------------------------------------------------------------------------

class Predictor:
    """Interface: subclasses provide ``predict_batch`` and the metadata attributes."""

    name: str
    direction: str
    dt: float
    T: int

    def predict_batch(self, batch: WindowBatch):
        raise NotImplementedError

    def predict(self, window: StateWindow) -> Prediction:
        self._check_direction(window.direction)
        mean, std = self.predict_batch(window.as_batch())
        return Prediction(float(mean[0]), float(std[0]))

    def _check_direction(self, direction):
        if direction != self.direction:
            raise ValidationError(f"{self.name} predicts {self.direction} acceleration, got a {direction} window")


def _last_step(batch: WindowBatch):
    r = batch.last_rows()
    ego = batch.ego[r]
    return {
        "v": ego[:, 0],
        "vy": ego[:, 1],
        "lat_offset": batch.lat_offset[r],
        "has_lead": batch.present[r, 0],
        "v_lead": batch.neighbors[r, 0, 0],
        "gap": batch.neighbors[r, 0, 4] - 0.5 * (batch.ego_length[r] + batch.neighbor_length[r, 0]),
    }


def _design(batch: WindowBatch, direction: str):
    f = _last_step(batch)
    if direction == "longitudinal":
        X = np.column_stack([f["v_lead"] - f["v"], f["gap"], f["v"]])
        X[~f["has_lead"]] = 0.0
    else:
        X = np.column_stack([f["lat_offset"], f["vy"]])
    return X, f["v"]


@dataclass(frozen=True)
class ReferencePredictor(Predictor):
    direction: str = "longitudinal"
    weights: tuple = ()
    std_edges: tuple = ()
    std_values: tuple = (1.0,)
    dt: float = DEFAULT_DT
    T: int = DEFAULT_T
    name: str = "reference"

    def __post_init__(self):
        if self.direction not in DIRECTIONS:
            raise ValidationError(f"direction must be one of {DIRECTIONS}")
        object.__setattr__(self, "weights", tuple(float(w) for w in self.weights))
        object.__setattr__(self, "std_edges", tuple(float(e) for e in self.std_edges))
        object.__setattr__(self, "std_values", tuple(float(s) for s in self.std_values))
        expected = 3 if self.direction == "longitudinal" else 2
        if len(self.weights) != expected:
            raise ValidationError(f"{self.direction} rule needs {expected} weights, got {len(self.weights)}")
        if len(self.std_values) != len(self.std_edges) + 1:
            raise ValidationError("std_values must have one more entry than std_edges")
        if any(s < 0 for s in self.std_values):
            raise ValidationError("std values must be >= 0")

    @classmethod
    def longitudinal(cls, alpha=0.5, beta=0.1, tau=1.5, std=1.0, **kw):
        return cls("longitudinal", (alpha, beta, -beta * tau), (), (std,), **kw)

    @classmethod
    def lateral(cls, k_offset=0.1, k_damp=0.5, std=1.0, **kw):
        return cls("lateral", (-k_offset, -k_damp), (), (std,), **kw)

    @property
    def coefficients(self) -> dict:
        w = self.weights
        if self.direction == "longitudinal":
            alpha, beta, c = w
            tau = -c / beta if beta != 0 else math.nan
            return {"alpha": alpha, "beta": beta, "tau": tau, "w_speed": c}
        return {"k_offset": -w[0], "k_damp": -w[1]}

    def predict_batch(self, batch: WindowBatch):
        self._check_direction(batch.direction)
        X, v = _design(batch, self.direction)
        mean = X @ np.asarray(self.weights)
        std = np.asarray(self.std_values)[np.searchsorted(np.asarray(self.std_edges), v, side="right")]
        return mean, std

    def to_dict(self) -> dict:
        return {
            "format": PREDICTOR_FORMAT,
            "version": PREDICTOR_VERSION,
            "rule": "linear-car-following" if self.direction == "longitudinal" else "lane-center-pull",
            "name": self.name,
            "direction": self.direction,
            "dt": self.dt,
            "T": self.T,
            "weights": list(self.weights),
            "coefficients": self.coefficients,
            "std_bins": {"edges": list(self.std_edges), "values": list(self.std_values)},
        }

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")
        return path


def fit_reference_predictor(windows: WindowBatch, n_bins: int = 10, eps: float = DEFAULT_EPS,
                            dt: float = DEFAULT_DT, min_windows: int = 100) -> ReferencePredictor:
    """Least-squares fit of the reference rule plus speed-binned residual std."""
    n = len(windows)
    if n < min_windows:
        raise FitError(f"need at least {min_windows} windows to fit the reference predictor, got {n}")
    direction = windows.direction
    y = windows.target
    if not np.all(np.isfinite(y)):
        raise FitError("window targets must be finite")
    X, v = _design(windows, direction)
    used = np.any(X != 0, axis=1) if direction == "longitudinal" else np.ones(n, dtype=bool)
    if used.sum() < X.shape[1]:
        raise FitError("too few windows with a preceding vehicle to fit the longitudinal rule")
    weights, *_ = np.linalg.lstsq(X[used], y[used], rcond=None)
    resid = y - X @ weights
    qs = np.quantile(v, np.arange(1, n_bins) / n_bins)
    edges = np.unique(qs)
    bins = np.searchsorted(edges, v, side="right")
    overall = math.sqrt(float(np.mean(resid ** 2)))
    values = []
    for b in range(len(edges) + 1):
        r = resid[bins == b]
        values.append(max(math.sqrt(float(np.mean(r ** 2))) if r.size else overall, eps))
    return ReferencePredictor(direction, tuple(weights), tuple(edges), tuple(values), dt=dt, T=windows.T)


class ReplayPredictor(Predictor):
    """Returns the recorded acceleration at the window's frame with zero std."""

    name = "replay"

    def __init__(self, table: TrajectoryTable, direction="longitudinal", T=DEFAULT_T):
        if direction not in DIRECTIONS:
            raise ValidationError(f"direction must be one of {DIRECTIONS}")
        self.direction = direction
        self.dt = table.dt
        self.T = T
        self._span = int(table.frame.max()) - int(table.frame.min()) + 2 if len(table) else 1
        self._f0 = int(table.frame.min()) if len(table) else 0
        keys = table.id.astype(np.int64) * self._span + (table.frame - self._f0)
        order = np.argsort(keys)
        self._keys = keys[order]
        self._acc = (table.ax if direction == "longitudinal" else table.ay)[order]

    def predict_batch(self, batch: WindowBatch):
        self._check_direction(batch.direction)
        rel = batch.frame - self._f0
        keys = batch.vehicle_id.astype(np.int64) * self._span + rel
        pos = np.clip(np.searchsorted(self._keys, keys), 0, max(len(self._keys) - 1, 0))
        hit = (self._keys[pos] == keys) & (rel >= 0) & (rel < self._span - 1) if len(self._keys) else np.zeros(len(keys), bool)
        mean = np.where(hit, self._acc[pos] if len(self._keys) else 0.0, np.nan)
        return mean, np.zeros(len(keys))


def predictor_from_dict(d: dict) -> Predictor:
    if d.get("format") != PREDICTOR_FORMAT:
        raise ValidationError("not a predictor parameter file (format field mismatch)")
    if int(d.get("version", 0)) != PREDICTOR_VERSION:
        raise ValidationError(f"unsupported predictor file version {d.get('version')!r}")
    rule = d.get("rule")
    if rule not in ("linear-car-following", "lane-center-pull"):
        raise ValidationError(f"unknown predictor rule {rule!r}")
    return ReferencePredictor(
        d["direction"],
        tuple(d["weights"]),
        tuple(d["std_bins"]["edges"]),
        tuple(d["std_bins"]["values"]),
        dt=float(d.get("dt", DEFAULT_DT)),
        T=int(d.get("T", DEFAULT_T)),
        name=d.get("name", "reference"),
    )


def load_predictor(path) -> Predictor:
    with open(path, encoding="utf-8") as fh:
        try:
            d = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ValidationError(f"predictor file {path} is not valid JSON: {exc}") from None
    return predictor_from_dict(d)


# ---------------------------------------------------------------------------
# residual sets

@dataclass(frozen=True, eq=False)
class ResidualSet:
    values: np.ndarray
    dataset: str = ""
    direction: str = "longitudinal"
    dt: float = DEFAULT_DT
    predictor: str = ""
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=float).ravel()
        if not np.all(np.isfinite(vals)):
            raise ValidationError("residuals must be finite")
        vals = vals.copy()
        vals.flags.writeable = False
        object.__setattr__(self, "values", vals)

    @property
    def n(self) -> int:
        return len(self.values)

    def __len__(self):
        return self.n

    def provenance(self) -> dict:
        return {
            "dataset": self.dataset,
            "direction": self.direction,
            "dt": self.dt,
            "predictor": self.predictor,
            "n": self.n,
            **self.extra,
        }

    def reflected(self) -> "ResidualSet":
        return ResidualSet(-self.values, self.dataset, self.direction, self.dt, self.predictor, dict(self.extra))

    def save(self, csv_path):
        """One-column CSV (header ``sigma``) plus a ``.json`` provenance sidecar."""
        with open(csv_path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write("sigma\n")
            fh.writelines(f"{v!r}\n" for v in self.values.tolist())
        with open(sidecar_path(csv_path), "w", encoding="utf-8") as fh:
            json.dump(self.provenance(), fh, indent=2, sort_keys=True)
            fh.write("\n")
        return csv_path


def sidecar_path(csv_path):
    s = str(csv_path)
    return (s[:-4] if s.endswith(".csv") else s) + ".json"


def load_residuals(csv_path) -> ResidualSet:
    import os

    with open(csv_path, encoding="utf-8") as fh:
        header = fh.readline().strip()
        if header != "sigma":
            raise ValidationError(f"residual file {csv_path} must start with a 'sigma' header")
        vals = []
        for i, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                vals.append(float(line))
            except ValueError:
                raise ValidationError(f"non-numeric residual {line!r} at data row {i}") from None
    meta = {}
    side = sidecar_path(csv_path)
    if os.path.exists(side):
        with open(side, encoding="utf-8") as fh:
            meta = json.load(fh)
    known = {k: meta.pop(k) for k in ("dataset", "direction", "dt", "predictor") if k in meta}
    meta.pop("n", None)
    return ResidualSet(np.array(vals), extra=meta, **known)


def compute_residuals(predictor: Predictor, windows: WindowBatch, eps: float = DEFAULT_EPS,
                      dataset: str = "") -> ResidualSet:
    """Normalized residuals of every window's observed target."""
    mean, std = predictor.predict_batch(windows)
    sigma = normalize_residuals(windows.target, mean, std, eps)
    finite = np.isfinite(sigma)
    extra = {"eps": eps, "T": windows.T}
    if not finite.all():
        extra["dropped_non_finite"] = int((~finite).sum())
    return ResidualSet(sigma[finite], dataset=dataset, direction=windows.direction,
                       dt=getattr(predictor, "dt", DEFAULT_DT), predictor=predictor.name, extra=extra)
