"""Empirical violation curves and log-log fits of the shifted power law.

Taking logs of ``|sigma| = a (delta^k - 1)`` gives the through-origin line

    u = log(1 + sigma / a) = k * log(delta) = k * v

so for a fixed scale ``a`` the exponent has the closed form
``k = sum(u v) / sum(v^2)``.  With ``a`` free, an outer search over ``log a``
maximizes the through-origin R^2.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from shiftpl.distributions import ShiftedPowerLaw
from shiftpl.errors import FitError, InsufficientDataError, ValidationError
from shiftpl.predictor import ResidualSet

RISK_INDEX_A = 5.0
LOW_CONFIDENCE_R2 = 0.8
A_BOUNDS = (1e-2, 2e2)
GRID_POINTS = 200
MIN_POINTS_FREE = 4
MIN_POINTS_FIXED = 2
_GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0


@dataclass(frozen=True)
class ThresholdPolicy:
    """Where to place thresholds and which points to keep.

    By default ``n_points`` thresholds sit at empirical quantiles of
    ``|sigma|`` whose exceedance probabilities run geometrically from
    ``delta_max`` down to ``max(10 / n, delta_floor)``.  Passing
    ``thresholds`` uses those values instead.
    """

    n_points: int = 60
    delta_max: float = 0.9
    delta_floor: float = 1e-6
    min_tail_count: int = 10
    min_samples: int = 100
    thresholds: tuple | None = None

    def __post_init__(self):
        if self.thresholds is not None:
            t = tuple(float(s) for s in self.thresholds)
            if any(not (s >= 0 and math.isfinite(s)) for s in t):
                raise ValidationError("explicit thresholds must be finite and >= 0")
            object.__setattr__(self, "thresholds", t)
        if self.n_points < 1 or not 0 < self.delta_max <= 1 or not 0 < self.delta_floor < 1:
            raise ValidationError("invalid threshold policy")

    @property
    def tag(self) -> str:
        if self.thresholds is not None:
            return f"explicit-{len(self.thresholds)}"
        return f"quantile-{self.n_points}(delta {self.delta_max:g}..max(10/n,{self.delta_floor:g}), min-tail {self.min_tail_count})"

    def targets(self, n: int) -> np.ndarray:
        lo = max(10.0 / n, self.delta_floor)
        if lo >= self.delta_max:
            return np.array([self.delta_max])
        return np.geomspace(self.delta_max, lo, self.n_points)


DEFAULT_POLICY = ThresholdPolicy()


@dataclass(frozen=True, eq=False)
class ViolationCurve:
    sigma: np.ndarray
    delta: np.ndarray
    n: int = 0
    policy: str = "explicit"
    counts: np.ndarray | None = None

    def __post_init__(self):
        s = np.asarray(self.sigma, dtype=float).ravel()
        d = np.asarray(self.delta, dtype=float).ravel()
        if s.shape != d.shape:
            raise ValidationError("sigma and delta must have the same length")
        if np.any(s < 0) or not np.all(np.isfinite(s)):
            raise ValidationError("thresholds must be finite and >= 0")
        if np.any(d <= 0) or np.any(d > 1):
            raise ValidationError("violation rates must lie in (0, 1]")
        if np.any(np.diff(s) <= 0):
            raise ValidationError("thresholds must be strictly increasing")
        if np.any(np.diff(d) > 0):
            raise ValidationError("violation rates must be non-increasing")
        for name, arr in (("sigma", s), ("delta", d)):
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)

    def __len__(self):
        return len(self.sigma)

    @classmethod
    def from_law(cls, a: float, k: float, deltas) -> "ViolationCurve":
        """Noise-free curve ``sigma = a (delta^k - 1)`` at the given rates."""
        d = np.sort(np.asarray(deltas, dtype=float))[::-1]
        return cls(a * np.expm1(k * np.log(d)), d, policy="synthetic")

    def to_csv(self, path=None):
        lines = ["sigma,delta"] + [f"{s!r},{d!r}" for s, d in zip(self.sigma.tolist(), self.delta.tolist())]
        text = "\n".join(lines) + "\n"
        if path is None:
            return text
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        return path


def _abs_values(residuals) -> np.ndarray:
    vals = residuals.values if isinstance(residuals, ResidualSet) else np.asarray(residuals, dtype=float)
    if not np.all(np.isfinite(vals)):
        raise ValidationError("residuals must be finite")
    return np.sort(np.abs(vals.ravel()))


def empirical_violation_curve(residuals, policy: ThresholdPolicy = DEFAULT_POLICY) -> ViolationCurve:
    """Exceedance rates ``count(|sigma| > s) / n`` at the policy's thresholds."""
    x = _abs_values(residuals)
    n = len(x)
    if n < policy.min_samples:
        raise InsufficientDataError(f"need at least {policy.min_samples} residuals, got {n}")
    if policy.thresholds is not None:
        thr = np.unique(np.asarray(policy.thresholds))
    else:
        thr = np.unique(np.quantile(x, 1.0 - policy.targets(n)))
    counts = n - np.searchsorted(x, thr, side="right")
    keep = (counts > 0) & (counts >= policy.min_tail_count)
    return ViolationCurve(thr[keep], counts[keep] / n, n=n, policy=policy.tag, counts=counts[keep])


# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FitResult:
    a: float
    k: float
    r2: float
    mode: str
    n: int = 0
    policy: str = ""
    n_points: int = 0
    extra: dict = field(default_factory=dict, compare=False)

    @property
    def risk_index(self) -> float:
        return abs(self.k)

    @property
    def low_confidence(self) -> bool:
        return not self.r2 > LOW_CONFIDENCE_R2

    def law(self) -> ShiftedPowerLaw:
        return ShiftedPowerLaw(self.a, self.k)

    def to_dict(self) -> dict:
        return {
            "a": self.a,
            "k": self.k,
            "r2": self.r2,
            "mode": self.mode,
            "n": self.n,
            "risk_index": self.risk_index,
            "low_confidence": self.low_confidence,
            "policy": self.policy,
            "n_points": self.n_points,
        }

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")
        return path


def _fixed(sigma, v, a):
    u = np.log1p(sigma / a)
    k = float(np.dot(u, v) / np.dot(v, v))
    sse = float(np.sum((u - k * v) ** 2))
    suu = float(np.dot(u, u))
    r2 = 1.0 - sse / suu if suu > 0 else -math.inf
    return k, r2


def _check_curve(curve: ViolationCurve, need: int):
    if len(curve) < need:
        raise FitError(f"fit needs at least {need} curve points, got {len(curve)}")
    v = np.log(curve.delta)
    if not np.any(v < 0):
        raise FitError("degenerate violation curve: every rate equals 1")
    if not np.any(curve.sigma > 0):
        raise FitError("degenerate violation curve: every threshold is 0")
    return v


def _result(curve, a, k, r2, mode):
    if not k < 0:
        raise FitError(f"fitted exponent {k} is not negative")
    return FitResult(float(a), k, r2, mode, n=curve.n, policy=curve.policy, n_points=len(curve))


def fit_fixed_a(curve: ViolationCurve, a: float = RISK_INDEX_A) -> FitResult:
    if not a > 0:
        raise ValidationError("scale a must be > 0")
    v = _check_curve(curve, MIN_POINTS_FIXED)
    k, r2 = _fixed(curve.sigma, v, a)
    return _result(curve, a, k, r2, f"fixed-a({a:g})")


def fit_free_a(curve: ViolationCurve, bounds=A_BOUNDS, grid_points: int = GRID_POINTS,
               xtol: float = 1e-10) -> FitResult:
    """Grid search over ``log a`` followed by golden-section refinement of R^2.

    ``xtol`` is the final bracket width in ``log a``.
    """
    v = _check_curve(curve, MIN_POINTS_FREE)
    s = curve.sigma
    lo, hi = math.log(bounds[0]), math.log(bounds[1])
    grid = np.linspace(lo, hi, grid_points)
    r2s = np.array([_fixed(s, v, math.exp(g))[1] for g in grid])
    i = int(np.argmax(r2s))  # first maximum = smallest a
    left, right = grid[max(i - 1, 0)], grid[min(i + 1, grid_points - 1)]

    def neg(t):
        return -_fixed(s, v, math.exp(t))[1]

    # golden-section search on [left, right]
    c = right - _GOLDEN * (right - left)
    d = left + _GOLDEN * (right - left)
    fc, fd = neg(c), neg(d)
    while right - left > xtol:
        if fc <= fd:
            right, d, fd = d, c, fc
            c = right - _GOLDEN * (right - left)
            fc = neg(c)
        else:
            left, c, fc = c, d, fd
            d = left + _GOLDEN * (right - left)
            fd = neg(d)
    cands = [(r2s[i], grid[i]), (-fc, c), (-fd, d)]
    best_r2 = max(r for r, _ in cands)
    t = min(t for r, t in cands if r == best_r2)
    a = math.exp(t)
    k, r2 = _fixed(s, v, a)
    return _result(curve, a, k, r2, "free-a")


def fit_shifted_power_law(curve: ViolationCurve, mode="free-a") -> FitResult:
    """``mode`` is ``"free-a"``, ``"fixed-a"`` (a = 5) or a positive float for a fixed scale."""
    if mode == "free-a":
        return fit_free_a(curve)
    if mode == "fixed-a":
        return fit_fixed_a(curve, RISK_INDEX_A)
    if isinstance(mode, (int, float)) and not isinstance(mode, bool):
        return fit_fixed_a(curve, float(mode))
    raise ValidationError(f"unknown fit mode {mode!r}")


def risk_index_fixed_a(residuals, a0: float = RISK_INDEX_A,
                       policy: ThresholdPolicy = DEFAULT_POLICY) -> FitResult:
    return fit_fixed_a(empirical_violation_curve(residuals, policy), a0)


def fit_residuals(residuals, mode="free-a", policy: ThresholdPolicy = DEFAULT_POLICY) -> FitResult:
    return fit_shifted_power_law(empirical_violation_curve(residuals, policy), mode)
