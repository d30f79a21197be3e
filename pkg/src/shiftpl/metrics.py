"""Goodness-of-fit metrics for residual laws against empirical residuals.

* RP5: empirical probability of ``|sigma| >= 5`` over the model's.
* Integral log-likelihood: ``integral of log f(sigma) over [-L, L]``.  It has no
  data term, so it only depends on the model and the domain.
* KL divergence of the histogram density from the model, midpoint rule at bin
  centers with the model renormalized over the bins.
"""
from __future__ import annotations

import csv
import io
import json
import math
import warnings
from dataclasses import dataclass

import numpy as np

from shiftpl.distributions import ResidualLaw
from shiftpl.errors import InsufficientDataError, ValidationError
from shiftpl.predictor import ResidualSet

TAIL_THRESHOLD = 5.0
DEFAULT_BINS = 401
MIN_HALF_WIDTH = 10.0
LL_STEP = 1e-3


class EmptyTailWarning(RuntimeWarning):
    """No residual reached the RP5 threshold; the ratio is reported as 0."""


@dataclass(frozen=True, eq=False)
class EmpiricalDensity:
    edges: np.ndarray
    density: np.ndarray
    counts: np.ndarray
    n: int
    tail_count: int
    threshold: float = TAIL_THRESHOLD

    @property
    def widths(self):
        return np.diff(self.edges)

    @property
    def centers(self):
        return 0.5 * (self.edges[:-1] + self.edges[1:])

    @property
    def half_width(self) -> float:
        return float(max(-self.edges[0], self.edges[-1]))

    @property
    def tail_fraction(self) -> float:
        return self.tail_count / self.n

    def pdf(self, x):
        """Piecewise-constant density; 0 outside the edges."""
        x = np.asarray(x, dtype=float)
        i = np.searchsorted(self.edges, x, side="right") - 1
        i = np.where(x == self.edges[-1], len(self.density) - 1, i)
        inside = (i >= 0) & (i < len(self.density))
        return np.where(inside, self.density[np.clip(i, 0, len(self.density) - 1)], 0.0)

    def logpdf(self, x):
        with np.errstate(divide="ignore"):
            return np.log(self.pdf(x))

    @property
    def name(self) -> str:
        return "empirical"


def _values(residuals) -> np.ndarray:
    vals = residuals.values if isinstance(residuals, ResidualSet) else np.asarray(residuals, dtype=float).ravel()
    if not np.all(np.isfinite(vals)):
        raise ValidationError("residuals must be finite")
    return vals


def default_half_width(residuals) -> float:
    vals = _values(residuals)
    return max(MIN_HALF_WIDTH, float(np.max(np.abs(vals)))) if vals.size else MIN_HALF_WIDTH


def empirical_density(residuals, bins: int = DEFAULT_BINS, half_width: float | None = None,
                      edges=None, min_samples: int = 100, threshold: float = TAIL_THRESHOLD) -> EmpiricalDensity:
    """Normalized histogram of the residuals.

    Default bins: ``bins`` uniform bins on ``[-L, L]`` with
    ``L = max(10, max |sigma|)``.  With explicit ``edges``, samples outside
    them are left out and the density is normalized over the rest.
    """
    vals = _values(residuals)
    n = vals.size
    if n < min_samples:
        raise InsufficientDataError(f"need at least {min_samples} residuals for a density, got {n}")
    if edges is None:
        L = default_half_width(vals) if half_width is None else float(half_width)
        if not L > 0:
            raise ValidationError("half width must be > 0")
        edges = np.linspace(-L, L, int(bins) + 1)
    else:
        edges = np.asarray(edges, dtype=float)
        if edges.ndim != 1 or edges.size < 2 or np.any(np.diff(edges) <= 0):
            raise ValidationError("bin edges must be strictly increasing")
    counts, _ = np.histogram(vals, bins=edges)
    inside = counts.sum()
    if inside == 0:
        raise InsufficientDataError("no residual falls inside the bin edges")
    density = counts / (inside * np.diff(edges))
    tail = int(np.count_nonzero(np.abs(vals) >= threshold))
    return EmpiricalDensity(edges, density, counts, n, tail, threshold)


def rp5(density: EmpiricalDensity, model: ResidualLaw) -> float:
    """Empirical over model probability of ``|sigma| >= 5`` (raw counts, closed-form tail)."""
    model_mass = float(model.violation_rate(density.threshold))
    if not model_mass > 0:
        raise ValidationError(f"{model.name} has no tail mass beyond {density.threshold}")
    if density.tail_count == 0:
        warnings.warn(f"no residual reaches |sigma| >= {density.threshold:g}; RP5 reported as 0",
                      EmptyTailWarning, stacklevel=2)
        return 0.0
    return density.tail_fraction / model_mass


def integral_log_likelihood(model, half_width: float, step: float = LL_STEP) -> float:
    """Trapezoid rule for the integral of ``log f`` over ``[-L, L]``.

    The grid is symmetric and always contains 0, where the shifted power law
    has its kink.
    """
    L = float(half_width)
    if not L > 0:
        raise ValidationError("integration half width must be > 0")
    if not step > 0:
        raise ValidationError("quadrature step must be > 0")
    m = max(1, math.ceil(L / step))
    x = np.linspace(-L, L, 2 * m + 1)
    return float(np.trapezoid(model.logpdf(x), x))


def kl_divergence(density: EmpiricalDensity, model) -> float:
    """``sum p_i w_i log(p_i / f(c_i))`` over non-empty bins.

    The model's midpoint masses ``f(c_i) w_i`` are renormalized to sum to 1
    over the grid first.  Without this the midpoint error at the cusp of the
    shifted power law can push the sum below 0 on coarse grids.
    """
    p = density.density
    w = density.widths
    logf = np.asarray(model.logpdf(density.centers), dtype=float)
    nz = p > 0
    if not np.all(np.isfinite(logf[nz])):
        raise ValidationError(f"{getattr(model, 'name', 'model')} density is zero on a non-empty bin")
    finite = np.isfinite(logf)
    shift = logf[finite].max()
    log_z = shift + math.log(float(np.sum(np.exp(logf[finite] - shift) * w[finite])))
    mass = p[nz] * w[nz]
    return float(np.sum(mass * (np.log(p[nz]) - logf[nz] + log_z)))


@dataclass(frozen=True)
class MetricReport:
    model: str
    dataset: str
    rp5: float
    log_likelihood: float
    kl: float
    half_width: float
    n: int
    tail_count: int
    empty_tail: bool = False

    def to_dict(self) -> dict:
        return {
            "model": self.model,
            "dataset": self.dataset,
            "rp5": self.rp5,
            "log_likelihood": self.log_likelihood,
            "kl": self.kl,
            "domain": [-self.half_width, self.half_width],
            "n": self.n,
            "tail_count": self.tail_count,
            "empty_tail": self.empty_tail,
        }


def evaluate(residuals, models, dataset: str = "", bins: int = DEFAULT_BINS,
             half_width: float | None = None, ll_step: float = LL_STEP) -> list[MetricReport]:
    """Score each model against one residual set on a shared histogram and domain."""
    if isinstance(residuals, ResidualSet) and not dataset:
        dataset = residuals.dataset
    dens = empirical_density(residuals, bins=bins, half_width=half_width)
    L = dens.half_width
    out = []
    for model in models:
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always", EmptyTailWarning)
            r = rp5(dens, model)
        empty = any(issubclass(w.category, EmptyTailWarning) for w in caught)
        if empty:
            warnings.warn(f"{dataset or 'residuals'}: empty |sigma| >= 5 tail, RP5 = 0 for {model.name}",
                          EmptyTailWarning, stacklevel=2)
        out.append(MetricReport(model.name, dataset, r, integral_log_likelihood(model, L, ll_step),
                                kl_divergence(dens, model), L, dens.n, dens.tail_count, empty))
    return out


def reports_to_json(reports, path=None):
    text = json.dumps([r.to_dict() for r in reports], indent=2, sort_keys=True) + "\n"
    if path is None:
        return text
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(text)
    return path


def reports_to_csv(reports, path=None):
    """Wide format: one row per model, in the order given."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["dataset", "model", "rp5", "log_likelihood", "kl", "domain_low", "domain_high", "n", "tail_count",
                "empty_tail"])
    for r in reports:
        w.writerow([r.dataset, r.model, repr(r.rp5), repr(r.log_likelihood), repr(r.kl), repr(-r.half_width),
                    repr(r.half_width), r.n, r.tail_count, int(r.empty_tail)])
    text = buf.getvalue()
    if path is None:
        return text
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)
    return path


def comparison_matrix_csv(reports, path=None):
    """Long format: one row per (dataset, model, metric)."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["dataset", "model", "metric", "value", "domain_half_width"])
    for r in reports:
        for metric in ("rp5", "log_likelihood", "kl"):
            w.writerow([r.dataset, r.model, metric, repr(getattr(r, metric)), repr(r.half_width)])
    text = buf.getvalue()
    if path is None:
        return text
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)
    return path
