"""Residual laws for the normalized acceleration residual.

The shifted power law ties a symmetric threshold ``|s|`` to its violation rate
``delta = P(|X| > |s|)`` through ``|s| = a * (delta**k - 1)`` with ``a > 0`` and
``k < 0``.  Inverting gives ``delta(s) = (1 + |s|/a)**(1/k)``, from which the
CDF, density and quantile below follow in closed form.

Baselines (standard Gaussian, unit-variance Laplace, unit-variance Student-t)
share the same interface so that fitting, metrics and the simulator can treat
every law uniformly.

All laws are immutable.  ``truncation`` only affects :meth:`sample`; densities,
CDFs and tail masses are always those of the untruncated law.
"""
from __future__ import annotations

import dataclasses
import math
import re
from dataclasses import dataclass, field

import numpy as np
from scipy import special

from shiftpl.errors import ValidationError

# smallest tail probability handed to log() in the quantile
_Q_FLOOR = 1e-300

SQRT2 = math.sqrt(2.0)


def _rng(seed):
    return np.random.default_rng(seed)


@dataclass(frozen=True)
class ResidualLaw:
    """Common base; subclasses implement the ``_``-prefixed hooks."""

    truncation: float | None = field(default=None, kw_only=True)

    def __post_init__(self):
        if self.truncation is not None and not self.truncation > 0:
            raise ValidationError(f"truncation bound must be positive, got {self.truncation}")

    # -- public API ---------------------------------------------------------
    def pdf(self, x):
        return self._pdf(np.asarray(x, dtype=float))

    def cdf(self, x):
        return self._cdf(np.asarray(x, dtype=float))

    def violation_rate(self, x):
        """P(|X| > |x|) for the untruncated law."""
        return self._sf2(np.abs(np.asarray(x, dtype=float)))

    # alias used by the metrics code
    tail_mass = violation_rate

    def logpdf(self, x):
        return np.log(self.pdf(x))

    def sample(self, n, seed=None):
        """Draw ``n`` values.

        ``seed`` may be an int, ``None`` or a ``numpy.random.Generator`` (which
        is advanced in place).  With a truncation bound, out-of-bound draws are
        redrawn (rejection) until every value satisfies ``|x| <= B``; redraws
        happen in index order so the result is a pure function of the seed.
        """
        n = int(n)
        if n < 1:
            raise ValidationError("sample count must be >= 1")
        rng = _rng(seed)
        out = self._draw(rng, n)
        if self.truncation is not None:
            bound = self.truncation
            bad = np.flatnonzero(np.abs(out) > bound)
            while bad.size:
                out[bad] = self._draw(rng, bad.size)
                bad = bad[np.abs(out[bad]) > bound]
        return out

    @property
    def name(self) -> str:
        raise NotImplementedError

    def to_dict(self) -> dict:
        raise NotImplementedError

    def with_truncation(self, bound):
        return dataclasses.replace(self, truncation=bound)


@dataclass(frozen=True)
class ShiftedPowerLaw(ResidualLaw):
    a: float = 5.0
    k: float = -0.2

    def __post_init__(self):
        super().__post_init__()
        if not (np.isfinite(self.a) and self.a > 0):
            raise ValidationError(f"scale a must be > 0, got {self.a}")
        if not (np.isfinite(self.k) and self.k < 0):
            raise ValidationError(f"decay exponent k must be < 0, got {self.k}")

    @property
    def tail_exponent(self) -> float:
        return 1.0 / self.k - 1.0

    @property
    def name(self) -> str:
        return f"spl(a={self.a:g},k={self.k:g})"

    def _pdf(self, x):
        return -0.5 / (self.a * self.k) * np.exp(self.tail_exponent * np.log1p(np.abs(x) / self.a))

    def _sf2(self, ax):
        return np.exp(np.log1p(ax / self.a) / self.k)

    def _cdf(self, x):
        half_tail = 0.5 * self._sf2(np.abs(x))
        return np.where(x < 0, half_tail, 1.0 - half_tail)

    def logpdf(self, x):
        x = np.asarray(x, dtype=float)
        return math.log(-0.5 / (self.a * self.k)) + self.tail_exponent * np.log1p(np.abs(x) / self.a)

    def quantile(self, p):
        p = np.asarray(p, dtype=float)
        if np.any(~((p > 0) & (p < 1))):
            raise ValidationError("quantile probability must lie strictly inside (0, 1)")
        return self._ppf(p)

    def _ppf(self, p):
        q = np.maximum(np.minimum(p, 1.0 - p), _Q_FLOOR)
        mag = self.a * np.expm1(self.k * np.log(2.0 * q))
        return np.where(p < 0.5, -mag, mag)

    def _draw(self, rng, n):
        return self._ppf(rng.random(n))

    def to_dict(self):
        return {"type": "spl", "a": self.a, "k": self.k, "truncation": self.truncation}


@dataclass(frozen=True)
class Gaussian(ResidualLaw):
    @property
    def name(self):
        return "gaussian"

    def _pdf(self, x):
        return np.exp(-0.5 * x * x) / math.sqrt(2.0 * math.pi)

    def logpdf(self, x):
        x = np.asarray(x, dtype=float)
        return -0.5 * x * x - 0.5 * math.log(2.0 * math.pi)

    def _cdf(self, x):
        return special.ndtr(x)

    def _sf2(self, ax):
        return 2.0 * special.ndtr(-ax)

    def _draw(self, rng, n):
        return rng.standard_normal(n)

    def to_dict(self):
        return {"type": "gaussian", "truncation": self.truncation}


@dataclass(frozen=True)
class Laplace(ResidualLaw):
    """Laplace law scaled to unit variance."""

    @property
    def name(self):
        return "laplace"

    def _pdf(self, x):
        return np.exp(-SQRT2 * np.abs(x)) / SQRT2

    def logpdf(self, x):
        x = np.asarray(x, dtype=float)
        return -SQRT2 * np.abs(x) - 0.5 * math.log(2.0)

    def _cdf(self, x):
        half_tail = 0.5 * np.exp(-SQRT2 * np.abs(x))
        return np.where(x < 0, half_tail, 1.0 - half_tail)

    def _sf2(self, ax):
        return np.exp(-SQRT2 * ax)

    def _draw(self, rng, n):
        return rng.laplace(0.0, 1.0 / SQRT2, n)

    def to_dict(self):
        return {"type": "laplace", "truncation": self.truncation}


@dataclass(frozen=True)
class StudentT(ResidualLaw):
    """Student-t law rescaled to unit variance (needs ``nu >= 3``)."""

    nu: int = 3

    def __post_init__(self):
        super().__post_init__()
        if int(self.nu) != self.nu or self.nu < 3:
            raise ValidationError(f"Student-t degrees of freedom must be an integer >= 3, got {self.nu}")

    @property
    def name(self):
        return f"student-t({self.nu})"

    @property
    def _scale(self):
        return math.sqrt((self.nu - 2.0) / self.nu)

    def logpdf(self, x):
        x = np.asarray(x, dtype=float)
        nu = float(self.nu)
        const = (special.gammaln((nu + 1) / 2) - special.gammaln(nu / 2)
                 - 0.5 * math.log((nu - 2) * math.pi))
        return const - (nu + 1) / 2 * np.log1p(x * x / (nu - 2))

    def _pdf(self, x):
        return np.exp(self.logpdf(x))

    def _cdf(self, x):
        return special.stdtr(self.nu, x / self._scale)

    def _sf2(self, ax):
        return 2.0 * special.stdtr(self.nu, -ax / self._scale)

    def _draw(self, rng, n):
        return rng.standard_t(self.nu, n) * self._scale

    def to_dict(self):
        return {"type": "student-t", "nu": self.nu, "truncation": self.truncation}


# -- functional aliases -----------------------------------------------------

def spl_pdf(params: ShiftedPowerLaw, sigma):
    return params.pdf(sigma)


def spl_cdf(params: ShiftedPowerLaw, sigma):
    return params.cdf(sigma)


def spl_quantile(params: ShiftedPowerLaw, p):
    return params.quantile(p)


def spl_violation_rate(params: ShiftedPowerLaw, sigma):
    return params.violation_rate(sigma)


def spl_sample(params: ShiftedPowerLaw, seed, n, truncation=None):
    law = params if truncation is None else params.with_truncation(truncation)
    return law.sample(n, seed)


# -- spec parsing -----------------------------------------------------------

_KV = re.compile(r"^\s*([a-zA-Z_]+)\s*=\s*([^,]+?)\s*$")


def parse_law(text: str) -> ResidualLaw:
    """Parse a compact law spec.

    Accepted forms: ``gaussian``, ``laplace``, ``student-t:3`` (or ``t3``),
    ``spl:a=5,k=-0.2``; any form may carry ``,B=50`` / ``;B=50`` for a
    truncation bound, e.g. ``gaussian:B=50``.
    """
    raw = text.strip()
    head, _, tail = raw.partition(":")
    head = head.strip().lower()
    params = {}
    positional = []
    for part in re.split(r"[,;]", tail) if tail else []:
        if not part.strip():
            continue
        m = _KV.match(part)
        if m:
            params[m.group(1).lower()] = m.group(2)
        else:
            positional.append(part.strip())
    try:
        trunc = float(params.pop("b")) if "b" in params else None
        if head in ("gaussian", "normal", "n"):
            law = Gaussian(truncation=trunc)
        elif head == "laplace":
            law = Laplace(truncation=trunc)
        elif head in ("student-t", "student", "t") or re.fullmatch(r"t\d+", head):
            nu = params.pop("nu", None) or (positional.pop(0) if positional else None) or head[1:]
            law = StudentT(nu=int(nu), truncation=trunc)
        elif head in ("spl", "shifted-power-law"):
            law = ShiftedPowerLaw(a=float(params.pop("a")), k=float(params.pop("k")), truncation=trunc)
        else:
            raise ValidationError(f"unknown law {head!r} in spec {text!r}")
    except (KeyError, ValueError) as exc:
        if isinstance(exc, ValidationError):
            raise
        raise ValidationError(f"malformed law spec {text!r}: {exc}") from None
    if params or positional:
        raise ValidationError(f"unexpected parameters in law spec {text!r}")
    return law


def law_from_dict(d: dict) -> ResidualLaw:
    """Inverse of ``ResidualLaw.to_dict`` (config-file form)."""
    if not isinstance(d, dict) or "type" not in d:
        raise ValidationError("law must be an object with a 'type' field")
    kind = str(d["type"]).lower()
    trunc = d.get("truncation")
    trunc = None if trunc is None else float(trunc)
    try:
        if kind in ("gaussian", "normal"):
            return Gaussian(truncation=trunc)
        if kind == "laplace":
            return Laplace(truncation=trunc)
        if kind in ("student-t", "student", "t"):
            return StudentT(nu=int(d["nu"]), truncation=trunc)
        if kind in ("spl", "shifted-power-law"):
            return ShiftedPowerLaw(a=float(d["a"]), k=float(d["k"]), truncation=trunc)
    except KeyError as exc:
        raise ValidationError(f"law of type {kind!r} is missing field {exc.args[0]!r}") from None
    raise ValidationError(f"unknown law type {kind!r}")
