"""Two-sided Z-test of an observed crash rate against a baseline per-mile rate."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

from shiftpl.errors import ValidationError

Z_CRITICAL = 1.96


@dataclass(frozen=True)
class RateTest:
    p: float
    n: int
    m: float
    p_i: float
    z: float
    reject: bool

    @property
    def rate_per_million(self) -> float:
        return self.p_i * 1e6

    @property
    def baseline_per_million(self) -> float:
        return self.p * 1e6

    def to_dict(self) -> dict:
        d = asdict(self)
        d["rate_per_million_miles"] = self.rate_per_million
        d["baseline_per_million_miles"] = self.baseline_per_million
        d["critical_value"] = Z_CRITICAL
        return d


def crash_rate_z_test(p: float, n: int, m: float) -> RateTest:
    """``z = (n/m - p) / sqrt(p (1 - p) / m)``; reject at the 95% level when ``|z| > 1.96``."""
    if not (isinstance(p, (int, float)) and 0 < p < 1):
        raise ValidationError(f"baseline rate p must lie in (0, 1), got {p!r}")
    if not (isinstance(m, (int, float)) and m > 0 and math.isfinite(m)):
        raise ValidationError(f"exposure m must be a positive number of miles, got {m!r}")
    if isinstance(n, bool) or not float(n).is_integer() or n < 0:
        raise ValidationError(f"crash count n must be a non-negative integer, got {n!r}")
    n = int(n)
    p_i = n / m
    z = (p_i - p) / math.sqrt(p * (1.0 - p) / m)
    return RateTest(float(p), n, float(m), p_i, z, abs(z) > Z_CRITICAL)
