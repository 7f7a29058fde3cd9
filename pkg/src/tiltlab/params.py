"""Sound-speed parameter algebra, regime classification and predicted decay rates.

For a linear equation of state p = cs2 * rho the renormalised fluid variables
use the exponent rs = cs2 / (1 + cs2), and the tilt of the homogeneous fluid
grows like exp(As * H * t) with As = (3 cs2 - 1) / (1 - cs2).

All formulas accept either floats or :class:`fractions.Fraction` values, so a
rate table built from a rational sound speed holds exact rationals.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Iterator, Mapping, Union

Number = Union[float, Fraction]

RADIATION = Fraction(1, 3)
RESTRICTED_EDGE = Fraction(3, 7)


class DomainError(ValueError):
    """Raised when a parameter lies outside the physical range."""


class Regime(str, enum.Enum):
    ORTHOGONAL = "orthogonal"
    RADIATION = "radiation"
    EXTREME_TILT_RESTRICTED = "extreme_tilt_restricted"
    EXTREME_TILT_BEYOND = "extreme_tilt_beyond"


def _check_cs2(cs2: Number) -> None:
    if not (0 < cs2 < 1):
        raise DomainError(f"cs2 must lie in (0, 1), got {cs2!r}")


def rs_of(cs2: Number) -> Number:
    return cs2 / (1 + cs2)


def As_of(cs2: Number) -> Number:
    return (3 * cs2 - 1) / (1 - cs2)


def As_from_rs(rs: Number) -> Number:
    """Tilt exponent written through rs: -1 + 2 rs / (1 - 2 rs)."""
    return -1 + 2 * rs / (1 - 2 * rs)


@dataclass(frozen=True)
class SoundSpeedParams:
    """Parameters shared by every solver.

    ``H`` is stored rather than recomputed so all modules read one value.
    """

    cs2: Number
    rs: Number
    As: Number
    Lambda: float
    H: float

    @property
    def one_minus_2rs(self) -> Number:
        return 1 - 2 * self.rs

    @property
    def regime(self) -> "Regime":
        return classify_regime(self.cs2)

    def as_floats(self) -> dict:
        return {k: float(getattr(self, k)) for k in ("cs2", "rs", "As", "Lambda", "H")}


def derive_params(cs2: Number, Lambda: float = 3.0) -> SoundSpeedParams:
    """Build :class:`SoundSpeedParams` from the sound speed squared and Lambda.

    >>> p = derive_params(Fraction(1, 2), 3.0)
    >>> (p.rs, p.As, p.H)
    (Fraction(1, 3), Fraction(1, 1), 1.0)
    """
    _check_cs2(cs2)
    if not Lambda > 0:
        raise DomainError(f"Lambda must be positive, got {Lambda!r}")
    return SoundSpeedParams(
        cs2=cs2,
        rs=rs_of(cs2),
        As=As_of(cs2),
        Lambda=float(Lambda),
        H=math.sqrt(Lambda / 3.0),
    )


def classify_regime(cs2: Number) -> Regime:
    """Map a sound speed to its asymptotic fluid regime.

    Rationals are compared exactly against 1/3 and 3/7; floats are compared
    against the nearest doubles, so ``1/3`` typed as a float is radiation.
    """
    _check_cs2(cs2)
    if isinstance(cs2, Fraction):
        lo, hi = RADIATION, RESTRICTED_EDGE
    else:
        lo, hi = 1.0 / 3.0, 3.0 / 7.0
    if cs2 < lo:
        return Regime.ORTHOGONAL
    if cs2 == lo:
        return Regime.RADIATION
    if cs2 < hi:
        return Regime.EXTREME_TILT_RESTRICTED
    return Regime.EXTREME_TILT_BEYOND


@dataclass(frozen=True)
class RateTable(Mapping[str, Number]):
    """Predicted exponential rates, as coefficients of H.

    A value ``c`` for key ``name`` means the quantity behaves like exp(c H t).
    """

    H: float
    coefficients: tuple

    def __getitem__(self, key: str) -> Number:
        for name, value in self.coefficients:
            if name == key:
                return value
        raise KeyError(key)

    def __iter__(self) -> Iterator[str]:
        return (name for name, _ in self.coefficients)

    def __len__(self) -> int:
        return len(self.coefficients)

    def rate(self, key: str) -> float:
        """Rate in inverse time units, coefficient times H."""
        return float(self[key]) * self.H


def rho_weight(params: SoundSpeedParams) -> Number:
    """Exponent 4 rs / (1 - 2 rs) of the renormalised density perturbation."""
    return 4 * params.rs / (1 - 2 * params.rs)


def rate_table(params: SoundSpeedParams) -> RateTable:
    cs2 = params.cs2
    w = rho_weight(params)
    entries = (
        ("v_hat", -1),
        ("rho2rs_hat", -w),
        ("k_hat", -2),
        ("n_hat", -2),
        ("e_hat", -1),
        ("gamma_hat", -1),
        ("rho_background", -2 * (1 + cs2) / (1 - cs2)),
        ("rho2rs_background", -2 * (1 + cs2) / (1 - cs2) * 2 * params.rs),
        ("rho1m2rs_background", -2),
        ("v_background", -1),
        ("tilt", params.As),
        ("u_null", params.As),
        ("tilt_homogeneous", homogeneous_tilt_rate(params)),
        ("tilt_indicator", tilt_indicator_rate(params)),
        ("G_offdiag", Fraction(-1, 2)),
        ("C0", -6),
        ("C1", -4),
    )
    return RateTable(H=params.H, coefficients=entries)


def homogeneous_tilt_rate(params: SoundSpeedParams) -> Number:
    """Growth rate of rho^{-rs} v1 for a homogeneous flow on FLRW.

    As beyond radiation; 3 cs2 - 1 below it, where the density decays like
    a^{-3(1+cs2)} and the velocity like 1/a.
    """
    if params.cs2 < (RADIATION if isinstance(params.cs2, Fraction) else 1.0 / 3.0):
        return 3 * params.cs2 - 1
    return params.As


def tilt_indicator_rate(params: SoundSpeedParams) -> Number:
    """Growth rate of e^{2Ht} rho^(2rs) for a homogeneous flow on FLRW.

    2 - w under tilt (cs2 >= 1/3); 2 - 6 cs2 below radiation, where the flow
    becomes orthogonal. The two agree at cs2 = 1/3.
    """
    if params.cs2 < (RADIATION if isinstance(params.cs2, Fraction) else 1.0 / 3.0):
        return 2 - 6 * params.cs2
    return 2 - rho_weight(params)


def weight_identity_residual(params: SoundSpeedParams) -> Number:
    """8 rs/(1-2rs) - 4 As - 4, which vanishes identically."""
    return 2 * rho_weight(params) - 4 * params.As - 4
