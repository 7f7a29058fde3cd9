"""Hatted differences, weighted energies, pointwise monitors, rate fits and limits.

Works on snapshots of both solvers: :class:`CoupledState` against a
:class:`MeanCurvature` background and :class:`FluidFieldState` against a
:class:`HomogeneousFluid` on FLRW (geometric differences are then zero).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from .background import FlrwBackground
from .einstein_euler import (ROW_E, ROW_G, ROW_K, ROW_N, ROW_R, ROW_V, CoupledState, MeanCurvature,
                             gamma_full, k_full, rhs_coupled)
from .euler_flrw import FluidFieldState, HomogeneousFluid, rhs_euler
from .params import SoundSpeedParams
from .s3_frame import space

DEFAULT_N = 3

State = Union[CoupledState, FluidFieldState]
Background = Union[MeanCurvature, HomogeneousFluid]


# ---------------------------------------------------------------------------
# hatted differences


@dataclass
class HattedFields:
    """Perturbed minus background coefficients.

    k (3, 3, nb) and gamma (3, 3, 3, nb) in full index form, e (3, 3, nb),
    n, v0, rho2rs (nb,), v (3, nb). ``v0_identity`` is the largest pointwise
    mismatch between v0 - v0~ and ((v~_C + v_C) v^_C + rho^) / (v0 + v0~),
    relative to max v0.
    """

    t: float
    L: int
    k: np.ndarray
    gamma: np.ndarray
    e: np.ndarray
    n: np.ndarray
    v0: np.ndarray
    v: np.ndarray
    rho2rs: np.ndarray
    v0_identity: float = 0.0

    @property
    def v_all(self) -> np.ndarray:
        """(v^_0, v^_1, v^_2, v^_3) stacked, shape (4, nb)."""
        return np.concatenate([self.v0[None], self.v], axis=0)


def _fluid_arrays(state: State) -> Tuple[np.ndarray, np.ndarray]:
    f = state.fluid if isinstance(state, CoupledState) else state
    return f.v, f.rho2rs


def background_state(background: Background, t: float, L: int) -> State:
    """The background as a state of the matching solver at time t."""
    if isinstance(background, MeanCurvature):
        return CoupledState.unpack(t, background.state_array(t, L), L)
    if isinstance(background, HomogeneousFluid):
        return background.state(t, L)
    raise TypeError(f"unsupported background {type(background).__name__}")


def hatted(state: State, background: Union[Background, State], t: Optional[float] = None) -> HattedFields:
    """Differences of state and background at time t (default state.t)."""
    t = state.t if t is None else float(t)
    L = state.L
    S = space(L)
    ref = background if isinstance(background, (CoupledState, FluidFieldState)) else background_state(background, t, L)
    if type(ref) is not type(state):
        raise TypeError("state and background belong to different solvers")
    if ref.L != L:
        raise ValueError(f"band limits differ: {L} vs {ref.L}")
    nb = S.nb
    if isinstance(state, CoupledState):
        d = state.pack() - ref.pack()
        k = k_full(d[ROW_K:ROW_G])
        gam = gamma_full(d[ROW_G:ROW_E])
        e = d[ROW_E:ROW_N].reshape(3, 3, nb)
        n = d[ROW_N]
    else:
        k = np.zeros((3, 3, nb))
        gam = np.zeros((3, 3, 3, nb))
        e = np.zeros((3, 3, nb))
        n = np.zeros(nb)
    v, r2 = _fluid_arrays(state)
    vb, r2b = _fluid_arrays(ref)
    vh, r2h = v - vb, r2 - r2b

    # v0 by subtraction on the grid, and the same quantity from the identity
    gv, gr = S.synthesize(v, dealias=True), S.synthesize(r2, dealias=True)
    gvb, grb = S.synthesize(vb, dealias=True), S.synthesize(r2b, dealias=True)
    v0 = np.sqrt(np.einsum("ip,ip->p", gv, gv) + gr)
    v0b = np.sqrt(np.einsum("ip,ip->p", gvb, gvb) + grb)
    sub = v0 - v0b
    ident = (np.einsum("ip,ip->p", gvb + gv, gv - gvb) + (gr - grb)) / (v0 + v0b)
    mismatch = float(np.max(np.abs(sub - ident)) / np.max(v0))
    return HattedFields(t=t, L=L, k=k, gamma=gam, e=e, n=n, v0=S.analyze(ident, dealias=True), v=vh,
                        rho2rs=r2h, v0_identity=mismatch)


# ---------------------------------------------------------------------------
# norms and energies


def norm_sq(coeffs: np.ndarray, L: int, M: int = 0, top_only: bool = False) -> float:
    """Sum over leading components of the squared H^M norm (or order-M piece only)."""
    S = space(L)
    c = np.asarray(coeffs).reshape(-1, S.nb)
    if L == 0:
        # constants: every derivative vanishes
        return float(np.sum(c * c)) if (M == 0 or not top_only) else 0.0
    return float(np.sum(S.sobolev_sq(c, M, homogeneous=top_only)))


def hatted_norms(h: HattedFields, M: int = 0) -> Dict[str, float]:
    """H^M norms of each hatted family (v includes v^_0)."""
    out = {name: math.sqrt(norm_sq(getattr(h, name), h.L, M))
           for name in ("k", "gamma", "e", "n", "v0", "v", "rho2rs")}
    out["v_all"] = math.sqrt(norm_sq(h.v_all, h.L, M))
    return out


@dataclass
class EnergyReport:
    t: float
    N: int
    E_geom: float
    E_fluid_low: float
    E_fluid_top: float

    @property
    def E_tot(self) -> float:
        return self.E_geom + self.E_fluid_low + self.E_fluid_top

    def as_dict(self) -> Dict[str, float]:
        return {"t": self.t, "N": self.N, "E_geom": self.E_geom, "E_fluid_low": self.E_fluid_low,
                "E_fluid_top": self.E_fluid_top, "E_tot": self.E_tot}


def energies(h: HattedFields, params: SoundSpeedParams, t: Optional[float] = None, N: int = DEFAULT_N) -> EnergyReport:
    """Weighted geometric, low-order fluid and top-order fluid energies."""
    if N < 2:
        raise ValueError("N must be at least 2")
    t = h.t if t is None else float(t)
    H = float(params.H)
    rs = float(params.rs)
    As = float(params.As)
    L = h.L
    wr = 8.0 * rs / (1.0 - 2.0 * rs)
    geom = (math.exp(2 * H * t) * (norm_sq(h.gamma, L, N) + norm_sq(h.e, L, N) + norm_sq(h.k, L, N))
            + math.exp(3 * H * t) * norm_sq(h.n, L, N))
    low = (math.exp(2 * H * t) * norm_sq(h.v_all, L, N - 1)
           + math.exp(wr * H * t) * norm_sq(h.rho2rs, L, N - 2))
    top = math.exp(-4 * As * H * t) * (
        math.exp(2 * H * t) * norm_sq(h.v_all, L, N, top_only=True)
        + math.exp(wr * H * t) * (norm_sq(h.rho2rs, L, N, top_only=True)
                                  + norm_sq(h.rho2rs, L, N - 1, top_only=True)))
    return EnergyReport(t=t, N=N, E_geom=geom, E_fluid_low=low, E_fluid_top=top)


def energy_growth_integral(t0: float, t: np.ndarray, params: SoundSpeedParams) -> np.ndarray:
    """Integral over [t0, t] of e^{-H s/2} + e^{(2 - 4rs/(1-2rs)) H s} + e^{(2As - 1) H s}."""
    H = float(params.H)
    rs = float(params.rs)
    rates = (-0.5, 2.0 - 4.0 * rs / (1.0 - 2.0 * rs), 2.0 * float(params.As) - 1.0)
    t = np.asarray(t, dtype=float)
    total = np.zeros_like(t)
    for a in rates:
        if abs(a) < 1e-14:
            total += t - t0
        else:
            total += (np.exp(a * H * t) - np.exp(a * H * t0)) / (a * H)
    return total


def energy_growth_constant(times: Sequence[float], E_tot: Sequence[float], params: SoundSpeedParams) -> float:
    """Smallest C with log E(t) - log E(t0) <= C * integral, over the samples."""
    t = np.asarray(times, dtype=float)
    E = np.asarray(E_tot, dtype=float)
    I = energy_growth_integral(t[0], t[1:], params)
    growth = np.log(E[1:] / E[0])
    mask = I > 0
    if not mask.any():
        return 0.0
    return float(max(0.0, np.max(growth[mask] / I[mask])))


# ---------------------------------------------------------------------------
# pointwise monitors


def background_asymptotics(background: Background) -> Tuple[float, float]:
    """(v0~^inf, (rho~^inf)^(2rs)): limits of e^{Ht} v0~ and e^{4rs/(1-2rs) Ht} rho~^(2rs)."""
    params = background.params
    H = float(params.H)
    rs = float(params.rs)
    w = 4.0 * rs / (1.0 - 2.0 * rs)
    if isinstance(background, MeanCurvature):
        t = background.trajectory.t_max
        y = background.state_array(t, 0)[:, 0] / space(0).constant(1.0)[0]
        v1, r2 = y[ROW_V], y[ROW_R]
    else:
        # e^{-2Ht} corrections are below rounding here
        t = 20.0 / H
        v1, _, r2 = background.at(t)
    v0 = math.sqrt(v1 * v1 + r2)
    return v0 * math.exp(H * t), r2 * math.exp(w * H * t)


@dataclass
class PointwiseMonitors:
    """Sup-norm diagnostics, each normalised so that it stays bounded.

    inv_v0: sup |1/v0 - e^{Ht}/v0~inf| e^{-Ht}
    ratio: sup |rho^2rs / v0^2 - c e^{(2 - w) Ht}| e^{-(2 - w) Ht}, c = r2inf / v0inf^2
    dlog_v0: sup |d/dt log v0 + H|
    dlog_rho: sup |d/dt log rho + 2H / (1 - 2rs)|
    """

    t: float
    inv_v0: float
    ratio: float
    dlog_v0: float
    dlog_rho: float


def _fluid_time_rates(state: State, background, params: SoundSpeedParams):
    if isinstance(state, CoupledState):
        r = rhs_coupled(state.t, state.pack(), background, params, L=state.L)
        return r[ROW_V:ROW_R], r[ROW_R]
    bg = background.bg if isinstance(background, HomogeneousFluid) else background
    r = rhs_euler(state.t, state.pack(), bg, params, L=state.L)
    return r[:3], r[3]


def pointwise_monitors(state: State, background: Union[Background, FlrwBackground], params: SoundSpeedParams,
                       t: Optional[float] = None, asymptotics: Optional[Tuple[float, float]] = None
                       ) -> PointwiseMonitors:
    """Time derivatives come from the evolution equations, not finite differences."""
    t = state.t if t is None else float(t)
    S = space(state.L)
    H = float(params.H)
    rs = float(params.rs)
    w = 4.0 * rs / (1.0 - 2.0 * rs)
    v, r2 = _fluid_arrays(state)
    gv, gr = S.synthesize(v, dealias=True), S.synthesize(r2, dealias=True)
    if gr.min() <= 0:
        raise ValueError("rho^(2rs) non-positive")
    v0sq = np.einsum("ip,ip->p", gv, gv) + gr
    v0 = np.sqrt(v0sq)
    dv, dr2 = _fluid_time_rates(state, background, params)
    gdv, gdr = S.synthesize(dv, dealias=True), S.synthesize(dr2, dealias=True)
    dlog_v0 = (np.einsum("ip,ip->p", gv, gdv) + 0.5 * gdr) / v0sq
    dlog_rho = gdr / (2.0 * rs * gr)
    if asymptotics is None:
        if isinstance(background, FlrwBackground):
            raise ValueError("asymptotics required with a bare FLRW background")
        asymptotics = background_asymptotics(background)
    v0inf, r2inf = asymptotics
    e = math.exp(H * t)
    q = math.exp((2.0 - w) * H * t)
    return PointwiseMonitors(
        t=t,
        inv_v0=float(np.max(np.abs(1.0 / v0 - e / v0inf)) / e),
        ratio=float(np.max(np.abs(gr / v0sq - r2inf / v0inf**2 * q)) / q),
        dlog_v0=float(np.max(np.abs(dlog_v0 + H))),
        dlog_rho=float(np.max(np.abs(dlog_rho + 2.0 * H / (1.0 - 2.0 * rs)))),
    )


# ---------------------------------------------------------------------------
# extreme tilt


@dataclass
class ExtremeTilt:
    """e^{2Ht} rho^(2rs) as coefficients and on the grid, plus the null defect.

    null_defect = sup (u0^2 - u_I u_I) / u0^2 = sup rho^(2rs) / v0^2, which
    decays like e^{-2 As H t} under extreme tilt; ``normalised`` multiplies
    it by e^{2 As H t}. An orthogonal fluid has null_defect = 1.
    """

    t: float
    field: np.ndarray
    values: np.ndarray
    null_defect: float
    normalised: float

    @property
    def sup(self) -> float:
        return float(np.max(self.values))

    @property
    def tilted(self) -> bool:
        # velocity nearer the light cone than the rest direction
        return self.null_defect < 0.5


def extreme_tilt_indicator(state: State, params: SoundSpeedParams, t: Optional[float] = None) -> ExtremeTilt:
    t = state.t if t is None else float(t)
    S = space(state.L)
    H = float(params.H)
    v, r2 = _fluid_arrays(state)
    gv, gr = S.synthesize(v, dealias=True), S.synthesize(r2, dealias=True)
    if not np.all(gr > 0):
        raise ValueError("extreme tilt indicator undefined where the density vanishes")
    v0sq = np.einsum("ip,ip->p", gv, gv) + gr
    defect = float(np.max(gr / v0sq))
    scale = math.exp(2.0 * H * t)
    return ExtremeTilt(t=t, field=scale * np.asarray(r2), values=scale * gr, null_defect=defect,
                       normalised=defect * math.exp(2.0 * float(params.As) * H * t))


def final_efold_drift(times: Sequence[float], values: Sequence[float], H: float = 1.0) -> float:
    """|X(t_end) - X(t_end - 1/H)| / |X(t_end)| by linear interpolation."""
    t = np.asarray(times, dtype=float)
    x = np.asarray(values, dtype=float)
    t0 = t[-1] - 1.0 / H
    if t0 < t[0]:
        raise ValueError("series shorter than one e-fold")
    x0 = np.interp(t0, t, x)
    return float(abs(x[-1] - x0) / abs(x[-1]))


# ---------------------------------------------------------------------------
# rate fits


@dataclass
class RateFit:
    exponent: float      # units of H
    intercept: float     # log value at t = 0
    residual: float      # rms of log residuals
    window: Tuple[float, float]
    samples: int

    def acceptance_grade(self, H: float = 1.0) -> bool:
        """Window at least 2/H long."""
        return (self.window[1] - self.window[0]) * H >= 2.0 - 1e-12

    def deviation(self, target: float) -> float:
        """Relative deviation from a target exponent."""
        return abs(self.exponent - target) / abs(target) if target else abs(self.exponent)


def fit_rate(times: Sequence[float], values: Sequence[float], window: Optional[Tuple[float, float]] = None,
             H: float = 1.0, min_samples: int = 10) -> RateFit:
    """Least squares of log(value) against t on the window."""
    t = np.asarray(times, dtype=float)
    x = np.asarray(values, dtype=float)
    if window is None:
        window = (float(t[0]), float(t[-1]))
    m = (t >= window[0] - 1e-12) & (t <= window[1] + 1e-12)
    if m.sum() < min_samples:
        raise ValueError(f"need at least {min_samples} samples in window {window}, got {int(m.sum())}")
    tm, xm = t[m], x[m]
    if np.any(~(xm > 0)):
        raise ValueError("values must be positive on the fit window")
    A = np.stack([tm, np.ones_like(tm)], axis=1)
    y = np.log(xm)
    (slope, icpt), *_ = np.linalg.lstsq(A, y, rcond=None)
    res = y - A @ np.array([slope, icpt])
    return RateFit(exponent=float(slope / H), intercept=float(icpt), residual=float(np.sqrt(np.mean(res**2))),
                   window=(float(window[0]), float(window[1])), samples=int(m.sum()))


# ---------------------------------------------------------------------------
# asymptotic limits


@dataclass
class AsymptoticLimits:
    """Limit fields on the dealiasing grid.

    e (3, 3, P) or None for Euler runs, v (4, P) = v_mu^inf, rho2rs (P,),
    with their hatted counterparts when a background was given. Derived:
    rho, u (4, P) and the metric g (3, 3, P). ``drift`` is the relative change
    of the renormalised fields over the final e-fold.
    """

    t_window: Tuple[float, float]
    v: np.ndarray
    rho2rs: np.ndarray
    rho: np.ndarray
    u: np.ndarray
    e: Optional[np.ndarray] = None
    g: Optional[np.ndarray] = None
    v_hat: Optional[np.ndarray] = None
    rho2rs_hat: Optional[np.ndarray] = None
    e_hat: Optional[np.ndarray] = None
    drift: Dict[str, float] = field(default_factory=dict)

    @property
    def converged(self) -> bool:
        return all(d < 5e-3 for d in self.drift.values())

    @property
    def null_defect(self) -> float:
        """sup |(u0^inf)^2 - u_I^inf u_I^inf| / sup (u0^inf)^2."""
        u0sq = self.u[0] ** 2
        return float(np.max(np.abs(u0sq - np.sum(self.u[1:] ** 2, axis=0))) / np.max(u0sq))


def _renormalised(state: State, params: SoundSpeedParams):
    S = space(state.L)
    H = float(params.H)
    rs = float(params.rs)
    w = 4.0 * rs / (1.0 - 2.0 * rs)
    v, r2 = _fluid_arrays(state)
    gv, gr = S.synthesize(v, dealias=True), S.synthesize(r2, dealias=True)
    v0 = np.sqrt(np.einsum("ip,ip->p", gv, gv) + gr)
    eH = math.exp(H * state.t)
    out = {"v": eH * np.concatenate([v0[None], gv]), "rho2rs": math.exp(w * H * state.t) * gr}
    if isinstance(state, CoupledState):
        out["e"] = eH * S.synthesize(state.geometric.e, dealias=True)
    return out


def limits(times: Sequence[float], snapshots: Sequence[State], params: SoundSpeedParams,
           background: Optional[Background] = None) -> AsymptoticLimits:
    """Average the renormalised fields over the final e-fold, weight e^{H(t - t_end)}."""
    H = float(params.H)
    t = np.asarray(times, dtype=float)
    t_end = t[-1]
    idx = [j for j in range(len(t)) if t[j] >= t_end - 1.0 / H - 1e-9]
    if t[idx[0]] > t_end - 1.0 / H + 1e-6 or len(idx) < 3:
        raise ValueError("limits need at least one e-fold of samples")
    weights = np.exp(H * (t[idx] - t_end))
    weights /= weights.sum()

    def average(snaps_fields):
        keys = snaps_fields[0].keys()
        return {k: sum(w * f[k] for w, f in zip(weights, snaps_fields)) for k in keys}

    full = [_renormalised(snapshots[j], params) for j in idx]
    avg = average(full)
    drift = {k: float(np.max(np.abs(full[-1][k] - full[0][k])) / np.max(np.abs(full[-1][k]))) for k in avg}
    hat = {}
    if background is not None:
        refs = [_renormalised(background_state(background, t[j], snapshots[j].L), params) for j in idx]
        diff = [{k: f[k] - r[k] for k in f} for f, r in zip(full, refs)]
        hat = average(diff)
    rs = float(params.rs)
    r2 = avg["rho2rs"]
    if np.any(r2 <= 0):
        raise ValueError("density limit non-positive")
    u = np.sqrt(r2) * avg["v"]
    e = avg.get("e")
    g = None
    if e is not None:
        Om = np.linalg.inv(np.moveaxis(e, -1, 0))      # (P, i, C) with Om[i, C] e[C, b] = delta_i^b
        g = np.moveaxis(np.einsum("piC,pjC->pij", Om, Om), 0, -1)
    return AsymptoticLimits(t_window=(float(t[idx[0]]), float(t_end)), v=avg["v"], rho2rs=r2,
                            rho=r2 ** (1.0 / (2.0 * rs)), u=u, e=e, g=g, v_hat=hat.get("v"),
                            rho2rs_hat=hat.get("rho2rs"), e_hat=hat.get("e"), drift=drift)


# ---------------------------------------------------------------------------
# top order probe


def top_order_series(hats: Sequence[HattedFields], params: SoundSpeedParams, N: int = DEFAULT_N
                     ) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(t, e^{Ht} |v^|_{dot H^N}, e^{(1 - 2As) Ht} |v^|_{dot H^N}) along a run."""
    H = float(params.H)
    As = float(params.As)
    t = np.array([h.t for h in hats])
    top = np.array([math.sqrt(norm_sq(h.v_all, h.L, N, top_only=True)) for h in hats])
    return t, np.exp(H * t) * top, np.exp((1.0 - 2.0 * As) * H * t) * top


@dataclass
class TopOrderReport:
    """Exploratory verdict on the top-order velocity norm; never a pass/fail gate."""

    cs2: float
    N: int
    exponents: Dict[int, float]          # fitted exponent of e^{Ht}|v^|_{dot H^N} per band limit
    proven_exponents: Dict[int, float]   # same for the weight e^{(1-2As)Ht}
    growth: Dict[int, float]             # max over run / initial value
    verdict: str
    spread: float                        # max - min exponent across band limits

    def as_dict(self) -> dict:
        return {"cs2": self.cs2, "N": self.N, "exponents": self.exponents,
                "proven_exponents": self.proven_exponents, "growth": self.growth, "verdict": self.verdict,
                "L_spread": self.spread}


def top_order_probe(runs: Mapping[int, Sequence[HattedFields]], params: SoundSpeedParams, N: int = DEFAULT_N,
                    window: Optional[Tuple[float, float]] = None, tolerance: float = 0.1) -> TopOrderReport:
    """Fit e^{Ht}|v^|_{dot H^N} on each band limit's run and compare.

    Verdict "bounded" when every fitted exponent is <= tolerance, "growing"
    when every one exceeds it, otherwise "inconclusive".
    """
    H = float(params.H)
    ex, pex, grow = {}, {}, {}
    for L, hats in sorted(runs.items()):
        t, s, p = top_order_series(hats, params, N)
        win = window or (float(t[0] + 0.5 * (t[-1] - t[0])), float(t[-1]))
        ex[L] = fit_rate(t, s, win, H=H).exponent
        pex[L] = fit_rate(t, p, win, H=H).exponent
        grow[L] = float(np.max(s) / s[0])
    vals = list(ex.values())
    if all(x <= tolerance for x in vals):
        verdict = "bounded"
    elif all(x > tolerance for x in vals):
        verdict = "growing"
    else:
        verdict = "inconclusive"
    return TopOrderReport(cs2=float(params.cs2), N=N, exponents=ex, proven_exponents=pex, growth=grow,
                          verdict=verdict, spread=float(max(vals) - min(vals)))


__all__ = [
    "HattedFields", "hatted", "background_state", "norm_sq", "hatted_norms", "EnergyReport", "energies",
    "energy_growth_integral", "energy_growth_constant", "background_asymptotics", "PointwiseMonitors",
    "pointwise_monitors", "ExtremeTilt", "extreme_tilt_indicator", "final_efold_drift", "RateFit", "fit_rate",
    "AsymptoticLimits", "limits", "top_order_series", "TopOrderReport", "top_order_probe", "DEFAULT_N",
]
