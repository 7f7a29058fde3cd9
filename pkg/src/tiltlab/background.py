"""Homogeneous tilted backgrounds on S^3, the closed FLRW scale factor and
closed-form homogeneous Euler flows.

The background is evolved in orthonormal-frame variables. The frame is
e_1 = e11 Y_1, e_2 = e22 Y_2 + e23 Y_3, e_3 = e32 Y_2 + e33 Y_3 and the state
vector holds, in this order,

    k11 k22 k33 k23 | g221 g123 g231 g312 | e11 e22 e33 e32 e23 | v1 P

where g_IJB are the connection coefficients (g331 = -g221 is implied),
v1 = rho^rs u_1 is the renormalised tilt and P = rho^(1 - 2 rs). The remaining
fluid quantities follow from v0 = sqrt(v1^2 + rho^(2 rs)) > 0.

Solutions are constructed from data at t = +infinity: a truncated expansion is
evaluated at a late time t_start, the two constraints are solved there by
Newton's method, and the system is integrated backwards. Off the constraint
surface the backwards flow is unstable (the trace mode grows like
exp(6 H (t_start - t))), so by default the state is projected back onto the
constraint surface after every accepted step and the size of each correction
is recorded as the constraint monitor.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields
from typing import Callable, Optional, Sequence, Tuple

import numpy as np
from scipy.integrate import DOP853
from scipy.optimize import brentq

from .params import SoundSpeedParams

NAMES = (
    "k11", "k22", "k33", "k23",
    "g221", "g123", "g231", "g312",
    "e11", "e22", "e33", "e32", "e23",
    "v1", "P",
)
IDX = {name: i for i, name in enumerate(NAMES)}
NVAR = len(NAMES)

EPS = np.finfo(float).eps


class BackgroundError(RuntimeError):
    pass


class RegimeExit(BackgroundError):
    """The state left the physical region (rho <= 0 or a degenerate frame)."""


class ConstraintSolveError(BackgroundError):
    def __init__(self, message: str, residuals: Tuple[float, float]):
        super().__init__(f"{message}; final residuals C0={residuals[0]:.3e}, C1={residuals[1]:.3e}")
        self.residuals = residuals


# ---------------------------------------------------------------------------
# state containers


@dataclass(frozen=True)
class BackgroundReducedState:
    """Homogeneous reduced variables at one instant."""

    k11: float
    k22: float
    k33: float
    k23: float
    g221: float
    g123: float
    g231: float
    g312: float
    e11: float
    e22: float
    e33: float
    e32: float
    e23: float
    v1: float
    P: float
    t: float = 0.0
    rs: float = 0.25

    @classmethod
    def from_array(cls, y: Sequence[float], t: float, params: SoundSpeedParams) -> "BackgroundReducedState":
        y = [float(x) for x in y]
        return cls(*y, t=float(t), rs=float(params.rs))

    def to_array(self) -> np.ndarray:
        return np.array([getattr(self, n) for n in NAMES])

    @property
    def g331(self) -> float:
        return -self.g221

    @property
    def trk(self) -> float:
        return self.k11 + self.k22 + self.k33

    @property
    def rho(self) -> float:
        return self.P ** (1.0 / (1.0 - 2.0 * self.rs)) if self.P > 0 else 0.0

    @property
    def rho2rs(self) -> float:
        return self.P ** (2.0 * self.rs / (1.0 - 2.0 * self.rs)) if self.P > 0 else 0.0

    @property
    def v0(self) -> float:
        return math.sqrt(self.v1 * self.v1 + self.rho2rs)

    def k_matrix(self) -> np.ndarray:
        return np.array([[self.k11, 0.0, 0.0], [0.0, self.k22, self.k23], [0.0, self.k23, self.k33]])

    def frame_matrix(self) -> np.ndarray:
        """Rows are frame vectors e_I in components along Y_i."""
        return np.array([[self.e11, 0.0, 0.0], [0.0, self.e22, self.e23], [0.0, self.e32, self.e33]])

    def gamma_tensor(self) -> np.ndarray:
        return gamma_tensor(self.g221, self.g123, self.g231, self.g312)


def gamma_tensor(g221: float, g123: float, g231: float, g312: float) -> np.ndarray:
    """Full gamma_IJB (antisymmetric in J, B) of a homogeneous state."""
    G = np.zeros((3, 3, 3))

    def put(I, J, B, val):
        G[I - 1, J - 1, B - 1] = val
        G[I - 1, B - 1, J - 1] = -val

    put(2, 2, 1, g221)
    put(3, 3, 1, -g221)
    put(1, 2, 3, g123)
    put(2, 3, 1, g231)
    put(3, 1, 2, g312)
    return G


def _fluid_powers(P: float, rs: float) -> Tuple[float, float]:
    """(rho, rho^(2 rs)) from P = rho^(1 - 2 rs); vacuum when P == 0."""
    if P == 0.0:
        return 0.0, 0.0
    if P < 0.0:
        raise RegimeExit(f"negative density power P={P!r}")
    q = 1.0 - 2.0 * rs
    return P ** (1.0 / q), P ** (2.0 * rs / q)


# ---------------------------------------------------------------------------
# equations


def rhs_array(t: float, y, cs2: float, rs: float, Lam: float) -> np.ndarray:
    (k11, k22, k33, k23, g221, g123, g231, g312,
     e11, e22, e33, e32, e23, v1, P) = (y.tolist() if isinstance(y, np.ndarray) else y)
    rho, r2 = _fluid_powers(P, rs)
    trk = k11 + k22 + k33
    iso = Lam + 0.5 * (1.0 - cs2) * rho
    dk11 = trk * k11 - 2.0 * g221 * g221 + 2.0 * g231 * g312 - iso - (1.0 + cs2) * P * v1 * v1
    dk22 = trk * k22 + 2.0 * g123 * g312 - iso
    dk33 = trk * k33 + 2.0 * g231 * g123 - iso
    dk23 = trk * k23 + 2.0 * g123 * g221
    dg221 = k11 * g221 - k23 * (2.0 * g123 + g231 + g312)
    dg123 = k11 * g123 + (k11 - k22) * g312 + (k11 - k33) * g231 - 2.0 * k23 * g221
    dg231 = k22 * g231 + (k22 - k33) * g123 + (k22 - k11) * g312
    dg312 = k33 * g312 + (k33 - k11) * g231 + (k33 - k22) * g123
    de11 = k11 * e11
    de22 = k22 * e22 + k23 * e32
    de33 = k33 * e33 + k23 * e23
    de32 = k33 * e32 + k23 * e22
    de23 = k22 * e23 + k23 * e33
    dv1 = k11 * v1
    if P > 0.0:
        v0sq = v1 * v1 + r2
        dlogrho = (trk - k11 * v1 * v1 / v0sq) / (1.0 - 2.0 * rs + rs * r2 / v0sq)
        dP = (1.0 - 2.0 * rs) * dlogrho * P
    else:
        dP = 0.0
    return np.array([dk11, dk22, dk33, dk23, dg221, dg123, dg231, dg312,
                     de11, de22, de33, de32, de23, dv1, dP])


def rhs_background(t: float, state, params: SoundSpeedParams):
    """Time derivative of the background state.

    Accepts a :class:`BackgroundReducedState` (returns the same type, holding
    derivatives) or a flat array (returns an array).
    """
    cs2, rs, Lam = float(params.cs2), float(params.rs), float(params.Lambda)
    if isinstance(state, BackgroundReducedState):
        d = rhs_array(t, state.to_array(), cs2, rs, Lam)
        return BackgroundReducedState.from_array(d, t, params)
    return rhs_array(t, np.asarray(state, dtype=float), cs2, rs, Lam)


def _constraint_terms(y, cs2: float, rs: float, Lam: float):
    (k11, k22, k33, k23, g221, g123, g231, g312, *_rest, v1, P) = (y.tolist() if isinstance(y, np.ndarray) else list(y))
    rho, r2 = _fluid_powers(P, rs)
    v0sq = v1 * v1 + r2
    trk = k11 + k22 + k33
    c0 = (k11 * k11, k22 * k22, k33 * k33, 2.0 * k23 * k23, -trk * trk, 2.0 * Lam,
          2.0 * (1.0 + cs2) * P * v0sq, -2.0 * cs2 * rho,
          -2.0 * g231 * g123, -2.0 * g123 * g312, -2.0 * g312 * g231,
          g221 * g221 + g221 * g221)
    c1 = ((k22 - k11) * g221, (k33 - k11) * (-g221), -k23 * (g312 - g231),
          (1.0 + cs2) * P * math.sqrt(v0sq) * v1)
    return c0, c1


def constraint_monitor(state, params: SoundSpeedParams) -> Tuple[float, float]:
    """Hamiltonian and momentum constraint residuals (C0, C1)."""
    y = state.to_array() if isinstance(state, BackgroundReducedState) else state
    c0, c1 = _constraint_terms(y, float(params.cs2), float(params.rs), float(params.Lambda))
    return math.fsum(c0), math.fsum(c1)


def constraint_floor(state, params: SoundSpeedParams) -> Tuple[float, float]:
    """Rounding-level size of (C0, C1): a few ulps of the sum of |terms|.

    Residuals below these values are indistinguishable from zero in double
    precision.
    """
    y = state.to_array() if isinstance(state, BackgroundReducedState) else state
    c0, c1 = _constraint_terms(y, float(params.cs2), float(params.rs), float(params.Lambda))
    return 8.0 * EPS * sum(abs(x) for x in c0), 8.0 * EPS * sum(abs(x) for x in c1)


def solve_constraints_at(state, params: SoundSpeedParams, maxiter: int = 60):
    """Solve C0 = C1 = 0 by damped Newton, moving only the trace of k and k23.

    C1 is linear in k23 with slope -(g312 - g231); C0 is quadratic in the
    uniform shift s of k11, k22, k33 with slope -4 tr k. Returns the same type
    as given.
    """
    is_state = isinstance(state, BackgroundReducedState)
    y = state.to_array() if is_state else np.array(state, dtype=float)
    cs2, rs, Lam = float(params.cs2), float(params.rs), float(params.Lambda)

    def resid(z):
        c0, c1 = _constraint_terms(z, cs2, rs, Lam)
        return math.fsum(c0), math.fsum(c1), 8 * EPS * sum(map(abs, c0)), 8 * EPS * sum(map(abs, c1))

    C0, C1, f0, f1 = resid(y)
    if abs(C0) <= f0 and abs(C1) <= f1:
        return state
    z = y.copy()
    for _ in range(maxiter):
        k23 = z[3]
        trk = z[0] + z[1] + z[2]
        slope1 = -(z[7] - z[6])
        if abs(slope1) > 1e3 * EPS * (abs(z[7]) + abs(z[6])) and abs(C1) > f1:
            dq = -C1 / slope1
        else:
            dq = 0.0
            if abs(C1) > f1:
                raise ConstraintSolveError("momentum constraint is insensitive to k23", (C0, C1))
        # C0 after the k23 move, then a Newton step on the trace shift
        C0q = C0 + 2.0 * ((k23 + dq) ** 2 - k23 ** 2)
        slope0 = -4.0 * trk
        ds = -C0q / slope0
        lam = 1.0
        base = max(abs(C0) / max(f0, 1e-300), abs(C1) / max(f1, 1e-300))
        while True:
            trial = z.copy()
            trial[0:3] += lam * ds
            trial[3] += lam * dq
            T0, T1, g0, g1 = resid(trial)
            new = max(abs(T0) / max(g0, 1e-300), abs(T1) / max(g1, 1e-300))
            if new < base or lam < 1e-4:
                break
            lam *= 0.5
        step = max(abs(lam * ds), abs(lam * dq))
        z = trial
        C0, C1, f0, f1 = T0, T1, g0, g1
        if abs(C0) <= f0 and abs(C1) <= f1:
            break
        if step <= 2 * EPS * max(abs(trk), abs(k23), 1e-300) and new <= 64:
            break
    else:
        raise ConstraintSolveError("Newton iteration did not converge", (C0, C1))
    if is_state:
        return BackgroundReducedState.from_array(z, state.t, params)
    return z


# ---------------------------------------------------------------------------
# data at infinity


@dataclass(frozen=True)
class AsymptoticData:
    """Leading coefficients of the background at t = +infinity.

    G_inf are the coefficients of G_I ~ G_inf_I e^{Ht}; v1_inf and P_inf are
    the coefficients of v1 ~ v1_inf e^{-Ht} and rho^(1-2rs) ~ P_inf e^{-2Ht}.
    ``k23_inf`` left as None is fixed by the leading-order momentum balance.
    P_inf = 0 gives vacuum.
    """

    G_inf: Tuple[float, float, float] = (0.5, 0.5, 0.5)
    k_inf3: Tuple[float, float, float] = (0.0, 0.0, 0.0)
    k23_inf: Optional[float] = None
    v1_inf: float = 0.0
    P_inf: float = 0.0

    def __post_init__(self):
        if len(self.G_inf) != 3 or min(self.G_inf) <= 0:
            raise ValueError(f"G_inf must be three positive numbers, got {self.G_inf!r}")
        if not self.P_inf >= 0:
            raise ValueError(f"P_inf must be non-negative, got {self.P_inf!r}")

    @classmethod
    def de_sitter(cls, H: float = 1.0) -> "AsymptoticData":
        g = 1.0 / (2.0 * H)
        return cls(G_inf=(g, g, g))

    def e_inf(self) -> Tuple[float, float, float]:
        return tuple(1.0 / g for g in self.G_inf)

    def gamma_inf(self) -> Tuple[float, float, float]:
        """(g123, g231, g312) leading coefficients."""
        G1, G2, G3 = self.G_inf
        pref = 1.0 / (G1 * G2 * G3)
        return (pref * (G3**2 - G1**2 + G2**2),
                pref * (G3**2 - G2**2 + G1**2),
                pref * (G1**2 - G3**2 + G2**2))

    def v0_inf(self) -> float:
        return abs(self.v1_inf)

    def momentum_k23(self, params: SoundSpeedParams) -> float:
        """k23 coefficient balancing the momentum constraint at leading order."""
        _, g231, g312 = self.gamma_inf()
        src = (1.0 + float(params.cs2)) * self.P_inf * self.v0_inf() * self.v1_inf
        if src == 0.0:
            return 0.0
        den = g312 - g231
        if den == 0.0:
            raise ValueError("momentum constraint cannot be balanced when G_inf_2 == G_inf_3")
        return src / den


def build_initial_state(data: AsymptoticData, params: SoundSpeedParams, t_start: float,
                        min_decay: float = 1e-4) -> BackgroundReducedState:
    """Evaluate the late-time expansion at t_start.

    Kept: k = -H + r e^{-2Ht} + k^{inf,3} e^{-3Ht} with r forced by the
    leading connection products; g, e, v1 to relative order e^{-2Ht};
    g221, e32, e23 at their forced order e^{-4Ht}; P from the late-time
    conservation law including the e^{-2Ht} trace correction.
    """
    H = float(params.H)
    if math.exp(-2.0 * H * t_start) >= min_decay:
        raise ValueError(f"t_start={t_start} too early: exp(-2 H t_start) >= {min_decay}")
    rs = float(params.rs)
    g123, g231, g312 = data.gamma_inf()
    e1, e2, e3 = data.e_inf()
    # forced e^{-2Ht} mean curvature: H r_I + H tr r = S_I
    S = np.array([2.0 * g231 * g312, 2.0 * g123 * g312, 2.0 * g231 * g123])
    trr = S.sum() / (4.0 * H)
    r = (S - H * trr) / H
    k23c = data.momentum_k23(params) if data.k23_inf is None else float(data.k23_inf)

    x = math.exp(-H * t_start)
    x2 = x * x
    k = -H + r * x2 + np.asarray(data.k_inf3, dtype=float) * x2 * x
    k23 = k23c * x2 * x
    # cubic corrections of the connection and frame, forced by r
    c123 = -(r[0] * g123 + (r[0] - r[1]) * g312 + (r[0] - r[2]) * g231) / (2.0 * H)
    c231 = -(r[1] * g231 + (r[1] - r[2]) * g123 + (r[1] - r[0]) * g312) / (2.0 * H)
    c312 = -(r[2] * g312 + (r[2] - r[0]) * g231 + (r[2] - r[1]) * g123) / (2.0 * H)
    G123 = g123 * x + c123 * x2 * x
    G231 = g231 * x + c231 * x2 * x
    G312 = g312 * x + c312 * x2 * x
    E = [e * x * (1.0 - ri * x2 / (2.0 * H)) for e, ri in zip((e1, e2, e3), r)]
    # quartic terms driven by k23
    x4 = x2 * x2
    g221 = k23c * (2.0 * g123 + g231 + g312) / (3.0 * H) * x4
    e32 = -k23c * e2 / (3.0 * H) * x4
    e23 = -k23c * e3 / (3.0 * H) * x4
    v1 = data.v1_inf * x * (1.0 - r[0] * x2 / (2.0 * H))
    if data.P_inf > 0:
        target = data.P_inf * data.v0_inf() * x2 * x * (1.0 - trr * x2 / (2.0 * H))
        q = 2.0 * rs / (1.0 - 2.0 * rs)
        if data.v1_inf != 0.0:
            P = _solve_density(lambda p: p * math.sqrt(v1 * v1 + p**q), target, data.P_inf * x2)
        else:
            # untilted fluid: P_inf multiplies exp(-3 H t (1 - 2rs)/(1 - rs))
            P = data.P_inf * math.exp(-3.0 * H * t_start * (1.0 - 2.0 * rs) / (1.0 - rs))
    else:
        P = 0.0
    y = np.array([k[0], k[1], k[2], k23, g221, G123, G231, G312,
                  E[0], E[1], E[2], e32, e23, v1, P])
    return BackgroundReducedState.from_array(y, t_start, params)


def _solve_density(f: Callable[[float], float], target: float, guess: float) -> float:
    """Positive root of the increasing function f(P) = target."""
    lo, hi = guess, guess
    while f(lo) > target:
        lo *= 0.5
        if lo < 1e-300:
            raise BackgroundError("density bracket failure")
    while f(hi) < target:
        hi *= 2.0
        if hi > 1e300:
            raise BackgroundError("density bracket failure")
    if lo == hi:
        return lo
    return brentq(lambda p: f(p) - target, lo, hi, xtol=1e-300, rtol=4 * EPS, maxiter=500)


# ---------------------------------------------------------------------------
# integration


@dataclass
class _Segment:
    t0: float
    t1: float
    dense: object
    y0: np.ndarray
    jump: np.ndarray  # projection correction applied at the later end


@dataclass
class BackgroundTrajectory:
    """Dense background solution on [t_min, t_max].

    ``times``/``states`` are the accepted step end points (post-projection),
    sorted ascending. ``C0_step``/``C1_step`` are the constraint residuals at
    each step end before projection; ``C0``/``C1`` the residuals after it.
    """

    params: SoundSpeedParams
    t_start: float
    times: np.ndarray
    states: np.ndarray
    C0: np.ndarray
    C1: np.ndarray
    C0_step: np.ndarray
    C1_step: np.ndarray
    C0_floor: np.ndarray
    C1_floor: np.ndarray
    projected: bool
    stats: dict = field(default_factory=dict)
    _segments: list = field(default_factory=list, repr=False)
    _starts: np.ndarray = field(default=None, repr=False)

    @property
    def t_min(self) -> float:
        return float(self.times[0])

    @property
    def t_max(self) -> float:
        return float(self.times[-1])

    def __call__(self, t):
        """State array(s) at time(s) t."""
        scalar = np.ndim(t) == 0
        tt = np.atleast_1d(np.asarray(t, dtype=float))
        if tt.min() < self.t_min - 1e-12 or tt.max() > self.t_max + 1e-12:
            raise ValueError(f"t outside [{self.t_min}, {self.t_max}]")
        out = np.empty((tt.size, NVAR))
        idx = np.clip(np.searchsorted(self._starts, tt, side="right") - 1, 0, len(self._segments) - 1)
        for j, (s, tj) in enumerate(zip(idx, tt)):
            seg = self._segments[s]
            if tj == seg.t0:
                out[j] = seg.y0
                continue
            w = (tj - seg.t0) / (seg.t1 - seg.t0)
            out[j] = seg.dense(tj) + w * seg.jump
        return out[0] if scalar else out

    def state(self, t: float) -> BackgroundReducedState:
        return BackgroundReducedState.from_array(self(t), t, self.params)

    def derivative(self, t: float) -> np.ndarray:
        return rhs_background(t, self(t), self.params)

    def trk(self, t):
        y = self(t)
        return y[..., 0] + y[..., 1] + y[..., 2]

    def dtrk(self, t: float) -> float:
        d = self.derivative(t)
        return float(d[0] + d[1] + d[2])

    def monitor_reference(self) -> Tuple[float, float]:
        """|C0|, |C1| at t_start, floored at rounding level."""
        j = int(np.argmin(np.abs(self.times - self.t_start)))
        return (max(abs(self.C0[j]), self.C0_floor[j]), max(abs(self.C1[j]), self.C1_floor[j]))

    def weighted_monitors(self) -> Tuple[np.ndarray, np.ndarray]:
        """|C| e^{6Ht}, |C| e^{4Ht} of the per-step residuals, relative to t_start."""
        H = float(self.params.H)
        w0 = np.exp(6.0 * H * (self.times - self.t_start))
        w1 = np.exp(4.0 * H * (self.times - self.t_start))
        return np.abs(self.C0_step) * w0, np.abs(self.C1_step) * w1

    def monitors_bounded(self, factor: float = 2.0) -> Tuple[bool, bool]:
        m0, m1 = self.weighted_monitors()
        r0, r1 = self.monitor_reference()
        return bool(m0.max() <= factor * r0), bool(m1.max() <= factor * r1)


def _leg(y0, t0, t1, params, tol, project, max_step, first_step):
    cs2, rs, Lam = float(params.cs2), float(params.rs), float(params.Lambda)

    def fun(t, y):
        return rhs_array(t, y, cs2, rs, Lam)

    solver = DOP853(fun, t0, y0, t1, rtol=tol, atol=1e-300, max_step=max_step,
                    first_step=first_step)
    rec = []
    while solver.status == "running":
        msg = solver.step()
        if solver.status == "failed":
            raise BackgroundError(f"integration failed near t={solver.t}: {msg}")
        y_pre = solver.y.copy()
        if not np.all(np.isfinite(y_pre)):
            raise RegimeExit(f"non-finite state at t={solver.t}")
        if y_pre[14] < 0 or min(y_pre[8], y_pre[9], y_pre[10]) <= 0:
            raise RegimeExit(f"left the physical region at t={solver.t}")
        dense = solver.dense_output()
        c_pre = constraint_monitor(y_pre, params)
        y_new = y_pre
        if project:
            y_new = solve_constraints_at(y_pre, params)
            if y_new is not y_pre:
                solver.y = y_new
                solver.f = fun(solver.t, y_new)
        c_post = constraint_monitor(y_new, params)
        floor = constraint_floor(y_new, params)
        rec.append((solver.t_old, solver.t, dense, y_new.copy(), y_new - y_pre, c_pre, c_post, floor))
    return rec, solver


def integrate_background(data: AsymptoticData, params: SoundSpeedParams, T: float, t_start: float,
                         tol: float = 3e-14, t_end: Optional[float] = None, project: bool = True,
                         max_step: float = np.inf, first_step: Optional[float] = None,
                         initial: Optional[BackgroundReducedState] = None) -> BackgroundTrajectory:
    """Integrate the background from t_start back to T (and forward to t_end).

    The initial state is the constraint-solved late-time expansion, unless
    ``initial`` is given. Each accepted step is followed by a projection onto
    C0 = C1 = 0 when ``project`` is true.
    """
    if not T < t_start:
        raise ValueError("need T < t_start")
    if initial is None:
        initial = build_initial_state(data, params, t_start)
    y0 = solve_constraints_at(initial.to_array(), params)
    H = float(params.H)
    if first_step is None:
        first_step = min(1e-3 / H, max_step)
    back, sb = _leg(y0, t_start, T, params, tol, project, max_step, first_step)
    fwd, sf = [], None
    if t_end is not None and t_end > t_start:
        fwd, sf = _leg(y0, t_start, t_end, params, tol, project, max_step, first_step)

    segs = []
    # backward steps: t_old > t; the jump sits at t (the earlier end)
    for (told, tnew, dense, ynew, jump, *_r) in back:
        segs.append((tnew, told, dense, ynew, jump, "back"))
    for (told, tnew, dense, ynew, jump, *_r) in fwd:
        segs.append((told, tnew, dense, None, jump, "fwd"))
    segs.sort(key=lambda s: s[0])
    segments = []
    for (a, b, dense, ynew, jump, kind) in segs:
        if kind == "back":
            # value at a (earlier) = dense(a) + jump; at b = dense(b) (already projected)
            seg = _Segment(a, b, _BackDense(dense, a, b, jump), ynew, np.zeros(NVAR))
        else:
            seg = _Segment(a, b, dense, dense(a), jump)
        segments.append(seg)

    pts = [(t_start, y0, constraint_monitor(y0, params), constraint_monitor(y0, params), constraint_floor(y0, params))]
    for (told, tnew, dense, ynew, jump, c_pre, c_post, floor) in back + fwd:
        pts.append((tnew, ynew, c_pre, c_post, floor))
    pts.sort(key=lambda p: p[0])
    times = np.array([p[0] for p in pts])
    states = np.array([p[1] for p in pts])
    traj = BackgroundTrajectory(
        params=params,
        t_start=float(t_start),
        times=times,
        states=states,
        C0=np.array([p[3][0] for p in pts]),
        C1=np.array([p[3][1] for p in pts]),
        C0_step=np.array([p[2][0] for p in pts]),
        C1_step=np.array([p[2][1] for p in pts]),
        C0_floor=np.array([p[4][0] for p in pts]),
        C1_floor=np.array([p[4][1] for p in pts]),
        projected=project,
        stats={
            "nfev": int(sb.nfev + (sf.nfev if sf else 0)),
            "steps": len(back) + len(fwd),
            "tol": tol,
        },
        _segments=segments,
    )
    traj._starts = np.array([s.t0 for s in segments])
    return traj


class _BackDense:
    """Dense output of a backward step with the projection jump blended in."""

    def __init__(self, dense, a, b, jump):
        self.dense, self.a, self.b, self.jump = dense, a, b, jump

    def __call__(self, t):
        w = (self.b - t) / (self.b - self.a)
        return self.dense(t) + w * self.jump


# ---------------------------------------------------------------------------
# metric reconstruction


def reconstruct_metric(state, params: Optional[SoundSpeedParams] = None):
    """(G1, G2, G3, G, theta) from the frame and fluid variables.

    The metric is g_ij = sum_I Omega_iI Omega_jI with Omega the inverse frame
    matrix; G_i^2 = g_ii, G^2 = g_23 (G carries the sign of g_23) and
    sinh(theta) = rho^{-rs} v1. theta is nan in vacuum.
    """
    if isinstance(state, BackgroundReducedState):
        y, rs = state.to_array(), state.rs
    else:
        y = np.asarray(state, dtype=float)
        if params is None:
            raise ValueError("params required for array input")
        rs = float(params.rs)
    e11, e22, e33, e32, e23 = y[8], y[9], y[10], y[11], y[12]
    det = e22 * e33 - e23 * e32
    if e11 <= 0 or abs(det) <= 1e-14 * abs(e22 * e33):
        raise RegimeExit("degenerate frame")
    # inverse of [[e22, e23], [e32, e33]]
    o22, o23, o32, o33 = e33 / det, -e23 / det, -e32 / det, e22 / det
    g22 = o22 * o22 + o23 * o23
    g33 = o32 * o32 + o33 * o33
    g23 = o22 * o32 + o23 * o33
    G1 = 1.0 / e11
    G = math.copysign(math.sqrt(abs(g23)), g23)
    P, v1 = y[14], y[13]
    if P > 0:
        theta = math.asinh(v1 * P ** (-rs / (1.0 - 2.0 * rs)))
    else:
        theta = float("nan")
    return G1, math.sqrt(g22), math.sqrt(g33), G, theta


def tilt_velocity(state, params: SoundSpeedParams) -> Tuple[float, float]:
    """Unrenormalised (u0, u1) = rho^{-rs} (v0, v1)."""
    y = state.to_array() if isinstance(state, BackgroundReducedState) else np.asarray(state)
    rs = float(params.rs)
    rho, r2 = _fluid_powers(float(y[14]), rs)
    if rho == 0:
        raise ValueError("tilt undefined in vacuum")
    s = rho ** (-rs)
    v0 = math.sqrt(y[13] ** 2 + r2)
    return s * v0, s * float(y[13])


# ---------------------------------------------------------------------------
# FLRW


@dataclass(frozen=True)
class FlrwBackground:
    """Closed de Sitter slicing a(t) = cosh(H t) / H."""

    H: float

    def a(self, t):
        if isinstance(t, float):
            return math.cosh(self.H * t) / self.H
        return np.cosh(self.H * np.asarray(t, dtype=float)) / self.H

    def adot(self, t):
        if isinstance(t, float):
            return math.sinh(self.H * t)
        return np.sinh(self.H * np.asarray(t, dtype=float))

    def hubble(self, t):
        """a'/a = H tanh(H t)."""
        if isinstance(t, float):
            return self.H * math.tanh(self.H * t)
        return self.H * np.tanh(self.H * np.asarray(t, dtype=float))


def flrw(params: SoundSpeedParams, kind: str = "closed_de_sitter") -> FlrwBackground:
    if kind != "closed_de_sitter":
        raise ValueError(f"unknown FLRW kind {kind!r}")
    return FlrwBackground(H=float(params.H))


def homogeneous_euler_exact(c1: float, c2: float, params: SoundSpeedParams, bg: FlrwBackground, t: float):
    """Homogeneous Euler flow on FLRW from its two conserved quantities.

    a v1 = c1 and rho^{1-2rs} a^3 v0 = c2. Returns (v1, v0, rho).
    """
    if not c2 > 0:
        raise ValueError("c2 must be positive")
    rs = float(params.rs)
    q = 2.0 * rs / (1.0 - 2.0 * rs)
    a = float(bg.a(t))
    v1 = c1 / a
    target = c2 / a**3

    def f(P):
        return P * math.sqrt(v1 * v1 + P**q)

    # f(P) <= target forces P <= target/|v1| and P^{1+q/2} <= target
    hi = target ** (1.0 / (1.0 + 0.5 * q))
    if v1 != 0.0:
        hi = min(hi, target / abs(v1))
    P = _solve_density(f, target, hi)
    rho = P ** (1.0 / (1.0 - 2.0 * rs))
    v0 = math.sqrt(v1 * v1 + P**q)
    return v1, v0, rho


def euler_constants(v1: float, rho: float, params: SoundSpeedParams, bg: FlrwBackground, t: float):
    """(c1, c2) of a homogeneous fluid state at time t."""
    rs = float(params.rs)
    a = float(bg.a(t))
    v0 = math.sqrt(v1 * v1 + rho ** (2 * rs))
    return a * v1, rho ** (1 - 2 * rs) * a**3 * v0


__all__ = [
    "NAMES", "IDX", "NVAR", "BackgroundError", "RegimeExit", "ConstraintSolveError",
    "BackgroundReducedState", "AsymptoticData", "BackgroundTrajectory", "FlrwBackground",
    "gamma_tensor", "rhs_background", "constraint_monitor", "constraint_floor",
    "solve_constraints_at", "build_initial_state", "integrate_background",
    "reconstruct_metric", "tilt_velocity", "flrw", "homogeneous_euler_exact", "euler_constants",
]
