"""Relativistic Euler equations on the closed FLRW background a = cosh(Ht)/H.

The evolved fields are the frame components v_I of the renormalised velocity
and rho^(2 rs), with e_I = a^{-1} Y_I. v0 is never evolved; it is recovered
from v0^2 = v_C v_C + rho^(2 rs). Fields are stored as coefficient arrays of
an :class:`~tiltlab.s3_frame.S3Space`, nonlinear terms are formed on the
dealiasing grid and projected back.

:func:`fluid_rates` is the pointwise kernel shared with the coupled solver:
it returns e_0 v_I and e_0 rho^(2 rs) for general lapse, mean curvature and
connection coefficients.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from .background import FlrwBackground, homogeneous_euler_exact
from .params import SoundSpeedParams
from .s3_frame import VOLUME, S3Space, space


class FluidRegimeExit(RuntimeError):
    """rho^(2 rs) became non-positive or a field became non-finite."""

    def __init__(self, message: str, last_good=None):
        super().__init__(message)
        self.last_good = last_good


# ---------------------------------------------------------------------------
# pointwise kernel


def fluid_rates(v, r2, dv, dr2, rs: float, n=None, dlogn=None, k=None, gam=None, hubble=None):
    """e_0 v_I and e_0 rho^(2rs) at collocation points.

    v      (3, P)     frame components v_I
    r2     (P,)       rho^(2 rs)
    dv     (3, 3, P)  dv[D, I] = e_D v_I
    dr2    (3, P)     e_D rho^(2 rs)
    n, dlogn          lapse and n^{-1} e_I n (omit for n = 1)
    k      (3, 3, P)  mean curvature; omit and pass ``hubble`` for k = -hubble delta
    gam    (3,3,3,P)  connection coefficients gamma_IJB; omit when zero

    Returns (e0v, e0r2, v0). The velocity equation is solved for e_0 v_I and
    the density equation is the version with v0 eliminated.
    """
    if r2.min() <= 0:
        raise FluidRegimeExit("rho^(2rs) non-positive")
    v0sq = v[0] * v[0] + v[1] * v[1] + v[2] * v[2] + r2
    v0 = np.sqrt(v0sq)
    inv0 = 1.0 / v0
    adv = v[0] * dv[0] + v[1] * dv[1] + v[2] * dv[2]  # v_C e_C v_I
    if k is None and gam is None and dlogn is None:
        return _flrw_rates(v, r2, dv, dr2, rs, v0sq, v0, inv0, adv, hubble)
    if k is None:
        kv = -hubble * v
        vkv = -hubble * (v0sq - r2)
        trk = -3.0 * hubble
    else:
        kv = (k * v[:, None, :]).sum(axis=0)
        vkv = (kv * v).sum(axis=0)
        trk = k[0, 0] + k[1, 1] + k[2, 2]
    src = adv + kv * v0 + 0.5 * dr2  # (3, P)
    gvv = None
    gdiv = None
    if gam is not None:
        gvv = np.einsum("cdip,cp,dp->ip", gam, v, v)  # gamma_CDI v_C v_D
        gdiv = np.einsum("cdcp,dp->p", gam, v)  # gamma_CDC v_D
        src = src + gvv
    if dlogn is not None:
        src = src + dlogn * v0sq
    e0v = src * inv0

    A = (1.0 - 2.0 * rs) / (2.0 * rs)
    q = r2 / v0sq
    div = dv[0, 0] + dv[1, 1] + dv[2, 2]
    vdv = (adv * v).sum(axis=0)  # v_I v_D e_D v_I
    vdr = (v * dr2).sum(axis=0)
    rhs = -q * vdv * inv0 + r2 * inv0 * div + (A - 0.5 * q) * vdr * inv0
    extra_I = None
    if dlogn is not None:
        extra_I = dlogn * v0sq
        rhs = rhs + r2 * inv0 * np.einsum("cp,cp->p", dlogn, v)
    if gvv is not None:
        extra_I = gvv if extra_I is None else extra_I + gvv
        rhs = rhs + r2 * inv0 * gdiv
    if extra_I is not None:
        rhs = rhs - q * inv0 * np.einsum("ip,ip->p", v, extra_I)
    rhs = rhs - (vkv / v0sq - trk) * r2
    e0r2 = rhs / (A + 0.5 * q)
    return e0v, e0r2, v0


def _flrw_rates(v, r2, dv, dr2, rs, v0sq, v0, inv0, adv, hubble):
    # k = -hubble delta, n = 1, gamma = 0: the same formulas with fewer array passes
    e0v = (adv - (hubble * v0) * v + 0.5 * dr2) * inv0
    A = (1.0 - 2.0 * rs) / (2.0 * rs)
    q = r2 / v0sq
    div = dv[0, 0] + dv[1, 1] + dv[2, 2]
    vdv = adv[0] * v[0] + adv[1] * v[1] + adv[2] * v[2]
    vdr = v[0] * dr2[0] + v[1] * dr2[1] + v[2] * dr2[2]
    rhs = (r2 * div - q * vdv + (A - 0.5 * q) * vdr) * inv0 + hubble * r2 * (1.0 - q - 3.0)
    return e0v, rhs / (A + 0.5 * q), v0


def homogeneous_rates(v1: float, v2: float, v3: float, r2: float, rs: float, hubble: float):
    """Scalar form of the FLRW kernel for spatially constant fields.

    With no gradients e_0 v_I = -hubble v_I and only the curvature terms of
    the density equation survive.
    """
    if not r2 > 0:
        raise FluidRegimeExit("rho^(2rs) non-positive")
    q = r2 / (v1 * v1 + v2 * v2 + v3 * v3 + r2)
    A = (1.0 - 2.0 * rs) / (2.0 * rs)
    return -hubble * v1, -hubble * v2, -hubble * v3, -hubble * r2 * (2.0 + q) / (A + 0.5 * q)


def direct_residuals(v, r2, dv, dr2, e0v, e0r2, rs: float, n=None, dlogn=None, k=None, gam=None, hubble=None):
    """Residuals of the un-eliminated v0 and log-rho equations.

    Given e_0 v_I and e_0 rho^(2rs), e_0 v0 follows from differentiating
    v0^2 = v_C v_C + rho^(2rs); both residuals vanish when the pair solves the
    fluid equations.
    """
    v0 = np.sqrt(np.einsum("ip,ip->p", v, v) + r2)
    e0v0 = (np.einsum("ip,ip->p", v, e0v) + 0.5 * e0r2) / v0
    dv0 = (np.einsum("dip,ip->dp", dv, v) + 0.5 * dr2) / v0
    if k is None:
        k = -hubble * np.eye(3)[:, :, None] * np.ones_like(r2)
    if dlogn is None:
        dlogn = np.zeros_like(v)
    trk = k[0, 0] + k[1, 1] + k[2, 2]
    vkv = np.einsum("cp,cdp,dp->p", v, k, v)
    gdiv = 0.0 if gam is None else np.einsum("cdcp,dp->p", gam, v)  # gamma_CDC v_D
    # v^a e_a = -v0 e0 + v_C e_C
    along = lambda x0, xs: -v0 * x0 + np.einsum("cp,cp->p", v, xs)
    res_v0 = along(e0v0, dv0) + vkv + 0.5 * e0r2 + np.einsum("cp,cp->p", dlogn, v) * v0
    lhs = (1.0 - 2.0 * rs) * along(e0r2, dr2) / (2.0 * rs * r2) + v0 * trk
    div = dv[0, 0] + dv[1, 1] + dv[2, 2]
    res_rho = lhs - (e0v0 - div - np.einsum("cp,cp->p", dlogn, v) - gdiv)  # rho equation, gdiv = gamma_CDC v_D
    return res_v0, res_rho


# ---------------------------------------------------------------------------
# state and configuration


@dataclass
class FluidFieldState:
    """Fluid fields on S^3 at time t as coefficient arrays.

    v has shape (3, nb); rho2rs has shape (nb,).
    """

    t: float
    v: np.ndarray
    rho2rs: np.ndarray
    L: int

    @property
    def space(self) -> S3Space:
        return space(self.L)

    def pack(self) -> np.ndarray:
        return np.concatenate([self.v, self.rho2rs[None, :]], axis=0)

    @classmethod
    def unpack(cls, t: float, y: np.ndarray, L: int) -> "FluidFieldState":
        return cls(t=float(t), v=np.array(y[:3]), rho2rs=np.array(y[3]), L=L)

    def grid_values(self) -> Tuple[np.ndarray, np.ndarray]:
        """(v_I, rho2rs) on the dealiasing grid."""
        S = self.space
        return S.synthesize(self.v, dealias=True), S.synthesize(self.rho2rs, dealias=True)

    @classmethod
    def homogeneous(cls, t: float, v1: float, rho2rs: float, L: int) -> "FluidFieldState":
        S = space(L)
        v = np.zeros((3, S.nb))
        v[0] = S.constant(v1)
        return cls(t=float(t), v=v, rho2rs=S.constant(rho2rs), L=L)


@dataclass
class StepperConfig:
    """Time stepping controls.

    ``dt`` fixes the step; otherwise it is the smaller of the advective limit
    cfl a(t) / (L + 1) and dt_max / (H lam), lam = max(1, 4 cs2 / (1 - cs2))
    being the fastest background decay rate in units of H.
    ``filter_strength`` s adds the damping -s H eta^8 to every coefficient of
    degree k > 2L/3, eta = (k - 2L/3) / (L/3); zero disables it.
    """

    L: int = 4
    t_end: float = 8.0
    dt: Optional[float] = None
    cfl: float = 0.5
    dt_max: float = 0.02
    filter_strength: float = 0.0
    output_every: float = 0.1

    def __post_init__(self):
        if self.dt is not None and not self.dt > 0:
            raise ValueError("dt must be positive")
        if not 0 < self.cfl <= 1:
            raise ValueError("cfl must lie in (0, 1]")


def filter_rates(S: S3Space, strength: float, H: float) -> np.ndarray:
    """Per-coefficient damping rates of the exponential filter."""
    if strength == 0 or S.L < 3:
        return np.zeros(S.nb)
    kc = 2.0 * S.L / 3.0
    eta = np.clip((S.degrees - kc) / (S.L - kc), 0.0, None)
    return strength * H * eta**8


# ---------------------------------------------------------------------------
# rhs and stepping


def rhs_euler(t: float, state: Union[FluidFieldState, np.ndarray], bg: FlrwBackground,
              params: SoundSpeedParams, L: Optional[int] = None, damping: Optional[np.ndarray] = None):
    """Time derivative of (v_I, rho2rs) on FLRW.

    Accepts a :class:`FluidFieldState` (returns one holding derivatives) or a
    packed (4, nb) coefficient array together with ``L``.
    """
    as_state = isinstance(state, FluidFieldState)
    if as_state:
        L = state.L
        y = state.pack()
    else:
        y = state
    S = space(L)
    t = float(t)
    h = bg.hubble(t)
    if S.nb == 1:
        # only the constant mode: Y_i f = 0 and the projection is the identity
        c = math.sqrt(VOLUME)
        rates = homogeneous_rates(y[0, 0] / c, y[1, 0] / c, y[2, 0] / c, y[3, 0] / c, float(params.rs), h)
        out = np.array(rates).reshape(4, 1) * c
        if damping is not None:
            out -= damping * y
        return FluidFieldState.unpack(t, out, L) if as_state else out
    # e_D f = a^{-1} Y_D f; grad[D, field, p]
    vals, grad = S.values_and_gradient(y)
    grad = grad * (1.0 / bg.a(t))
    rates = np.empty_like(vals)
    rates[:3], rates[3], _ = fluid_rates(vals[:3], vals[3], grad[:, :3], grad[:, 3], float(params.rs), hubble=h)
    out = rates @ S.BdtW.T
    if damping is not None:
        out -= damping * y
    if as_state:
        return FluidFieldState.unpack(t, out, L)
    return out


def rk4_step(f: Callable, t: float, y: np.ndarray, dt: float) -> np.ndarray:
    k1 = f(t, y)
    k2 = f(t + 0.5 * dt, y + 0.5 * dt * k1)
    k3 = f(t + 0.5 * dt, y + 0.5 * dt * k2)
    k4 = f(t + dt, y + dt * k3)
    return y + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def fastest_rate(params: SoundSpeedParams) -> float:
    cs2 = float(params.cs2)
    return max(1.0, 4.0 * cs2 / (1.0 - cs2))


def choose_dt(cfg: StepperConfig, bg: FlrwBackground, t: float, params: SoundSpeedParams) -> float:
    if cfg.dt is not None:
        return cfg.dt
    return min(cfg.dt_max / (bg.H * fastest_rate(params)), cfg.cfl * float(bg.a(t)) / (cfg.L + 1))


def step(state: FluidFieldState, cfg: StepperConfig, bg: FlrwBackground, params: SoundSpeedParams,
         dt: Optional[float] = None) -> FluidFieldState:
    """One classical RK4 step."""
    S = space(state.L)
    damping = filter_rates(S, cfg.filter_strength, bg.H)[None, :]
    dt = choose_dt(cfg, bg, state.t, params) if dt is None else dt
    f = lambda t, y: rhs_euler(t, y, bg, params, L=state.L, damping=damping)
    y = rk4_step(f, state.t, state.pack(), dt)
    return FluidFieldState.unpack(state.t + dt, y, state.L)


@dataclass
class EulerRun:
    times: List[float] = field(default_factory=list)
    snapshots: List[FluidFieldState] = field(default_factory=list)
    steps: int = 0


def evolve(initial: FluidFieldState, cfg: StepperConfig, bg: FlrwBackground, params: SoundSpeedParams,
           callbacks: Sequence[Callable[[FluidFieldState], None]] = ()) -> EulerRun:
    """Integrate from initial.t to cfg.t_end, recording snapshots every ``output_every``."""
    L = initial.L
    S = space(L)
    damping = filter_rates(S, cfg.filter_strength, bg.H)[None, :]
    if not np.any(damping):
        damping = None
    f = lambda t, y: rhs_euler(t, y, bg, params, L=L, damping=damping)
    Bd_r2 = S.Bd.T
    run = EulerRun()

    def record(t, y):
        s = FluidFieldState.unpack(t, y, L)
        run.times.append(s.t)
        run.snapshots.append(s)
        for cb in callbacks:
            cb(s)

    t, y = float(initial.t), initial.pack()
    record(t, y)
    next_out = t + cfg.output_every
    while t < cfg.t_end - 1e-12:
        dt = min(choose_dt(cfg, bg, t, params), cfg.t_end - t, max(next_out - t, 1e-12))
        try:
            y_new = rk4_step(f, t, y, dt)
        except FluidRegimeExit as exc:
            raise FluidRegimeExit(f"{exc} at t={t:.6g}", last_good=FluidFieldState.unpack(t, y, L)) from exc
        if not np.isfinite(y_new).all():
            raise FluidRegimeExit(f"non-finite state at t={t + dt:.6g}", last_good=FluidFieldState.unpack(t, y, L))
        if (y_new[3] @ Bd_r2).min() <= 0:
            raise FluidRegimeExit(f"rho^(2rs) non-positive at t={t + dt:.6g}",
                                  last_good=FluidFieldState.unpack(t, y, L))
        t, y = t + dt, y_new
        run.steps += 1
        if t >= next_out - 1e-9 or t >= cfg.t_end - 1e-12:
            record(t, y)
            next_out += cfg.output_every
    return run


def derived_v0(state: FluidFieldState) -> np.ndarray:
    """v0 at the dealiasing grid nodes."""
    v, r2 = state.grid_values()
    if np.any(r2 <= 0):
        raise FluidRegimeExit("rho^(2rs) non-positive")
    return np.sqrt(np.einsum("ip,ip->p", v, v) + r2)


# ---------------------------------------------------------------------------
# homogeneous background and perturbations


@dataclass(frozen=True)
class HomogeneousFluid:
    """Homogeneous Euler flow on FLRW labelled by its conserved (c1, c2)."""

    c1: float
    c2: float
    params: SoundSpeedParams
    bg: FlrwBackground

    @classmethod
    def from_asymptotic(cls, v1_inf: float, P_inf: float, params: SoundSpeedParams,
                        bg: FlrwBackground) -> "HomogeneousFluid":
        """v1 ~ v1_inf e^{-Ht}, rho^(1-2rs) ~ P_inf e^{-2Ht} as t -> infinity."""
        H = bg.H
        return cls(c1=v1_inf / (2.0 * H), c2=P_inf * abs(v1_inf) / (2.0 * H) ** 3, params=params, bg=bg)

    def at(self, t: float) -> Tuple[float, float, float]:
        """(v1, v0, rho2rs) at t."""
        v1, v0, rho = homogeneous_euler_exact(self.c1, self.c2, self.params, self.bg, t)
        return v1, v0, rho ** (2.0 * float(self.params.rs))

    def state(self, t: float, L: int) -> FluidFieldState:
        v1, _, r2 = self.at(t)
        return FluidFieldState.homogeneous(t, v1, r2, L)


FIELDS = ("v1", "v2", "v3", "rho2rs")


@dataclass(frozen=True)
class ModeSpec:
    """One basis function added to one field: label (k, m1, m2, n, part)."""

    field: str
    label: Tuple[int, int, int, int, str]
    weight: float = 1.0


def random_modes(rng: np.random.Generator, L: int, kmin: int = 1, fields: Iterable[str] = FIELDS) -> List[ModeSpec]:
    """Gaussian weights on every mode of degree >= kmin, normalised per field to unit L2 norm."""
    S = space(L)
    out = []
    for f in fields:
        w = rng.standard_normal(S.nb)
        w[S.degrees < kmin] = 0.0
        w /= np.linalg.norm(w)
        for lab, wi in zip(S.labels, w):
            if wi != 0.0:
                out.append(ModeSpec(f, (lab.k, lab.m1, lab.m2, lab.n, lab.part), float(wi)))
    return out


def perturbation_coefficients(modes: Sequence[ModeSpec], L: int) -> np.ndarray:
    S = space(L)
    index = {(lab.k, lab.m1, lab.m2, lab.n, lab.part): p for p, lab in enumerate(S.labels)}
    c = np.zeros((4, S.nb))
    for m in modes:
        if m.field not in FIELDS:
            raise ValueError(f"unknown field {m.field!r}")
        key = tuple(m.label)
        if key not in index:
            raise ValueError(f"mode {key} not in band limit {L}")
        c[FIELDS.index(m.field), index[key]] += m.weight
    return c


def perturb_background(bg_state: FluidFieldState, amplitude: float, modes: Sequence[ModeSpec],
                       relative: bool = True) -> FluidFieldState:
    """Background plus amplitude times the chosen harmonics.

    With ``relative`` the velocity perturbation is scaled by the background
    mean of v0 and the density perturbation by the background mean of
    rho^(2rs); otherwise the harmonics are added as given.
    """
    S = bg_state.space
    dc = perturbation_coefficients(modes, bg_state.L) * amplitude
    if relative:
        v1m = S.mean(bg_state.v[0])
        r2m = S.mean(bg_state.rho2rs)
        dc[:3] *= math.sqrt(v1m * v1m + r2m)
        dc[3] *= r2m
    y = bg_state.pack() + dc
    out = FluidFieldState.unpack(bg_state.t, y, bg_state.L)
    if np.min(S.synthesize(out.rho2rs, dealias=True)) <= 0:
        raise FluidRegimeExit(f"perturbation amplitude {amplitude} makes rho^(2rs) non-positive")
    return out


__all__ = [
    "FluidRegimeExit", "fluid_rates", "homogeneous_rates", "direct_residuals", "FluidFieldState", "StepperConfig",
    "filter_rates", "rhs_euler", "rk4_step", "choose_dt", "fastest_rate", "step", "EulerRun", "evolve",
    "derived_v0", "HomogeneousFluid", "ModeSpec", "random_modes", "perturbation_coefficients",
    "perturb_background", "FIELDS",
]
