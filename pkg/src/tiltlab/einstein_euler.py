"""Coupled Einstein-Euler evolution in the parabolic lapse gauge.

Unknowns are the frame components k_IJ, gamma_IJB, e_I^i, the lapse n and
the fluid fields v_I, rho^(2 rs), all as coefficient arrays on S^3. Time is
normalised by n - 1 = tr k~ - tr k, with tr k~ the mean curvature of a
homogeneous background trajectory. Frame derivatives are e_I f = e_I^i Y_i f
evaluated pointwise on the dealiasing grid; every nonlinear term is formed
there and projected back.

Packed layout, one row per scalar field (29 rows):

    0-5    k11 k22 k33 k12 k13 k23
    6-14   gamma_IJB for I = 1, 2, 3 and (J, B) = (1,2), (1,3), (2,3)
    15-23  e_I^i, row 15 + 3 (I-1) + (i-1)
    24     n
    25-28  v1 v2 v3 rho^(2 rs)
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .background import (BackgroundReducedState, BackgroundTrajectory, constraint_monitor,
                         rhs_background, solve_constraints_at)
from .euler_flrw import FluidFieldState, FluidRegimeExit, filter_rates, fluid_rates, rk4_step
from .params import SoundSpeedParams
from .s3_frame import S3Space, space

K_PAIRS = ((0, 0), (1, 1), (2, 2), (0, 1), (0, 2), (1, 2))
JB_PAIRS = ((0, 1), (0, 2), (1, 2))
NK, NG, NE = 6, 9, 9
ROW_K = 0
ROW_G = 6
ROW_E = 15
ROW_N = 24
ROW_V = 25
ROW_R = 28
NFIELDS = 29

LAPSE_FORMS = ("parabolic", "parabolic_raw", "trace")


class CoupledRegimeExit(RuntimeError):
    """Lapse non-positive, frame degenerate, fluid regime exit or blow-up."""

    def __init__(self, message: str, last_good=None):
        super().__init__(message)
        self.last_good = last_good


# ---------------------------------------------------------------------------
# index helpers


def k_full(k6: np.ndarray) -> np.ndarray:
    """(6, ...) symmetric storage -> (3, 3, ...)."""
    out = np.empty((3, 3) + k6.shape[1:], dtype=k6.dtype)
    for r, (I, J) in enumerate(K_PAIRS):
        out[I, J] = k6[r]
        out[J, I] = k6[r]
    return out


def k_packed(k: np.ndarray) -> np.ndarray:
    """(3, 3, ...) -> (6, ...), symmetrising."""
    return np.stack([0.5 * (k[I, J] + k[J, I]) for I, J in K_PAIRS])


def gamma_full(g9: np.ndarray) -> np.ndarray:
    """(9, ...) storage -> (3, 3, 3, ...) antisymmetric in the last two slots."""
    out = np.zeros((3, 3, 3) + g9.shape[1:], dtype=g9.dtype)
    for I in range(3):
        for r, (J, B) in enumerate(JB_PAIRS):
            out[I, J, B] = g9[3 * I + r]
            out[I, B, J] = -g9[3 * I + r]
    return out


def gamma_packed(g: np.ndarray) -> np.ndarray:
    """(3, 3, 3, ...) -> (9, ...), keeping the antisymmetric part."""
    return np.stack([0.5 * (g[I, J, B] - g[I, B, J]) for I in range(3) for (J, B) in JB_PAIRS])


# ---------------------------------------------------------------------------
# states


@dataclass
class GeometricFieldState:
    """k (6, nb), gamma (9, nb), e (3, 3, nb) with e[I, i] = e_I^i, n (nb,)."""

    k: np.ndarray
    gamma: np.ndarray
    e: np.ndarray
    n: np.ndarray

    def k_full(self) -> np.ndarray:
        return k_full(self.k)

    def gamma_full(self) -> np.ndarray:
        return gamma_full(self.gamma)


@dataclass
class CoupledState:
    t: float
    geometric: GeometricFieldState
    fluid: FluidFieldState
    L: int

    @property
    def space(self) -> S3Space:
        return space(self.L)

    def pack(self) -> np.ndarray:
        g = self.geometric
        return np.concatenate([g.k, g.gamma, g.e.reshape(9, -1), g.n[None], self.fluid.pack()], axis=0)

    @classmethod
    def unpack(cls, t: float, y: np.ndarray, L: int) -> "CoupledState":
        y = np.array(y)
        geo = GeometricFieldState(k=y[ROW_K:ROW_G], gamma=y[ROW_G:ROW_E],
                                  e=y[ROW_E:ROW_N].reshape(3, 3, -1), n=y[ROW_N])
        return cls(t=float(t), geometric=geo, fluid=FluidFieldState.unpack(t, y[ROW_V:], L), L=L)


def homogeneous_coupled_array(bstate, params: SoundSpeedParams, L: int, t: float = 0.0) -> np.ndarray:
    """Packed coefficients of a background state, spatially constant."""
    b = bstate if isinstance(bstate, BackgroundReducedState) else BackgroundReducedState.from_array(bstate, t, params)
    vals = np.zeros(NFIELDS)
    k = b.k_matrix()
    vals[ROW_K:ROW_G] = [k[I, J] for I, J in K_PAIRS]
    vals[ROW_G:ROW_E] = gamma_packed(b.gamma_tensor())
    vals[ROW_E:ROW_N] = b.frame_matrix().reshape(9)
    vals[ROW_N] = 1.0
    vals[ROW_V] = b.v1
    vals[ROW_R] = b.rho2rs
    S = space(L)
    y = np.zeros((NFIELDS, S.nb))
    y[:, 0] = vals * S.constant(1.0)[0]
    return y


def homogeneous_state(bstate, params: SoundSpeedParams, L: int, t: Optional[float] = None) -> CoupledState:
    tt = bstate.t if t is None else t
    return CoupledState.unpack(tt, homogeneous_coupled_array(bstate, params, L, tt), L)


def background_rates_as_coupled(bstate, params: SoundSpeedParams) -> np.ndarray:
    """d/dt of the 29 coupled scalars along the background (n stays 1)."""
    b = bstate if isinstance(bstate, BackgroundReducedState) else BackgroundReducedState.from_array(bstate, 0.0, params)
    d = rhs_background(b.t, b.to_array(), params)
    db = BackgroundReducedState.from_array(d, b.t, params)
    out = np.zeros(NFIELDS)
    dk = db.k_matrix()
    out[ROW_K:ROW_G] = [dk[I, J] for I, J in K_PAIRS]
    out[ROW_G:ROW_E] = gamma_packed(db.gamma_tensor())
    out[ROW_E:ROW_N] = db.frame_matrix().reshape(9)
    out[ROW_V] = d[13]
    rs = float(params.rs)
    P, dP = b.P, d[14]
    out[ROW_R] = (2.0 * rs / (1.0 - 2.0 * rs)) * b.rho2rs * dP / P if P > 0 else 0.0
    return out


# ---------------------------------------------------------------------------
# background mean curvature


class MeanCurvature:
    """tr k~(t) and its time derivative from a background trajectory."""

    def __init__(self, trajectory: BackgroundTrajectory):
        self.trajectory = trajectory
        self.params = trajectory.params

    def __call__(self, t: float) -> Tuple[float, float]:
        y = self.trajectory(t)
        d = rhs_background(t, y, self.params)
        return float(y[0] + y[1] + y[2]), float(d[0] + d[1] + d[2])

    def state_array(self, t: float, L: int) -> np.ndarray:
        return homogeneous_coupled_array(self.trajectory(t), self.params, L, t)


# ---------------------------------------------------------------------------
# pointwise fields


@dataclass
class GridFields:
    """Values and frame derivatives of every field on the dealiasing grid."""

    k: np.ndarray       # (3, 3, P)
    gam: np.ndarray     # (3, 3, 3, P)
    E: np.ndarray       # (3, 3, P)
    n: np.ndarray       # (P,)
    v: np.ndarray       # (3, P)
    r2: np.ndarray      # (P,)
    dk: np.ndarray      # (3, 3, 3, P)  dk[C, I, J] = e_C k_IJ
    dgam: np.ndarray    # (3, 3, 3, 3, P)  dgam[C, I, J, B] = e_C gamma_IJB
    dn: np.ndarray      # (3, P)  e_C n
    ddn: np.ndarray     # (3, 3, P)  e_I e_J n
    dv: np.ndarray      # (3, 3, P)  dv[D, I] = e_D v_I
    dr2: np.ndarray     # (3, P)


def grid_fields(y: np.ndarray, L: int) -> GridFields:
    S = space(L)
    vals, grad = S.values_and_gradient(y)
    E = vals[ROW_E:ROW_N].reshape(3, 3, -1)
    # e_I f = e_I^i Y_i f
    dF = np.einsum("Iip,ifp->Ifp", E, grad)
    k = k_full(vals[ROW_K:ROW_G])
    gam = gamma_full(vals[ROW_G:ROW_E])
    dk = np.moveaxis(k_full(np.moveaxis(dF[:, ROW_K:ROW_G], 1, 0)), 2, 0)
    dgam = np.moveaxis(gamma_full(np.moveaxis(dF[:, ROW_G:ROW_E], 1, 0)), 3, 0)
    # e_I e_J n = e_I^i (Y_i e_J^j) Y_j n + e_I^i e_J^j Y_i Y_j n
    Yn = grad[:, ROW_N]
    YE = grad[:, ROW_E:ROW_N].reshape(3, 3, 3, -1)  # YE[i, J, j] = Y_i e_J^j
    hess = S.hessian_values(y[ROW_N])
    ddn = (np.einsum("Iip,iJjp,jp->IJp", E, YE, Yn)
           + np.einsum("Iip,Jjp,ijp->IJp", E, E, hess))
    return GridFields(k=k, gam=gam, E=E, n=vals[ROW_N], v=vals[ROW_V:ROW_R], r2=vals[ROW_R],
                      dk=dk, dgam=dgam, dn=dF[:, ROW_N], ddn=ddn, dv=dF[:, ROW_V:ROW_R], dr2=dF[:, ROW_R])


def _fluid_powers(r2: np.ndarray, rs: float) -> Tuple[np.ndarray, np.ndarray]:
    """(rho^(1-2rs), rho) from rho^(2rs)."""
    return r2 ** ((1.0 - 2.0 * rs) / (2.0 * rs)), r2 ** (1.0 / (2.0 * rs))


def _check_regime(g: GridFields) -> None:
    if not np.all(np.isfinite(g.n)) or g.n.min() <= 0:
        raise CoupledRegimeExit("lapse non-positive")
    det = np.linalg.det(np.moveaxis(g.E, -1, 0))
    if det.min() <= 0:
        raise CoupledRegimeExit("frame degenerate")
    if g.r2.min() <= 0:
        raise CoupledRegimeExit("rho^(2rs) non-positive")


def grid_rates(t: float, y: np.ndarray, L: int, trk_bg: float, dtrk_bg: float, params: SoundSpeedParams,
               lapse: str = "trace") -> Tuple[np.ndarray, GridFields]:
    """Time derivatives of the 29 fields at the grid points, before projection."""
    g = grid_fields(y, L)
    return pointwise_rates(g, trk_bg, dtrk_bg, params, lapse), g


def pointwise_rates(g: GridFields, trk_bg: float, dtrk_bg: float, params: SoundSpeedParams,
                    lapse: str = "trace") -> np.ndarray:
    """The evolution equations evaluated on given grid values, shape (29, P)."""
    if lapse not in LAPSE_FORMS:
        raise ValueError(f"lapse must be one of {LAPSE_FORMS}")
    _check_regime(g)
    cs2, rs, Lam = float(params.cs2), float(params.rs), float(params.Lambda)
    k, gam, n, v = g.k, g.gam, g.n, g.v
    P, rho = _fluid_powers(g.r2, rs)
    inv_n = 1.0 / n
    eye = np.eye(3)[:, :, None]
    trk = k[0, 0] + k[1, 1] + k[2, 2]
    shift = n - 1.0 - trk_bg

    # mean curvature
    R = (-inv_n * g.ddn
         + np.einsum("CIJCp->IJp", g.dgam)
         - np.einsum("ICJCp->IJp", g.dgam)
         + inv_n * np.einsum("IJCp,Cp->IJp", gam, g.dn)
         - np.einsum("CIDp,DJCp->IJp", gam, gam)
         - np.einsum("IJDp,CCDp->IJp", gam, gam)
         - Lam * eye
         - (1.0 + cs2) * P * v[:, None] * v[None, :]
         - 0.5 * (1.0 - cs2) * rho * eye)
    dk = n * (-shift * k + R)

    # connection coefficients
    Rg = (np.einsum("ICp,CJBp->IJBp", k, gam)
          + np.moveaxis(g.dk, 0, 2)                       # e_B k_IJ
          - np.einsum("JBIp->IJBp", g.dk)                 # e_J k_BI
          - np.einsum("ICp,BJCp->IJBp", k, gam)
          - np.einsum("CJp,BICp->IJBp", k, gam)
          + np.einsum("ICp,JBCp->IJBp", k, gam)
          + np.einsum("BCp,JICp->IJBp", k, gam)
          + inv_n * (np.einsum("Bp,JIp->IJBp", g.dn, k) - np.einsum("Jp,BIp->IJBp", g.dn, k)))
    dgam = n * Rg

    # frame
    dE = n * np.einsum("ICp,Cip->Iip", k, g.E)

    # lapse
    if lapse == "trace":
        dn = dtrk_bg - (dk[0, 0] + dk[1, 1] + dk[2, 2])
    else:
        kk = np.einsum("CDp,CDp->p", k, k)
        vv = np.einsum("Cp,Cp->p", v, v)
        dn = (np.einsum("CCp->p", g.ddn)
              - np.einsum("CCDp,Dp->p", gam, g.dn)
              - n * kk + n * Lam + dtrk_bg)
        if lapse == "parabolic":
            dn = dn - (1.0 + cs2) * n * P * vv - 0.5 * (1.0 + 3.0 * cs2) * n * rho
        else:
            dn = dn + (1.0 + cs2) * n * P * vv + 1.5 * (1.0 - cs2) * n * rho

    # fluid: d/dt = n e_0
    try:
        e0v, e0r2, _ = fluid_rates(v, g.r2, g.dv, g.dr2, rs, n=n, dlogn=g.dn * inv_n, k=k, gam=gam)
    except FluidRegimeExit as exc:
        raise CoupledRegimeExit(str(exc)) from exc

    out = np.empty((NFIELDS, n.size))
    out[ROW_K:ROW_G] = k_packed(dk)
    out[ROW_G:ROW_E] = gamma_packed(dgam)
    out[ROW_E:ROW_N] = dE.reshape(9, -1)
    out[ROW_N] = dn
    out[ROW_V:ROW_R] = n * e0v
    out[ROW_R] = n * e0r2
    return out


def rhs_coupled(t: float, state: Union[CoupledState, np.ndarray], background: MeanCurvature,
                params: SoundSpeedParams, L: Optional[int] = None, lapse: str = "trace",
                damping: Optional[np.ndarray] = None):
    """Time derivative of the coupled state.

    Accepts a :class:`CoupledState` (returns one holding derivatives) or a
    packed (29, nb) coefficient array together with ``L``.
    """
    as_state = isinstance(state, CoupledState)
    if as_state:
        L = state.L
        y = state.pack()
    else:
        y = state
    trk_bg, dtrk_bg = background(float(t))
    rates, _ = grid_rates(t, y, L, trk_bg, dtrk_bg, params, lapse)
    out = space(L).analyze(rates, dealias=True)
    if damping is not None:
        out -= damping * y
    if as_state:
        return CoupledState.unpack(t, out, L)
    return out


# ---------------------------------------------------------------------------
# constraints and gauge


def constraint_fields(y: np.ndarray, L: int, trk_bg: float, params: SoundSpeedParams):
    """Hamiltonian (P,) and momentum (3, P) residuals on the dealiasing grid.

    Hamiltonian: right side minus left side of the constraint, so that on
    homogeneous states it agrees with the background C0; momentum: left side
    plus the fluid current, agreeing with C1 in its first component.
    """
    g = grid_fields(y, L)
    cs2, rs, Lam = float(params.cs2), float(params.rs), float(params.Lambda)
    k, gam, n, v = g.k, g.gam, g.n, g.v
    P, rho = _fluid_powers(g.r2, rs)
    v0sq = np.einsum("Cp,Cp->p", v, v) + g.r2
    lhs = (2.0 * np.einsum("CDDCp->p", g.dgam)
           - np.einsum("CDEp,EDCp->p", gam, gam)
           - np.einsum("CCDp,EEDp->p", gam, gam))
    rhs = (np.einsum("CDp,CDp->p", k, k) - (n - 1.0 - trk_bg) ** 2 + 2.0 * Lam
           + 2.0 * (1.0 + cs2) * P * v0sq - 2.0 * cs2 * rho)
    ham = rhs - lhs
    mom = (np.einsum("CCIp->Ip", g.dk) + g.dn
           + np.einsum("IDp,CDCp->Ip", k, gam)
           - np.einsum("CDp,CIDp->Ip", k, gam)
           + (1.0 + cs2) * P * np.sqrt(v0sq) * v)
    return ham, mom


def constraint_residuals(state: CoupledState, background: MeanCurvature, params: SoundSpeedParams):
    """(Hamiltonian coefficients (nb,), momentum coefficients (3, nb))."""
    trk_bg, _ = background(state.t)
    ham, mom = constraint_fields(state.pack(), state.L, trk_bg, params)
    S = state.space
    return S.analyze(ham, dealias=True), S.analyze(mom, dealias=True)


def gauge_residual(state: CoupledState, background: MeanCurvature) -> np.ndarray:
    """Coefficients of n - 1 - (tr k~ - tr k)."""
    trk_bg, _ = background(state.t)
    S = state.space
    k = state.geometric.k
    return state.geometric.n - S.constant(1.0 + trk_bg) + (k[0] + k[1] + k[2])


def koszul_gamma(E: np.ndarray, YE: np.ndarray) -> np.ndarray:
    """Connection coefficients of the orthonormal frame e_I = E[I, i] Y_i.

    ``YE[i, I, j]`` holds Y_i E[I, j]. Uses [Y_i, Y_j] = 2 eps_ijl Y_l and
    gamma_IJB = (c_IJB - c_JBI + c_BIJ) / 2 with c_IJB = g([e_I, e_J], e_B).
    """
    eps = np.zeros((3, 3, 3))
    for i, j, l in ((0, 1, 2), (1, 2, 0), (2, 0, 1)):
        eps[i, j, l] = 1.0
        eps[j, i, l] = -1.0
    Em = np.moveaxis(E, -1, 0)
    Om = np.moveaxis(np.linalg.inv(Em), 0, -1)  # Om[l, K] : Y_l = Om[l, K] e_K
    eY = np.einsum("Iip,iJjp->IJjp", E, YE)  # e_I (E[J, j])
    comm = (eY - np.einsum("IJjp->JIjp", eY)
            + 2.0 * np.einsum("Iip,Jjp,ijl->IJlp", E, E, eps))
    c = np.einsum("IJlp,lKp->IJKp", comm, Om)
    return 0.5 * (c - np.einsum("JBIp->IJBp", c) + np.einsum("BIJp->IJBp", c))


def connection_mismatch(state: CoupledState) -> np.ndarray:
    """gamma minus the Koszul connection of the evolved frame, on the grid (9, P)."""
    S = state.space
    y = state.pack()
    vals, grad = S.values_and_gradient(y)
    E = vals[ROW_E:ROW_N].reshape(3, 3, -1)
    YE = grad[:, ROW_E:ROW_N].reshape(3, 3, 3, -1)
    return vals[ROW_G:ROW_E] - gamma_packed(koszul_gamma(E, YE))


def frame_speed(y: np.ndarray, L: int) -> float:
    """Largest singular value of e_I^i over the grid."""
    S = space(L)
    E = (y[ROW_E:ROW_N] @ S.Bd.T).reshape(3, 3, -1)
    return float(np.linalg.norm(np.moveaxis(E, -1, 0), ord=2, axis=(1, 2)).max())


# ---------------------------------------------------------------------------
# initial data


def perturb_homogeneous(bstate: BackgroundReducedState, params: SoundSpeedParams, amplitude: float,
                        rng: np.random.Generator) -> BackgroundReducedState:
    """Relative random perturbation of the background variables, constraint re-solved.

    Every nonzero variable is multiplied by (1 + amplitude xi), xi standard
    normal; the Newton solve then restores C0 = C1 = 0 by adjusting the trace
    of k and k23.
    """
    y = bstate.to_array().copy()
    y = y * (1.0 + amplitude * rng.standard_normal(y.size))
    y = solve_constraints_at(y, params)
    return BackgroundReducedState.from_array(y, bstate.t, params)


def build_initial_data(background: MeanCurvature, kind: str, amplitude: float, L: int, T: Optional[float] = None,
                       seed: int = 0, kmin: int = 1) -> Tuple[CoupledState, Dict[str, object]]:
    """Perturbed data at t = T and metadata.

    ``homogeneous_constraint_solved``: the background variables are perturbed,
    C0 = C1 = 0 re-solved and n set from the gauge condition.
    ``inhomogeneous_free``: band-limited perturbations of k, e, v and
    rho^(2rs) in modes of degree >= kmin, gamma recomputed from the perturbed
    frame, n from the gauge condition; the constraints are not solved.
    """
    traj = background.trajectory
    params = background.params
    T = traj.t_min if T is None else T
    bstate = traj.state(T)
    trk_bg, _ = background(T)
    rng = np.random.default_rng(seed)
    S = space(L)
    meta: Dict[str, object] = {"kind": kind, "amplitude": amplitude, "seed": seed, "L": L, "T": T,
                               "constraints_solved": kind != "inhomogeneous_free"}
    if kind == "homogeneous_constraint_solved":
        pert = perturb_homogeneous(bstate, params, amplitude, rng) if amplitude else bstate
        y = homogeneous_coupled_array(pert, params, L, T)
        trk = pert.trk
        y[ROW_N] = S.constant(1.0 + trk_bg - trk)
        meta["C"] = constraint_monitor(pert.to_array(), params)
        return CoupledState.unpack(T, y, L), meta
    if kind != "inhomogeneous_free":
        raise ValueError(f"unknown initial data kind {kind!r}")
    y = homogeneous_coupled_array(bstate, params, L, T)
    if amplitude:
        mask = (S.degrees >= kmin).astype(float)

        def harmonics(rows):
            w = rng.standard_normal((rows, S.nb)) * mask
            return w / np.linalg.norm(w[0] if rows == 1 else w, axis=-1, keepdims=True)

        # scales: each field family relative to its background size
        kscale = abs(float(params.H))
        escale = float(np.abs(bstate.frame_matrix()).max())
        vscale = math.sqrt(bstate.v1 ** 2 + bstate.rho2rs)
        y[ROW_K:ROW_G] += amplitude * kscale * harmonics(NK)
        y[ROW_E:ROW_N] += amplitude * escale * harmonics(NE)
        y[ROW_V:ROW_R] += amplitude * vscale * harmonics(3)
        y[ROW_R] += amplitude * bstate.rho2rs * harmonics(1)[0]
        # connection of the perturbed frame, projected
        vals, grad = S.values_and_gradient(y)
        E = vals[ROW_E:ROW_N].reshape(3, 3, -1)
        YE = grad[:, ROW_E:ROW_N].reshape(3, 3, 3, -1)
        y[ROW_G:ROW_E] = S.analyze(gamma_packed(koszul_gamma(E, YE)), dealias=True)
    k = y[ROW_K:ROW_G]
    y[ROW_N] = S.constant(1.0 + trk_bg) - (k[0] + k[1] + k[2])
    state = CoupledState.unpack(T, y, L)
    ham, mom = constraint_residuals(state, background, params)
    meta["ham_l2"] = float(S.l2_norm(ham))
    meta["mom_l2"] = float(np.sqrt(np.sum(S.l2_norm(mom) ** 2)))
    return state, meta


# ---------------------------------------------------------------------------
# stepping


@dataclass
class CoupledConfig:
    """Time stepping controls for the coupled system.

    dt is the smallest of dt_max / (H lam) with lam the fastest background
    decay rate, the advective limit cfl / ((L + 1) s) and the parabolic limit
    c_parab / (L (L + 2) s^2), s being the largest frame singular value.
    """

    L: int = 4
    t_end: float = 5.0
    dt: Optional[float] = None
    cfl: float = 0.5
    c_parab: float = 1.0
    dt_max: float = 0.05
    filter_strength: float = 0.0
    output_every: float = 0.1
    lapse: str = "trace"
    blowup_factor: float = 1e3
    blowup_floor: float = 1e-8

    def __post_init__(self):
        if self.lapse not in LAPSE_FORMS:
            raise ValueError(f"lapse must be one of {LAPSE_FORMS}")
        if self.dt is not None and not self.dt > 0:
            raise ValueError("dt must be positive")


def choose_dt_coupled(cfg: CoupledConfig, y: np.ndarray, params: SoundSpeedParams) -> float:
    if cfg.dt is not None:
        return cfg.dt
    cs2 = float(params.cs2)
    lam = max(2.0, 4.0 * cs2 / (1.0 - cs2))
    dt = cfg.dt_max / (float(params.H) * lam)
    if cfg.L > 0:
        s = frame_speed(y, cfg.L)
        dt = min(dt, cfg.cfl / ((cfg.L + 1) * s), cfg.c_parab / (cfg.L * (cfg.L + 2) * s * s))
    return dt


def step_coupled(state: CoupledState, cfg: CoupledConfig, background: MeanCurvature, params: SoundSpeedParams,
                 dt: Optional[float] = None) -> CoupledState:
    """One classical RK4 step."""
    damping = filter_rates(state.space, cfg.filter_strength, float(params.H))[None, :]
    y = state.pack()
    dt = choose_dt_coupled(cfg, y, params) if dt is None else dt
    f = lambda t, z: rhs_coupled(t, z, background, params, L=state.L, lapse=cfg.lapse, damping=damping)
    return CoupledState.unpack(state.t + dt, rk4_step(f, state.t, y, dt), state.L)


@dataclass
class CoupledRun:
    times: List[float] = field(default_factory=list)
    snapshots: List[CoupledState] = field(default_factory=list)
    gauge: List[float] = field(default_factory=list)
    ham: List[float] = field(default_factory=list)
    mom: List[float] = field(default_factory=list)
    steps: int = 0


def deviation_norm(y: np.ndarray, t: float, background: MeanCurvature, L: int) -> float:
    return float(np.linalg.norm(y - background.state_array(t, L)))


def evolve_coupled(initial: CoupledState, cfg: CoupledConfig, background: MeanCurvature, params: SoundSpeedParams,
                   callbacks: Sequence[Callable[[CoupledState], None]] = (), monitor: bool = True) -> CoupledRun:
    """Integrate to cfg.t_end, recording snapshots and residual norms every ``output_every``.

    Aborts with :class:`CoupledRegimeExit` when the distance to the background
    exceeds ``blowup_factor`` times its initial value, floored at
    ``blowup_floor`` times the background size.
    """
    L = initial.L
    S = space(L)
    damping = filter_rates(S, cfg.filter_strength, float(params.H))[None, :]
    if not np.any(damping):
        damping = None
    f = lambda t, z: rhs_coupled(t, z, background, params, L=L, lapse=cfg.lapse, damping=damping)
    run = CoupledRun()
    t, y = float(initial.t), initial.pack()
    ref = max(deviation_norm(y, t, background, L),
              cfg.blowup_floor * float(np.linalg.norm(background.state_array(t, L))))

    def record(t, y):
        s = CoupledState.unpack(t, y, L)
        run.times.append(t)
        run.snapshots.append(s)
        if monitor:
            run.gauge.append(float(S.l2_norm(gauge_residual(s, background))))
            ham, mom = constraint_residuals(s, background, params)
            run.ham.append(float(S.l2_norm(ham)))
            run.mom.append(float(np.sqrt(np.sum(S.l2_norm(mom) ** 2))))
        for cb in callbacks:
            cb(s)

    record(t, y)
    next_out = t + cfg.output_every
    while t < cfg.t_end - 1e-12:
        dt = min(choose_dt_coupled(cfg, y, params), cfg.t_end - t, max(next_out - t, 1e-12))
        last = CoupledState.unpack(t, y, L)
        try:
            y_new = rk4_step(f, t, y, dt)
        except CoupledRegimeExit as exc:
            raise CoupledRegimeExit(f"{exc} at t={t:.6g}", last_good=last) from exc
        if not np.isfinite(y_new).all():
            raise CoupledRegimeExit(f"non-finite state at t={t + dt:.6g}", last_good=last)
        if deviation_norm(y_new, t + dt, background, L) > cfg.blowup_factor * ref:
            raise CoupledRegimeExit(f"perturbation grew beyond {cfg.blowup_factor:g}x at t={t + dt:.6g}",
                                    last_good=last)
        t, y = t + dt, y_new
        run.steps += 1
        if t >= next_out - 1e-9 or t >= cfg.t_end - 1e-12:
            record(t, y)
            next_out += cfg.output_every
    return run


__all__ = [
    "CoupledRegimeExit", "GeometricFieldState", "CoupledState", "MeanCurvature", "GridFields", "grid_fields",
    "grid_rates", "pointwise_rates", "rhs_coupled", "constraint_fields", "constraint_residuals", "gauge_residual", "koszul_gamma",
    "connection_mismatch", "homogeneous_coupled_array", "homogeneous_state", "background_rates_as_coupled",
    "perturb_homogeneous", "build_initial_data", "CoupledConfig", "choose_dt_coupled", "step_coupled",
    "CoupledRun", "evolve_coupled", "deviation_norm", "frame_speed", "k_full", "k_packed", "gamma_full",
    "gamma_packed", "LAPSE_FORMS", "NFIELDS",
]
