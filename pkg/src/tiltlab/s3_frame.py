"""Spectral calculus on the unit three-sphere in the Killing frame Y_1, Y_2, Y_3.

Coordinates
-----------
S^3 sits in C^2 as z1 = cos(eta) e^{i xi1}, z2 = sin(eta) e^{i xi2} with
x1 + i x2 = z1, x3 + i x4 = z2, eta in [0, pi/2]. The volume form is
cos(eta) sin(eta) d eta d xi1 d xi2, which is flat in u = cos(2 eta).

With sigma = xi1 + xi2 the Killing fields are

    Y1 = d_xi1 + d_xi2
    Y2 = sin(sigma) d_eta - tan(eta) cos(sigma) d_xi1 + cot(eta) cos(sigma) d_xi2
    Y3 = cos(sigma) d_eta + tan(eta) sin(sigma) d_xi1 - cot(eta) sin(sigma) d_xi2

so that [Y_i, Y_j] = 2 eps_ijl Y_l, Y1 x1 = -x2, Y2 x1 = -x4, Y3 x1 = -x3.

Basis
-----
Matrix elements of the SU(2) representation with 2j = k are, in these
coordinates, e^{i(m1 xi1 + m2 xi2)} cos^|m1| sin^|m2| P_n^{(|m2|,|m1|)}(u) with
k = |m1| + |m2| + 2n. We keep real cos/sin combinations so every coefficient
vector is real, and normalise them to unit L2 norm.
"""

from __future__ import annotations

import functools
import math
import warnings
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.special import eval_jacobi

VOLUME = 2.0 * math.pi**2
DEFAULT_MAX_L = 32

LEVI_CIVITA = np.zeros((3, 3, 3))
for _i, _j, _l in ((0, 1, 2), (1, 2, 0), (2, 0, 1)):
    LEVI_CIVITA[_i, _j, _l] = 1.0
    LEVI_CIVITA[_j, _i, _l] = -1.0


class BandLimitError(ValueError):
    pass


@dataclass(frozen=True)
class ModeLabel:
    """Label of one real basis function.

    ``part`` is ``"c"`` or ``"s"`` for the cosine / sine combination and ``"0"``
    for the m1 = m2 = 0 functions.
    """

    k: int
    m1: int
    m2: int
    n: int
    part: str

    @property
    def j(self) -> float:
        return self.k / 2.0


@dataclass(frozen=True)
class CollocationGrid:
    """Product grid: Gauss-Legendre in u = cos(2 eta), uniform in xi1 and xi2.

    Integrates every polynomial of degree <= ``degree`` in (x1..x4) exactly.
    """

    degree: int
    u: np.ndarray
    xi1: np.ndarray
    xi2: np.ndarray
    weights: np.ndarray = field(repr=False)
    eta: np.ndarray = field(repr=False)
    shape: tuple = ()

    @property
    def size(self) -> int:
        return int(self.weights.size)

    def mesh(self):
        """Flattened (eta, xi1, xi2) at every node."""
        E, A, B = np.meshgrid(self.eta, self.xi1, self.xi2, indexing="ij")
        return E.ravel(), A.ravel(), B.ravel()

    def ambient(self) -> np.ndarray:
        """Ambient coordinates x1..x4 at the nodes, shape (4, size)."""
        eta, a, b = self.mesh()
        c, s = np.cos(eta), np.sin(eta)
        return np.stack([c * np.cos(a), c * np.sin(a), s * np.cos(b), s * np.sin(b)])

    def integrate(self, values: np.ndarray) -> np.ndarray:
        return values @ self.weights


def _quadrature_grid(degree: int) -> CollocationGrid:
    degree = max(int(degree), 0)
    n_u = degree // 4 + 1
    n_xi = degree + 1
    u, wu = np.polynomial.legendre.leggauss(n_u)
    eta = 0.5 * np.arccos(u)
    xi = 2.0 * np.pi * np.arange(n_xi) / n_xi
    w = np.einsum("a,b,c->abc", wu / 4.0, np.full(n_xi, 2 * np.pi / n_xi), np.full(n_xi, 2 * np.pi / n_xi))
    return CollocationGrid(
        degree=degree, u=u, xi1=xi, xi2=xi.copy(), weights=w.ravel(), eta=eta, shape=(n_u, n_xi, n_xi)
    )


def build_grid(L: int, max_L: int = DEFAULT_MAX_L, degree: Optional[int] = None) -> CollocationGrid:
    """Grid exact for products of two band-``L`` functions (degree 2L by default)."""
    if L < 0:
        raise BandLimitError("band limit must be non-negative")
    if L > max_L:
        raise BandLimitError(f"band limit {L} exceeds configured maximum {max_L}")
    return _quadrature_grid(2 * L if degree is None else degree)


def mode_labels(L: int) -> list:
    labels = []
    for k in range(L + 1):
        for m1 in range(-k, k + 1):
            for m2 in range(-k, k + 1):
                rest = k - abs(m1) - abs(m2)
                if rest < 0 or rest % 2:
                    continue
                n = rest // 2
                if m1 == 0 and m2 == 0:
                    labels.append(ModeLabel(k, 0, 0, n, "0"))
                elif m1 > 0 or (m1 == 0 and m2 > 0):
                    labels.append(ModeLabel(k, m1, m2, n, "c"))
                    labels.append(ModeLabel(k, m1, m2, n, "s"))
    return labels


def _radial(a: int, b: int, n: int, eta: np.ndarray):
    """cos^a sin^b P_n^{(b,a)}(cos 2 eta) and its eta derivative."""
    c, s = np.cos(eta), np.sin(eta)
    u = np.cos(2 * eta)
    P = eval_jacobi(n, b, a, u)
    dP = 0.5 * (n + a + b + 1) * eval_jacobi(n - 1, b + 1, a + 1, u) if n > 0 else np.zeros_like(u)
    ca, sb = c**a, s**b
    dca = -a * c ** (a - 1) * s if a > 0 else np.zeros_like(c)
    dsb = b * s ** (b - 1) * c if b > 0 else np.zeros_like(s)
    R = ca * sb * P
    dR = dca * sb * P + ca * dsb * P + ca * sb * dP * (-4.0 * s * c)
    return R, dR


def _basis_on(labels: Sequence[ModeLabel], grid: CollocationGrid, with_derivatives: bool = False):
    """Unnormalised basis values (size, nb) and optionally Y_i applied to them."""
    eta, a, b = grid.mesh()
    sig = a + b
    nb = len(labels)
    vals = np.empty((grid.size, nb))
    dY = np.empty((3, grid.size, nb)) if with_derivatives else None
    tan, cot = np.tan(eta), 1.0 / np.tan(eta)
    for col, lab in enumerate(labels):
        R, dR = _radial(abs(lab.m1), abs(lab.m2), lab.n, eta)
        phase = lab.m1 * a + lab.m2 * b
        if lab.part == "s":
            ang, dang = np.sin(phase), np.cos(phase)
        else:
            ang, dang = np.cos(phase), -np.sin(phase)
        vals[:, col] = R * ang
        if with_derivatives:
            f_eta = dR * ang
            f_x1 = R * dang * lab.m1
            f_x2 = R * dang * lab.m2
            dY[0, :, col] = f_x1 + f_x2
            dY[1, :, col] = np.sin(sig) * f_eta - tan * np.cos(sig) * f_x1 + cot * np.cos(sig) * f_x2
            dY[2, :, col] = np.cos(sig) * f_eta + tan * np.sin(sig) * f_x1 - cot * np.sin(sig) * f_x2
    return vals, dY


class S3Space:
    """Band-limited function space on S^3 with its transforms and frame derivatives.

    Attributes
    ----------
    L : band limit (largest harmonic degree kept)
    grid : collocation grid exact to degree 2L, used by analyze/synthesize
    dealias_grid : grid exact to degree 3L, used for pointwise products
    D : array (3, nb, nb), D[i] realises Y_{i+1} on coefficient vectors
    """

    def __init__(self, L: int, max_L: int = DEFAULT_MAX_L):
        self.grid = build_grid(L, max_L=max_L)
        self.L = int(L)
        self.labels = mode_labels(self.L)
        self.degrees = np.array([lab.k for lab in self.labels])
        self.nb = len(self.labels)
        raw, dY = _basis_on(self.labels, self.grid, with_derivatives=True)
        norms = np.sqrt(self.grid.integrate(raw.T**2))
        self._norms = norms
        self.B = raw / norms
        self.BtW = (self.B * self.grid.weights[:, None]).T
        self.D = np.einsum("pg,igq->ipq", self.BtW, dY / norms)
        self.dealias_grid = _quadrature_grid(3 * self.L)
        self.Bd = _basis_on(self.labels, self.dealias_grid)[0] / norms
        self.BdtW = (self.Bd * self.dealias_grid.weights[:, None]).T
        self._sobolev = {0: np.eye(self.nb)}

    # transforms -----------------------------------------------------------
    def synthesize(self, coeffs: np.ndarray, dealias: bool = False) -> np.ndarray:
        """Values at grid nodes; accepts (nb,) or (..., nb) arrays."""
        B = self.Bd if dealias else self.B
        return np.asarray(coeffs) @ B.T

    def analyze(self, values: np.ndarray, dealias: bool = False) -> np.ndarray:
        """Project grid values onto the band-limited basis."""
        values = np.asarray(values)
        P = self.BdtW if dealias else self.BtW
        if values.shape[-1] != P.shape[1]:
            raise ValueError(f"expected {P.shape[1]} grid values, got {values.shape[-1]}")
        return values @ P.T

    def project(self, func, dealias: bool = True) -> np.ndarray:
        """Coefficients of func(x) with x the (4, size) ambient coordinates."""
        g = self.dealias_grid if dealias else self.grid
        return self.analyze(func(g.ambient()), dealias=dealias)

    def constant(self, value: float) -> np.ndarray:
        c = np.zeros(self.nb)
        c[0] = value * math.sqrt(VOLUME)
        return c

    def mean(self, coeffs: np.ndarray) -> np.ndarray:
        """Spatial average, the coefficient of the constant mode scaled by 1/sqrt(vol)."""
        return np.asarray(coeffs)[..., 0] / math.sqrt(VOLUME)

    # derivatives ----------------------------------------------------------
    def apply_Y(self, i: int, coeffs: np.ndarray) -> np.ndarray:
        """Y_i applied to coefficients, i in {1, 2, 3}."""
        if i not in (1, 2, 3):
            raise IndexError(f"frame index must be 1, 2 or 3, got {i}")
        return np.asarray(coeffs) @ self.D[i - 1].T

    def gradient(self, coeffs: np.ndarray) -> np.ndarray:
        """All three Y derivatives, stacked on a new leading axis."""
        return np.einsum("ipq,...q->i...p", self.D, coeffs)

    @functools.cached_property
    def _grad_synth(self) -> np.ndarray:
        # (3, nb, nd): coefficients -> values of Y_i f on the dealias grid
        return np.einsum("ipq,gp->iqg", self.D, self.Bd)

    @functools.cached_property
    def _joint_synth(self) -> np.ndarray:
        # (nb, 4 nd): values then Y_1, Y_2, Y_3 derivatives, side by side
        blocks = [self.Bd.T] + [self._grad_synth[i] for i in range(3)]
        return np.ascontiguousarray(np.concatenate(blocks, axis=1))

    def values_and_gradient(self, coeffs: np.ndarray):
        """(f, Y_i f) on the dealias grid; shapes (..., nd) and (3, ..., nd)."""
        c = np.asarray(coeffs)
        nd = self.Bd.shape[0]
        out = (c @ self._joint_synth).reshape(c.shape[:-1] + (4, nd))
        return out[..., 0, :], np.moveaxis(out[..., 1:, :], -2, 0)

    @functools.cached_property
    def _hess_synth(self) -> np.ndarray:
        # (3, 3, nb, nd): coefficients -> values of Y_i Y_j f on the dealias grid
        DD = np.einsum("ipr,jrq->ijpq", self.D, self.D)
        return np.einsum("ijpq,gp->ijqg", DD, self.Bd)

    def hessian_values(self, coeffs: np.ndarray) -> np.ndarray:
        """Y_i Y_j f on the dealias grid, shape (3, 3, ..., nd)."""
        c = np.asarray(coeffs)
        return np.einsum("...q,ijqg->ij...g", c, self._hess_synth)

    # norms ------------------------------------------------------------------
    def sobolev_matrix(self, m: int) -> np.ndarray:
        """Gram matrix of the sum over ordered words of length exactly m."""
        if m not in self._sobolev:
            prev = self.sobolev_matrix(m - 1)
            self._sobolev[m] = sum(Di.T @ prev @ Di for Di in self.D)
        return self._sobolev[m]

    def sobolev_sq(self, coeffs: np.ndarray, M: int, homogeneous: bool = False) -> np.ndarray:
        """Squared H^M norm (or the top-order piece only when homogeneous)."""
        if M > self.L:
            warnings.warn(f"Sobolev order {M} exceeds band limit {self.L}", stacklevel=2)
        c = np.asarray(coeffs)
        orders = [M] if homogeneous else range(M + 1)
        total = 0.0
        for m in orders:
            Q = self.sobolev_matrix(m)
            total = total + np.einsum("...p,pq,...q->...", c, Q, c)
        return total

    def l2_norm(self, coeffs: np.ndarray) -> float:
        return float(np.sqrt(np.sum(np.asarray(coeffs) ** 2)))

    def sobolev_norm(self, coeffs: np.ndarray, M: int) -> float:
        return float(np.sqrt(self.sobolev_sq(coeffs, M)))

    def sup_norm(self, coeffs: np.ndarray) -> float:
        return float(np.max(np.abs(self.synthesize(coeffs, dealias=True))))

    def degree_part(self, coeffs: np.ndarray, k: int) -> np.ndarray:
        out = np.zeros_like(np.asarray(coeffs, dtype=float))
        mask = self.degrees == k
        out[..., mask] = np.asarray(coeffs)[..., mask]
        return out

    def casimir_check(self, coeffs: np.ndarray, k: int) -> float:
        """Relative residual of sum_i Y_i Y_i f + k(k+2) f."""
        c = np.asarray(coeffs)
        lap = sum(self.apply_Y(i, self.apply_Y(i, c)) for i in (1, 2, 3))
        return float(np.linalg.norm(lap + k * (k + 2) * c) / np.linalg.norm(c))

    def random_field(self, rng: np.random.Generator, scale: float = 1.0, kmin: int = 0) -> np.ndarray:
        c = rng.standard_normal(self.nb) * scale
        c[self.degrees < kmin] = 0.0
        return c

    # serialisation ----------------------------------------------------------
    def to_rows(self, coeffs: np.ndarray):
        """(k, m1, m2, n, part, value) rows for CSV snapshots."""
        return [(lab.k, lab.m1, lab.m2, lab.n, lab.part, float(v)) for lab, v in zip(self.labels, coeffs)]

    def from_rows(self, rows) -> np.ndarray:
        index = {(lab.k, lab.m1, lab.m2, lab.n, lab.part): p for p, lab in enumerate(self.labels)}
        c = np.zeros(self.nb)
        for k, m1, m2, n, part, value in rows:
            c[index[(int(k), int(m1), int(m2), int(n), str(part))]] = float(value)
        return c


@functools.lru_cache(maxsize=8)
def space(L: int) -> S3Space:
    """Cached :class:`S3Space` for band limit L."""
    return S3Space(L)


@dataclass
class SpectralField:
    """A real scalar field on S^3 stored as band-limited coefficients."""

    coeffs: np.ndarray
    L: int
    _values: Optional[np.ndarray] = field(default=None, repr=False, compare=False)

    @property
    def space(self) -> S3Space:
        return space(self.L)

    @property
    def values(self) -> np.ndarray:
        if self._values is None:
            self._values = self.space.synthesize(self.coeffs)
        return self._values

    def __add__(self, other: "SpectralField") -> "SpectralField":
        return SpectralField(self.coeffs + other.coeffs, self.L)

    def __sub__(self, other: "SpectralField") -> "SpectralField":
        return SpectralField(self.coeffs - other.coeffs, self.L)

    def __mul__(self, scalar: float) -> "SpectralField":
        return SpectralField(self.coeffs * scalar, self.L)

    __rmul__ = __mul__


def analyze(values: np.ndarray, L: int) -> SpectralField:
    return SpectralField(space(L).analyze(values), L)


def synthesize(f: SpectralField) -> np.ndarray:
    return f.values


def apply_Y(i: int, f: SpectralField) -> SpectralField:
    return SpectralField(f.space.apply_Y(i, f.coeffs), f.L)


def l2_norm(f: SpectralField) -> float:
    return f.space.l2_norm(f.coeffs)


def sobolev_norm(f: SpectralField, M: int) -> float:
    return f.space.sobolev_norm(f.coeffs, M)


def casimir_check(f: SpectralField, k: int) -> float:
    return f.space.casimir_check(f.coeffs, k)
