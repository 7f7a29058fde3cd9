"""Independent reference implementations used only by the tests."""

import numpy as np
from scipy.integrate import solve_ivp


def homogeneous_coupled_rhs(t, z, mean_curvature, cs2, Lam):
    """Spatially constant coupled system with dense tensors.

    z = (k 3x3, gamma 3x3x3, e 3x3, n, v1 v2 v3, log rho). The fluid uses the
    v0 / v_I / log rho form: v0 is eliminated only through v0^2 = v.v + rho^2rs.
    """
    rs = cs2 / (1.0 + cs2)
    k = z[0:9].reshape(3, 3)
    gam = z[9:36].reshape(3, 3, 3)
    e = z[36:45].reshape(3, 3)
    n = z[45]
    v = z[46:49]
    lrho = z[49]
    rho = np.exp(lrho)
    r2 = rho ** (2 * rs)
    v0 = np.sqrt(v @ v + r2)
    trk_bg, dtrk_bg = mean_curvature(t)
    trk = np.trace(k)
    d = np.eye(3)

    Ric = (-np.einsum("cid,djc->ij", gam, gam) - np.einsum("ijd,ccd->ij", gam, gam)
           - Lam * d - (1 + cs2) * rho ** (1 - 2 * rs) * np.outer(v, v) - 0.5 * (1 - cs2) * rho * d)
    e0k = -(n - 1 - trk_bg) * k + Ric
    e0g = (np.einsum("ic,cjb->ijb", k, gam) - np.einsum("ic,bjc->ijb", k, gam)
           - np.einsum("cj,bic->ijb", k, gam) + np.einsum("ic,jbc->ijb", k, gam)
           + np.einsum("bc,jic->ijb", k, gam))
    e0e = k @ e

    # v^a e_a = -v0 e0 on homogeneous fields
    e0v = k @ v + np.einsum("cdi,c,d->i", gam, v, v) / v0
    kvv = v @ k @ v
    div = np.einsum("cdc,d->", gam, v)
    e0lrho = (v0 * v0 * trk + v0 * div - kvv) / ((1 - 2 * rs) * v0 * v0 + rs * r2)

    dk = n * e0k
    dn = dtrk_bg - np.trace(dk)
    return np.concatenate([dk.ravel(), (n * e0g).ravel(), (n * e0e).ravel(), [dn], n * e0v, [n * e0lrho]])


def to_dense(y_hom, gamma_full, rs):
    """Packed homogeneous values (29,) -> dense oracle vector."""
    k = np.array([[y_hom[0], y_hom[3], y_hom[4]], [y_hom[3], y_hom[1], y_hom[5]], [y_hom[4], y_hom[5], y_hom[2]]])
    g = gamma_full(np.asarray(y_hom[6:15]))
    rho = y_hom[28] ** (1.0 / (2.0 * rs))
    return np.concatenate([k.ravel(), g.ravel(), y_hom[15:24], [y_hom[24]], y_hom[25:28], [np.log(rho)]])


def from_dense(z, rs):
    """Dense oracle vector -> packed homogeneous values (29,)."""
    k = z[0:9].reshape(3, 3)
    g = z[9:36].reshape(3, 3, 3)
    out = np.empty(29)
    out[0:6] = [k[0, 0], k[1, 1], k[2, 2], k[0, 1], k[0, 2], k[1, 2]]
    out[6:15] = [g[i, j, b] for i in range(3) for (j, b) in ((0, 1), (0, 2), (1, 2))]
    out[15:24] = z[36:45]
    out[24] = z[45]
    out[25:28] = z[46:49]
    out[28] = np.exp(2 * rs * z[49])
    return out


def integrate_homogeneous(z0, t0, t1, mean_curvature, cs2, Lam, t_eval):
    sol = solve_ivp(homogeneous_coupled_rhs, (t0, t1), z0, method="DOP853", rtol=1e-13, atol=1e-16,
                    t_eval=t_eval, args=(mean_curvature, cs2, Lam))
    if not sol.success:
        raise RuntimeError(sol.message)
    return sol.y.T


def de_sitter_G(t, H):
    return np.cosh(H * t) / H
