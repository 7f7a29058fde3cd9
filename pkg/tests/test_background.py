import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from oracles import de_sitter_G
from runs import TILTED
from tiltlab.background import (AsymptoticData, BackgroundReducedState, RegimeExit, build_initial_state,
                                constraint_floor, constraint_monitor, euler_constants, flrw, gamma_tensor,
                                homogeneous_euler_exact, integrate_background, reconstruct_metric,
                                rhs_background, solve_constraints_at, tilt_velocity)
from tiltlab.einstein_euler import koszul_gamma
from tiltlab.params import derive_params

seeds = st.integers(min_value=0, max_value=2**32 - 1)


def random_state(rng, p, tilted=True):
    y = rng.normal(size=15) * 0.5
    y[8:11] = 1.0 + 0.3 * rng.random(3)
    y[13] = rng.normal() if tilted else 0.0
    y[14] = 0.1 + rng.random()
    return y


def test_de_sitter_vacuum():
    p = derive_params(0.4)
    traj = integrate_background(AsymptoticData.de_sitter(p.H), p, 2.0, 7.0, tol=1e-12)
    t = np.linspace(2.0, 7.0, 101)
    G1 = np.array([reconstruct_metric(traj(s), p)[0] for s in t])
    assert np.max(np.abs(G1 / de_sitter_G(t, p.H) - 1.0)) <= 1e-9


def test_de_sitter_other_lambda():
    p = derive_params(0.5, Lambda=12.0)
    traj = integrate_background(AsymptoticData.de_sitter(p.H), p, 1.0, 4.0, tol=1e-12)
    G1, G2, G3, G, theta = reconstruct_metric(traj(1.5), p)
    assert G1 == pytest.approx(math.cosh(2.0 * 1.5) / 2.0, rel=1e-9)
    assert G2 == pytest.approx(G1, rel=1e-12) and G3 == pytest.approx(G1, rel=1e-12)
    assert G == 0.0 and math.isnan(theta)


@given(seeds)
def test_constraint_propagation(seed):
    # d/dt C0 = 2 tr k C0 and d/dt C1 = (tr k + k11) C1 hold off the constraint surface
    p = derive_params(0.4)
    y = random_state(np.random.default_rng(seed), p)
    f = rhs_background(0.0, y, p)
    h = 1e-6
    c_plus = np.array(constraint_monitor(y + h * f, p))
    c_minus = np.array(constraint_monitor(y - h * f, p))
    dC = (c_plus - c_minus) / (2 * h)
    C0, C1 = constraint_monitor(y, p)
    trk = y[0] + y[1] + y[2]
    scale = 1.0 + np.abs(f).max() ** 2
    assert dC[0] == pytest.approx(2 * trk * C0, abs=1e-6 * scale)
    assert dC[1] == pytest.approx((trk + y[0]) * C1, abs=1e-6 * scale)


@given(seeds)
def test_constraint_solve(seed):
    p = derive_params(0.4)
    y = random_state(np.random.default_rng(seed), p)
    y[0:3] -= 3.0   # expanding branch
    z = solve_constraints_at(y, p)
    C0, C1 = constraint_monitor(z, p)
    f0, f1 = constraint_floor(z, p)
    assert abs(C0) <= 4 * f0 and abs(C1) <= 4 * f1
    # only the trace of k and k23 move
    assert np.array_equal(z[4:], y[4:])
    assert np.allclose(np.diff(z[:3] - y[:3]), 0.0, atol=1e-12)


def test_state_container_roundtrip():
    p = derive_params(0.4)
    y = random_state(np.random.default_rng(0), p)
    b = BackgroundReducedState.from_array(y, 1.5, p)
    assert np.array_equal(b.to_array(), y)
    assert b.trk == pytest.approx(y[0] + y[1] + y[2])
    assert b.rho2rs == pytest.approx(b.rho ** (2 * float(p.rs)))
    assert b.v0 == pytest.approx(math.hypot(b.v1, math.sqrt(b.rho2rs)))
    d = rhs_background(1.5, b, p)
    assert isinstance(d, BackgroundReducedState)
    assert np.allclose(d.to_array(), rhs_background(1.5, y, p))


def test_gamma_is_koszul_connection_of_frame():
    # the background connection formulas for a Killing-frame ansatz, via Koszul
    p = derive_params(0.4)
    traj = integrate_background(TILTED, p, 2.0, 10.0)
    b = traj.state(2.5)
    E = b.frame_matrix()[:, :, None]
    g = koszul_gamma(E, np.zeros((3, 3, 3, 1)))[..., 0]
    assert np.allclose(g, b.gamma_tensor(), atol=1e-10 * np.abs(g).max())


def test_gamma_tensor_antisymmetric():
    g = gamma_tensor(0.3, -0.2, 0.7, 1.1)
    assert np.array_equal(g, -np.swapaxes(g, 1, 2))


@pytest.fixture(scope="module")
def tilted():
    p = derive_params(0.4)
    return p, integrate_background(TILTED, p, 2.0, 10.0)


def test_tilted_monitors_bounded(tilted):
    p, traj = tilted
    assert traj.monitors_bounded(2.0) == (True, True)
    assert traj.t_min == 2.0 and traj.t_max == 10.0


def test_tilted_interpolant_continuous(tilted):
    p, traj = tilted
    t = np.linspace(2.0, 10.0, 2001)
    Y = traj(t)
    jumps = np.abs(np.diff(Y, axis=0)).max(axis=0)
    assert np.all(jumps < 0.05 * (np.abs(Y).max(axis=0) + 1e-12) + 1e-12)
    with pytest.raises(ValueError):
        traj(1.0)


def test_tilted_trk_matches_derivative(tilted):
    p, traj = tilted
    h = 1e-5
    for t in (3.0, 5.5, 8.0):
        fd = (traj.trk(t + h) - traj.trk(t - h)) / (2 * h)
        assert traj.dtrk(t) == pytest.approx(fd, rel=1e-6, abs=1e-9)


def test_unprojected_agrees_short_window():
    p = derive_params(0.4)
    a = integrate_background(TILTED, p, 8.0, 10.0)
    b = integrate_background(TILTED, p, 8.0, 10.0, project=False)
    ya, yb = a(8.0), b(8.0)
    assert np.allclose(ya, yb, rtol=1e-7, atol=1e-12)


def test_initial_state_nearly_solves_constraints():
    p = derive_params(0.4)
    b = build_initial_state(TILTED, p, 10.0)
    C0, C1 = constraint_monitor(b, p)
    scale = float(p.Lambda)
    assert abs(C0) < 1e-6 * scale
    assert b.v1 == pytest.approx(math.exp(-10.0), rel=1e-2)


def test_tilt_velocity():
    p = derive_params(0.4)
    traj = integrate_background(TILTED, p, 2.0, 10.0)
    y = traj(4.0)
    u0, u1 = tilt_velocity(y, p)
    assert u0 ** 2 - u1 ** 2 == pytest.approx(1.0, abs=1e-14 * u0 ** 2)
    theta = reconstruct_metric(y, p)[4]
    assert math.sinh(theta) == pytest.approx(u1, rel=1e-12)


def test_asymptotic_data_validation():
    with pytest.raises(ValueError):
        AsymptoticData(G_inf=(0.5, -0.1, 0.5))
    with pytest.raises(ValueError):
        AsymptoticData(P_inf=-1.0)
    with pytest.raises(ValueError):
        AsymptoticData(G_inf=(0.5, 0.5, 0.5), v1_inf=1.0, P_inf=0.1).momentum_k23(derive_params(0.4))
    with pytest.raises(ValueError):
        integrate_background(TILTED, derive_params(0.4), 5.0, 4.0)


def test_degenerate_frame_exits():
    p = derive_params(0.4)
    y = random_state(np.random.default_rng(0), p)
    y[8] = 0.0
    with pytest.raises(RegimeExit):
        reconstruct_metric(y, p)


@given(st.floats(-2.0, 2.0), st.floats(0.01, 3.0), st.sampled_from([0.36, 0.5, 0.8]), st.floats(0.0, 5.0))
def test_euler_closed_form_roundtrip(v1, rho, cs2, t):
    p = derive_params(cs2)
    bg = flrw(p)
    c1, c2 = euler_constants(v1, rho, p, bg, t)
    w1, w0, r = homogeneous_euler_exact(c1, c2, p, bg, t)
    assert w1 == pytest.approx(v1, rel=1e-12, abs=1e-14)
    assert r == pytest.approx(rho, rel=1e-9)
    assert w0 ** 2 == pytest.approx(v1 ** 2 + rho ** (2 * float(p.rs)), rel=1e-9)


def test_flrw_background():
    bg = flrw(derive_params(0.5, Lambda=12.0))
    assert bg.a(0.0) == pytest.approx(0.5)
    assert bg.hubble(10.0) == pytest.approx(2.0)
    t = np.array([0.3, 1.0])
    h = 1e-6
    assert np.allclose(bg.adot(t), (bg.a(t + h) - bg.a(t - h)) / (2 * h), rtol=1e-8)
    assert np.allclose(bg.hubble(t), bg.adot(t) / bg.a(t))
    with pytest.raises(ValueError):
        flrw(derive_params(0.5), kind="flat")
