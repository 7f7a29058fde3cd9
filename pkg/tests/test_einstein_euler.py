import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from oracles import from_dense, integrate_homogeneous, to_dense
from runs import TILTED, coupled_run, norms_series, tilted_background
from tiltlab.background import integrate_background
from tiltlab.diagnostics import fit_rate
from tiltlab.einstein_euler import (NFIELDS, ROW_E, ROW_G, ROW_K, ROW_N, ROW_R, ROW_V, CoupledConfig,
                                    CoupledRegimeExit, CoupledState, MeanCurvature, background_rates_as_coupled,
                                    build_initial_data, choose_dt_coupled, connection_mismatch,
                                    constraint_residuals, evolve_coupled, frame_speed, gamma_full, gamma_packed,
                                    gauge_residual, homogeneous_state, k_full, k_packed, koszul_gamma,
                                    rhs_coupled, step_coupled)
from tiltlab.params import derive_params
from tiltlab.s3_frame import space

seeds = st.integers(min_value=0, max_value=2**32 - 1)


@given(seeds)
def test_index_helpers_roundtrip(seed):
    rng = np.random.default_rng(seed)
    k6 = rng.normal(size=(6, 4))
    K = k_full(k6)
    assert np.array_equal(K, np.swapaxes(K, 0, 1))
    assert np.array_equal(k_packed(K), k6)
    g9 = rng.normal(size=(9, 4))
    G = gamma_full(g9)
    assert np.array_equal(G, -np.swapaxes(G, 1, 2))
    assert np.array_equal(gamma_packed(G), g9)


@pytest.mark.parametrize("lapse", ["trace", "parabolic"])
@pytest.mark.parametrize("L", [0, 2])
@pytest.mark.parametrize("t", [0.5, 3.0, 9.0])
def test_zero_perturbation_matches_background(lapse, L, t):
    p, bgm = tilted_background()
    traj = bgm.trajectory
    if t < traj.t_min:
        traj = integrate_background(TILTED, p, 0.5, 10.0)
        bgm = MeanCurvature(traj)
    s = homogeneous_state(traj.state(t), p, L)
    r = rhs_coupled(t, s.pack(), bgm, p, L=L, lapse=lapse)
    expect = background_rates_as_coupled(traj.state(t), p) * space(L).constant(1.0)[0]
    assert np.abs(r[:, 0] - expect).max() <= 1e-12
    if L > 0:
        assert np.abs(r[:, 1:]).max() <= 1e-12


def test_raw_lapse_inconsistent():
    # the lapse terms as first written do not vanish on the exact background
    p = derive_params(0.4)
    traj = integrate_background(TILTED, p, 0.5, 10.0)
    bgm = MeanCurvature(traj)
    s = homogeneous_state(traj.state(0.5), p, 0)
    r = rhs_coupled(0.5, s.pack(), bgm, p, L=0, lapse="parabolic_raw")
    assert abs(r[ROW_N, 0]) > 1e-4


def test_koszul_of_killing_frame():
    # constant identity frame: gamma_IJB = (c_IJB - c_JBI + c_BIJ)/2 with c = 2 eps
    E = np.eye(3)[:, :, None]
    g = koszul_gamma(E, np.zeros((3, 3, 3, 1)))[..., 0]
    eps = np.zeros((3, 3, 3))
    for i, j, l in ((0, 1, 2), (1, 2, 0), (2, 0, 1)):
        eps[i, j, l], eps[j, i, l] = 1.0, -1.0
    assert np.allclose(g, eps)


def test_trace_lapse_preserves_gauge():
    # d/dt (n - 1 - tr k~ + tr k) = 0 identically for the "trace" form, even for free data
    p, bgm = tilted_background()
    s0, _ = build_initial_data(bgm, "inhomogeneous_free", 1e-2, 3, T=2.0, seed=5)
    r = rhs_coupled(2.0, s0.pack(), bgm, p, L=3, lapse="trace")
    _, dtrk = bgm(2.0)
    dg = r[ROW_N] + r[ROW_K] + r[ROW_K + 1] + r[ROW_K + 2] - space(3).constant(dtrk)
    assert np.abs(dg).max() <= 1e-12 * np.abs(r[ROW_K:ROW_K + 3]).max()


def test_parabolic_lapse_gauge_driven_by_hamiltonian():
    # on constraint-solved homogeneous data the parabolic lapse also keeps the gauge
    p, bgm = tilted_background()
    s0, meta = build_initial_data(bgm, "homogeneous_constraint_solved", 1e-3, 0, T=2.0, seed=2)
    r = rhs_coupled(2.0, s0.pack(), bgm, p, L=0, lapse="parabolic")
    _, dtrk = bgm(2.0)
    dg = r[ROW_N, 0] + r[0, 0] + r[1, 0] + r[2, 0] - space(0).constant(dtrk)[0]
    assert abs(dg) <= 1e-10
    # while free data with a Hamiltonian violation drive it
    s1, meta1 = build_initial_data(bgm, "inhomogeneous_free", 1e-2, 2, T=2.0, seed=5)
    r1 = rhs_coupled(2.0, s1.pack(), bgm, p, L=2, lapse="parabolic")
    dg1 = r1[ROW_N] + r1[0] + r1[1] + r1[2] - space(2).constant(dtrk)
    assert np.abs(dg1).max() > 1e-4


def test_homogeneous_constraint_solved_data():
    p, bgm = tilted_background()
    s0, meta = build_initial_data(bgm, "homogeneous_constraint_solved", 1e-3, 2, T=2.0, seed=1)
    ham, mom = constraint_residuals(s0, bgm, p)
    assert np.abs(ham).max() < 1e-11 and np.abs(mom).max() < 1e-11
    assert np.abs(gauge_residual(s0, bgm)).max() < 1e-13
    assert np.abs(s0.pack()[:, 1:]).max() == 0.0
    assert not np.array_equal(s0.pack(), bgm.state_array(2.0, 2))


def test_free_data_metadata_and_connection():
    p, bgm = tilted_background()
    s0, meta = build_initial_data(bgm, "inhomogeneous_free", 1e-3, 3, T=2.0, seed=1)
    assert meta["ham_l2"] > 1e-6 and meta["mom_l2"] > 1e-6
    assert not meta["constraints_solved"]
    assert np.abs(gauge_residual(s0, bgm)).max() < 1e-13
    # gamma is the projected connection of the perturbed frame
    assert np.abs(connection_mismatch(s0)).max() < 1e-5
    with pytest.raises(ValueError):
        build_initial_data(bgm, "unknown", 1e-3, 2)


def test_state_pack_roundtrip():
    p, bgm = tilted_background()
    s0, _ = build_initial_data(bgm, "inhomogeneous_free", 1e-3, 2, T=2.0, seed=1)
    y = s0.pack()
    assert y.shape == (NFIELDS, space(2).nb)
    s1 = CoupledState.unpack(s0.t, y, 2)
    assert np.array_equal(s1.pack(), y)
    assert np.array_equal(s1.fluid.rho2rs, y[ROW_R])
    assert np.array_equal(s1.geometric.e.reshape(9, -1), y[ROW_E:ROW_N])
    assert np.array_equal(s1.geometric.gamma, y[ROW_G:ROW_E])
    r = rhs_coupled(s0.t, s0, bgm, p)
    assert isinstance(r, CoupledState)


def test_ode_oracle_homogeneous():
    # dense-tensor homogeneous system with the undissolved fluid equations, DOP853
    p, bgm, s0, meta, run = coupled_run(span=5.0)
    rs = float(p.rs)
    c = space(0).constant(1.0)[0]
    z0 = to_dense(s0.pack()[:, 0] / c, gamma_full, rs)
    t = np.array(run.times)
    Z = integrate_homogeneous(z0, t[0], t[-1], bgm, float(p.cs2), float(p.Lambda), t)
    worst = 0.0
    for z, s in zip(Z, run.snapshots):
        ref = from_dense(z, rs)
        got = s.pack()[:, 0] / c
        worst = max(worst, np.abs(got - ref).max() / np.abs(ref).max())
    assert worst <= 1e-9


def test_homogeneous_run_rates():
    p, bgm, s0, meta, run = coupled_run(span=10.0)
    t, nm = norms_series(run, bgm)
    win = (5.0, 9.0)
    assert fit_rate(t, nm["k"], win).deviation(-2.0) <= 0.05
    assert fit_rate(t, nm["n"], win).deviation(-2.0) <= 0.05
    assert fit_rate(t, nm["e"], win).deviation(-1.0) <= 0.05


def test_parabolic_lapse_unstable():
    # the lapse equation as written excites a mode growing like e^{(sqrt(33)-3)H t / 2}
    p, bgm, s0, meta, run = coupled_run(span=10.0, lapse="parabolic")
    t, nm = norms_series(run, bgm)
    f = fit_rate(t, nm["k"], (9.0, 12.0))
    assert f.deviation((math.sqrt(33.0) - 3.0) / 2.0) <= 0.05


def test_gauge_residual_time_discretisation_order():
    p, bgm = tilted_background()
    s0, _ = build_initial_data(bgm, "inhomogeneous_free", 1e-3, 2, T=2.0, seed=3)

    def worst(dt):
        cfg = CoupledConfig(L=2, t_end=3.0, dt=dt, output_every=0.5)
        return max(evolve_coupled(s0, cfg, bgm, p).gauge)

    g1, g2 = worst(0.04), worst(0.02)
    assert 12.0 <= g1 / g2 <= 20.0


def test_parabolic_limit_exceeded_exits():
    p = derive_params(0.4)
    traj = integrate_background(TILTED, p, 0.0, 8.0)
    bgm = MeanCurvature(traj)
    s0, _ = build_initial_data(bgm, "inhomogeneous_free", 1e-4, 4, T=0.0, seed=1)
    cfg = CoupledConfig(L=4, t_end=3.0, output_every=0.5)
    limit = choose_dt_coupled(cfg, s0.pack(), p)
    s = frame_speed(s0.pack(), 4)
    assert limit <= cfg.c_parab / (4 * 6 * s * s) + 1e-15
    bad = CoupledConfig(L=4, t_end=3.0, dt=12 * limit, output_every=0.5)
    with pytest.raises(CoupledRegimeExit) as exc:
        evolve_coupled(s0, bad, bgm, p)
    assert exc.value.last_good is not None
    # the default step is stable on the same data
    run = evolve_coupled(s0, CoupledConfig(L=4, t_end=0.5, output_every=0.25), bgm, p)
    assert len(run.snapshots) == 3


def test_step_matches_evolve():
    p, bgm = tilted_background()
    s0, _ = build_initial_data(bgm, "inhomogeneous_free", 1e-3, 1, T=2.0, seed=1)
    cfg = CoupledConfig(L=1, t_end=2.05, dt=0.05, output_every=0.05)
    a = step_coupled(s0, cfg, bgm, p, dt=cfg.t_end - s0.t)
    b = evolve_coupled(s0, cfg, bgm, p).snapshots[-1]
    assert np.array_equal(a.pack(), b.pack())


def test_config_validation():
    with pytest.raises(ValueError):
        CoupledConfig(lapse="harmonic")
    with pytest.raises(ValueError):
        CoupledConfig(dt=0.0)


def test_frame_speed_of_background():
    p, bgm = tilted_background()
    y = bgm.state_array(4.0, 2)
    E = bgm.trajectory.state(4.0).frame_matrix()
    assert frame_speed(y, 2) == pytest.approx(np.linalg.norm(E, 2), rel=1e-12)
