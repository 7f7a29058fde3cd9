import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from tiltlab.background import flrw
from tiltlab.einstein_euler import koszul_gamma
from tiltlab.euler_flrw import (FluidFieldState, FluidRegimeExit, HomogeneousFluid, ModeSpec, StepperConfig,
                                derived_v0, direct_residuals, evolve, filter_rates, fluid_rates,
                                homogeneous_rates, perturb_background, perturbation_coefficients, random_modes,
                                rhs_euler, step)
from tiltlab.params import derive_params
from tiltlab.s3_frame import space

seeds = st.integers(min_value=0, max_value=2**32 - 1)
cs2s = st.sampled_from([0.2, 0.36, 0.5, 0.8])


def random_pointwise(rng, P=50, geometry=True):
    v = rng.normal(size=(3, P))
    r2 = 0.05 + rng.random(P)
    dv = rng.normal(size=(3, 3, P))
    dr2 = rng.normal(size=(3, P))
    out = dict(v=v, r2=r2, dv=dv, dr2=dr2)
    if geometry:
        k = rng.normal(size=(3, 3, P))
        out["k"] = 0.5 * (k + np.swapaxes(k, 0, 1))
        g = rng.normal(size=(3, 3, 3, P))
        out["gam"] = g - np.swapaxes(g, 1, 2)
        out["dlogn"] = rng.normal(size=(3, P))
    return out


@given(seeds, cs2s)
def test_eliminated_matches_direct(seed, cs2):
    rs = float(derive_params(cs2).rs)
    f = random_pointwise(np.random.default_rng(seed))
    e0v, e0r2, _ = fluid_rates(f["v"], f["r2"], f["dv"], f["dr2"], rs, dlogn=f["dlogn"], k=f["k"], gam=f["gam"])
    r0, r1 = direct_residuals(f["v"], f["r2"], f["dv"], f["dr2"], e0v, e0r2, rs, dlogn=f["dlogn"], k=f["k"],
                              gam=f["gam"])
    scale = 1.0 + np.abs(e0v).max() + np.abs(e0r2).max()
    assert np.abs(r0).max() <= 1e-11 * scale
    assert np.abs(r1).max() <= 1e-11 * scale


@given(seeds, cs2s)
def test_direct_residual_detects_wrong_rates(seed, cs2):
    rs = float(derive_params(cs2).rs)
    f = random_pointwise(np.random.default_rng(seed), geometry=False)
    e0v, e0r2, _ = fluid_rates(f["v"], f["r2"], f["dv"], f["dr2"], rs, hubble=0.7)
    r0, r1 = direct_residuals(f["v"], f["r2"], f["dv"], f["dr2"], e0v, e0r2 * 1.01, rs, hubble=0.7)
    assert max(np.abs(r0).max(), np.abs(r1).max()) > 1e-6


@given(seeds, cs2s)
def test_flrw_fast_path_matches_general(seed, cs2):
    rs = float(derive_params(cs2).rs)
    f = random_pointwise(np.random.default_rng(seed), geometry=False)
    h = 0.8
    fast = fluid_rates(f["v"], f["r2"], f["dv"], f["dr2"], rs, hubble=h)
    k = -h * np.eye(3)[:, :, None] * np.ones_like(f["r2"])
    general = fluid_rates(f["v"], f["r2"], f["dv"], f["dr2"], rs, k=k)
    for a, b in zip(fast, general):
        assert np.allclose(a, b, rtol=1e-12, atol=1e-12)


@given(st.floats(-3, 3), st.floats(-3, 3), st.floats(-3, 3), st.floats(0.01, 2.0), cs2s)
def test_scalar_kernel_matches_pointwise(v1, v2, v3, r2, cs2):
    rs = float(derive_params(cs2).rs)
    v = np.array([[v1], [v2], [v3]])
    z = np.zeros((3, 3, 1))
    e0v, e0r2, _ = fluid_rates(v, np.array([r2]), z, np.zeros((3, 1)), rs, hubble=0.9)
    s = homogeneous_rates(v1, v2, v3, r2, rs, 0.9)
    assert np.allclose(s, [*e0v[:, 0], e0r2[0]], rtol=1e-12, atol=1e-14)


def test_density_regime_exit():
    with pytest.raises(FluidRegimeExit):
        fluid_rates(np.zeros((3, 2)), np.array([1.0, -1.0]), np.zeros((3, 3, 2)), np.zeros((3, 2)), 0.3, hubble=1.0)
    with pytest.raises(FluidRegimeExit):
        homogeneous_rates(1.0, 0.0, 0.0, 0.0, 0.3, 1.0)


def test_divergence_by_parts():
    # int (f div_g v + v_C e_C f) dvol_g = 0, dvol_g = dvol_round / |det E|,
    # div_g v = e_C v_C + gamma_CDC v_D with gamma the Koszul connection of E
    S = space(8)
    rng = np.random.default_rng(11)
    low = lambda k, scale: S.random_field(rng, scale) * (S.degrees <= k)
    Ec = np.stack([low(1, 0.08) for _ in range(9)])
    Ec[[0, 4, 8]] += S.constant(1.0)
    vc = np.stack([low(2, 1.0) for _ in range(3)])
    fc = low(2, 1.0)
    Ev, dE = S.values_and_gradient(Ec)
    E = Ev.reshape(3, 3, -1)
    YE = dE.reshape(3, 3, 3, -1)
    gam = koszul_gamma(E, YE)
    v, dv = S.values_and_gradient(vc)      # dv[i, C] = Y_i v_C
    f, df = S.values_and_gradient(fc)
    ecv = np.einsum("Cip,iCp->p", E, dv)
    ef = np.einsum("Cip,ip->Cp", E, df)
    vol = 1.0 / np.abs(np.linalg.det(np.moveaxis(E, -1, 0)))
    right = S.dealias_grid.integrate((f * (ecv + np.einsum("cdcp,dp->p", gam, v)) + np.einsum("cp,cp->p", v, ef)) * vol)
    wrong = S.dealias_grid.integrate((f * (ecv + np.einsum("ccdp,dp->p", gam, v)) + np.einsum("cp,cp->p", v, ef)) * vol)
    scale = S.dealias_grid.integrate(np.abs(f * ecv) * vol)
    assert abs(right) <= 1e-10 * scale
    assert abs(wrong) > 1e-3 * scale


@pytest.mark.parametrize("cs2", [0.36, 0.8])
def test_rhs_scalar_path_matches_general_kernel(cs2):
    p = derive_params(cs2)
    bg = flrw(p)
    hf = HomogeneousFluid.from_asymptotic(1.0, 0.01, p, bg)
    r0 = rhs_euler(1.3, hf.state(1.3, 0), bg, p)
    r2 = rhs_euler(1.3, hf.state(1.3, 2), bg, p)
    assert np.allclose(r0.pack()[:, 0], r2.pack()[:, 0], rtol=1e-12, atol=1e-14)
    assert np.allclose(r2.pack()[:, 1:], 0.0, atol=1e-12)


def test_homogeneous_state_is_stationary_in_space():
    p = derive_params(0.5)
    bg = flrw(p)
    hf = HomogeneousFluid.from_asymptotic(1.0, 0.01, p, bg)
    run = evolve(hf.state(0.0, 2), StepperConfig(L=2, t_end=1.0, dt_max=0.01, output_every=0.5), bg, p)
    for s in run.snapshots:
        v1, _, r2 = hf.at(s.t)
        assert np.allclose(s.v[:, 1:], 0.0, atol=1e-13)
        assert space(2).mean(s.v[0]) == pytest.approx(v1, rel=1e-9)
        assert space(2).mean(s.rho2rs) == pytest.approx(r2, rel=1e-9)


def test_closed_form_short():
    p = derive_params(0.5)
    bg = flrw(p)
    hf = HomogeneousFluid.from_asymptotic(1.0, 0.01, p, bg)
    run = evolve(hf.state(0.0, 0), StepperConfig(L=0, t_end=3.0, dt_max=0.008, output_every=0.5), bg, p)
    S = space(0)
    for s in run.snapshots:
        v1, _, r2 = hf.at(s.t)
        assert S.mean(s.v[0]) == pytest.approx(v1, rel=1e-8)
        assert S.mean(s.rho2rs) == pytest.approx(r2, rel=1e-8)


def test_from_asymptotic_limits():
    p = derive_params(0.5)
    bg = flrw(p)
    hf = HomogeneousFluid.from_asymptotic(1.0, 0.01, p, bg)
    t = 12.0
    v1, v0, r2 = hf.at(t)
    assert v1 * math.exp(t) == pytest.approx(1.0, rel=1e-8)
    P = r2 ** ((1 - 2 * float(p.rs)) / (2 * float(p.rs)))
    assert P * math.exp(2 * t) == pytest.approx(0.01, rel=1e-6)


def test_rk4_fourth_order():
    p = derive_params(0.5)
    bg = flrw(p)
    hf = HomogeneousFluid.from_asymptotic(1.0, 0.01, p, bg)
    s0 = perturb_background(hf.state(0.0, 2), 1e-2, random_modes(np.random.default_rng(0), 2))

    def final(dt):
        return evolve(s0, StepperConfig(L=2, t_end=1.0, dt=dt, output_every=1.0), bg, p).snapshots[-1].pack()

    ref = final(0.0025)
    e1 = np.abs(final(0.04) - ref).max()
    e2 = np.abs(final(0.02) - ref).max()
    assert 12.0 <= e1 / e2 <= 20.0


def test_state_pack_roundtrip_and_v0():
    S = space(2)
    rng = np.random.default_rng(2)
    s = FluidFieldState(t=0.5, v=np.stack([S.random_field(rng) for _ in range(3)]),
                        rho2rs=S.constant(2.0) + 0.01 * S.random_field(rng), L=2)
    t = FluidFieldState.unpack(s.t, s.pack(), 2)
    assert np.array_equal(t.pack(), s.pack())
    gv, gr = s.grid_values()
    v0 = derived_v0(s)
    assert np.allclose(v0 ** 2, np.sum(gv ** 2, axis=0) + gr, rtol=1e-14)


def test_perturbation_coefficients():
    S = space(2)
    lab = S.labels[5]
    modes = [ModeSpec("v2", (lab.k, lab.m1, lab.m2, lab.n, lab.part), 0.5)]
    c = perturbation_coefficients(modes, 2)
    assert c[1, 5] == 0.5 and np.count_nonzero(c) == 1
    with pytest.raises(ValueError):
        perturbation_coefficients([ModeSpec("w", modes[0].label)], 2)
    with pytest.raises(ValueError):
        perturbation_coefficients([ModeSpec("v1", (9, 9, 0, 0, "c"))], 2)


def test_random_modes_normalised():
    modes = random_modes(np.random.default_rng(0), 3, kmin=1)
    c = perturbation_coefficients(modes, 3)
    assert np.allclose(np.linalg.norm(c, axis=1), 1.0)
    assert np.all(c[:, 0] == 0.0)


def test_negative_density_rejected():
    p = derive_params(0.5)
    bg = flrw(p)
    s = HomogeneousFluid.from_asymptotic(1.0, 0.01, p, bg).state(0.0, 2)
    with pytest.raises(FluidRegimeExit):
        perturb_background(s, 50.0, random_modes(np.random.default_rng(0), 2))


def test_filter_rates():
    S = space(6)
    r = filter_rates(S, 1.0, 1.0)
    assert np.all(r[S.degrees <= 4] == 0.0)
    assert r[S.degrees == 6].max() == pytest.approx(1.0)
    assert not np.any(filter_rates(S, 0.0, 1.0))


def test_stepper_config_validation():
    with pytest.raises(ValueError):
        StepperConfig(dt=-1.0)
    with pytest.raises(ValueError):
        StepperConfig(cfl=2.0)


def test_single_step_matches_evolve():
    p = derive_params(0.5)
    bg = flrw(p)
    s0 = HomogeneousFluid.from_asymptotic(1.0, 0.01, p, bg).state(0.0, 1)
    cfg = StepperConfig(L=1, t_end=0.05, dt=0.05, output_every=0.05)
    a = step(s0, cfg, bg, p, dt=cfg.t_end - s0.t)
    b = evolve(s0, cfg, bg, p).snapshots[-1]
    assert np.array_equal(a.pack(), b.pack())
