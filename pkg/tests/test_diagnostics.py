import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from runs import coupled_run, tilted_background
from tiltlab.background import flrw
from tiltlab.diagnostics import (AsymptoticLimits, HattedFields, background_asymptotics, energies,
                                 energy_growth_constant, energy_growth_integral, extreme_tilt_indicator,
                                 final_efold_drift, fit_rate, hatted, hatted_norms, limits, norm_sq,
                                 pointwise_monitors, top_order_probe)
from tiltlab.einstein_euler import ROW_N, CoupledState
from tiltlab.euler_flrw import FluidFieldState, HomogeneousFluid
from tiltlab.params import derive_params
from tiltlab.s3_frame import VOLUME, space


@given(st.floats(-3.0, 3.0), st.floats(-2.0, 2.0))
def test_fit_rate_recovers_exponent(a, b):
    t = np.linspace(0.0, 4.0, 41)
    f = fit_rate(t, np.exp(a * t + b))
    assert f.exponent == pytest.approx(a, abs=1e-10)
    assert f.intercept == pytest.approx(b, abs=1e-9)
    assert f.residual < 1e-10 and f.samples == 41
    assert f.acceptance_grade()


def test_fit_rate_window_and_errors():
    t = np.linspace(0.0, 10.0, 101)
    x = np.where(t < 5.0, np.exp(t), np.exp(5.0 - 2.0 * (t - 5.0)))
    assert fit_rate(t, x, (6.0, 9.0)).exponent == pytest.approx(-2.0)
    assert fit_rate(t, x, (6.0, 9.0), H=2.0).exponent == pytest.approx(-1.0)
    assert not fit_rate(t, x, (6.0, 7.5)).acceptance_grade()
    with pytest.raises(ValueError):
        fit_rate(t, x, (6.0, 6.5))
    with pytest.raises(ValueError):
        fit_rate(t, -x, (6.0, 9.0))
    f = fit_rate(t, x, (6.0, 9.0))
    assert f.deviation(-2.0) < 1e-10
    assert f.deviation(0.0) == pytest.approx(2.0)


@pytest.mark.parametrize("k", [0, 1, 2, 3])
def test_norm_sq_single_degree(k):
    S = space(3)
    c = S.degree_part(S.random_field(np.random.default_rng(k)), k) if k else S.constant(1.0)
    lam = k * (k + 2)
    assert norm_sq(c, 3, 0) == pytest.approx(c @ c)
    assert norm_sq(c, 3, 2) == pytest.approx((1 + lam + lam * lam) * (c @ c), rel=1e-10)
    assert norm_sq(c, 3, 2, top_only=True) == pytest.approx(lam * lam * (c @ c), rel=1e-10, abs=1e-12)


def test_norm_sq_constant_band():
    c = space(0).constant(2.0)
    assert norm_sq(c, 0, 3) == pytest.approx(4.0 * VOLUME)
    assert norm_sq(c, 0, 3, top_only=True) == 0.0
    assert norm_sq(c, 0, 0, top_only=True) == pytest.approx(4.0 * VOLUME)


def test_hatted_of_background_vanishes():
    p, bgm = tilted_background()
    s = CoupledState.unpack(4.0, bgm.state_array(4.0, 3), 3)
    h = hatted(s, bgm)
    assert all(v == 0.0 for v in hatted_norms(h).values())
    assert h.v0_identity == 0.0
    e = energies(h, p)
    assert e.E_tot == 0.0


def test_constant_lapse_energy():
    # only n^ = delta: E_geom = e^{3Ht} delta^2 vol(S^3)
    p, bgm = tilted_background()
    t, d = 4.0, 1e-3
    y = bgm.state_array(t, 3)
    y[ROW_N] += space(3).constant(d)
    h = hatted(CoupledState.unpack(t, y, 3), bgm)
    e = energies(h, p)
    assert e.E_geom == pytest.approx(math.exp(3 * t) * d * d * VOLUME, rel=1e-10)
    assert e.E_fluid_low == 0.0 and e.E_fluid_top == 0.0
    with pytest.raises(ValueError):
        energies(h, p, N=1)


def test_v0_identity_matches_subtraction():
    p, bgm, s0, meta, run = coupled_run(L=2, kind="inhomogeneous_free")
    h = hatted(run.snapshots[-1], bgm)
    assert h.v0_identity < 1e-12
    assert hatted_norms(h)["v_all"] >= hatted_norms(h)["v"]


def test_hatted_type_checks():
    p, bgm = tilted_background()
    s = CoupledState.unpack(4.0, bgm.state_array(4.0, 1), 1)
    fl = FluidFieldState(t=4.0, v=np.zeros((3, space(1).nb)), rho2rs=space(1).constant(1.0), L=1)
    with pytest.raises(TypeError):
        hatted(fl, s)
    with pytest.raises(ValueError):
        hatted(s, CoupledState.unpack(4.0, bgm.state_array(4.0, 2), 2))


def test_euler_hatted_has_no_geometry():
    p = derive_params(0.5)
    hf = HomogeneousFluid.from_asymptotic(1.0, 0.01, p, flrw(p))
    s = hf.state(1.0, 1)
    s.v[1] += 1e-3 * space(1).constant(1.0)
    h = hatted(s, hf)
    assert not h.k.any() and not h.gamma.any() and not h.e.any() and not h.n.any()
    assert hatted_norms(h)["v"] == pytest.approx(1e-3 * math.sqrt(VOLUME))


def test_energy_growth_integral_and_constant():
    p = derive_params(0.5)
    t = np.linspace(0.0, 3.0, 31)
    I = energy_growth_integral(0.0, t, p)
    # rates -1/2, -2 and 1 at this sound speed
    ref = 2.0 * (1.0 - np.exp(-0.5 * t)) + 0.5 * (1.0 - np.exp(-2.0 * t)) + (np.exp(t) - 1.0)
    assert np.allclose(I, ref, rtol=1e-12)
    E = np.exp(0.3 * I)
    assert energy_growth_constant(t, E, p) == pytest.approx(0.3, rel=1e-10)
    assert energy_growth_constant(t, np.exp(-I), p) == 0.0


def test_extreme_tilt_indicator():
    p = derive_params(0.5)
    S = space(1)
    fl = FluidFieldState(t=0.0, v=np.zeros((3, S.nb)), rho2rs=S.constant(1.0), L=1)
    x = extreme_tilt_indicator(fl, p)
    assert x.null_defect == pytest.approx(1.0) and not x.tilted
    assert x.sup == pytest.approx(1.0)
    fl.v[0] = S.constant(10.0)
    y = extreme_tilt_indicator(fl, p, t=1.0)
    assert y.null_defect == pytest.approx(1.0 / 101.0) and y.tilted
    assert y.normalised == pytest.approx(math.exp(2.0) / 101.0)
    fl.rho2rs = S.constant(-1.0)
    with pytest.raises(ValueError):
        extreme_tilt_indicator(fl, p)


@given(st.floats(0.1, 3.0), st.floats(-1.0, 1.0))
def test_final_efold_drift_exponential(H, c):
    t = np.linspace(0.0, 5.0 / H, 501)
    x = np.exp(c * H * t)
    assert final_efold_drift(t, x, H) == pytest.approx(abs(1.0 - math.exp(-c)), rel=1e-4, abs=1e-6)


def test_final_efold_drift_short():
    with pytest.raises(ValueError):
        final_efold_drift([0.0, 0.5], [1.0, 1.0])


def test_limits_of_homogeneous_run():
    p, bgm, s0, meta, run = coupled_run(span=10.0)
    lim = limits(run.times, run.snapshots, p, bgm)
    assert isinstance(lim, AsymptoticLimits)
    assert lim.converged
    assert lim.null_defect < 1e-4
    assert lim.g.shape[:2] == (3, 3)
    assert np.allclose(lim.g, np.swapaxes(lim.g, 0, 1))
    assert lim.v_hat is not None and np.abs(lim.v_hat).max() < np.abs(lim.v).max()
    with pytest.raises(ValueError):
        limits(run.times[:2], run.snapshots[:2], p)


def test_pointwise_monitors_on_background():
    p = derive_params(0.5)
    hf = HomogeneousFluid.from_asymptotic(1.0, 0.01, p, flrw(p))
    s = hf.state(8.0, 1)
    m = pointwise_monitors(s, hf, p)
    v0inf, r2inf = background_asymptotics(hf)
    assert v0inf == pytest.approx(1.0, rel=1e-6)
    assert m.inv_v0 < 1e-2 and m.dlog_v0 < 1e-2 and m.dlog_rho < 5e-2
    with pytest.raises(ValueError):
        pointwise_monitors(s, hf.bg, p)
    m2 = pointwise_monitors(s, hf.bg, p, asymptotics=(v0inf, r2inf))
    assert m2.inv_v0 == pytest.approx(m.inv_v0)


def _synthetic_hats(L, rate, p):
    S = space(L)
    c = S.degree_part(S.random_field(np.random.default_rng(L)), L)
    out = []
    for t in np.linspace(0.0, 4.0, 41):
        z = np.zeros(S.nb)
        v = np.stack([c * math.exp((rate - 1.0) * t), z, z])
        out.append(HattedFields(t=t, L=L, k=np.zeros((3, 3, S.nb)), gamma=np.zeros((3, 3, 3, S.nb)),
                                e=np.zeros((3, 3, S.nb)), n=z, v0=z, v=v, rho2rs=z))
    return out


@pytest.mark.parametrize("rates,verdict", [((0.0, 0.0), "bounded"), ((0.5, 0.6), "growing"),
                                           ((0.0, 0.5), "inconclusive")])
def test_top_order_probe_verdicts(rates, verdict):
    p = derive_params(0.5)
    runs = {3: _synthetic_hats(3, rates[0], p), 4: _synthetic_hats(4, rates[1], p)}
    rep = top_order_probe(runs, p)
    assert rep.verdict == verdict
    assert rep.exponents[3] == pytest.approx(rates[0], abs=1e-10)
    assert rep.proven_exponents[4] == pytest.approx(rates[1] - 2.0 * float(p.As), abs=1e-10)
    assert rep.as_dict()["verdict"] == verdict
