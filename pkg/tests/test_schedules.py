import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from diffflow.schedules import (PRESETS, GeometricSigma, Linear, LinearSigma, Schedule, ScheduleError,
                                as_profile, decompose, decomposed_drift, from_config, preset,
                                profile_integral, validate)


def const(v):
    return lambda t: v


def simple(g=1.0, lam=0.0, beta=1.0, continuation=False, T=1.0):
    return Schedule(T, const(0.0), const(beta), const(1.0), const(0.5), const(g), const(lam),
                    continuation=continuation)


def test_langevin_preset_fields():
    s = preset("langevin", {"sigma0": 1.0, "beta": 1.0})
    for t in np.linspace(0, 1, 11):
        assert s.u(t) == 1.0 and s.f_alpha(t) == 0.0 and s.lam(t) == 0.0
        assert s.g(t) == pytest.approx(math.sqrt(2), rel=1e-15)
        assert s.sigma(t) == 1.0
    assert validate(s) == []


def test_ode_ve_has_zero_diffusion():
    sig = GeometricSigma(0.01, 10.0, 1.0)
    s = preset("ode_ve", {"sigma": sig})
    for t in np.linspace(0, 1, 21):
        b = 0.5 * sig.sq_derivative(1 - t)
        assert s.beta(t) == pytest.approx(b, rel=1e-13)
        assert s.g(t) == s.lam(t) == pytest.approx(math.sqrt(2 * b), rel=1e-13)
        assert s.diffusion(t) == 0.0


def test_vanilla_gan_preset():
    s = preset("vanilla_gan", {"sigma0": 0.3, "beta": 2.0})
    assert all(s.g(t) == 0 and s.lam(t) == 0 and s.sigma(t) == 0.3 for t in (0, 0.5, 1))


def test_validate_lambda_violations_and_continuation():
    bad = validate(simple(g=1.0, lam=2.0), n_check=11)
    assert len(bad) == 11 and all(v.field == "lambda" and v.value == pytest.approx(-3) for v in bad)
    assert validate(simple(g=1.0, lam=2.0, continuation=True), n_check=11) == []


def test_validate_is_idempotent():
    s = simple(g=1.0, lam=2.0)
    assert validate(s) == validate(s)


def test_validate_other_fields():
    s = Schedule(1.0, const(0.0), const(-1.0), const(0.0), const(-0.1), const(1.0), const(0.0))
    fields = {v.field for v in validate(s, n_check=3)}
    assert fields == {"beta", "u", "sigma"}


def _closed_form_diffusion(name, t, T):
    if name == "langevin":
        return math.sqrt(2 * 1.5)
    if name == "ve_karras":
        return math.sqrt(2 * (T - t))
    if name == "ve_general":
        return math.sqrt(GeometricSigma(0.01, 5.0, T).sq_derivative(T - t))
    if name == "vp":
        return math.sqrt(Linear(0.1, 20.0, T)(T - t))
    if name == "diffusion_gan":
        return math.sqrt(3.0 - 0.5)
    return 0.0


PRESET_PARAMS = {
    "langevin": {"sigma0": 0.5, "beta": 1.5, "T": 2.0},
    "ve_karras": {"T": 2.0},
    "ve_general": {"sigma": GeometricSigma(0.01, 5.0, 2.0), "T": 2.0},
    "ode_ve": {"sigma": GeometricSigma(0.01, 5.0, 2.0), "T": 2.0},
    "vp": {"beta": Linear(0.1, 20.0, 2.0), "T": 2.0},
    "vanilla_gan": {"sigma0": 0.5, "beta": 1.0, "T": 2.0},
    "diffusion_gan": {"beta": 1.0, "g": math.sqrt(3.0), "lambda": math.sqrt(0.5), "T": 2.0},
    "slcd": {"beta": 1.0, "g": 2.0, "lambda": 0.0, "T": 2.0},
}


@pytest.mark.parametrize("name", PRESETS)
def test_preset_fidelity(name):
    s = preset(name, PRESET_PARAMS[name])
    assert validate(s) == []
    for t in np.linspace(0, 2.0, 100):
        expected = 2.0 if name == "slcd" else _closed_form_diffusion(name, t, 2.0)
        assert s.diffusion(t) == pytest.approx(expected, rel=1e-12, abs=1e-12)


def test_vp_preset_uses_variance_convention():
    s = preset("vp", {"beta": 1.0, "T": 2.0})
    assert s.convention == "var"
    t = 2.0 - math.log(4.0)
    assert s.u(t) == pytest.approx(2.0)
    assert s.smooth_var(t) == pytest.approx(0.75)
    assert s.f_alpha(t) == pytest.approx(0.5)


def test_continuation_adds_noise():
    s = simple(g=1.0, lam=2.0, continuation=True)
    assert s.diffusion_sq(0.3) == pytest.approx(5.0)
    assert s.lam_sq_effective(0.3) == pytest.approx(-4.0)


def test_unknown_preset_and_missing_params():
    with pytest.raises(ScheduleError):
        preset("sub_vp", {})
    with pytest.raises(ScheduleError, match="beta"):
        preset("langevin", {"sigma0": 1.0})


def test_decompose_regimes():
    d = decompose(simple(g=0.0, beta=2.0), 0.5)
    assert (d.gan_weight, d.sdm_weight, d.regime_label) == (2.0, 0.0, "GAN")
    d = decompose(simple(g=math.sqrt(2.0), beta=1.0), 0.5)
    assert d.gan_weight == pytest.approx(0.0, abs=1e-15) and d.regime_label == "langevin_boundary"
    d = decompose(simple(g=2.0, beta=1.0), 0.5)
    assert (d.churn_weight, d.regime_label) == (1.0, "SLCD")
    assert decompose(simple(g=1.0, beta=1.0), 0.5).regime_label == "mixed"
    with pytest.raises(ScheduleError):
        decompose(simple(), 1.5)


def test_slcd_rewrite_matches_full_drift(rng):
    s = simple(g=2.0, beta=1.0)
    x, sq, sp = rng.normal(size=(3, 20, 2))
    pieces = decomposed_drift(s, 0.4, x, sq, sp)
    np.testing.assert_allclose(sum(pieces.values()), sq + 1.0 * sp, rtol=1e-14, atol=1e-14)


finite = st.floats(-5, 5, allow_nan=False)


@given(st.floats(0, 3), st.floats(0, 3), st.floats(-1, 1), st.floats(0, 1),
       st.lists(finite, min_size=6, max_size=6))
def test_drift_recombination_identity(beta, g, alpha, t, vals):
    s = Schedule(1.0, const(alpha), const(beta), const(1.0), const(0.5), const(g), const(0.0))
    x, sq, sp = (np.array(vals[i:i + 2]) for i in (0, 2, 4))
    pieces = decomposed_drift(s, t, x, sq, sp)
    full = alpha * x + beta * (sq - sp) + 0.5 * g * g * sp
    scale = np.abs(alpha * x) + beta * (np.abs(sq) + np.abs(sp)) + 0.5 * g * g * np.abs(sp) + 1e-300
    assert np.all(np.abs(sum(pieces.values()) - full) <= 8 * np.finfo(float).eps * scale)


@pytest.mark.parametrize("name", ["langevin", "ve_karras", "vp", "diffusion_gan"])
def test_config_round_trip(name):
    params = {k: v for k, v in PRESET_PARAMS[name].items()}
    s = preset(name, params)
    doc = json.loads(json.dumps(s.to_config()))
    s2 = from_config(doc)
    for t in np.linspace(0, 2.0, 7):
        for fld in ("beta", "u", "sigma", "g", "lam", "f_alpha"):
            assert getattr(s2, fld)(t) == pytest.approx(getattr(s, fld)(t), rel=1e-12)


def test_tabulation_round_trip():
    s = simple(g=1.3, lam=0.2).replace(beta=lambda t: 1.0 + t)
    doc = json.loads(json.dumps(s.to_config(n_tab=101)))
    assert "t_grid" in doc
    s2 = from_config(doc)
    assert s2.beta(0.505) == pytest.approx(1.505, rel=1e-12)
    assert s2.g(0.3) == pytest.approx(1.3)


def test_bad_tabulation():
    with pytest.raises(ScheduleError):
        from_config({"t_grid": [0.0, 0.5, 0.4]})
    with pytest.raises(ScheduleError, match="missing"):
        from_config({"t_grid": [0.0, 1.0], "f_alpha": [0, 0], "beta": [1, 1]})


def test_profiles():
    assert as_profile(2.0)(0.3) == 2.0
    lin = as_profile({"kind": "linear", "start": 1.0, "end": 3.0})
    assert lin(0.5) == 2.0 and profile_integral(lin, 1.0) == pytest.approx(2.0)
    assert profile_integral(lambda t: t * t, 1.0) == pytest.approx(1 / 3, rel=1e-12)
    assert LinearSigma(2.0).sq_derivative(1.5) == pytest.approx(12.0)
    with pytest.raises(ScheduleError):
        as_profile({"kind": "cubic"})
    with pytest.raises(ScheduleError):
        as_profile(True)
