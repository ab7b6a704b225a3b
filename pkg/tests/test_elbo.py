import math

import numpy as np
import pytest

from diffflow.elbo import DriftAssembly, ElboError, elbo, exact_log_likelihood_gaussian
from diffflow.gaussian_oracle import GaussianState
from diffflow.schedules import preset
from diffflow.targets import GaussianMixture

TARGET = GaussianMixture.single([1.0, 1.0], 1.0)
INIT = GaussianState([0.0, 0.0], 1.0)
SCH = preset("langevin", {"sigma0": 0.5, "beta": 1.0, "T": 1.0})


def test_zero_drift_closed_form():
    x = np.array([0.5, -0.3])
    T = 1.0
    est = elbo(x, DriftAssembly.zero(SCH), INIT.log_density, T, 4096, 64, seed=1)
    V = SCH.diffusion_sq(0.0) * T
    expected = -math.log(2 * math.pi) - (np.sum(x**2) + 2 * V) / 2
    assert abs(est.value - expected) <= 3 * est.std_error
    assert est.novikov_max == 0.0


def test_term_accounting_and_shapes():
    est = elbo(np.array([0.2, 0.1]), DriftAssembly.oracle(SCH, TARGET, INIT), INIT.log_density, 1.0, 256, 32, 0)
    assert est.value == est.prior_term + est.fisher_term - est.matching_term
    assert est.std_error >= 0 and est.n_paths == 256 and est.n_time_steps == 32
    assert set(est.to_dict()) >= {"value", "std_error", "prior_term", "fisher_term", "matching_term"}


def test_short_horizon_recovers_initial_density():
    x = np.array([0.4, -0.2])
    est = elbo(x, DriftAssembly.oracle(SCH, TARGET, INIT), INIT.log_density, 1e-4, 2048, 1, 0)
    assert est.value == pytest.approx(float(INIT.log_density(x)), abs=5 * est.std_error + 1e-3)


def test_elbo_lower_bounds_exact_likelihood():
    asm = DriftAssembly.oracle(SCH, TARGET, INIT)
    rng = np.random.default_rng(3)
    violations = 0
    for x in rng.normal(0.5, 1.2, size=(5, 2)):
        est = elbo(x, asm, INIT.log_density, 1.0, 1024, 64, 0)
        exact = exact_log_likelihood_gaussian(x, SCH, INIT, TARGET, 1.0)
        violations += est.value > exact + 2 * est.std_error
    assert violations == 0


def test_exact_drift_beats_zero_drift_on_matching():
    x = np.array([1.2, 0.8])
    exact = elbo(x, DriftAssembly.oracle(SCH, TARGET, INIT), INIT.log_density, 1.0, 1024, 64, 0)
    zero = elbo(x, DriftAssembly.zero(SCH), INIT.log_density, 1.0, 1024, 64, 0)
    assert exact.matching_term < zero.matching_term


def test_worker_count_is_bit_identical():
    asm = DriftAssembly.oracle(SCH, TARGET, INIT)
    x = np.array([0.3, 0.3])
    a = elbo(x, asm, INIT.log_density, 1.0, 301, 16, 5, workers=1)
    b = elbo(x, asm, INIT.log_density, 1.0, 301, 16, 5, workers=4)
    assert a == b


def test_errors():
    with pytest.raises(ElboError):
        elbo(np.zeros(2), DriftAssembly.zero(SCH), INIT.log_density, 1.0, 1, 8, 0)
    with pytest.raises(ElboError):
        elbo(np.zeros(2), DriftAssembly.zero(SCH), INIT.log_density, 0.0, 8, 8, 0)
    gan = preset("vanilla_gan", {"sigma0": 0.5, "beta": 1.0})
    with pytest.raises(ElboError, match="vanishes"):
        elbo(np.zeros(2), DriftAssembly.zero(gan), INIT.log_density, 1.0, 8, 8, 0)


def test_drift_assembly_components(rng):
    asm = DriftAssembly.oracle(SCH, TARGET, INIT)
    x = rng.normal(size=(6, 2))
    # on the Langevin boundary g^2/2 = beta, so c = beta * smoothed-target score
    expected = (TARGET.means[0] - x) / 1.25
    np.testing.assert_allclose(asm.c(x, 0.4), expected, rtol=1e-12)
    np.testing.assert_array_equal(DriftAssembly.zero(SCH).c(x, 0.4), 0.0)


def test_exact_log_likelihood():
    x = np.array([0.1, 0.2])
    assert exact_log_likelihood_gaussian(x, SCH, INIT, TARGET, 0.0) == pytest.approx(float(INIT.log_density(x)))
    stationary = GaussianState([1.0, 1.0], 1.25)
    vals = [exact_log_likelihood_gaussian(x, SCH, stationary, TARGET, T) for T in (0.0, 0.5, 1.0)]
    assert max(vals) - min(vals) < 1e-12
