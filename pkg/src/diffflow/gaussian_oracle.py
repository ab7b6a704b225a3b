"""Closed-form marginals of DiffFlow for a single Gaussian target.

With an affine ``f``, Gaussian initial law and a single isotropic Gaussian
target, the marginal stays Gaussian ``N(m, s I)`` and its moments obey::

    m' = alpha m + beta (mu~ - m) / v
    s' = 2 alpha s + 2 beta (1 - s / v) - lambda^2

with ``mu~ = mu_q / u`` and ``v = var_q / u^2 + smooth_var``. ``g`` does not
appear, which is the marginal-preserving property at the level of moments.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .schedules import Schedule, as_profile, profile_integral
from .targets import LOG_2PI, GaussianMixture, SmoothedScaledTarget

V_EFF_FLOOR = 1e-12


class OracleError(ValueError):
    """The closed-form oracle does not apply to these inputs."""


@dataclass(frozen=True)
class GaussianState:
    """Isotropic Gaussian ``N(mean, var I)``."""

    mean: np.ndarray
    var: float

    def __post_init__(self):
        m = np.atleast_1d(np.asarray(self.mean, dtype=float)).copy()
        m.setflags(write=False)
        object.__setattr__(self, "mean", m)
        object.__setattr__(self, "var", float(self.var))
        if not self.var > 0:
            raise OracleError("GaussianState variance must be positive")

    @property
    def dim(self) -> int:
        return len(self.mean)

    def log_density(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        d2 = np.sum((x - self.mean) ** 2, axis=-1)
        return -0.5 * self.dim * (LOG_2PI + math.log(self.var)) - 0.5 * d2 / self.var

    def score(self, x) -> np.ndarray:
        return (self.mean - np.asarray(x, dtype=float)) / self.var

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return self.mean + math.sqrt(self.var) * rng.standard_normal((n, self.dim))

    def as_mixture(self) -> GaussianMixture:
        return GaussianMixture.single(self.mean, self.var)


def _require_single(target: GaussianMixture) -> tuple[np.ndarray, float]:
    if not target.is_single:
        raise OracleError("the Gaussian oracle needs a single-component target")
    return target.means[0], float(target.variances[0])


def effective_target(schedule: Schedule, target: GaussianMixture, t: float) -> tuple[np.ndarray, float]:
    """Mean and variance of the scaled, smoothed single-Gaussian target at ``t``."""
    mu_q, var_q = _require_single(target)
    u = float(schedule.u(t))
    v = var_q / (u * u) + schedule.smooth_var(t)
    return mu_q / u, max(v, V_EFF_FLOOR)


def moment_rhs(schedule: Schedule, target: GaussianMixture, t: float, m: np.ndarray, s: float):
    a = float(schedule.f_alpha(t))
    b = float(schedule.beta(t))
    mu_t, v = effective_target(schedule, target, t)
    dm = a * m + b * (mu_t - m) / v
    ds = 2 * a * s + 2 * b * (1 - s / v) - schedule.lam_sq_effective(t)
    return dm, ds


def _rk4(schedule, target, t0, t1, m, s, n):
    h = (t1 - t0) / n
    for i in range(n):
        t = t0 + i * h
        k1m, k1s = moment_rhs(schedule, target, t, m, s)
        k2m, k2s = moment_rhs(schedule, target, t + h / 2, m + h / 2 * k1m, s + h / 2 * k1s)
        k3m, k3s = moment_rhs(schedule, target, t + h / 2, m + h / 2 * k2m, s + h / 2 * k2s)
        k4m, k4s = moment_rhs(schedule, target, t + h, m + h * k3m, s + h * k3s)
        m = m + h / 6 * (k1m + 2 * k2m + 2 * k3m + k4m)
        s = s + h / 6 * (k1s + 2 * k2s + 2 * k3s + k4s)
    return m, s


def propagate(init: GaussianState, schedule: Schedule, target: GaussianMixture,
              t_grid: Sequence[float], rel_step: float = 1e-4) -> list[GaussianState]:
    """Exact marginal at each time of ``t_grid``; ``init`` is the law at ``t_grid[0]``.

    Moments are integrated with classical RK4 at a fixed step of at most
    ``rel_step * schedule.horizon``.
    """
    if not schedule.affine:
        raise OracleError("the Gaussian oracle needs an affine f")
    _require_single(target)
    grid = np.asarray(t_grid, dtype=float)
    if grid.ndim != 1 or len(grid) == 0 or np.any(np.diff(grid) < 0):
        raise OracleError("t_grid must be a nondecreasing sequence")
    h_max = rel_step * schedule.horizon
    m, s = init.mean.copy(), init.var
    out = [init]
    for t0, t1 in zip(grid[:-1], grid[1:]):
        if t1 > t0:
            n = max(1, math.ceil((t1 - t0) / h_max - 1e-9))
            m, s = _rk4(schedule, target, float(t0), float(t1), m, s, n)
        if not s > 0:
            raise OracleError(f"oracle variance collapsed to {s} at t={t1}")
        out.append(GaussianState(m, s))
    return out


class OracleTrajectory:
    """Lazily propagated oracle states, queried at increasing times.

    States are cached; a query at a new time integrates forward from the
    nearest earlier cached time, so a sweep over a step grid costs one pass.
    """

    def __init__(self, init: GaussianState, schedule: Schedule, target: GaussianMixture,
                 t0: float = 0.0, rel_step: float = 1e-4):
        propagate(init, schedule, target, [t0])  # precondition check
        self.schedule, self.target, self.rel_step = schedule, target, rel_step
        self._times = [float(t0)]
        self._states = [init]
        self._tol = 1e-11 * max(1.0, schedule.horizon)

    def state_at(self, t: float) -> GaussianState:
        t = float(t)
        i = int(np.searchsorted(self._times, t + self._tol)) - 1
        if i < 0:
            raise OracleError(f"t={t} precedes the trajectory start {self._times[0]}")
        if abs(self._times[i] - t) <= self._tol:
            return self._states[i]
        state = propagate(self._states[i], self.schedule, self.target, [self._times[i], t],
                          rel_step=self.rel_step)[-1]
        self._times.insert(i + 1, t)
        self._states.insert(i + 1, state)
        return state


def kl_gaussian(p: GaussianState, q: GaussianState) -> float:
    """``KL(p || q)`` for isotropic Gaussians."""
    r = p.var / q.var
    return 0.5 * p.dim * (r - 1.0 - math.log(r)) + float(np.sum((p.mean - q.mean) ** 2)) / (2 * q.var)


def relative_fisher(p: GaussianState, q: GaussianState) -> float:
    """``E_p || grad log(p/q) ||^2`` for isotropic Gaussians."""
    return p.dim * p.var * (1.0 / q.var - 1.0 / p.var) ** 2 + float(np.sum((p.mean - q.mean) ** 2)) / q.var**2


def vp_forward_marginal(target: GaussianMixture, beta_fn, t: float) -> GaussianState:
    """Law at ``t`` of the forward VP process started from the Gaussian target."""
    mu_q, var_q = _require_single(target)
    B = profile_integral(as_profile(beta_fn), t)
    return GaussianState(math.exp(-0.5 * B) * mu_q, math.exp(-B) * var_q - math.expm1(-B))


PROP1_CONVENTIONS = ("variance", "std", "inverted")


def prop1_target(target: GaussianMixture, beta_fn, t: float, convention: str = "variance") -> SmoothedScaledTarget:
    """The scaled, smoothed target that should reproduce the forward-VP score.

    ``variance`` reads ``1 - exp(-B)`` as the smoothing variance (exact);
    ``std`` reads it as a standard deviation and ``inverted`` uses
    ``exp(B) - 1``; the latter two exist to show the identity breaks.
    """
    B = profile_integral(as_profile(beta_fn), t)
    one_minus = -math.expm1(-B)
    smooth = {"variance": one_minus, "std": one_minus**2, "inverted": math.expm1(B)}
    if convention not in smooth:
        raise ValueError(f"convention must be one of {PROP1_CONVENTIONS}")
    return SmoothedScaledTarget(target, scale_u=math.exp(0.5 * B), smooth_var=smooth[convention])


def verify_prop1(target: GaussianMixture, beta_fn, t: float, grid: Iterable,
                 convention: str = "variance") -> float:
    """Max over ``grid`` of ``|| grad log p_t(x) - score of the scaled smoothed target(x) ||``."""
    x = np.atleast_2d(np.asarray(list(grid) if not isinstance(grid, np.ndarray) else grid, dtype=float))
    if x.size == 0:
        raise ValueError("grid must be nonempty")
    exact = vp_forward_marginal(target, beta_fn, t).score(x)
    approx = prop1_target(target, beta_fn, t, convention).score(x)
    return float(np.max(np.linalg.norm(exact - approx, axis=1)))


def lsi_constant(sigma_q2: float, sigma0: float) -> float:
    """Log-Sobolev constant of ``N(mu, (sigma_q2 + sigma0^2) I)``."""
    if not sigma_q2 > 0:
        raise ValueError("sigma_q2 must be positive")
    return 1.0 / (sigma0 * sigma0 + sigma_q2)
