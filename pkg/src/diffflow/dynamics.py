"""Euler-Maruyama particle engine for the DiffFlow SDE.

Noise for particle ``i`` at step ``n`` is drawn from a counter-based stream
keyed by ``(master_seed, i, n)``, so results do not depend on how the
particles are split across worker threads.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from typing import Callable, Sequence

import numpy as np

from . import kernels
from .estimators import kde_score, silverman_bandwidth
from .gaussian_oracle import GaussianState, OracleTrajectory
from .schedules import Schedule
from .targets import GaussianMixture, SmoothedScaledTarget

SCORE_CLIP = 1e6
INIT_STEP = 2**64 - 1  # stream lane reserved for initial draws


class DynamicsError(ValueError):
    """A precondition of the particle engine was violated."""


class NonFiniteError(FloatingPointError):
    """A drift term or particle position became non-finite."""


@dataclass(frozen=True)
class ParticleCloud:
    positions: np.ndarray
    t: float
    master_seed: int
    step_index: int = 0

    def __post_init__(self):
        x = np.array(self.positions, dtype=float, ndmin=2)
        if x.shape[0] < 1:
            raise DynamicsError("a cloud needs at least one particle")
        if not np.all(np.isfinite(x)):
            raise NonFiniteError("cloud positions must be finite")
        x.setflags(write=False)
        object.__setattr__(self, "positions", x)

    @property
    def n(self) -> int:
        return self.positions.shape[0]

    @property
    def dim(self) -> int:
        return self.positions.shape[1]


# --------------------------------------------------------------------------
# Estimators of grad log p_t
# --------------------------------------------------------------------------


def _clip_rows(v: np.ndarray, limit: float = SCORE_CLIP) -> tuple[np.ndarray, int]:
    norms = np.linalg.norm(v, axis=1)
    bad = norms > limit
    if not bad.any():
        return v, 0
    v = v.copy()
    v[bad] *= (limit / norms[bad])[:, None]
    return v, int(bad.sum())


class PScoreEstimator:
    """Interface: ``score(x, t, cloud, target_score) -> (scores, n_clipped)``."""

    kind = "abstract"

    def score(self, x: np.ndarray, t: float, cloud: ParticleCloud | None,
              target_score: np.ndarray) -> tuple[np.ndarray, int]:
        raise NotImplementedError

    def describe(self) -> dict:
        return {"kind": self.kind}


class OracleGaussian(PScoreEstimator):
    """Exact ``grad log p_t`` from the closed-form Gaussian marginal."""

    kind = "oracle_gaussian"

    def __init__(self, init: GaussianState, schedule: Schedule, target: GaussianMixture, t0: float = 0.0):
        self.trajectory = OracleTrajectory(init, schedule, target, t0=t0)
        self.init = init

    def state_at(self, t: float) -> GaussianState:
        return self.trajectory.state_at(t)

    def score(self, x, t, cloud, target_score):
        return self.state_at(t).score(x), 0

    def describe(self):
        return {"kind": self.kind, "init_mean": self.init.mean.tolist(), "init_var": self.init.var}


class Kde(PScoreEstimator):
    """Gaussian-kernel density estimate of the current cloud."""

    kind = "kde"

    def __init__(self, bandwidth: float | str = "silverman"):
        if bandwidth != "silverman" and not float(bandwidth) > 0:
            raise DynamicsError("KDE bandwidth must be positive or 'silverman'")
        self.bandwidth = bandwidth

    def score(self, x, t, cloud, target_score):
        if cloud is None:
            raise DynamicsError("the KDE estimator needs the current cloud")
        h = silverman_bandwidth(cloud.positions) if self.bandwidth == "silverman" else float(self.bandwidth)
        return _clip_rows(kde_score(cloud.positions, x, h))

    def describe(self):
        return {"kind": self.kind, "bandwidth": self.bandwidth}


class DiscriminatorBased(PScoreEstimator):
    """``grad log p_t = grad log q~_t - grad_x D(x, t)`` from a log-ratio discriminator.

    ``grad_fn(x, t)`` returns the spatial gradient of the discriminator.
    """

    kind = "discriminator"

    def __init__(self, grad_fn: Callable[[np.ndarray, float], np.ndarray]):
        self.grad_fn = grad_fn

    def score(self, x, t, cloud, target_score):
        return _clip_rows(target_score - self.grad_fn(x, t))


class NoneCancelled(PScoreEstimator):
    """No estimate at all; only valid when ``g^2 = 2 beta`` so the term cancels."""

    kind = "none_cancelled"

    def __init__(self, schedule: Schedule, n_check: int = 1001, rtol: float = 1e-9):
        for t in np.linspace(0.0, schedule.horizon, n_check):
            if not cancellation_holds(schedule, float(t), rtol):
                raise DynamicsError(f"g^2 != 2 beta at t={t}; the marginal score does not cancel")

    def score(self, x, t, cloud, target_score):
        return np.zeros_like(x), 0


def cancellation_holds(schedule: Schedule, t: float, rtol: float = 1e-9) -> bool:
    g2 = float(schedule.g(t)) ** 2
    b2 = 2.0 * float(schedule.beta(t))
    return abs(g2 - b2) <= rtol * max(abs(g2), abs(b2), 1e-300)


# --------------------------------------------------------------------------
# Drift and stepping
# --------------------------------------------------------------------------


def smoothed_target_at(schedule: Schedule, target: GaussianMixture, t: float) -> SmoothedScaledTarget:
    return SmoothedScaledTarget(target, float(schedule.u(t)), schedule.smooth_var(t))


def _check_finite(terms: dict[str, np.ndarray], offset: int = 0):
    for name, v in terms.items():
        bad = ~np.isfinite(v).all(axis=1)
        if bad.any():
            i = int(np.argmax(bad))
            raise NonFiniteError(f"non-finite {name} term at particle {offset + i}")


def _drift(x, t, schedule, target, estimator, cloud, offset=0):
    score_q = smoothed_target_at(schedule, target, t).score(x)
    score_p, n_clip = estimator.score(x, t, cloud, score_q)
    reg = schedule.f(x, t)
    b = float(schedule.beta(t))
    half_g2 = 0.5 * float(schedule.g(t)) ** 2
    disc = b * (score_q - score_p)
    den = half_g2 * score_p
    _check_finite({"regularization": reg, "target score": score_q, "marginal score": score_p}, offset)
    out = reg + disc + den
    _check_finite({"drift": out}, offset)
    return out, n_clip


def drift(x: np.ndarray, t: float, schedule: Schedule, target: GaussianMixture,
          estimator: PScoreEstimator, cloud: ParticleCloud | None = None) -> np.ndarray:
    """DiffFlow drift ``f + beta (grad log q~ - s_p) + g^2/2 s_p`` at each row of ``x``."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    return _drift(x, t, schedule, target, estimator, cloud)[0]


def sdm_reduced_drift(x: np.ndarray, t: float, schedule: Schedule, target: GaussianMixture) -> np.ndarray:
    """The drift ``f + beta grad log q~`` left after the marginal score cancels (``g^2 = 2 beta``)."""
    if not cancellation_holds(schedule, t):
        raise DynamicsError(f"g^2 != 2 beta at t={t}")
    x = np.atleast_2d(np.asarray(x, dtype=float))
    return schedule.f(x, t) + float(schedule.beta(t)) * smoothed_target_at(schedule, target, t).score(x)


def _chunks(n: int, workers: int) -> list[tuple[int, int]]:
    workers = max(1, min(int(workers), n))
    bounds = np.linspace(0, n, workers + 1).astype(int)
    return [(int(a), int(b)) for a, b in zip(bounds[:-1], bounds[1:]) if b > a]


@dataclass
class StepStats:
    clip_count: int = 0


def step(cloud: ParticleCloud, schedule: Schedule, target: GaussianMixture, estimator: PScoreEstimator,
         dt: float, workers: int = 1, stats: StepStats | None = None,
         executor: ThreadPoolExecutor | None = None) -> ParticleCloud:
    """One Euler-Maruyama step of size ``dt``."""
    if not dt > 0:
        raise DynamicsError("dt must be positive")
    if cloud.t + dt > schedule.horizon + 1e-12:
        raise DynamicsError(f"step to t={cloud.t + dt} passes the horizon {schedule.horizon}")
    t = cloud.t
    coef = schedule.diffusion(t) * math.sqrt(dt)
    x = cloud.positions
    k = cloud.dim

    def work(bounds):
        lo, hi = bounds
        xs = x[lo:hi]
        d, n_clip = _drift(xs, t, schedule, target, estimator, cloud, offset=lo)
        new = xs + d * dt
        if coef != 0.0:
            new = new + coef * kernels.counter_normals(cloud.master_seed, lo, hi - lo, cloud.step_index, k)
        return new, n_clip

    parts = _chunks(cloud.n, workers)
    if len(parts) == 1:
        results = [work(parts[0])]
    elif executor is not None:
        results = list(executor.map(work, parts))
    else:
        with ThreadPoolExecutor(len(parts)) as pool:
            results = list(pool.map(work, parts))
    new = np.concatenate([r[0] for r in results]) if len(results) > 1 else results[0][0]
    if stats is not None:
        stats.clip_count += sum(r[1] for r in results)
    if not np.all(np.isfinite(new)):
        i = int(np.argmax(~np.isfinite(new).all(axis=1)))
        raise NonFiniteError(f"particle {i} left the finite range at step {cloud.step_index}")
    return ParticleCloud(new, t + dt, cloud.master_seed, cloud.step_index + 1)


# --------------------------------------------------------------------------
# Initial laws and full runs
# --------------------------------------------------------------------------


def gaussian_init(n: int, mean, var: float) -> Callable[[int], np.ndarray]:
    """Seeded sampler of ``n`` draws from ``N(mean, var I)`` on the reserved init stream."""
    mean = np.atleast_1d(np.asarray(mean, dtype=float))
    sd = math.sqrt(var)

    def sample(master_seed: int) -> np.ndarray:
        return mean + sd * kernels.counter_normals(master_seed, 0, n, INIT_STEP, len(mean))

    sample.n, sample.mean, sample.var = n, mean, var  # type: ignore[attr-defined]
    return sample


def standardized_gaussian_init(n: int, mean, var: float) -> Callable[[int], np.ndarray]:
    """Like :func:`gaussian_init`, but shifted and scaled to match ``mean``/``var`` exactly."""
    base = gaussian_init(n, np.zeros(np.size(mean)), 1.0)
    mean = np.atleast_1d(np.asarray(mean, dtype=float))

    def sample(master_seed: int) -> np.ndarray:
        z = base(master_seed)
        z = z - z.mean(axis=0)
        z = z / math.sqrt(np.mean(z * z))
        return mean + math.sqrt(var) * z

    return sample


def snapshot_steps(snapshot_times: Sequence[float], dt: float, t0: float, horizon: float) -> list[int]:
    times = [float(s) for s in snapshot_times]
    if any(b <= a for a, b in zip(times, times[1:])):
        raise DynamicsError("snapshot times must be strictly increasing")
    out = []
    for s in times:
        if s < t0 - 1e-12 or s > horizon + 1e-12:
            raise DynamicsError(f"snapshot time {s} outside [{t0}, {horizon}]")
        r = (s - t0) / dt
        n = round(r)
        if abs(r - n) > 1e-9 * max(1.0, r):
            raise DynamicsError(f"dt={dt} does not divide the interval to t={s}")
        out.append(int(n))
    return out


def simulate(init_sampler: Callable[[int], np.ndarray], schedule: Schedule, target: GaussianMixture,
             estimator: PScoreEstimator, dt: float, snapshot_times: Sequence[float], master_seed: int,
             workers: int = 1, t0: float = 0.0, stats: StepStats | None = None) -> list[ParticleCloud]:
    """Run from ``t0`` and return clouds at each of ``snapshot_times``."""
    targets = snapshot_steps(snapshot_times, dt, t0, schedule.horizon)
    cloud = ParticleCloud(init_sampler(master_seed), t0, master_seed, 0)
    stats = stats if stats is not None else StepStats()
    snaps = []
    pool = ThreadPoolExecutor(workers) if workers > 1 else None
    try:
        for n_target in targets:
            while cloud.step_index < n_target:
                nxt = step(cloud, schedule, target, estimator, dt, workers, stats, pool)
                cloud = replace(nxt, t=t0 + nxt.step_index * dt)
            snaps.append(cloud)
    finally:
        if pool is not None:
            pool.shutdown()
    return snaps
