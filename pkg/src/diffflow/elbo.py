"""Monte-Carlo lower bound on the terminal log-density of a DiffFlow model.

Paths follow the driftless reference ``Y_{j+1} = Y_j + sigma(T - s_j) sqrt(ds) xi_j``
from ``Y_0 = x``, for which ``grad log p(Y_s | x) = -(Y_s - x) / V(s)`` with
``V(s) = sum sigma^2 ds``. The bound is::

    E log q0(Y_T) + 1/2 int sigma^2 E|grad log p|^2 ds
                  - 1/2 int E|c / sigma - sigma grad log p|^2 ds

with left-endpoint sums; the first sub-interval borrows the integrand at
``s = ds`` because ``V(0) = 0``.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import kernels
from .dynamics import _chunks
from .gaussian_oracle import GaussianState, OracleTrajectory, propagate
from .schedules import Schedule
from .targets import GaussianMixture, SmoothedScaledTarget

VectorField = Callable[[np.ndarray, float], np.ndarray]


class ElboError(ValueError):
    pass


@dataclass
class DriftAssembly:
    """``c(x, t) = f + g^2/2 s(x, t) + (beta - g^2/2) grad d(x, t)``.

    Missing ``score_fn`` / ``disc_grad_fn`` count as zero fields; with
    ``include_f=False`` the regularization drift is dropped as well.
    """

    schedule: Schedule
    score_fn: VectorField | None = None
    disc_grad_fn: VectorField | None = None
    include_f: bool = True
    trajectory: OracleTrajectory | None = None

    @classmethod
    def oracle(cls, schedule: Schedule, target: GaussianMixture, init: GaussianState) -> "DriftAssembly":
        """Exact fields: ``s = grad log q~_t`` and ``grad d = grad log q~_t - grad log p_t``."""
        traj = OracleTrajectory(init, schedule, target)

        def score(x, t):
            return SmoothedScaledTarget(target, float(schedule.u(t)), schedule.smooth_var(t)).score(x)

        def disc(x, t):
            return score(x, t) - traj.state_at(t).score(x)

        return cls(schedule, score, disc, True, traj)

    @classmethod
    def zero(cls, schedule: Schedule) -> "DriftAssembly":
        return cls(schedule, None, None, include_f=False)

    def prepare(self, times) -> None:
        """Warm the oracle cache in increasing time order."""
        if self.trajectory is not None:
            for t in sorted(float(t) for t in times):
                self.trajectory.state_at(t)

    def sigma_sq(self, t: float) -> float:
        return self.schedule.diffusion_sq(t)

    def c(self, x: np.ndarray, t: float) -> np.ndarray:
        sch = self.schedule
        half_g2 = 0.5 * float(sch.g(t)) ** 2
        out = sch.f(x, t) if self.include_f else np.zeros_like(x)
        if self.score_fn is not None and half_g2 != 0.0:
            out = out + half_g2 * self.score_fn(x, t)
        w = float(sch.beta(t)) - half_g2
        if self.disc_grad_fn is not None and w != 0.0:
            out = out + w * self.disc_grad_fn(x, t)
        return out


@dataclass(frozen=True)
class ElboEstimate:
    value: float
    std_error: float
    prior_term: float
    fisher_term: float
    matching_term: float
    n_paths: int
    n_time_steps: int
    novikov_max: float

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def _path_terms(x, lo, hi, assembly, q0_log_density, T, n_steps, seed, sig):
    ds = T / n_steps
    k = len(x)
    n = hi - lo
    y = np.broadcast_to(x, (n, k)).copy()
    V = 0.0
    fisher = np.zeros(n)
    matching = np.zeros(n)
    novikov = np.zeros(n)
    states = []
    for j in range(n_steps):
        y = y + sig[j] * math.sqrt(ds) * kernels.counter_normals(seed, lo, n, j, k)
        V += sig[j] ** 2 * ds
        states.append((y, V))
    for j in range(n_steps):
        # integrand at s_j, except s_0 -> s_1
        yj, Vj = (states[0] if j == 0 else states[j - 1])
        sj = (1 if j == 0 else j) * ds
        t = T - sj
        sigma = math.sqrt(assembly.sigma_sq(t))
        glp = -(yj - x) / Vj
        c = assembly.c(yj, t)
        fisher += 0.5 * sigma**2 * np.sum(glp * glp, axis=1) * ds
        r = c / sigma - sigma * glp
        matching += 0.5 * np.sum(r * r, axis=1) * ds
        novikov += np.sum(c * c, axis=1) / sigma**2 * ds
    prior = np.asarray(q0_log_density(y), dtype=float).reshape(n)
    return prior, fisher, matching, novikov


def elbo(x, assembly: DriftAssembly, q0_log_density: Callable[[np.ndarray], np.ndarray], T: float,
         n_paths: int, n_steps: int, seed: int, workers: int = 1) -> ElboEstimate:
    """Lower bound on ``log q_T(x)`` for the model with drift ``c`` and noise ``sigma^2 = g^2 - lambda^2``."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    if n_paths < 2:
        raise ElboError("n_paths must be at least 2")
    if n_steps < 1 or not T > 0:
        raise ElboError("need T > 0 and at least one step")
    ds = T / n_steps
    # reference path noise at s_j, and integrand noise at T - s_j (s_0 borrowed from s_1)
    sig2 = np.array([assembly.sigma_sq(T - j * ds) for j in range(n_steps)])
    sig2_eval = np.array([assembly.sigma_sq(T - max(j, 1) * ds) for j in range(n_steps)])
    bad = np.flatnonzero(~(np.minimum(sig2, sig2_eval) > 0))
    if bad.size:
        raise ElboError(f"sigma^2 = g^2 - lambda^2 vanishes at t={T - bad[0] * ds}")
    assembly.prepare([T - max(j, 1) * ds for j in range(n_steps)])
    sig = np.sqrt(sig2)
    parts = _chunks(n_paths, workers)

    def work(b):
        return _path_terms(x, b[0], b[1], assembly, q0_log_density, T, n_steps, seed, sig)

    if len(parts) == 1:
        results = [work(parts[0])]
    else:
        with ThreadPoolExecutor(len(parts)) as pool:
            results = list(pool.map(work, parts))
    prior, fisher, matching, novikov = (np.concatenate([r[i] for r in results]) for i in range(4))
    for name, v in (("prior", prior), ("fisher", fisher), ("matching", matching)):
        if not np.all(np.isfinite(v)):
            raise ElboError(f"non-finite {name} term")
    total = prior + fisher - matching
    p, f, m = float(prior.mean()), float(fisher.mean()), float(matching.mean())
    return ElboEstimate(p + f - m, float(total.std(ddof=1) / math.sqrt(n_paths)), p, f, m,
                        n_paths, n_steps, float(novikov.max()))


def exact_log_likelihood_gaussian(x, schedule: Schedule, init: GaussianState, target: GaussianMixture,
                                  T: float) -> float:
    """``log p_T(x)`` from the closed-form Gaussian marginal started at ``init``."""
    if T == 0:
        return float(init.log_density(np.asarray(x, dtype=float)))
    state = propagate(init, schedule, target, [0.0, T])[-1]
    return float(state.log_density(np.asarray(x, dtype=float)))
