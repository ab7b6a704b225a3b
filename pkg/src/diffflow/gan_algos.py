"""Particle-based GAN training driven by discriminator gradients.

``difflow_gan_train`` moves particles along ``grad_x D`` and regresses a
generator onto the moved images of its own outputs. ``improved_train`` drops
the generator and keeps one discriminator per step, each trained against
noise-corrupted data on an annealing schedule; ``improved_sample`` replays
those gradient fields from fresh prior draws.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import kernels
from .dynamics import INIT_STEP, SCORE_CLIP, NonFiniteError, ParticleCloud, _clip_rows
from .estimators import Mlp, TrainConfig, array_sampler, sigmoid, train_logistic
from .metrics import energy_distance

ScalarSchedule = float | Callable[[int], float]


# --------------------------------------------------------------------------
# Fixtures
# --------------------------------------------------------------------------


def eight_gaussians(n: int, seed: int = 0, radius: float = 2.0, std: float = 0.02**0.5) -> np.ndarray:
    rng = np.random.default_rng(seed)
    ang = 2 * np.pi * rng.integers(0, 8, n) / 8
    centres = radius * np.stack([np.cos(ang), np.sin(ang)], axis=1)
    return centres + std * rng.standard_normal((n, 2))


def two_moons(n: int, seed: int = 0, noise: float = 0.05) -> np.ndarray:
    rng = np.random.default_rng(seed)
    upper = rng.random(n) < 0.5
    theta = np.pi * rng.random(n)
    x = np.where(upper, np.cos(theta), 1.0 - np.cos(theta))
    y = np.where(upper, np.sin(theta), 0.5 - np.sin(theta))
    return np.stack([x, y], axis=1) + noise * rng.standard_normal((n, 2))


def prior_draw(n: int, dim: int, seed: int, scale: float = 1.0) -> np.ndarray:
    """``N(0, scale^2 I)`` draws on the reserved initial-noise stream."""
    return scale * kernels.counter_normals(seed, 0, n, INIT_STEP, dim)


# --------------------------------------------------------------------------
# Plumbing
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class AnnealingPlan:
    """Discriminator corruption levels ``sigma_1 >= ... >= sigma_T >= 0``."""

    sigmas: np.ndarray

    def __post_init__(self):
        s = np.atleast_1d(np.asarray(self.sigmas, dtype=float)).copy()
        if s.ndim != 1 or np.any(s < 0) or np.any(np.diff(s) > 0):
            raise ValueError("annealing levels must be nonnegative and nonincreasing")
        s.setflags(write=False)
        object.__setattr__(self, "sigmas", s)

    @classmethod
    def geometric(cls, sigma_max: float, sigma_min: float, steps: int) -> "AnnealingPlan":
        if not sigma_max >= sigma_min > 0:
            raise ValueError("geometric annealing needs sigma_max >= sigma_min > 0")
        return cls(np.geomspace(sigma_max, sigma_min, steps))

    @classmethod
    def constant(cls, sigma: float, steps: int) -> "AnnealingPlan":
        return cls(np.full(steps, float(sigma)))

    def __len__(self) -> int:
        return len(self.sigmas)

    def __getitem__(self, t: int) -> float:
        """Level at step ``t`` (1-based)."""
        return float(self.sigmas[t - 1])


def _scalar(v: ScalarSchedule, t: int) -> float:
    return float(v(t)) if callable(v) else float(v)


def _row_weights(beta, x: np.ndarray, t: int) -> np.ndarray:
    """``beta(x, t)`` per row; constants and ``beta(t)`` callables broadcast."""
    if callable(beta):
        try:
            w = beta(x, t)
        except TypeError:
            w = beta(t)
    else:
        w = beta
    return np.broadcast_to(np.asarray(w, dtype=float), (len(x),))


def disc_grad(net: Mlp, x: np.ndarray, t: float | None = None) -> np.ndarray:
    return net.input_grad(x, t)


def particle_phase(x: np.ndarray, grad: np.ndarray, eta: float, beta) -> np.ndarray:
    """``x + eta beta grad`` with ``beta`` a scalar or per-row weights."""
    w = np.broadcast_to(np.asarray(beta, dtype=float), (len(x),))
    return x + (eta * w)[:, None] * grad


def _check(x: np.ndarray, t: int):
    if not np.all(np.isfinite(x)):
        raise NonFiniteError(f"particles left the finite range at step {t}")


def _fit_disc(real_sampler, fake: np.ndarray, net: Mlp, cfg: TrainConfig, t_step: int, t_input=None):
    step_cfg = TrainConfig(cfg.step_size, cfg.iterations, cfg.batch_size, cfg.seed + t_step)
    return train_logistic(real_sampler, array_sampler(fake), net, step_cfg, t=t_input)


# --------------------------------------------------------------------------
# Shared generator regressed onto moved particles
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class GanConfig:
    disc: TrainConfig = TrainConfig(step_size=0.05, iterations=200, batch_size=128, seed=0)
    hidden: tuple[int, ...] = (32, 32)
    n_particles: int = 512
    noise_dim: int = 2
    gen_step_size: float = 0.05
    gen_iterations: int = 5
    sigma0: float = 0.0
    warm_start: bool = True
    seed: int = 0


@dataclass
class GanTrainResult:
    generator: Mlp
    discriminator: Mlp
    particles: np.ndarray
    trace: list[dict] = field(default_factory=list)


def smoothed_sampler(data: np.ndarray, sigma0: float):
    data = np.atleast_2d(np.asarray(data, dtype=float))

    def sample(rng, n):
        x = data[rng.integers(0, len(data), n)]
        return x + sigma0 * rng.standard_normal(x.shape) if sigma0 > 0 else x

    return sample


def generator_mse_step(gen: Mlp, z: np.ndarray, targets: np.ndarray, step_size: float) -> Mlp:
    """One gradient step on ``1/(2n) sum |G(z_i) - y_i|^2``."""
    out, acts = gen.forward(gen.assemble(z))
    _, gp = gen.backward(acts, (out - targets) / len(z))
    return gen.with_params(gen.params - step_size * gp)


def difflow_gan_train(real_data: np.ndarray, steps: int, eta: ScalarSchedule, beta,
                      cfg: GanConfig = GanConfig(), particles: np.ndarray | None = None,
                      generator: Mlp | None = None, discriminator: Mlp | None = None) -> GanTrainResult:
    """Alternate discriminator fits, particle moves and generator regression for ``steps`` rounds."""
    real = np.atleast_2d(np.asarray(real_data, dtype=float))
    if len(real) == 0:
        raise ValueError("real_data must be nonempty")
    k = real.shape[1]
    n = cfg.n_particles
    x = prior_draw(n, k, cfg.seed) if particles is None else np.array(particles, dtype=float, ndmin=2)
    n = len(x)
    gen = generator or Mlp.init((cfg.noise_dim, *cfg.hidden, k), seed=cfg.seed + 1)
    disc0 = discriminator or Mlp.init((k, *cfg.hidden, 1), seed=cfg.seed + 2, zero_last=True)
    if gen.in_dim != cfg.noise_dim or gen.out_dim != k or disc0.in_dim != k:
        raise ValueError("generator and discriminator widths do not match the data")
    real_sampler = smoothed_sampler(real, cfg.sigma0)
    rng = np.random.default_rng(cfg.seed + 3)
    disc = disc0
    trace = [{"t": 0, "disc_loss": float("nan"),
              "energy_distance": energy_distance(x, real, n_perm=0).value, "clip_count": 0}]
    for t in range(1, steps + 1):
        disc, losses = _fit_disc(real_sampler, x, disc if cfg.warm_start else disc0, cfg.disc, t)
        step = _scalar(eta, t)
        z = rng.standard_normal((n, cfg.noise_dim))
        gz = gen(z)
        gz = gz[:, None] if gz.ndim == 1 else gz
        g_grad, c1 = _clip_rows(disc_grad(disc, gz), SCORE_CLIP)
        targets = particle_phase(gz, g_grad, step, _row_weights(beta, gz, t))
        for _ in range(cfg.gen_iterations):
            gen = generator_mse_step(gen, z, targets, cfg.gen_step_size)
        x_grad, c2 = _clip_rows(disc_grad(disc, x), SCORE_CLIP)
        x = particle_phase(x, x_grad, step, _row_weights(beta, x, t))
        _check(x, t)
        trace.append({"t": t, "disc_loss": float(losses[-1]),
                      "energy_distance": energy_distance(x, real, n_perm=0).value, "clip_count": c1 + c2})
    return GanTrainResult(gen, disc, x, trace)


# --------------------------------------------------------------------------
# Per-step discriminators with noise annealing
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class ImprovedConfig:
    disc: TrainConfig = TrainConfig(step_size=0.05, iterations=200, batch_size=128, seed=0)
    hidden: tuple[int, ...] = (32, 32)
    n_particles: int = 512
    prior_scale: float = 1.0
    shared: bool = False
    warm_start: bool = True
    keep_trajectory: bool = False
    trace_every: int = 1
    seed: int = 0


@dataclass
class ImprovedResult:
    discriminators: list[Mlp]
    particles: np.ndarray
    trajectory: list[np.ndarray]
    trace: list[dict]
    shared: bool = False
    steps: int = 0

    def grad(self, t: int, x: np.ndarray) -> np.ndarray:
        """``grad_x D_t`` for step ``t`` (1-based)."""
        if self.shared:
            return disc_grad(self.discriminators[0], x, t / self.steps)
        return disc_grad(self.discriminators[t - 1], x)


def corrupted_sampler(data: np.ndarray, sigma: float):
    """Minibatches of ``x* + z`` with fresh ``z ~ N(0, sigma^2 I)`` per draw."""
    return smoothed_sampler(data, sigma)


def improved_train(real_data: np.ndarray, annealing: AnnealingPlan, steps: int, eta: ScalarSchedule,
                   beta: ScalarSchedule = 1.0, cfg: ImprovedConfig = ImprovedConfig(),
                   particles: np.ndarray | None = None) -> ImprovedResult:
    """Train one discriminator per step against annealed noisy data and move particles along it."""
    if len(annealing) != steps:
        raise ValueError(f"annealing plan has {len(annealing)} levels for {steps} steps")
    real = np.atleast_2d(np.asarray(real_data, dtype=float))
    if len(real) == 0:
        raise ValueError("real_data must be nonempty")
    k = real.shape[1]
    x = (prior_draw(cfg.n_particles, k, cfg.seed, cfg.prior_scale) if particles is None
         else np.array(particles, dtype=float, ndmin=2))
    width_in = k + 1 if cfg.shared else k
    net = Mlp.init((width_in, *cfg.hidden, 1), seed=cfg.seed + 2, time_conditioned=cfg.shared, zero_last=True)
    init_net = net
    discs: list[Mlp] = []
    traj = [x] if cfg.keep_trajectory else []
    trace = [{"t": 0, "disc_loss": float("nan"),
              "energy_distance": energy_distance(x, real, n_perm=0).value, "clip_count": 0}]
    for t in range(1, steps + 1):
        t_in = t / steps if cfg.shared else None
        start = net if (cfg.warm_start or cfg.shared) else init_net
        net, losses = _fit_disc(corrupted_sampler(real, annealing[t]), x, start, cfg.disc, t, t_in)
        if not cfg.shared:
            discs.append(net)
        grad, clipped = _clip_rows(disc_grad(net, x, t_in), SCORE_CLIP)
        x = particle_phase(x, grad, _scalar(eta, t), _scalar(beta, t))
        _check(x, t)
        if cfg.keep_trajectory:
            traj.append(x)
        if t % cfg.trace_every == 0 or t == steps:
            trace.append({"t": t, "disc_loss": float(losses[-1]),
                          "energy_distance": energy_distance(x, real, n_perm=0).value, "clip_count": clipped})
    if cfg.shared:
        discs = [net]
    return ImprovedResult(discs, x, traj, trace, cfg.shared, steps)


def improved_sample(trained: ImprovedResult, n: int, dim: int, steps: int, eta: ScalarSchedule,
                    beta: ScalarSchedule = 1.0, seed: int = 0, prior_scale: float = 1.0) -> ParticleCloud:
    """Replay ``x_t = x_{t-1} + eta_t beta(t) grad_x D_t(x_{t-1})`` from a fresh prior draw."""
    if steps > trained.steps:
        raise ValueError(f"only {trained.steps} trained discriminators for {steps} steps")
    x = prior_draw(n, dim, seed, prior_scale)
    for t in range(1, steps + 1):
        grad, _ = _clip_rows(trained.grad(t, x), SCORE_CLIP)
        x = particle_phase(x, grad, _scalar(eta, t), _scalar(beta, t))
        _check(x, t)
    return ParticleCloud(x, float(steps), seed, steps)


def discriminator_accuracy(net: Mlp, real: np.ndarray, fake: np.ndarray, t=None) -> float:
    """Fraction of points classified correctly by the sign of ``D``."""
    return float((np.sum(net(real, t) > 0) + np.sum(net(fake, t) < 0)) / (len(real) + len(fake)))


# --------------------------------------------------------------------------
# Generator update equivalence
# --------------------------------------------------------------------------

MODES = ("saturating", "non_saturating")


@dataclass(frozen=True)
class EquivalenceReport:
    mode: str
    discrepancy: float
    gan_grad: np.ndarray
    surrogate_grad: np.ndarray
    scaling: np.ndarray


def _scaling(d: np.ndarray, mode: str) -> np.ndarray:
    if mode == "saturating":
        return d
    if mode == "non_saturating":
        return 1.0 - d
    raise ValueError(f"mode must be one of {MODES}")


def generator_equivalence_check(generator: Mlp, discriminator: Mlp, batch: np.ndarray,
                                mode: str = "saturating") -> EquivalenceReport:
    """Compare the GAN generator-loss gradient with the MSE-surrogate gradient at ``eta beta = d`` or ``1 - d``.

    The GAN side backpropagates ``log(1 - d(G(z)))`` (saturating) or
    ``-log d(G(z))`` (non-saturating) through ``D`` and then ``G``. The
    surrogate side forms moved targets ``y = G(z) + eta beta grad D(G(z))`` and
    differentiates ``1/(2n) sum |G(z) - y|^2``. Gradients are taken per sample
    and averaged; the result is the max-norm relative discrepancy.
    """
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    z = np.atleast_2d(np.asarray(batch, dtype=float))
    if generator.in_dim != z.shape[1] or generator.out_dim != discriminator.in_dim or discriminator.out_dim != 1:
        raise ValueError("generator and discriminator dimensions do not match")
    n = len(z)
    gan = np.zeros(generator.param_count)
    sur = np.zeros(generator.param_count)
    scales = np.empty(n)
    for i in range(n):
        gout, gacts = generator.forward(z[i:i + 1])
        dout, dacts = discriminator.forward(gout)
        s = _scaling(sigmoid(dout[0, 0]), mode)
        scales[i] = s
        # both generator losses have derivative -s w.r.t. the logit D
        cot_x, _ = discriminator.backward(dacts, np.array([[-s]]))
        gan += generator.backward(gacts, cot_x)[1] / n
        grad_x, _ = discriminator.backward(dacts, np.ones((1, 1)))
        target = gout + s * grad_x
        sur += generator.backward(gacts, gout - target)[1] / n
    scale = max(np.max(np.abs(gan)), np.max(np.abs(sur)))
    disc = 0.0 if scale == 0 else float(np.max(np.abs(gan - sur)) / scale)
    return EquivalenceReport(mode, disc, gan, sur, scales)


@dataclass(frozen=True)
class ScalingNorms:
    d: np.ndarray
    saturating: np.ndarray
    non_saturating: np.ndarray


def particle_gradient_norms(discriminator: Mlp, x: np.ndarray) -> ScalingNorms:
    """Norms of ``d grad D`` and ``(1 - d) grad D``: the particle moves implied by each generator loss."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    d = sigmoid(discriminator(x))
    gn = np.linalg.norm(disc_grad(discriminator, x), axis=1)
    return ScalingNorms(d, d * gn, (1.0 - d) * gn)
