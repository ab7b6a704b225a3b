"""Small tanh MLPs with hand-written backprop, and the score estimators built on them."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import kernels

Sampler = Callable[[np.random.Generator, int], np.ndarray]


class TrainingDiverged(FloatingPointError):
    def __init__(self, message: str, trace: np.ndarray):
        super().__init__(message)
        self.trace = trace


@dataclass(frozen=True)
class TrainConfig:
    step_size: float = 0.05
    iterations: int = 200
    batch_size: int = 128
    seed: int = 0

    def __post_init__(self):
        if not (self.step_size > 0 and self.iterations > 0 and self.batch_size > 0 and self.seed >= 0):
            raise ValueError("TrainConfig fields must be positive")


# --------------------------------------------------------------------------
# MLP
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Mlp:
    """Feed-forward net: tanh hidden layers, linear output.

    Parameters are one flat array laid out layer by layer as ``W`` (in x out)
    followed by ``b``. A time-conditioned net takes ``t`` as an extra last
    input column.
    """

    widths: tuple[int, ...]
    params: np.ndarray
    time_conditioned: bool = False
    activation: str = "tanh"

    def __post_init__(self):
        widths = tuple(int(w) for w in self.widths)
        if len(widths) < 2 or min(widths) < 1:
            raise ValueError("an MLP needs at least input and output widths")
        if self.activation != "tanh":
            raise ValueError("only tanh activations are supported")
        p = np.array(self.params, dtype=float).ravel()
        n = sum(a * b + b for a, b in zip(widths[:-1], widths[1:]))
        if p.size != n:
            raise ValueError(f"expected {n} parameters, got {p.size}")
        p.setflags(write=False)
        object.__setattr__(self, "widths", widths)
        object.__setattr__(self, "params", p)

    @classmethod
    def init(cls, widths: Sequence[int], seed: int = 0, time_conditioned: bool = False,
             zero_last: bool = False) -> "Mlp":
        rng = np.random.default_rng(seed)
        chunks = []
        layers = list(zip(widths[:-1], widths[1:]))
        for i, (a, b) in enumerate(layers):
            if zero_last and i == len(layers) - 1:
                chunks.append(np.zeros(a * b))
            else:
                chunks.append(rng.normal(0.0, 1.0 / math.sqrt(a), a * b))
            chunks.append(np.zeros(b))
        return cls(tuple(widths), np.concatenate(chunks), time_conditioned)

    @property
    def param_count(self) -> int:
        return self.params.size

    @property
    def in_dim(self) -> int:
        return self.widths[0]

    @property
    def data_dim(self) -> int:
        return self.widths[0] - (1 if self.time_conditioned else 0)

    @property
    def out_dim(self) -> int:
        return self.widths[-1]

    def with_params(self, params: np.ndarray) -> "Mlp":
        return Mlp(self.widths, params, self.time_conditioned, self.activation)

    def layers(self, params: np.ndarray | None = None):
        p = self.params if params is None else params
        out, off = [], 0
        for a, b in zip(self.widths[:-1], self.widths[1:]):
            W = p[off:off + a * b].reshape(a, b)
            off += a * b
            out.append((W, p[off:off + b]))
            off += b
        return out

    def assemble(self, x, t=None) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        if self.time_conditioned and x.shape[1] == self.data_dim:
            if t is None:
                raise ValueError("time-conditioned net needs t")
            tt = np.broadcast_to(np.asarray(t, dtype=float).reshape(-1, 1), (x.shape[0], 1))
            x = np.concatenate([x, tt], axis=1)
        if x.shape[1] != self.in_dim:
            raise ValueError(f"input width {x.shape[1]} != {self.in_dim}")
        return x

    def forward(self, X: np.ndarray):
        acts = [X]
        h = X
        layers = self.layers()
        for i, (W, b) in enumerate(layers):
            z = h @ W + b
            h = np.tanh(z) if i < len(layers) - 1 else z
            acts.append(h)
        return h, acts

    def backward(self, acts, grad_out: np.ndarray):
        """Vector-Jacobian product: gradients w.r.t. the input rows and the (batch-summed) params."""
        layers = self.layers()
        grads = []
        delta = grad_out
        for i in range(len(layers) - 1, -1, -1):
            W, _ = layers[i]
            grads.append(delta.sum(axis=0))
            grads.append((acts[i].T @ delta).ravel())
            delta = delta @ W.T
            if i > 0:
                delta = delta * (1.0 - acts[i] ** 2)
        return delta, np.concatenate(grads[::-1])

    def __call__(self, x, t=None) -> np.ndarray:
        out, _ = self.forward(self.assemble(x, t))
        return out[:, 0] if self.out_dim == 1 else out

    def input_grad(self, x, t=None) -> np.ndarray:
        """``grad_x`` of a scalar-output net at each row (time column dropped)."""
        if self.out_dim != 1:
            raise ValueError("input_grad needs a scalar-output net")
        X = self.assemble(x, t)
        out, acts = self.forward(X)
        gx, _ = self.backward(acts, np.ones_like(out))
        return gx[:, : self.data_dim]


@dataclass(frozen=True)
class EvalGrad:
    value: float
    grad_input: np.ndarray
    grad_params: np.ndarray


def mlp_eval_grad(net: Mlp, x) -> EvalGrad:
    """Value and reverse-mode gradients of a scalar-output net at one input vector."""
    x = np.asarray(x, dtype=float)
    if x.ndim != 1 or x.size != net.in_dim:
        raise ValueError(f"input width {x.size} != {net.in_dim}")
    if net.out_dim != 1:
        raise ValueError("mlp_eval_grad needs a scalar-output net")
    out, acts = net.forward(x[None, :])
    gx, gp = net.backward(acts, np.ones_like(out))
    return EvalGrad(float(out[0, 0]), gx[0], gp)


# --------------------------------------------------------------------------
# Persistence: one JSON header line, then raw little-endian float64 params
# --------------------------------------------------------------------------


def save_model(net: Mlp, path) -> None:
    header = {"widths": list(net.widths), "activation": net.activation,
              "time_conditioned": net.time_conditioned, "param_count": net.param_count}
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        fh.write(np.asarray(net.params, dtype="<f8").tobytes())


def load_model(path) -> Mlp:
    raw = Path(path).read_bytes()
    head, _, body = raw.partition(b"\n")
    meta = json.loads(head)
    params = np.frombuffer(body, dtype="<f8").astype(float)
    return Mlp(tuple(meta["widths"]), params, bool(meta["time_conditioned"]), meta["activation"])


# --------------------------------------------------------------------------
# Training
# --------------------------------------------------------------------------


def array_sampler(data: np.ndarray) -> Sampler:
    data = np.atleast_2d(np.asarray(data, dtype=float))

    def sample(rng, n):
        return data[rng.integers(0, len(data), n)]

    return sample


def softplus(z):
    return np.logaddexp(0.0, z)


def sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def logistic_loss(net: Mlp, real: np.ndarray, fake: np.ndarray, t=None) -> float:
    """``mean softplus(-D(real)) + mean softplus(D(fake))``."""
    return float(softplus(-net(real, t)).mean() + softplus(net(fake, t)).mean())


def train_logistic(real_batch_sampler: Sampler, fake_batch_sampler: Sampler, net: Mlp,
                   cfg: TrainConfig, t: float | None = None) -> tuple[Mlp, np.ndarray]:
    """Fit ``D`` to the log density ratio real/fake by SGD on the logistic loss."""
    rng = np.random.default_rng(cfg.seed)
    p = net.params.copy()
    trace = np.empty(cfg.iterations)
    n = cfg.batch_size
    work = net
    for it in range(cfg.iterations):
        X = work.assemble(np.concatenate([real_batch_sampler(rng, n), fake_batch_sampler(rng, n)]), t)
        out, acts = work.forward(X)
        d = out[:, 0]
        trace[it] = softplus(-d[:n]).mean() + softplus(d[n:]).mean()
        if not np.isfinite(trace[it]):
            raise TrainingDiverged(f"logistic loss diverged at iteration {it}", trace[: it + 1])
        g = np.concatenate([-sigmoid(-d[:n]), sigmoid(d[n:])]) / n
        _, gp = work.backward(acts, g[:, None])
        p -= cfg.step_size * gp
        work = net.with_params(p)
    return work, trace


@dataclass(frozen=True)
class DsmModel:
    """Noise-conditional score ``s(x, sigma) = net(x, c(sigma)) / sigma``.

    ``c`` maps ``log sigma`` linearly onto ``[0, 1]`` across the trained levels.
    """

    net: Mlp
    sigma_min: float
    sigma_max: float

    def cond(self, sigma) -> np.ndarray:
        sigma = np.asarray(sigma, dtype=float)
        if self.sigma_max == self.sigma_min:
            return np.full_like(sigma, 0.5)
        return (np.log(sigma) - math.log(self.sigma_min)) / math.log(self.sigma_max / self.sigma_min)

    def __call__(self, x, sigma) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        sig = np.broadcast_to(np.asarray(sigma, dtype=float), (x.shape[0],))
        out, _ = self.net.forward(self.net.assemble(x, self.cond(sig)))
        return out / sig[:, None]


def dsm_loss(score_fn: Callable[[np.ndarray, np.ndarray], np.ndarray], x: np.ndarray,
             sigmas: np.ndarray, eps: np.ndarray) -> float:
    """``mean sigma^2 || s(x + sigma eps, sigma) + eps / sigma ||^2`` on a fixed batch."""
    y = x + sigmas[:, None] * eps
    r = sigmas[:, None] * score_fn(y, sigmas) + eps
    return float(np.mean(np.sum(r * r, axis=1)))


def train_dsm(target_sampler: Sampler, noise_levels: Sequence[float], net: Mlp,
              cfg: TrainConfig) -> tuple[DsmModel, np.ndarray]:
    """Denoising score matching over the given noise levels."""
    levels = np.asarray(noise_levels, dtype=float)
    if levels.size == 0 or np.any(levels <= 0):
        raise ValueError("noise levels must be positive")
    if not net.time_conditioned or net.out_dim != net.data_dim:
        raise ValueError("DSM needs a time-conditioned net with one output per data dimension")
    rng = np.random.default_rng(cfg.seed)
    model = DsmModel(net, float(levels.min()), float(levels.max()))
    p = net.params.copy()
    trace = np.empty(cfg.iterations)
    n = cfg.batch_size
    work = net
    for it in range(cfg.iterations):
        x = target_sampler(rng, n)
        sig = levels[rng.integers(0, levels.size, n)]
        eps = rng.standard_normal(x.shape)
        X = work.assemble(x + sig[:, None] * eps, model.cond(sig))
        out, acts = work.forward(X)
        r = out + eps
        trace[it] = np.mean(np.sum(r * r, axis=1))
        if not np.isfinite(trace[it]):
            raise TrainingDiverged(f"DSM loss diverged at iteration {it}", trace[: it + 1])
        _, gp = work.backward(acts, 2.0 * r / n)
        p -= cfg.step_size * gp
        work = net.with_params(p)
    return DsmModel(work, model.sigma_min, model.sigma_max), trace


# --------------------------------------------------------------------------
# Kernel density scores
# --------------------------------------------------------------------------


def silverman_bandwidth(points: np.ndarray) -> float:
    points = np.atleast_2d(points)
    n, k = points.shape
    sd = float(np.mean(np.std(points, axis=0, ddof=1))) if n > 1 else 1.0
    return sd * (4.0 / ((k + 2) * n)) ** (1.0 / (k + 4))


def kde_score(cloud, x, bandwidth: float) -> np.ndarray:
    """Score of the Gaussian KDE of ``cloud`` (a ParticleCloud or an array) at ``x``."""
    if not bandwidth > 0:
        raise ValueError("bandwidth must be positive")
    pts = np.atleast_2d(getattr(cloud, "positions", cloud))
    x = np.asarray(x, dtype=float)
    out = kernels.kde_score(pts, np.atleast_2d(x), bandwidth)
    return out[0] if x.ndim == 1 else out


def kde_log_density(cloud, x, bandwidth: float) -> np.ndarray:
    from scipy.special import logsumexp

    pts = np.atleast_2d(getattr(cloud, "positions", cloud))
    x = np.atleast_2d(np.asarray(x, dtype=float))
    n, k = pts.shape
    out = np.empty(len(x))
    for lo in range(0, len(x), 256):
        d2 = np.sum((x[lo:lo + 256, None, :] - pts[None]) ** 2, axis=-1)
        out[lo:lo + 256] = logsumexp(-0.5 * d2 / bandwidth**2, axis=1)
    return out - math.log(n) - 0.5 * k * math.log(2 * math.pi * bandwidth**2)
