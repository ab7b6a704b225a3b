"""Isotropic Gaussian-mixture targets and their scaled, smoothed variants."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class GaussianMixture:
    """Mixture of isotropic Gaussians ``sum_i w_i N(mean_i, var_i I)``."""

    weights: np.ndarray
    means: np.ndarray
    variances: np.ndarray

    def __post_init__(self):
        w = np.atleast_1d(np.asarray(self.weights, dtype=float))
        mu = np.atleast_2d(np.asarray(self.means, dtype=float))
        v = np.atleast_1d(np.asarray(self.variances, dtype=float))
        if len(w) < 1 or mu.shape[0] != len(w) or v.shape != w.shape:
            raise ValueError("weights, means and variances must describe the same components")
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
            raise ValueError("mixture weights must be nonnegative and sum to 1")
        if np.any(v <= 0):
            raise ValueError("component variances must be positive")
        for name, arr in (("weights", w), ("means", mu), ("variances", v)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @classmethod
    def single(cls, mean, var: float) -> "GaussianMixture":
        return cls(np.ones(1), np.atleast_2d(np.asarray(mean, dtype=float)), np.array([float(var)]))

    @classmethod
    def from_config(cls, doc: dict) -> "GaussianMixture":
        comps = doc["components"]
        dim = int(doc["dim"])
        means = np.array([np.broadcast_to(np.asarray(c["mean"], dtype=float), (dim,)) for c in comps])
        return cls(np.array([c["weight"] for c in comps], dtype=float), means,
                   np.array([c["var"] for c in comps], dtype=float))

    def to_config(self) -> dict:
        return {
            "dim": self.dim,
            "components": [
                {"weight": float(w), "mean": m.tolist(), "var": float(v)}
                for w, m, v in zip(self.weights, self.means, self.variances)
            ],
        }

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    @property
    def is_single(self) -> bool:
        return len(self.weights) == 1

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        comp = rng.choice(len(self.weights), size=n, p=self.weights)
        z = rng.standard_normal((n, self.dim))
        return self.means[comp] + np.sqrt(self.variances[comp])[:, None] * z

    def log_density(self, x) -> np.ndarray:
        return SmoothedScaledTarget(self).log_density(x)

    def score(self, x) -> np.ndarray:
        return SmoothedScaledTarget(self).score(x)


@dataclass(frozen=True)
class SmoothedScaledTarget:
    """Law of ``X / scale_u + eps`` with ``X ~ base`` and ``eps ~ N(0, smooth_var I)``."""

    base: GaussianMixture
    scale_u: float = 1.0
    smooth_var: float = 0.0

    def __post_init__(self):
        if not self.scale_u > 0:
            raise ValueError("scale_u must be positive")
        if not self.smooth_var >= 0:
            raise ValueError("smooth_var must be nonnegative")

    def components(self) -> tuple[np.ndarray, np.ndarray]:
        u = self.scale_u
        return self.base.means / u, self.base.variances / (u * u) + self.smooth_var

    def log_density(self, x) -> np.ndarray:
        """Exact log-density at each row of ``x`` (a single vector gives a scalar)."""
        x = np.asarray(x, dtype=float)
        single = x.ndim == 1
        x2 = np.atleast_2d(x)
        mu, v = self.components()
        k = self.base.dim
        d2 = np.sum((x2[:, None, :] - mu[None, :, :]) ** 2, axis=-1)
        with np.errstate(divide="ignore"):
            logw = np.log(self.base.weights)
        comp = logw[None, :] - 0.5 * k * (LOG_2PI + np.log(v))[None, :] - 0.5 * d2 / v[None, :]
        out = logsumexp(comp, axis=1)
        return out[0] if single else out

    def score(self, x) -> np.ndarray:
        """Gradient of :meth:`log_density`: responsibility-weighted Gaussian scores."""
        x = np.asarray(x, dtype=float)
        single = x.ndim == 1
        x2 = np.atleast_2d(x)
        mu, v = self.components()
        if len(v) == 1:
            out = (mu[0] - x2) / v[0]
            return out[0] if single else out
        k = self.base.dim
        diff = mu[None, :, :] - x2[:, None, :]
        with np.errstate(divide="ignore"):
            logw = np.log(self.base.weights)
        comp = logw[None, :] - 0.5 * k * np.log(v)[None, :] - 0.5 * np.sum(diff**2, axis=-1) / v[None, :]
        comp -= comp.max(axis=1, keepdims=True)
        r = np.exp(comp)
        r /= r.sum(axis=1, keepdims=True)
        # fixed component order keeps each row independent of batch shape
        out = np.zeros_like(x2)
        for c in range(len(v)):
            out += (r[:, c] / v[c])[:, None] * diff[:, c, :]
        return out[0] if single else out


def smoothed_log_density(target: SmoothedScaledTarget, x) -> np.ndarray:
    return target.log_density(x)


def smoothed_score(target: SmoothedScaledTarget, x) -> np.ndarray:
    return target.score(x)


def quantile_radius(target: GaussianMixture, gamma: float, n_mc: int = 200_000, seed: int = 0) -> float:
    """Radius of the smallest origin-centred ball holding a ``gamma`` fraction of seeded samples."""
    if not 0.0 < gamma < 1.0:
        raise ValueError("gamma must lie in (0, 1)")
    if n_mc < 1000:
        raise ValueError("n_mc < 1000 gives too noisy a quantile estimate")
    x = target.sample(n_mc, np.random.default_rng(seed))
    r = np.sort(np.linalg.norm(x, axis=1))
    return float(r[math.ceil(gamma * n_mc) - 1])


@dataclass(frozen=True)
class GrowthBound:
    A: float
    B: float
    C: float
    radius: float

    def __call__(self, x) -> np.ndarray:
        r = np.linalg.norm(np.atleast_2d(x), axis=1)
        return self.A * r * r + self.B * r + self.C


def growth_bound_constants(target: GaussianMixture, sigma: float, gamma: float,
                           n_mc: int = 200_000, seed: int = 0) -> GrowthBound:
    """Constants of the quadratic bound ``|log q(x; sigma)| <= A|x|^2 + B|x| + C``."""
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    c_q = quantile_radius(target, gamma, n_mc=n_mc, seed=seed)
    k = target.dim
    log_peak = -0.5 * k * LOG_2PI - k * math.log(sigma)
    s2 = sigma * sigma
    C = max(c_q * c_q / (2 * s2) - (math.log(gamma) + log_peak), log_peak)
    return GrowthBound(A=1.0 / (2 * s2), B=c_q / s2, C=C, radius=c_q)


# --------------------------------------------------------------------------
# Bundled fixtures
# --------------------------------------------------------------------------


def standard_normal(dim: int = 1) -> GaussianMixture:
    return GaussianMixture.single(np.zeros(dim), 1.0)


def bimodal_1d() -> GaussianMixture:
    return GaussianMixture(np.array([0.3, 0.7]), np.array([[-2.0], [1.5]]), np.array([0.5, 1.0]))


def eight_gaussians_mixture(radius: float = 2.0, var: float = 0.02) -> GaussianMixture:
    ang = 2 * np.pi * np.arange(8) / 8
    means = radius * np.stack([np.cos(ang), np.sin(ang)], axis=1)
    return GaussianMixture(np.full(8, 1 / 8), means, np.full(8, var))


def offset_pair_2d() -> GaussianMixture:
    return GaussianMixture(np.array([0.5, 0.5]), np.array([[3.0, 0.0], [-1.0, 2.0]]), np.array([0.3, 2.0]))


def fixture_mixtures() -> dict[str, GaussianMixture]:
    return {
        "standard_normal_1d": standard_normal(1),
        "bimodal_1d": bimodal_1d(),
        "standard_normal_2d": standard_normal(2),
        "eight_gaussians": eight_gaussians_mixture(),
        "offset_pair_2d": offset_pair_2d(),
    }
