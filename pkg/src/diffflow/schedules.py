"""Scaling-function schedules for the DiffFlow SDE.

A :class:`Schedule` bundles the six time functions that select a point on the
GAN / score-diffusion spectrum::

    dX = [f(X,t) + beta(t) (grad log q~_t(X) - grad log p_t(X)) + g(t)^2/2 grad log p_t(X)] dt
         + sqrt(g(t)^2 - lambda(t)^2) dW

where ``q~_t`` is the target rescaled by ``u(t)`` and smoothed at level
``sigma(t)``. With ``continuation=True`` the ``lam`` field holds the
continued value and the diffusion coefficient is ``sqrt(g^2 + lam^2)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Callable

import numpy as np
from scipy import integrate

ScalarFn = Callable[[float], float]

PRESETS = (
    "langevin",
    "ve_karras",
    "ve_general",
    "ode_ve",
    "vp",
    "vanilla_gan",
    "diffusion_gan",
    "slcd",
)

REGIMES = ("GAN", "mixed", "langevin_boundary", "SLCD")


class ScheduleError(ValueError):
    """Bad preset name, missing parameter, or an inconsistent schedule."""


# --------------------------------------------------------------------------
# Parametric scalar profiles (serializable building blocks for presets)
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Constant:
    value: float

    def __call__(self, t):
        return self.value + 0.0 * t

    def integral(self, t: float) -> float:
        return self.value * t

    def to_dict(self) -> dict:
        return {"kind": "constant", "value": self.value}


@dataclass(frozen=True)
class Linear:
    """``start + (end - start) * t / horizon``."""

    start: float
    end: float
    horizon: float = 1.0

    def __call__(self, t):
        return self.start + (self.end - self.start) * t / self.horizon

    def integral(self, t: float) -> float:
        return self.start * t + 0.5 * (self.end - self.start) * t * t / self.horizon

    def to_dict(self) -> dict:
        return {"kind": "linear", "start": self.start, "end": self.end, "horizon": self.horizon}


@dataclass(frozen=True)
class GeometricSigma:
    """Noise scale ``sigma_min (sigma_max/sigma_min)^(tau/horizon)``."""

    sigma_min: float
    sigma_max: float
    horizon: float = 1.0

    def __call__(self, tau):
        return self.sigma_min * (self.sigma_max / self.sigma_min) ** (tau / self.horizon)

    def sq_derivative(self, tau):
        """d sigma^2 / d tau."""
        return 2.0 * self(tau) ** 2 * math.log(self.sigma_max / self.sigma_min) / self.horizon

    def to_dict(self) -> dict:
        return {"kind": "geometric_sigma", "sigma_min": self.sigma_min,
                "sigma_max": self.sigma_max, "horizon": self.horizon}


@dataclass(frozen=True)
class LinearSigma:
    """Noise scale ``scale * tau``."""

    scale: float = 1.0

    def __call__(self, tau):
        return self.scale * tau

    def sq_derivative(self, tau):
        return 2.0 * self.scale**2 * tau

    def to_dict(self) -> dict:
        return {"kind": "linear_sigma", "scale": self.scale}


_PROFILE_KINDS = {
    "constant": lambda d: Constant(float(d["value"])),
    "linear": lambda d: Linear(float(d["start"]), float(d["end"]), float(d.get("horizon", 1.0))),
    "geometric_sigma": lambda d: GeometricSigma(
        float(d["sigma_min"]), float(d["sigma_max"]), float(d.get("horizon", 1.0))),
    "linear_sigma": lambda d: LinearSigma(float(d.get("scale", 1.0))),
}


def as_profile(spec: Any):
    """Coerce a number, ``{"kind": ...}`` dict, profile or callable into a callable."""
    if isinstance(spec, bool):
        raise ScheduleError(f"not a scalar profile: {spec!r}")
    if isinstance(spec, (int, float)):
        return Constant(float(spec))
    if isinstance(spec, dict):
        try:
            return _PROFILE_KINDS[spec["kind"]](spec)
        except KeyError as exc:
            raise ScheduleError(f"bad profile spec {spec!r}") from exc
    if callable(spec):
        return spec
    raise ScheduleError(f"not a scalar profile: {spec!r}")


def profile_integral(fn, t: float) -> float:
    """``int_0^t fn(s) ds``, analytic when the profile provides it."""
    if hasattr(fn, "integral"):
        return float(fn.integral(t))
    val, _ = integrate.quad(fn, 0.0, t, epsabs=1e-14, epsrel=1e-13, limit=200)
    return float(val)


def _sq_derivative(sigma_fn, tau: float, dsigma2=None) -> float:
    if dsigma2 is not None:
        return float(dsigma2(tau))
    if hasattr(sigma_fn, "sq_derivative"):
        return float(sigma_fn.sq_derivative(tau))
    h = 1e-6 * max(1.0, abs(tau))
    return float((sigma_fn(tau + h) ** 2 - sigma_fn(tau - h) ** 2) / (2 * h))


def _serializable(value: Any):
    if isinstance(value, (bool, int, float, str)) or value is None:
        return value
    if hasattr(value, "to_dict"):
        return value.to_dict()
    if isinstance(value, dict):
        return {k: _serializable(v) for k, v in value.items()}
    raise TypeError("not serializable")


# --------------------------------------------------------------------------
# Schedule
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Schedule:
    """The six scaling functions on ``[0, horizon]``.

    ``f`` is affine (``f(x, t) = f_alpha(t) * x``) unless ``f_general`` is
    given. ``convention`` says whether ``sigma`` is a standard deviation
    (``"std"``) or a variance (``"var"``) of the smoothing noise.
    """

    horizon: float
    f_alpha: ScalarFn
    beta: ScalarFn
    u: ScalarFn
    sigma: ScalarFn
    g: ScalarFn
    lam: ScalarFn
    continuation: bool = False
    convention: str = "std"
    f_general: Callable[[np.ndarray, float], np.ndarray] | None = None
    name: str = "custom"
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.horizon > 0:
            raise ScheduleError("horizon must be positive")
        if self.convention not in ("std", "var"):
            raise ScheduleError(f"unknown smoothing convention {self.convention!r}")

    @property
    def affine(self) -> bool:
        return self.f_general is None

    def f(self, x: np.ndarray, t: float) -> np.ndarray:
        if self.f_general is not None:
            return self.f_general(x, t)
        return self.f_alpha(t) * x

    def smooth_var(self, t: float) -> float:
        """Variance of the smoothing noise at ``t``."""
        s = float(self.sigma(t))
        return s * s if self.convention == "std" else s

    def diffusion_sq(self, t: float) -> float:
        """``g^2 - lam^2`` (or ``g^2 + lam^2`` under continuation); may be negative."""
        g, lam = float(self.g(t)), float(self.lam(t))
        return g * g + lam * lam if self.continuation else g * g - lam * lam

    def diffusion(self, t: float) -> float:
        return math.sqrt(max(self.diffusion_sq(t), 0.0))

    def lam_sq_effective(self, t: float) -> float:
        """The ``lambda^2`` entering the marginal's Fokker-Planck equation."""
        lam = float(self.lam(t))
        return -lam * lam if self.continuation else lam * lam

    def replace(self, **changes) -> "Schedule":
        from dataclasses import replace

        if "params" not in changes:
            changes["params"] = {}
            changes.setdefault("name", "custom")
        return replace(self, **changes)

    def tabulate(self, n: int = 1001) -> dict:
        if not self.affine:
            raise ScheduleError("only affine-drift schedules can be tabulated")
        grid = np.linspace(0.0, self.horizon, n)
        return {
            "t_grid": grid.tolist(),
            "f_alpha": [float(self.f_alpha(t)) for t in grid],
            "beta": [float(self.beta(t)) for t in grid],
            "u": [float(self.u(t)) for t in grid],
            "sigma": [float(self.sigma(t)) for t in grid],
            "g": [float(self.g(t)) for t in grid],
            "lambda": [float(self.lam(t)) for t in grid],
            "continuation": self.continuation,
            "convention": self.convention,
        }

    def to_config(self, n_tab: int = 1001) -> dict:
        """JSON-ready document: preset + params when possible, else a dense tabulation."""
        if self.name in PRESETS:
            try:
                return {"preset": self.name, "params": _serializable(self.params)}
            except TypeError:
                pass
        return self.tabulate(n_tab)


def from_tabulation(doc: dict) -> Schedule:
    grid = np.asarray(doc["t_grid"], dtype=float)
    if grid.ndim != 1 or len(grid) < 2 or np.any(np.diff(grid) <= 0) or grid[0] != 0.0:
        raise ScheduleError("t_grid must be increasing, start at 0 and have >= 2 points")

    def interp(key):
        vals = np.asarray(doc[key], dtype=float)
        if vals.shape != grid.shape:
            raise ScheduleError(f"tabulated {key!r} does not match t_grid")
        return lambda t: float(np.interp(t, grid, vals))

    try:
        return Schedule(
            horizon=float(grid[-1]),
            f_alpha=interp("f_alpha"),
            beta=interp("beta"),
            u=interp("u"),
            sigma=interp("sigma"),
            g=interp("g"),
            lam=interp("lambda"),
            continuation=bool(doc.get("continuation", False)),
            convention=doc.get("convention", "std"),
            name="tabulated",
        )
    except KeyError as exc:
        raise ScheduleError(f"tabulated schedule missing field {exc}") from exc


def from_config(doc: dict) -> Schedule:
    if "preset" in doc:
        return preset(doc["preset"], doc.get("params", {}))
    return from_tabulation(doc)


# --------------------------------------------------------------------------
# Presets
# --------------------------------------------------------------------------


def _need(params: dict, *keys: str):
    missing = [k for k in keys if k not in params]
    if missing:
        raise ScheduleError(f"missing parameter(s): {', '.join(missing)}")
    return [params[k] for k in keys]


def _zero(t):
    return 0.0


def _one(t):
    return 1.0


def preset(name: str, params: dict | None = None) -> Schedule:
    """Build a named preset.

    ======================  ==============================================
    ``langevin``            ``sigma0``, ``beta``; optional ``T``
    ``ve_karras``           ``T``
    ``ve_general``          ``sigma`` (noise-scale profile); optional ``T``, ``dsigma2``
    ``ode_ve``              as ``ve_general``
    ``vp``                  ``beta`` (forward VP rate); optional ``T``
    ``vanilla_gan``         ``sigma0``, ``beta``; optional ``T``
    ``diffusion_gan``       ``beta``, ``g``, ``lambda``; optional ``sigma0``, ``T``
    ``slcd``                as ``diffusion_gan``
    ======================  ==============================================

    Every preset also accepts ``continuation`` (bool).
    """
    params = dict(params or {})
    if name not in PRESETS:
        raise ScheduleError(f"unknown preset {name!r}; expected one of {PRESETS}")
    T = float(params.get("T", 1.0))
    cont = bool(params.get("continuation", False))
    common = dict(horizon=T, continuation=cont, name=name, params=params)

    if name in ("langevin", "vanilla_gan"):
        sigma0, beta = _need(params, "sigma0", "beta")
        sigma0 = float(sigma0)
        beta = as_profile(beta)
        g = (lambda t: math.sqrt(2.0 * beta(t))) if name == "langevin" else _zero
        return Schedule(f_alpha=_zero, beta=beta, u=_one, sigma=lambda t: sigma0,
                        g=g, lam=_zero, **common)

    if name == "ve_karras":
        (T,) = _need(params, "T")
        T = float(T)
        common["horizon"] = T
        return Schedule(
            f_alpha=_zero,
            beta=lambda t: 2.0 * (T - t),
            u=_one,
            sigma=lambda t: T - t,
            g=lambda t: 2.0 * math.sqrt(max(T - t, 0.0)),
            # sqrt(2(T-t)) so that g^2 - lam^2 = 2(T-t)
            lam=lambda t: math.sqrt(max(2.0 * (T - t), 0.0)),
            **common,
        )

    if name in ("ve_general", "ode_ve"):
        (sigma_spec,) = _need(params, "sigma")
        sig = as_profile(sigma_spec)
        dsig2 = params.get("dsigma2")
        s0sq = float(sig(0.0)) ** 2
        scale = 1.0 if name == "ve_general" else 0.5

        def beta(t):
            return scale * _sq_derivative(sig, T - t, dsig2)

        def smooth(t):
            return math.sqrt(max(float(sig(T - t)) ** 2 - s0sq, 0.0))

        g = lambda t: math.sqrt(2.0 * max(beta(t), 0.0))  # noqa: E731
        lam = (lambda t: math.sqrt(max(beta(t), 0.0))) if name == "ve_general" else g
        return Schedule(f_alpha=_zero, beta=beta, u=_one, sigma=smooth, g=g, lam=lam, **common)

    if name == "vp":
        (beta_spec,) = _need(params, "beta")
        bvp = as_profile(beta_spec)

        def b_rev(t):
            return float(bvp(T - t))

        def u(t):
            return math.exp(0.5 * profile_integral(bvp, T - t))

        def sigma(t):
            return -math.expm1(-profile_integral(bvp, T - t))

        return Schedule(
            f_alpha=lambda t: 0.5 * b_rev(t),
            beta=b_rev,
            u=u,
            sigma=sigma,
            g=lambda t: math.sqrt(2.0 * b_rev(t)),
            lam=lambda t: math.sqrt(b_rev(t)),
            convention="var",
            **common,
        )

    # diffusion_gan / slcd
    beta_spec, g_spec, lam_spec = _need(params, "beta", "g", "lambda")
    sigma0 = float(params.get("sigma0", 0.0))
    return Schedule(f_alpha=_zero, beta=as_profile(beta_spec), u=_one, sigma=lambda t: sigma0,
                    g=as_profile(g_spec), lam=as_profile(lam_spec), **common)


# --------------------------------------------------------------------------
# Validation and decomposition
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Violation:
    field: str
    t: float
    value: float


def validate(schedule: Schedule, n_check: int = 101) -> list[Violation]:
    """Check the schedule invariants on a uniform grid; violations are returned, not raised."""
    if n_check < 2:
        raise ScheduleError("n_check must be >= 2")
    out = []
    for t in np.linspace(0.0, schedule.horizon, n_check):
        t = float(t)
        b, u, s = float(schedule.beta(t)), float(schedule.u(t)), float(schedule.sigma(t))
        if not b >= 0:
            out.append(Violation("beta", t, b))
        if not u > 0:
            out.append(Violation("u", t, u))
        if not s >= 0:
            out.append(Violation("sigma", t, s))
        if not schedule.continuation:
            g, lam = float(schedule.g(t)), float(schedule.lam(t))
            d = g * g - lam * lam
            if d < -1e-12 * max(g * g + lam * lam, 1.0):
                out.append(Violation("lambda", t, d))
    return out


@dataclass(frozen=True)
class Decomposition:
    sdm_weight: float
    gan_weight: float
    churn_weight: float
    regime_label: str


def decompose(schedule: Schedule, t: float, rtol: float = 1e-9) -> Decomposition:
    """Split the drift weights at ``t`` into SDM, GAN and churn parts."""
    if not 0.0 <= t <= schedule.horizon:
        raise ScheduleError(f"t={t} outside [0, {schedule.horizon}]")
    b = float(schedule.beta(t))
    half_g2 = 0.5 * float(schedule.g(t)) ** 2
    if half_g2 == 0.0:
        label = "GAN"
    elif abs(half_g2 - b) <= rtol * max(abs(b), half_g2):
        label = "langevin_boundary"
    elif half_g2 < b:
        label = "mixed"
    else:
        label = "SLCD"
    return Decomposition(
        sdm_weight=min(half_g2, b),
        gan_weight=max(b - half_g2, 0.0),
        churn_weight=max(half_g2 - b, 0.0),
        regime_label=label,
    )


def decomposed_drift(schedule: Schedule, t: float, x: np.ndarray,
                     score_target: np.ndarray, score_marginal: np.ndarray) -> dict[str, np.ndarray]:
    """The regularization, SDM, GAN and churn drift pieces; their sum is the full drift."""
    d = decompose(schedule, t)
    return {
        "regularization": schedule.f(x, t),
        "sdm": d.sdm_weight * score_target,
        "gan": d.gan_weight * (score_target - score_marginal),
        "churn": d.churn_weight * score_marginal,
    }
