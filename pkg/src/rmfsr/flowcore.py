"""Flow-matching math: informed-prior path, targets, losses, conversions, schedules.

Arrays may be complex spectrograms or their real two-channel form; per-sample
times ``t`` and ``r`` are scalars or (B,) arrays broadcast over trailing axes.
Loss functions also accept :class:`~rmfsr.autodiff.Tensor` operands.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .dsp import pink_noise

LOSS_MODES = ("velocity", "dp", "dp-imf")
T_FLOOR = 1e-4


class ClampWarning(UserWarning):
    """A conversion was evaluated below the time floor and clamped."""


@dataclass
class FlowConfig:
    sigma_max: float = 0.3
    sigma_min: float = 1e-8
    noise_color: str = "pink"
    t_sampler: str = "logit-normal"
    t_loc: float = 0.4
    t_scale: float = 1.0
    loss_mode: str = "dp-imf"
    # network output meaning; None picks "velocity" for the velocity loss, "data" otherwise
    head: str | None = None

    def __post_init__(self):
        if not 0 <= self.sigma_min < self.sigma_max <= 1:
            raise ValueError("need 0 <= sigma_min < sigma_max <= 1")
        if self.noise_color not in ("white", "pink"):
            raise ValueError(f"noise_color must be white or pink, got {self.noise_color!r}")
        if self.t_sampler not in ("uniform", "logit-normal"):
            raise ValueError(f"unknown t_sampler {self.t_sampler!r}")
        if not np.isfinite(self.t_loc) or self.t_scale <= 0:
            raise ValueError("t_loc must be finite and t_scale positive")
        if self.loss_mode not in LOSS_MODES:
            raise ValueError(f"loss_mode must be one of {LOSS_MODES}")
        if self.head not in (None, "velocity", "data"):
            raise ValueError(f"head must be velocity or data, got {self.head!r}")

    @property
    def prediction(self) -> str:
        if self.head is not None:
            return self.head
        return "velocity" if self.loss_mode == "velocity" else "data"


@dataclass
class FlowSample:
    x0: np.ndarray
    y: np.ndarray
    eps: np.ndarray
    t: np.ndarray
    r: np.ndarray
    mu_t: np.ndarray
    sigma_t: np.ndarray
    x_t: np.ndarray


@dataclass(frozen=True)
class ScheduleState:
    epoch: int
    total_epochs: int
    rho: float
    gamma: float


def bcast(t, ndim: int):
    """Reshape per-sample times (B,) to broadcast against (B, ...) of ``ndim`` dims."""
    if isinstance(t, ad.Tensor):
        if t.ndim == 0:
            return t
        return t.reshape(t.shape + (1,) * (ndim - t.ndim))
    t = np.asarray(t, dtype=np.float64)
    if t.ndim == 0:
        return t
    return t.reshape(t.shape + (1,) * (ndim - t.ndim))


def sample_noise(shape, cfg: FlowConfig, rng: np.random.Generator) -> np.ndarray:
    """Colored noise in real two-channel layout (..., 2, K, N)."""
    *lead, two, k, n = shape
    if two != 2:
        raise ValueError(f"expected (..., 2, K, N) shape, got {shape}")
    count = int(np.prod(lead)) if lead else 1
    out = np.empty((count, 2, k, n))
    for i in range(count):
        e = pink_noise((k, n), rng, cfg.noise_color)
        out[i, 0], out[i, 1] = e.real, e.imag
    return out.reshape(shape)


def make_flow_sample(x0, y, t, r, cfg: FlowConfig, rng: np.random.Generator | None = None,
                     eps=None) -> FlowSample:
    """Point on the informed-prior OT path at time t (noise drawn from ``rng`` unless given)."""
    x0 = np.asarray(x0)
    y = np.asarray(y)
    if x0.shape != y.shape:
        raise ValueError(f"shape mismatch: x0 {x0.shape} vs y {y.shape}")
    t = np.asarray(t, dtype=np.float64)
    r = np.asarray(r, dtype=np.float64)
    if np.any(t < 0) or np.any(t > 1):
        raise ValueError("t must lie in [0, 1]")
    if np.any(r > t):
        raise ValueError("r must not exceed t")
    if eps is None:
        if np.iscomplexobj(x0):
            eps = pink_noise(x0.shape[-2:], rng, cfg.noise_color) if x0.ndim == 2 else np.stack(
                [pink_noise(x0.shape[-2:], rng, cfg.noise_color) for _ in range(x0.shape[0])]
            )
        else:
            eps = sample_noise(x0.shape, cfg, rng)
    eps = np.asarray(eps)
    if eps.shape != x0.shape:
        raise ValueError(f"noise shape {eps.shape} != data shape {x0.shape}")
    tb = bcast(t, x0.ndim)
    mu = (1 - tb) * x0 + tb * y
    sigma = (1 - t) * cfg.sigma_min + t * cfg.sigma_max
    x_t = mu + bcast(sigma, x0.ndim) * eps
    return FlowSample(x0=x0, y=y, eps=eps, t=t, r=r, mu_t=mu, sigma_t=sigma, x_t=x_t)


def velocity_target(sample: FlowSample, cfg: FlowConfig) -> np.ndarray:
    """(sigma_max - sigma_min) * eps - (x0 - y); constant along the path."""
    return (cfg.sigma_max - cfg.sigma_min) * sample.eps - (sample.x0 - sample.y)


def mse(pred, target):
    """Mean squared error over all real components (complex -> re and im)."""
    if isinstance(pred, ad.Tensor) or isinstance(target, ad.Tensor):
        d = ad.sub(pred, target)
        return ad.mean(d * d)
    d = np.asarray(pred) - np.asarray(target)
    if np.iscomplexobj(d):
        return float(np.mean(d.real ** 2 + d.imag ** 2) / 2)
    return float(np.mean(d * d))


def fm_velocity_loss(pred, sample: FlowSample, cfg: FlowConfig):
    return mse(pred, velocity_target(sample, cfg))


def dp_loss(pred, sample: FlowSample):
    return mse(pred, sample.x0)


def _floor_time(t, t_floor: float):
    tv = t.value if isinstance(t, ad.Tensor) else np.asarray(t, dtype=np.float64)
    low = tv < t_floor
    if np.any(low):
        warnings.warn(
            f"{int(np.sum(low))} conversion(s) at t < {t_floor}; clamped", ClampWarning, stacklevel=3
        )
        if isinstance(t, ad.Tensor):
            return ad.Tensor(np.maximum(tv, t_floor))
        return np.maximum(tv, t_floor)
    return t


def dp_to_velocity(x_hat, x_t, t, t_floor: float = T_FLOOR):
    """Instantaneous velocity (x_t - x_hat) / t from a data prediction."""
    ndim = x_t.ndim if hasattr(x_t, "ndim") else np.ndim(x_t)
    t = bcast(_floor_time(t, t_floor), ndim)
    return (x_t - x_hat) / t


def x_to_u(x_hat, x_t, t, t_floor: float = T_FLOOR):
    """Mean-flow velocity from the (t, r)-conditioned data prediction; same kernel."""
    return dp_to_velocity(x_hat, x_t, t, t_floor)


def imf_prediction(u, jvp_sg, t, r):
    """V = u + (t - r) * JVP, with the JVP term frozen."""
    ndim = u.ndim
    span = bcast(np.asarray(t, dtype=np.float64) - np.asarray(r, dtype=np.float64), ndim)
    if isinstance(jvp_sg, ad.Tensor):
        jvp_sg = ad.stop_gradient(jvp_sg)
    return u + span * jvp_sg


def imf_loss(V, v_t):
    return mse(V, v_t)


def sample_t(cfg: FlowConfig, rng: np.random.Generator, size=None):
    if cfg.t_sampler == "uniform":
        return rng.uniform(0.0, 1.0, size)
    z = rng.normal(cfg.t_loc, cfg.t_scale, size)
    return 1.0 / (1.0 + np.exp(-z))


def sample_r(t, gamma: float, rho: float, rng: np.random.Generator):
    """r = t with probability rho, else r = U(0,1)^gamma * t.

    Both random arrays are always drawn so the generator advances identically
    whatever rho is.
    """
    if not 0 < gamma <= 1:
        raise ValueError("gamma must lie in (0, 1]")
    if not 0 <= rho <= 1:
        raise ValueError("rho must lie in [0, 1]")
    t = np.asarray(t, dtype=np.float64)
    coin = rng.uniform(0.0, 1.0, t.shape)
    frac = rng.uniform(0.0, 1.0, t.shape) ** gamma
    r = np.where(coin < rho, t, frac * t)
    return np.minimum(r, t)


def ratio_schedule(epoch: float, total_epochs: float) -> float:
    """Fraction of r = t samples, sigmoid from ~0.75 down to ~0.25."""
    if not 0 <= epoch <= total_epochs:
        raise ValueError("need 0 <= epoch <= total_epochs")
    x = epoch / total_epochs
    return 0.25 + 0.5 / (1.0 + np.exp(10.0 * (x - 0.5)))


def gamma_schedule(epoch: float, total_epochs: float) -> float:
    """Span exponent, cosine ramp from 0.05 to 1."""
    if not 0 <= epoch <= total_epochs:
        raise ValueError("need 0 <= epoch <= total_epochs")
    x = epoch / total_epochs
    return 0.05 + 0.95 * (1.0 - np.cos(np.pi * x)) / 2.0


def schedule_state(epoch: int, total_epochs: int) -> ScheduleState:
    return ScheduleState(
        epoch=epoch,
        total_epochs=total_epochs,
        rho=float(ratio_schedule(epoch, total_epochs)),
        gamma=float(gamma_schedule(epoch, total_epochs)),
    )
