"""DDPM machinery: noise schedule, forward corruption, reverse sampling, task loss.

Index conventions: schedule arrays have T+1 entries where index n is the state
after n noising steps (n=0 is clean data, so beta[0]=0 and alpha_bar[0]=1).
The model is conditioned on a 0-based timestep t in {0..T-1}; the state fed to
the model at conditioning index t carries t+1 noising steps. The reverse
sampler walks n = T..1, conditioning on n-1, and draws no noise on the final
step (n=1).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, DimensionError, DomainError


@dataclass(frozen=True)
class NoiseSchedule:
    timesteps: int
    beta: np.ndarray        # (T+1,), beta[0] = 0 sentinel
    alpha: np.ndarray       # 1 - beta
    alpha_bar: np.ndarray   # cumulative product, alpha_bar[0] = 1
    sigma: np.ndarray       # sampling stddev, sigma_t^2 = beta_t

    def __post_init__(self):
        t = self.timesteps
        for name in ("beta", "alpha", "alpha_bar", "sigma"):
            if getattr(self, name).shape != (t + 1,):
                raise ConfigError(f"schedule array {name} must have {t + 1} entries")
        if np.any(self.beta[1:] <= 0) or np.any(self.beta[1:] >= 1):
            raise ConfigError("beta_t must lie in (0, 1)")
        if np.any(np.diff(self.alpha_bar) >= 0):
            raise ConfigError("alpha_bar must be strictly decreasing")


def make_schedule(timesteps: int, beta_1: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    """Linear beta schedule; alpha_bar by cumulative product; sigma_t^2 = beta_t."""
    if timesteps < 1:
        raise ConfigError("timesteps must be >= 1")
    if not (0.0 < beta_1 <= beta_end < 1.0):
        raise ConfigError(f"need 0 < beta_1 <= beta_end < 1, got {beta_1}, {beta_end}")
    if timesteps == 1:
        betas = np.array([beta_1], dtype=np.float64)
    else:
        betas = np.linspace(beta_1, beta_end, timesteps, dtype=np.float64)
    beta = np.concatenate([[0.0], betas])
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    sigma = np.sqrt(beta)
    return NoiseSchedule(timesteps, beta, alpha, alpha_bar, sigma)


def q_sample(schedule: NoiseSchedule, x0: np.ndarray, steps, eps: np.ndarray) -> np.ndarray:
    """Forward corruption: sqrt(abar_n) x0 + sqrt(1 - abar_n) eps after n steps."""
    x0 = np.asarray(x0)
    eps = np.asarray(eps)
    if eps.shape != x0.shape:
        raise DimensionError(f"noise shape {eps.shape} != data shape {x0.shape}")
    n = np.asarray(steps, dtype=np.int64)
    if np.any(n < 0) or np.any(n > schedule.timesteps):
        raise DomainError(f"steps out of [0, {schedule.timesteps}]")
    ab = schedule.alpha_bar[n]
    if ab.ndim > 0:  # per-sample steps: broadcast over trailing image axes
        ab = ab.reshape(ab.shape + (1,) * (x0.ndim - ab.ndim))
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps


def posterior_mean(schedule: NoiseSchedule, x_t: np.ndarray, n: int,
                   eps_pred: np.ndarray) -> np.ndarray:
    """mu = (x_t - (1 - alpha_n)/sqrt(1 - abar_n) * eps_pred) / sqrt(alpha_n)."""
    a = schedule.alpha[n]
    ab = schedule.alpha_bar[n]
    return (x_t - (1.0 - a) / np.sqrt(1.0 - ab) * eps_pred) / np.sqrt(a)


def p_sample_step(model, schedule: NoiseSchedule, x_t: np.ndarray, t: int,
                  y, z: np.ndarray | None = None, quant=None) -> np.ndarray:
    """One reverse step x_t -> x_{t-1} at schedule step t in {1..T}.

    The model is conditioned on t-1. ``z`` is the standard normal draw; it is
    ignored (treated as zero) at t=1 so the final step is deterministic.
    """
    t = int(t)
    if t < 1 or t > schedule.timesteps:
        raise DomainError(f"reverse step needs 1 <= t <= {schedule.timesteps}, got {t}")
    with ad.no_grad():
        eps_pred = model.forward(x_t, t - 1, y, quant=quant).data
    mu = posterior_mean(schedule, x_t, t, eps_pred)
    if t == 1 or z is None:
        return mu
    return mu + schedule.sigma[t] * z


def sample(model, schedule: NoiseSchedule, num_samples: int, y, seed: int,
           quant=None, record_states: bool = False):
    """Full reverse trajectory from pure noise; exactly T model evaluations.

    Returns the generated batch, or (batch, states) when ``record_states`` is
    set, where states is a list of (model_timestep, x) pairs holding the input
    the model saw at each conditioning index (T-1 down to 0).
    """
    cfg = model.config
    rng = np.random.default_rng(seed)
    shape = (num_samples, cfg.channels, cfg.image_size, cfg.image_size)
    x = rng.standard_normal(shape)
    y = np.broadcast_to(np.atleast_1d(np.asarray(y, dtype=np.int64)), (num_samples,))
    states = []
    for n in range(schedule.timesteps, 0, -1):
        if record_states:
            states.append((n - 1, x.copy()))
        z = rng.standard_normal(shape) if n > 1 else None
        x = p_sample_step(model, schedule, x, n, y, z=z, quant=quant)
    if record_states:
        return x, states
    return x


def diffusion_loss(model, schedule: NoiseSchedule, x0: np.ndarray, t,
                   eps: np.ndarray, y, taps=None) -> ad.Tensor:
    """Task loss ||eps - eps_theta(x_t, t)||^2, summed over all elements.

    ``t`` is the model conditioning timestep; the input state is corrupted
    with t+1 noising steps to match the sampler's pairing.
    """
    t_arr = np.atleast_1d(np.asarray(t, dtype=np.int64))
    x_t = q_sample(schedule, x0, t_arr + 1, eps)
    pred = model.forward(x_t, t_arr, y, taps=taps)
    diff = ad.sub(ad.constant(np.asarray(eps, dtype=pred.data.dtype)), pred)
    return ad.sum_all(ad.square(diff))


def loss_for_state(model, x_t: np.ndarray, t, eps_target: np.ndarray, y,
                   taps=None) -> ad.Tensor:
    """Same loss evaluated on an already-corrupted state (calibration path)."""
    pred = model.forward(x_t, t, y, taps=taps)
    diff = ad.sub(ad.constant(np.asarray(eps_target, dtype=pred.data.dtype)), pred)
    return ad.sum_all(ad.square(diff))


class SyntheticDataset:
    """Class-conditional Gaussian blobs in [-1, 1], fully determined by the seed.

    Class c places a blob at a fixed per-class center (distinct by
    construction, so the label is recoverable from position) with a per-class
    width; per-sample jitter is small against the center spacing.
    """

    def __init__(self, num_classes: int, image_size: int, channels: int = 1,
                 seed: int = 0):
        if num_classes < 1:
            raise ConfigError("num_classes must be >= 1")
        self.num_classes = num_classes
        self.image_size = image_size
        self.channels = channels
        self.seed = seed
        rng = np.random.default_rng(seed)
        angles = 2.0 * np.pi * (np.arange(num_classes) + rng.uniform(0.0, 1.0)) / num_classes
        radius = 0.30 * image_size
        c = 0.5 * (image_size - 1)
        self.centers = np.stack([c + radius * np.cos(angles),
                                 c + radius * np.sin(angles)], axis=1)
        self.widths = rng.uniform(0.10, 0.16, size=num_classes) * image_size

    def render(self, y: np.ndarray, jitter: np.ndarray, amp: np.ndarray) -> np.ndarray:
        hw = self.image_size
        yy, xx = np.mgrid[0:hw, 0:hw].astype(np.float64)
        cy = self.centers[y, 1][:, None, None] + jitter[:, 1][:, None, None]
        cx = self.centers[y, 0][:, None, None] + jitter[:, 0][:, None, None]
        w = self.widths[y][:, None, None]
        blob = np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2.0 * w ** 2))
        img = 2.0 * amp[:, None, None] * blob - 1.0
        return np.repeat(img[:, None, :, :], self.channels, axis=1)

    def sample(self, rng: np.random.Generator, n: int) -> tuple[np.ndarray, np.ndarray]:
        y = rng.integers(0, self.num_classes, size=n)
        jitter = rng.uniform(-0.5, 0.5, size=(n, 2))
        amp = rng.uniform(0.9, 1.0, size=n)
        return self.render(y, jitter, amp), y

    def reference_batch(self, n: int, seed_offset: int = 1) -> tuple[np.ndarray, np.ndarray]:
        """Deterministic held-out batch used as the evaluation reference set."""
        rng = np.random.default_rng(self.seed + 7919 * seed_offset)
        return self.sample(rng, n)
