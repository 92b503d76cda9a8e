"""Full-precision training of the toy model with a hand-rolled Adam.

Training exists to produce a converged checkpoint for calibration; the
squared-gradient Fisher weights assume the gradient term of the quantization
loss expansion is negligible, which only approximately holds for a model
trained to (toy) convergence.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .diffusion import NoiseSchedule, SyntheticDataset, q_sample
from .model import DiTConfig, DiTModel


class Adam:
    def __init__(self, params: dict[str, ad.Tensor], lr: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = {k: np.zeros_like(p.data, dtype=np.float64) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data, dtype=np.float64) for k, p in params.items()}

    def step(self, grads: dict[str, np.ndarray]):
        self.step_count += 1
        b1c = 1.0 - self.beta1 ** self.step_count
        b2c = 1.0 - self.beta2 ** self.step_count
        for name, p in self.params.items():
            g = grads[name].astype(np.float64)
            self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * np.square(g)
            update = self.lr * (self.m[name] / b1c) / (np.sqrt(self.v[name] / b2c) + self.eps)
            p.data = (p.data.astype(np.float64) - update).astype(p.data.dtype)


@dataclass
class TrainResult:
    model: DiTModel
    history: list[float] = field(default_factory=list)
    val_loss_initial: float = 0.0
    val_loss_final: float = 0.0


def _batch_loss(model: DiTModel, schedule: NoiseSchedule, x0, t, eps, y) -> ad.Tensor:
    x_t = q_sample(schedule, x0, np.asarray(t) + 1, eps)
    pred = model.forward(x_t, t, y)
    diff = ad.sub(ad.constant(np.asarray(eps, dtype=pred.data.dtype)), pred)
    return ad.sum_all(ad.square(diff)) * (1.0 / np.asarray(eps).size)


def validation_loss(model: DiTModel, schedule: NoiseSchedule,
                    dataset: SyntheticDataset, seed: int, n: int = 64) -> float:
    rng = np.random.default_rng(seed)
    x0, y = dataset.sample(rng, n)
    t = rng.integers(0, model.config.timesteps, size=n)
    eps = rng.standard_normal(x0.shape)
    with ad.no_grad():
        x_t = q_sample(schedule, x0, t + 1, eps)
        pred = model.forward(x_t, t, y).data
    return float(np.mean(np.square(eps - pred)))


def train_fp(config: DiTConfig, dataset: SyntheticDataset, schedule: NoiseSchedule,
             steps: int, seed: int, lr: float = 1e-3, batch_size: int = 64,
             log_every: int = 100, log=None) -> TrainResult:
    """Train from scratch; aborts with a diagnostic on divergence (NaN loss)."""
    rng = np.random.default_rng(seed)
    model = DiTModel.init(config, seed=seed, zero_gates=True)
    opt = Adam(model.params, lr=lr)
    val_seed = seed + 1_000_003

    result = TrainResult(model=model)
    result.val_loss_initial = validation_loss(model, schedule, dataset, val_seed)

    for step in range(steps):
        x0, y = dataset.sample(rng, batch_size)
        t = rng.integers(0, config.timesteps, size=batch_size)
        eps = rng.standard_normal(x0.shape)
        loss = _batch_loss(model, schedule, x0, t, eps, y)
        loss_val = loss.item()
        if not np.isfinite(loss_val):
            raise FloatingPointError(
                f"training diverged at step {step}: loss={loss_val}")
        ad.backward(loss)
        grads = {name: p.grad for name, p in model.params.items()}
        for name, p in model.params.items():
            p.grad = None
        opt.step(grads)
        result.history.append(loss_val)
        if log is not None and (step % log_every == 0 or step == steps - 1):
            log(f"step {step:5d}  loss {loss_val:.5f}")

    result.val_loss_final = validation_loss(model, schedule, dataset, val_seed)
    return result
