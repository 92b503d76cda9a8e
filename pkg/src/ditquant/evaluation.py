"""Desk-scale quality metrics and the four-configuration ablation ladder.

The sample-distribution metric is a Fréchet distance between Gaussian moment
summaries of fixed random projections of the images ("toy-FD"). It is a
declared stand-in for Inception-based FID, which needs a pretrained feature
network; only the Gaussian-Fréchet structure is kept. Ablation rows share the
calibration data, statistics, initial model, and sampling noise, so the only
varying factor is the quantization strategy.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from .calibration import (CalibFlags, build_calib_dataset, calibrate,
                          collect_layer_stats)
from .diffusion import NoiseSchedule, SyntheticDataset, posterior_mean, sample
from .errors import ConfigError, ContractError
from .model import DiTModel
from .quant import QuantizedModel


def model_digest(model: DiTModel) -> str:
    h = hashlib.sha256()
    for name, arr in model.state_arrays():
        h.update(name.encode())
        h.update(np.ascontiguousarray(arr, dtype=np.float32).tobytes())
    return h.hexdigest()


def _projection(dim: int, num_features: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return rng.standard_normal((dim, num_features)) / np.sqrt(dim)


def frechet_gaussian(mu_a: np.ndarray, cov_a: np.ndarray, mu_b: np.ndarray,
                     cov_b: np.ndarray) -> float:
    """||mu_a - mu_b||^2 + Tr(Sa + Sb - 2 (Sa Sb)^{1/2}).

    The matrix square root is taken by eigendecomposition of the symmetrized
    product Sa^{1/2} Sb Sa^{1/2}; tiny negative eigenvalues from roundoff are
    clipped.
    """
    evals_a, evecs_a = np.linalg.eigh(cov_a)
    root_a = (evecs_a * np.sqrt(np.clip(evals_a, 0.0, None))) @ evecs_a.T
    inner = root_a @ cov_b @ root_a
    inner = 0.5 * (inner + inner.T)
    evals = np.clip(np.linalg.eigvalsh(inner), 0.0, None)
    trace_sqrt = float(np.sum(np.sqrt(evals)))
    diff = np.asarray(mu_a, dtype=np.float64) - np.asarray(mu_b, dtype=np.float64)
    fd = float(diff @ diff + np.trace(cov_a) + np.trace(cov_b) - 2.0 * trace_sqrt)
    return max(fd, 0.0)


def toy_frechet(samples_a: np.ndarray, samples_b: np.ndarray, projection_seed: int,
                num_features: int = 16, reg: float = 1e-6) -> float:
    """Fréchet distance between Gaussian summaries of projected samples.

    Both sets share one fixed random projection to ``num_features`` features;
    covariances are regularized by ``reg`` on the diagonal.
    """
    a = np.asarray(samples_a, dtype=np.float64).reshape(len(samples_a), -1)
    b = np.asarray(samples_b, dtype=np.float64).reshape(len(samples_b), -1)
    if len(a) < 64 or len(b) < 64:
        raise ContractError("toy_frechet needs at least 64 samples per set")
    if a.shape[1] != b.shape[1]:
        raise ConfigError("sample sets have different feature dimensions")
    proj = _projection(a.shape[1], num_features, projection_seed)
    fa = a @ proj
    fb = b @ proj
    cov_a = np.cov(fa, rowvar=False) + reg * np.eye(num_features)
    cov_b = np.cov(fb, rowvar=False) + reg * np.eye(num_features)
    return frechet_gaussian(fa.mean(axis=0), cov_a, fb.mean(axis=0), cov_b)


def trajectory_divergence(fp_model: DiTModel, q_model: QuantizedModel,
                          schedule: NoiseSchedule, num_trajectories: int,
                          seed: int) -> np.ndarray:
    """Per-timestep MSE between FP and quantized noise predictions.

    Both models are evaluated on the same full-precision trajectory states
    with identical noise draws; index t of the returned curve (length T) is
    the model conditioning timestep.
    """
    if q_model.model.config.timesteps != fp_model.config.timesteps or \
            schedule.timesteps != fp_model.config.timesteps:
        raise ConfigError("models and schedule disagree on timestep count")
    from . import autodiff as ad
    cfg = fp_model.config
    rng = np.random.default_rng(seed)
    shape = (num_trajectories, cfg.channels, cfg.image_size, cfg.image_size)
    x = rng.standard_normal(shape)
    y = rng.integers(0, cfg.num_classes, size=num_trajectories)
    curve = np.zeros(schedule.timesteps)
    for n in range(schedule.timesteps, 0, -1):
        with ad.no_grad():
            eps_fp = fp_model.forward(x, n - 1, y).data
            eps_q = q_model.forward(x, n - 1, y).data
        curve[n - 1] = float(np.mean(np.square(eps_fp - eps_q)))
        mu = posterior_mean(schedule, x, n, eps_fp)
        x = mu if n == 1 else mu + schedule.sigma[n] * rng.standard_normal(shape)
    return curve


@dataclass(frozen=True)
class AblationConfig:
    """One row of the ablation ladder."""
    label: str
    flags: CalibFlags
    k_w: int = 6
    k_a: int = 6


def ablation_ladder(k_w: int = 6, k_a: int = 6) -> list[AblationConfig]:
    """baseline, +HO, +HO+MRQ, +HO+MRQ+TGQ at the given bit widths."""
    return [
        AblationConfig("baseline", CalibFlags(ho=False, mrq=False, tgq=False), k_w, k_a),
        AblationConfig("+HO", CalibFlags(ho=True, mrq=False, tgq=False), k_w, k_a),
        AblationConfig("+HO+MRQ", CalibFlags(ho=True, mrq=True, tgq=False), k_w, k_a),
        AblationConfig("+HO+MRQ+TGQ", CalibFlags(ho=True, mrq=True, tgq=True), k_w, k_a),
    ]


@dataclass
class MetricReport:
    label: str
    seed: int
    toy_fd: float          # against the dataset reference batch
    fd_vs_fp: float        # against the FP model's samples at the same seed
    mean_calibration_objective: float
    divergence_curve: np.ndarray
    calib_digest: str
    model_digest: str
    sample_seed: int
    failed: bool = False
    error: str = ""

    def finite(self) -> bool:
        return (np.isfinite(self.toy_fd) and self.toy_fd >= 0
                and np.isfinite(self.fd_vs_fp) and self.fd_vs_fp >= 0
                and np.isfinite(self.mean_calibration_objective)
                and bool(np.all(np.isfinite(self.divergence_curve))))


@dataclass
class AblationResult:
    reports: list[MetricReport]
    fp_reports: list[MetricReport]
    ordering_labels: list[str]
    seeds: list[int]

    def mean_by_label(self, attr: str) -> dict[str, float]:
        out: dict[str, float] = {}
        for label in self.ordering_labels:
            vals = [getattr(r, attr) for r in self.reports
                    if r.label == label and not r.failed]
            out[label] = float(np.mean(vals)) if vals else float("nan")
        return out

    def mean_fp_fd(self) -> float:
        return float(np.mean([r.toy_fd for r in self.fp_reports]))

    def objective_ordering_holds(self) -> bool:
        means = self.mean_by_label("mean_calibration_objective")
        vals = [means[label] for label in self.ordering_labels]
        return all(a >= b - 1e-15 for a, b in zip(vals, vals[1:]))

    def verdict(self) -> str:
        status = "holds" if self.objective_ordering_holds() else "violated"
        means = self.mean_by_label("mean_calibration_objective")
        chain = " >= ".join(f"{means[label]:.6g}" for label in self.ordering_labels)
        return f"ablation ordering {status}: {chain}"


def run_ablation(model: DiTModel, schedule: NoiseSchedule, dataset: SyntheticDataset,
                 configs: list[AblationConfig], seeds: list[int], *,
                 groups: int = 10, per_group: int = 8, mode: str = "forward",
                 rounds: int = 3, num_candidates: int = 32, num_generated: int = 96,
                 num_divergence: int = 4, reference_size: int = 256,
                 sample_seed: int = 7_000, projection_seed: int = 99) -> AblationResult:
    """Calibrate and score every config at every seed with shared inputs.

    Within one seed, every config sees the identical calibration dataset,
    layer statistics, base model, and sampling noise; only the quantization
    strategy differs. A config that fails to calibrate is reported failed and
    the remaining rows proceed.
    """
    reference, _ = dataset.reference_batch(reference_size)
    digest = model_digest(model)
    reports: list[MetricReport] = []
    fp_reports: list[MetricReport] = []

    for seed in seeds:
        calib = build_calib_dataset(model, schedule, dataset, groups, per_group,
                                    mode, seed)
        stats = collect_layer_stats(model, calib)
        gen_seed = sample_seed + seed
        fp_samples = sample(model, schedule, num_generated,
                            np.arange(num_generated) % dataset.num_classes, gen_seed)
        fp_fd = toy_frechet(fp_samples, reference, projection_seed)
        fp_reports.append(MetricReport("FP", seed, fp_fd, 0.0, 0.0,
                                       np.zeros(schedule.timesteps), calib.digest(),
                                       digest, gen_seed))
        for config in configs:
            try:
                qm, report = calibrate(model, stats, k_w=config.k_w, k_a=config.k_a,
                                       rounds=rounds, groups=groups,
                                       flags=config.flags,
                                       num_candidates=num_candidates)
                gen = sample(model, schedule, num_generated,
                             np.arange(num_generated) % dataset.num_classes,
                             gen_seed, quant=qm)
                fd = toy_frechet(gen, reference, projection_seed)
                fd_fp = toy_frechet(gen, fp_samples, projection_seed)
                curve = (trajectory_divergence(model, qm, schedule, num_divergence,
                                               gen_seed)
                         if num_divergence > 0 else np.zeros(schedule.timesteps))
                reports.append(MetricReport(config.label, seed, fd, fd_fp,
                                            report.mean_common_objective, curve,
                                            calib.digest(), digest, gen_seed))
            except Exception as exc:  # a failed row must not sink the ladder
                reports.append(MetricReport(config.label, seed, float("nan"),
                                            float("nan"), float("nan"),
                                            np.zeros(schedule.timesteps),
                                            calib.digest(), digest, gen_seed,
                                            failed=True, error=str(exc)))

    return AblationResult(reports, fp_reports, [c.label for c in configs], list(seeds))
