"""Three-phase quantization calibration.

Phase 1 builds a timestep-stratified calibration set (n samples per group).
Phase 2 runs full-precision forward/backward passes over it, recording every
site's operands, output, and elementwise squared output gradients (the
diagonal Fisher weights). Phase 3 walks the sites in network order and
alternates weight/activation candidate searches for R rounds, minimizing the
squared-gradient-weighted output discrepancy; post-GELU activations use
two-region parameters, post-softmax activations use per-timestep-group
two-region parameters.

Candidate objectives are pure functions of the recorded statistics, so the
per-candidate loop can fan out over threads (DITQUANT_WORKERS); per-sample
contributions are reduced in a fixed order, so results do not depend on the
worker count.
"""

from __future__ import annotations

import hashlib
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .diffusion import NoiseSchedule, SyntheticDataset, loss_for_state, q_sample, sample
from .errors import CalibrationError, ConfigError
from .model import (DiTModel, LINEAR_KINDS, POST_GELU_LINEAR,
                    POST_SOFTMAX_MATMUL)
from .quant import (MultiRegionParams, QuantParams, QuantizedModel, SiteAssignment,
                    TimeGroupedParams, group_of, init_minmax, quantize_uniform,
                    POST_GELU, POST_SOFTMAX, apply_quantizer)

FORWARD_CORRUPTION = "forward"
TRAJECTORY = "trajectory"


# --------------------------------------------------------------------- phase 1

@dataclass(frozen=True)
class CalibrationSample:
    x_t: np.ndarray
    t: int              # model conditioning timestep, 0-based
    y: int
    eps_target: np.ndarray
    group: int          # 1-based timestep group


@dataclass(frozen=True)
class CalibrationDataset:
    samples: tuple
    groups: int
    per_group: int
    mode: str
    timesteps: int

    def __len__(self):
        return len(self.samples)

    def digest(self) -> str:
        h = hashlib.sha256()
        for s in self.samples:
            h.update(np.int64(s.t).tobytes())
            h.update(np.int64(s.y).tobytes())
            h.update(np.ascontiguousarray(s.x_t, dtype=np.float32).tobytes())
            h.update(np.ascontiguousarray(s.eps_target, dtype=np.float32).tobytes())
        return h.hexdigest()


def build_calib_dataset(model: DiTModel, schedule: NoiseSchedule,
                        dataset: SyntheticDataset, groups: int, per_group: int,
                        mode: str, seed: int) -> CalibrationDataset:
    """Stratified calibration tuples: exactly ``per_group`` samples per group.

    forward mode draws eps ~ N(0,I) and corrupts clean data, so the stored
    noise target is exact. trajectory mode snapshots states from full-precision
    reverse sampling and pairs them with a fresh surrogate noise target.
    """
    t_total = schedule.timesteps
    if t_total % groups != 0:
        raise ConfigError(f"G={groups} must divide T={t_total}")
    if per_group < 1:
        raise ConfigError("need at least one sample per group")
    if mode not in (FORWARD_CORRUPTION, TRAJECTORY):
        raise ConfigError(f"unknown calibration mode {mode!r}")
    rng = np.random.default_rng(seed)
    span = t_total // groups
    samples: list[CalibrationSample] = []

    if mode == FORWARD_CORRUPTION:
        for g in range(1, groups + 1):
            ts = rng.integers((g - 1) * span, g * span, size=per_group)
            x0, y = dataset.sample(rng, per_group)
            eps = rng.standard_normal(x0.shape)
            x_t = q_sample(schedule, x0, ts + 1, eps)
            for i in range(per_group):
                samples.append(CalibrationSample(
                    x_t[i].astype(np.float32), int(ts[i]), int(y[i]),
                    eps[i].astype(np.float32), g))
    else:
        n_traj = per_group
        y_traj = rng.integers(0, dataset.num_classes, size=n_traj)
        _, states = sample(model, schedule, n_traj, y_traj,
                           seed=int(rng.integers(0, 2 ** 31)), record_states=True)
        by_t = {t: x for t, x in states}
        for g in range(1, groups + 1):
            ts = rng.integers((g - 1) * span, g * span, size=per_group)
            traj = rng.integers(0, n_traj, size=per_group)
            shape = (dataset.channels, dataset.image_size, dataset.image_size)
            eps = rng.standard_normal((per_group,) + shape)
            for i in range(per_group):
                samples.append(CalibrationSample(
                    by_t[int(ts[i])][traj[i]].astype(np.float32), int(ts[i]),
                    int(y_traj[traj[i]]), eps[i].astype(np.float32), g))

    return CalibrationDataset(tuple(samples), groups, per_group, mode, t_total)


# --------------------------------------------------------------------- phase 2

class TapRecorder:
    """Captures full-precision site values during a forward pass.

    Inputs are copied out as float32; outputs keep their graph node alive with
    retain_grad so the squared gradient can be read after backward. Recording
    never modifies the forward values.
    """

    def __init__(self):
        self.linear: dict[str, tuple] = {}
        self.matmul: dict[str, tuple] = {}

    def record_linear(self, site_id, x, out):
        out.retain_grad()
        self.linear[site_id] = (x.data, out)

    def record_matmul(self, site_id, a, b, out):
        out.retain_grad()
        self.matmul[site_id] = (a.data, b.data, out)


@dataclass
class SiteStats:
    """Recorded tensors for one site, stacked over calibration samples."""
    site_id: str
    kind: str
    z: np.ndarray                   # (S, ...) FP output
    g2: np.ndarray                  # (S, ...) squared output gradients
    x: np.ndarray | None = None     # linear input
    a: np.ndarray | None = None     # matmul operand A
    b: np.ndarray | None = None     # matmul operand B
    weight: np.ndarray | None = None  # FP weight of a linear site (float64)


@dataclass
class LayerStats:
    sites: dict[str, SiteStats]
    ts: np.ndarray                  # (S,) conditioning timesteps
    timesteps: int
    dataset_digest: str

    @property
    def num_samples(self) -> int:
        return len(self.ts)

    def group_mask(self, groups: int, g: int) -> np.ndarray:
        gids = np.array([group_of(int(t), self.timesteps, groups) for t in self.ts])
        return gids == g


def collect_layer_stats(model: DiTModel, calib: CalibrationDataset,
                        batch_size: int = 32) -> LayerStats:
    """One FP forward + backward per calibration sample; squared grads stored.

    Samples are processed in fixed order; batching only stacks independent
    rows (no op mixes samples), so per-sample gradients are unaffected.
    """
    model64 = model.astype(np.float64)
    sites = model.sites()
    acc: dict[str, dict[str, list]] = {s.site_id: {"x": [], "a": [], "b": [],
                                                   "z": [], "g2": []} for s in sites}
    samples = calib.samples
    for lo in range(0, len(samples), batch_size):
        chunk = samples[lo:lo + batch_size]
        x = np.stack([s.x_t for s in chunk]).astype(np.float64)
        t = np.array([s.t for s in chunk])
        y = np.array([s.y for s in chunk])
        eps = np.stack([s.eps_target for s in chunk]).astype(np.float64)
        taps = TapRecorder()
        loss = loss_for_state(model64, x, t, eps, y, taps=taps)
        ad.backward(loss)
        for sid, (xv, out) in taps.linear.items():
            if out.grad is None or not np.all(np.isfinite(out.grad)):
                raise CalibrationError(f"non-finite gradient at site {sid}")
            acc[sid]["x"].append(xv.astype(np.float32))
            acc[sid]["z"].append(out.data.astype(np.float32))
            acc[sid]["g2"].append(np.square(out.grad).astype(np.float32))
        for sid, (av, bv, out) in taps.matmul.items():
            if out.grad is None or not np.all(np.isfinite(out.grad)):
                raise CalibrationError(f"non-finite gradient at site {sid}")
            acc[sid]["a"].append(av.astype(np.float32))
            acc[sid]["b"].append(bv.astype(np.float32))
            acc[sid]["z"].append(out.data.astype(np.float32))
            acc[sid]["g2"].append(np.square(out.grad).astype(np.float32))

    stats: dict[str, SiteStats] = {}
    for s in sites:
        rec = acc[s.site_id]
        if not rec["z"]:
            raise CalibrationError(f"no statistics recorded for site {s.site_id}")
        z = np.concatenate(rec["z"])
        g2 = np.concatenate(rec["g2"])
        if s.kind in LINEAR_KINDS:
            stats[s.site_id] = SiteStats(
                s.site_id, s.kind, z, g2, x=np.concatenate(rec["x"]),
                weight=model.params[s.weight_name].data.astype(np.float64))
        else:
            stats[s.site_id] = SiteStats(
                s.site_id, s.kind, z, g2,
                a=np.concatenate(rec["a"]), b=np.concatenate(rec["b"]))
    ts = np.array([s.t for s in samples])
    return LayerStats(stats, ts, calib.timesteps, calib.digest())


# ------------------------------------------------------------------ objective

def ho_objective(delta: np.ndarray, g2: np.ndarray) -> float:
    """Diagonal-Fisher quadratic form: sum_i g2_i * delta_i^2 (>= 0)."""
    delta = np.asarray(delta)
    g2 = np.asarray(g2)
    if delta.shape != g2.shape:
        raise ConfigError(f"shape mismatch {delta.shape} vs {g2.shape}")
    if np.any(g2 < 0):
        raise ConfigError("squared-gradient weights must be non-negative")
    return float(np.sum(g2 * np.square(delta)))


def _per_sample_objectives(delta: np.ndarray, g2: np.ndarray) -> np.ndarray:
    axes = tuple(range(1, delta.ndim))
    return np.sum(g2 * np.square(delta), axis=axes)


# ----------------------------------------------------------------- candidates

@dataclass(frozen=True)
class CandidateSet:
    """Ordered trial parameters for one site role, plus the swept step sizes."""
    scheme: str
    params: tuple
    steps: tuple  # swept step per candidate, the tie-break key

    def __post_init__(self):
        if not self.params:
            raise ConfigError("candidate set must be non-empty")
        if len(self.params) != len(self.steps):
            raise ConfigError("candidate/step lists must align")


def _sweep(num: int, lo: float = 0.2, hi: float = 1.2) -> np.ndarray:
    """Linear gamma sweep that always contains exactly 1.0 (the initialization)."""
    g = np.linspace(lo, hi, num)
    g[np.argmin(np.abs(g - 1.0))] = 1.0
    return g


def make_candidates(kind: str, init, *, num: int = 100, data_lo=None,
                    data_hi=None) -> CandidateSet:
    """Candidate generation per site role.

    kind "uniform": step sizes gamma*s_init, gamma in [0.2, 1.2], zero point
    re-anchored to the recorded minimum per candidate. kind "softmax-s1":
    powers s2/2^m for m=1..k plus the linear sweep around s2/2, restricted to
    the fine region staying inside [0, 1]. kinds "gelu-s1"/"gelu-s2": a sweep
    of the named region step with the partner step held at its current value.
    """
    if kind == "uniform":
        if not isinstance(init, QuantParams):
            raise ConfigError("uniform candidates need QuantParams init")
        levels = 2 ** init.k - 1
        lo = np.asarray(data_lo, dtype=np.float64)
        cands, steps = [], []
        for gamma in _sweep(num):
            s = np.asarray(init.s, dtype=np.float64) * gamma
            z = np.clip(-np.rint(np.where(lo < 0, lo, 0.0) / s), 0, levels)
            if init.channel_axis is None:
                cands.append(QuantParams(float(s), int(z), init.k,
                                         degenerate=init.degenerate))
            else:
                cands.append(QuantParams(s, z, init.k, channel_axis=init.channel_axis,
                                         degenerate=init.degenerate))
            steps.append(float(np.mean(s)))
        return CandidateSet("uniform-sweep", tuple(cands), tuple(steps))

    if kind == "softmax-s1":
        if not (isinstance(init, MultiRegionParams) and init.kind == POST_SOFTMAX):
            raise ConfigError("softmax-s1 candidates need post-softmax init")
        s2 = init.s2
        values = {s2 / 2 ** m for m in range(1, init.k + 1)}
        values.update(float(g * (s2 / 2)) for g in _sweep(num))
        half = 2 ** (init.k - 1)
        kept = sorted(v for v in values if half * v <= 1.0 + 1e-12)
        cands = tuple(MultiRegionParams(POST_SOFTMAX, v, s2, init.k) for v in kept)
        return CandidateSet("softmax-s1", cands, tuple(kept))

    if kind in ("gelu-s1", "gelu-s2"):
        if not (isinstance(init, MultiRegionParams) and init.kind == POST_GELU):
            raise ConfigError(f"{kind} candidates need post-gelu init")
        base = init.s1 if kind == "gelu-s1" else init.s2
        # wider sweep than the weight/activation one: the two regions trade
        # clip range against resolution independently
        values = [float(g * base) for g in _sweep(num, 0.1, 1.5)]
        if kind == "gelu-s1":
            cands = tuple(replace(init, s1=v) for v in values)
        else:
            cands = tuple(replace(init, s2=v) for v in values)
        return CandidateSet(kind, cands, tuple(values))

    raise ConfigError(f"unknown candidate kind {kind!r}")


def init_mrq_gelu(x: np.ndarray, k: int) -> MultiRegionParams:
    """Range-covering two-region init for post-GELU values."""
    half = 2 ** (k - 1)
    neg = max(float(-np.min(x)), 1e-8)
    pos = max(float(np.max(x)), 1e-8)
    return MultiRegionParams(POST_GELU, neg / half, pos / max(half - 1, 1), k)


def init_mrq_softmax(k: int) -> MultiRegionParams:
    """Data-independent init: softmax values always live in [0, 1]."""
    s2 = 1.0 / 2 ** (k - 1)
    return MultiRegionParams(POST_SOFTMAX, s2 / 2, s2, k)


# --------------------------------------------------------------------- search

def _quantize_stacked(x64: np.ndarray, params, ts: np.ndarray | None,
                      timesteps: int | None):
    """Apply a (possibly time-grouped) quantizer to stacked samples."""
    if params is None:
        return x64
    if isinstance(params, TimeGroupedParams):
        if ts is None:
            raise CalibrationError("time-grouped partner needs per-sample timesteps")
        out = np.empty_like(x64)
        for g in range(1, params.groups + 1):
            mask = np.array([group_of(int(t), timesteps, params.groups) == g
                             for t in ts])
            if np.any(mask):
                out[mask] = apply_quantizer(x64[mask], params.entries[g - 1])
        return out
    return apply_quantizer(x64, params)


def _workers() -> int:
    try:
        return max(1, int(os.environ.get("DITQUANT_WORKERS", "1")))
    except ValueError:
        return 1


def _map_candidates(fn, items):
    w = _workers()
    if w == 1 or len(items) == 1:
        return [fn(i) for i in items]
    with ThreadPoolExecutor(max_workers=w) as pool:
        return list(pool.map(fn, items))


@dataclass
class SearchResult:
    index: int
    params: object
    objective: float
    objectives: tuple


def search_best(stats: SiteStats, role: str, candidates: CandidateSet, *,
                partner=None, use_g2: bool = True, mask: np.ndarray | None = None,
                ts: np.ndarray | None = None, timesteps: int | None = None) -> SearchResult:
    """Pick the candidate minimizing the empirical mean site objective.

    ``role`` names the operand being swept ("weight"/"activation" for linear
    sites, "a"/"b" for matmuls); ``partner`` is the other operand's current
    quantizer (None means full precision). ``mask`` restricts the sample set
    (group-filtered search). Ties break toward the larger step size.
    """
    if role in ("weight", "activation"):
        left = stats.x.astype(np.float64)
        right = stats.weight
        right_stacked = False
    elif role in ("a", "b"):
        left = stats.a.astype(np.float64)
        right = stats.b.astype(np.float64)
        right_stacked = True
    else:
        raise ConfigError(f"unknown search role {role!r}")
    g2 = stats.g2.astype(np.float64)
    if mask is not None:
        if not np.any(mask):
            raise CalibrationError(f"empty sample filter at site {stats.site_id}")
        left = left[mask]
        g2 = g2[mask]
        if right_stacked:
            right = right[mask]
        ts = ts[mask] if ts is not None else None
    if not use_g2:
        g2 = np.ones_like(g2)
    z_ref = left @ right

    if role in ("weight", "b"):
        fixed = _quantize_stacked(left, partner, ts, timesteps)

        def objective(params):
            d = fixed @ _apply_right(right, params) - z_ref
            return float(np.mean(_per_sample_objectives(d, g2)))
    else:
        fixed_right = _apply_right(right, partner)

        def objective(params):
            d = apply_quantizer(left, params) @ fixed_right - z_ref
            return float(np.mean(_per_sample_objectives(d, g2)))

    objs = _map_candidates(objective, list(candidates.params))
    best = 0
    for i in range(1, len(objs)):
        if objs[i] < objs[best] or (objs[i] == objs[best]
                                    and candidates.steps[i] > candidates.steps[best]):
            best = i
    return SearchResult(best, candidates.params[best], objs[best], tuple(objs))


def _apply_right(right: np.ndarray, params):
    if params is None:
        return right
    return quantize_uniform(right, params)


def site_objective(stats: SiteStats, left_params, right_params, *,
                   use_g2: bool = True, ts: np.ndarray | None = None,
                   timesteps: int | None = None, mask: np.ndarray | None = None) -> float:
    """Empirical mean objective of a site at a full parameter assignment."""
    if stats.kind in LINEAR_KINDS:
        left = stats.x.astype(np.float64)
        right = stats.weight
        right_stacked = False
    else:
        left = stats.a.astype(np.float64)
        right = stats.b.astype(np.float64)
        right_stacked = True
    g2 = stats.g2.astype(np.float64) if use_g2 else np.ones_like(stats.g2, dtype=np.float64)
    if mask is not None:
        left, g2 = left[mask], g2[mask]
        if right_stacked:
            right = right[mask]
        ts = ts[mask] if ts is not None else None
    z_ref = left @ right
    lq = _quantize_stacked(left, left_params, ts, timesteps)
    rq = _apply_right(right, right_params)
    d = lq @ rq - z_ref
    return float(np.mean(_per_sample_objectives(d, g2)))


# --------------------------------------------------------------------- phase 3

@dataclass(frozen=True)
class CalibFlags:
    """Ablation switches: Fisher weighting, multi-region, time grouping."""
    ho: bool = True
    mrq: bool = True
    tgq: bool = True

    def __post_init__(self):
        if self.tgq and not self.mrq:
            raise ConfigError("TGQ requires the MRQ path on post-softmax sites")

    def label(self) -> str:
        if not (self.ho or self.mrq or self.tgq):
            return "baseline"
        parts = [n for n, on in (("HO", self.ho), ("MRQ", self.mrq), ("TGQ", self.tgq)) if on]
        return "+".join(parts)


@dataclass
class SiteCalibration:
    site_id: str
    kind: str
    objective_before: float
    objective_after: float
    common_objective: float
    reference_objective: float
    trace: list[float] = field(default_factory=list)

    @property
    def normalized_objective(self) -> float:
        """Fisher-weighted final objective relative to the min-max-uniform init.

        Per-site objectives are quadratic forms in that layer's gradient
        scale, so raw values are not commensurable across sites; dividing by
        the flag-independent initialization score puts every site on a common
        axis before averaging.
        """
        if self.reference_objective <= 0.0:
            return 1.0 if self.common_objective <= 0.0 else float("inf")
        return self.common_objective / self.reference_objective


@dataclass
class CalibrationReport:
    sites: list[SiteCalibration]
    flags: CalibFlags
    k_w: int
    k_a: int
    rounds: int
    groups: int
    dataset_digest: str

    @property
    def mean_common_objective(self) -> float:
        """Mean init-normalized Fisher-weighted objective over sites."""
        return float(np.mean([s.normalized_objective for s in self.sites]))

    @property
    def mean_raw_objective(self) -> float:
        return float(np.mean([s.common_objective for s in self.sites]))

    def to_text(self, assignments: dict | None = None) -> str:
        from .quant import params_to_dict
        lines = [
            "calibration report",
            f"flags = {self.flags.label()}",
            f"bits = W{self.k_w}A{self.k_a}  rounds = {self.rounds}  groups = {self.groups}",
            f"dataset_digest = {self.dataset_digest}",
            f"mean_common_objective = {self.mean_common_objective!r}",
            f"mean_raw_objective = {self.mean_raw_objective!r}",
            "",
        ]
        for s in self.sites:
            lines.append(f"[site {s.site_id}]")
            lines.append(f"  kind = {s.kind}")
            lines.append(f"  objective_before = {s.objective_before!r}")
            lines.append(f"  objective_after = {s.objective_after!r}")
            lines.append(f"  common_objective = {s.common_objective!r}")
            lines.append(f"  reference_objective = {s.reference_objective!r}")
            lines.append(f"  normalized_objective = {s.normalized_objective!r}")
            lines.append("  trace = " + ", ".join(repr(v) for v in s.trace))
            if assignments is not None and s.site_id in assignments:
                a = assignments[s.site_id]
                lines.append(f"  weight_params = {params_to_dict(a.weight)}")
                lines.append(f"  activation_params = {params_to_dict(a.activation)}")
                lines.append(f"  operand_b_params = {params_to_dict(a.operand_b)}")
            lines.append("")
        return "\n".join(lines)


def _calibrate_linear(stats: SiteStats, k_w: int, k_a: int, rounds: int,
                      flags: CalibFlags, num_candidates: int,
                      per_channel: bool) -> tuple[SiteAssignment, SiteCalibration]:
    w64 = stats.weight
    x_stack = stats.x.astype(np.float64)
    axis = 1 if per_channel else None
    init_w = init_minmax(w64, k_w, channel_axis=axis)
    w_cands = make_candidates("uniform", init_w, num=num_candidates,
                              data_lo=(np.min(w64, axis=0) if per_channel else np.min(w64)))
    use_mrq = flags.mrq and stats.kind == POST_GELU_LINEAR
    if use_mrq:
        cur_act = init_mrq_gelu(x_stack, k_a)
        s1_values = make_candidates("gelu-s1", cur_act, num=num_candidates)
        s2_values = make_candidates("gelu-s2", cur_act, num=num_candidates)
    else:
        cur_act = init_minmax(x_stack, k_a)
        act_cands = make_candidates("uniform", cur_act, num=num_candidates,
                                    data_lo=np.min(x_stack))
    cur_w = init_w
    reference = site_objective(stats, init_minmax(x_stack, k_a), init_w, use_g2=True)

    before = site_objective(stats, cur_act, cur_w, use_g2=flags.ho)
    trace = [before]
    for _ in range(rounds):
        res = search_best(stats, "weight", w_cands, partner=cur_act, use_g2=flags.ho)
        cur_w = res.params
        trace.append(res.objective)
        if use_mrq:
            cands1 = CandidateSet(s1_values.scheme,
                                  tuple(replace(cur_act, s1=v) for v in s1_values.steps),
                                  s1_values.steps)
            res = search_best(stats, "activation", cands1, partner=cur_w, use_g2=flags.ho)
            cur_act = res.params
            trace.append(res.objective)
            cands2 = CandidateSet(s2_values.scheme,
                                  tuple(replace(cur_act, s2=v) for v in s2_values.steps),
                                  s2_values.steps)
            res = search_best(stats, "activation", cands2, partner=cur_w, use_g2=flags.ho)
            cur_act = res.params
            trace.append(res.objective)
        else:
            res = search_best(stats, "activation", act_cands, partner=cur_w,
                              use_g2=flags.ho)
            cur_act = res.params
            trace.append(res.objective)

    common = site_objective(stats, cur_act, cur_w, use_g2=True)
    assignment = SiteAssignment(weight=cur_w, activation=cur_act)
    rep = SiteCalibration(stats.site_id, stats.kind, before, trace[-1], common,
                          reference, trace)
    return assignment, rep


def _calibrate_matmul(stats: SiteStats, layer: LayerStats, k_a: int, rounds: int,
                      groups: int, flags: CalibFlags,
                      num_candidates: int) -> tuple[SiteAssignment, SiteCalibration]:
    a_stack = stats.a.astype(np.float64)
    b_stack = stats.b.astype(np.float64)
    cur_b = init_minmax(b_stack, k_a)
    b_cands = make_candidates("uniform", cur_b, num=num_candidates,
                              data_lo=np.min(b_stack))
    use_mrq = flags.mrq and stats.kind == POST_SOFTMAX_MATMUL
    t_total = layer.timesteps

    if use_mrq:
        g_eff = groups if flags.tgq else 1
        a_cands = make_candidates("softmax-s1", init_mrq_softmax(k_a),
                                  num=num_candidates)
        entries = [init_mrq_softmax(k_a)] * g_eff
        cur_a: object = TimeGroupedParams(g_eff, t_total, tuple(entries))
        masks = [layer.group_mask(g_eff, g) for g in range(1, g_eff + 1)]
    else:
        cur_a = init_minmax(a_stack, k_a)
        a_cands = make_candidates("uniform", cur_a, num=num_candidates,
                                  data_lo=np.min(a_stack))

    reference = site_objective(stats, init_minmax(a_stack, k_a), cur_b, use_g2=True)
    before = site_objective(stats, cur_a, cur_b, use_g2=flags.ho,
                            ts=layer.ts, timesteps=t_total)
    trace = [before]
    for _ in range(rounds):
        if use_mrq:
            new_entries = []
            for g in range(1, cur_a.groups + 1):
                res = search_best(stats, "a", a_cands, partner=cur_b,
                                  use_g2=flags.ho, mask=masks[g - 1])
                new_entries.append(res.params)
            cur_a = TimeGroupedParams(cur_a.groups, t_total, tuple(new_entries))
            trace.append(site_objective(stats, cur_a, cur_b, use_g2=flags.ho,
                                        ts=layer.ts, timesteps=t_total))
        else:
            res = search_best(stats, "a", a_cands, partner=cur_b, use_g2=flags.ho)
            cur_a = res.params
            trace.append(res.objective)
        res = search_best(stats, "b", b_cands, partner=cur_a, use_g2=flags.ho,
                          ts=layer.ts, timesteps=t_total)
        cur_b = res.params
        trace.append(res.objective)

    common = site_objective(stats, cur_a, cur_b, use_g2=True,
                            ts=layer.ts, timesteps=t_total)
    assignment = SiteAssignment(activation=cur_a, operand_b=cur_b)
    rep = SiteCalibration(stats.site_id, stats.kind, before, trace[-1], common,
                          reference, trace)
    return assignment, rep


def calibrate(model: DiTModel, stats: LayerStats, *, k_w: int, k_a: int,
              rounds: int = 3, groups: int = 10, flags: CalibFlags = CalibFlags(),
              num_candidates: int = 100,
              per_channel: bool = False) -> tuple[QuantizedModel, CalibrationReport]:
    """Phase 3: alternate weight/activation searches per site, in network order."""
    if rounds < 1:
        raise ConfigError("rounds must be >= 1")
    if stats.timesteps % groups != 0:
        raise ConfigError(f"G={groups} must divide T={stats.timesteps}")
    for bits in (k_w, k_a):
        if not 2 <= bits <= 8:
            raise ConfigError(f"bit width {bits} outside supported range [2, 8]")

    assignments: dict[str, SiteAssignment] = {}
    reports: list[SiteCalibration] = []
    for site in model.sites():
        if site.site_id == "final.linear" and not model.config.quantize_final:
            assignments[site.site_id] = SiteAssignment()  # explicit full precision
            continue
        st = stats.sites[site.site_id]
        if site.kind in LINEAR_KINDS:
            assignment, rep = _calibrate_linear(st, k_w, k_a, rounds, flags,
                                                num_candidates, per_channel)
        else:
            assignment, rep = _calibrate_matmul(st, stats, k_a, rounds, groups,
                                                flags, num_candidates)
        assignments[site.site_id] = assignment
        reports.append(rep)

    report = CalibrationReport(reports, flags, k_w, k_a, rounds, groups,
                               stats.dataset_digest)
    return QuantizedModel(model, assignments), report
