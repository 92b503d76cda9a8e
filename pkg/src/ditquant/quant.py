"""Quantization arithmetic: uniform affine, two-region, and time-grouped.

All quantizers are fake-quant maps (quantize then dequantize in real
arithmetic). Rounding is half-to-even throughout. The two-region quantizers
project onto the union of their region grids (nearest level, cross-grid ties
to the larger level): away from the region boundary this is exactly the
region-threshold rule, and unlike the raw threshold rule it is monotone and
idempotent for every admissible step size.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import ConfigError, ContractError, DomainError

POST_SOFTMAX = "post-softmax"
POST_GELU = "post-gelu"


def _check_bits(k: int):
    if not isinstance(k, (int, np.integer)) or k < 2:
        raise ConfigError(f"bit width must be an integer >= 2, got {k!r}")


@dataclass(frozen=True)
class QuantParams:
    """Uniform asymmetric quantizer: step size s, integer zero point z, k bits.

    ``s``/``z`` are scalars, or vectors over ``channel_axis`` for per-channel
    weight quantization.
    """
    s: float | np.ndarray
    z: float | np.ndarray
    k: int
    channel_axis: int | None = None
    degenerate: bool = False

    def __post_init__(self):
        _check_bits(self.k)
        s = np.asarray(self.s)
        z = np.asarray(self.z)
        if np.any(s <= 0):
            raise ConfigError("step size must be positive")
        if np.any(z < 0) or np.any(z > 2 ** self.k - 1):
            raise ConfigError(f"zero point out of [0, {2 ** self.k - 1}]")
        if np.any(z != np.round(z)):
            raise ConfigError("zero point must be integral")

    def with_step(self, s) -> "QuantParams":
        return replace(self, s=s)


@dataclass(frozen=True)
class MultiRegionParams:
    """Two-region quantizer parameters.

    post-softmax: fine region [0, 2^{k-1} s1) with step s1, coarse region up
    to 1 with the fixed step s2 = 2^{-(k-1)}. post-gelu: negative region with
    step s1 (clipped at -2^{k-1} s1), positive region with step s2 (top level
    (2^{k-1}-1) s2), calibrated independently. One region-select bit plus k-1
    magnitude bits, so the level budget stays within 2^k.
    """
    kind: str
    s1: float
    s2: float
    k: int

    def __post_init__(self):
        _check_bits(self.k)
        if self.kind not in (POST_SOFTMAX, POST_GELU):
            raise ConfigError(f"unknown multi-region kind {self.kind!r}")
        if self.s1 <= 0 or self.s2 <= 0:
            raise ConfigError("region step sizes must be positive")
        half = 2 ** (self.k - 1)
        if self.kind == POST_SOFTMAX:
            if self.s2 != 1.0 / half:
                raise ConfigError(f"post-softmax coarse step must be exactly 1/{half}")
            if half * self.s1 > 1.0 + 1e-12:
                raise ConfigError("post-softmax fine region must stay inside [0, 1]")


@dataclass(frozen=True)
class TimeGroupedParams:
    """Per-timestep-group parameter table for one activation site."""
    groups: int
    timesteps: int
    entries: tuple

    def __post_init__(self):
        if self.timesteps % self.groups != 0:
            raise ConfigError(f"G={self.groups} must divide T={self.timesteps}")
        if len(self.entries) != self.groups:
            raise ConfigError(f"expected {self.groups} group entries, got {len(self.entries)}")

    def params_for(self, t: int):
        g = group_of(int(t), self.timesteps, self.groups)
        entry = self.entries[g - 1]
        if entry is None:
            raise ConfigError(f"no quantizer entry for timestep group {g}")
        return entry


def init_minmax(x: np.ndarray, k: int, channel_axis: int | None = None) -> QuantParams:
    """Min-max initialization s=(max-min)/(2^k-1), z=-round(min/s), clamped.

    A constant tensor degenerates to s=1e-8, z=0 and is flagged.
    """
    _check_bits(k)
    x = np.asarray(x, dtype=np.float64)
    levels = 2 ** k - 1
    if channel_axis is None:
        lo, hi = float(np.min(x)), float(np.max(x))
        if hi <= lo:
            return QuantParams(1e-8, 0, k, degenerate=True)
        s = (hi - lo) / levels
        z = int(np.clip(-np.rint(lo / s), 0, levels))
        return QuantParams(s, z, k)
    axes = tuple(a for a in range(x.ndim) if a != channel_axis)
    lo = np.min(x, axis=axes)
    hi = np.max(x, axis=axes)
    span = hi - lo
    degenerate = bool(np.any(span <= 0))
    s = np.where(span > 0, span / levels, 1e-8)
    z = np.clip(-np.rint(np.where(span > 0, lo, 0.0) / s), 0, levels)
    return QuantParams(s, z, k, channel_axis=channel_axis, degenerate=degenerate)


def _channel_shape(p: QuantParams, ndim: int):
    shape = [1] * ndim
    shape[p.channel_axis] = -1
    return shape


def quantize_uniform(x: np.ndarray, p: QuantParams) -> np.ndarray:
    """x_hat = s * (clip(round(x/s) + z, 0, 2^k - 1) - z), half-even rounding."""
    x = np.asarray(x)
    out_dtype = x.dtype
    xd = x.astype(np.float64)
    s = np.asarray(p.s, dtype=np.float64)
    z = np.asarray(p.z, dtype=np.float64)
    if p.channel_axis is not None:
        s = s.reshape(_channel_shape(p, xd.ndim))
        z = z.reshape(_channel_shape(p, xd.ndim))
    code = np.clip(np.rint(xd / s) + z, 0, 2 ** p.k - 1)
    return (s * (code - z)).astype(out_dtype)


def _grid_round(x: np.ndarray, step: float, lo_code: int, hi_code: int) -> np.ndarray:
    return step * np.clip(np.rint(x / step), lo_code, hi_code)


def _nearest_of(x: np.ndarray, cand_a: np.ndarray, cand_b: np.ndarray) -> np.ndarray:
    """Pointwise nearer of two level candidates; equidistant picks the larger."""
    da = np.abs(x - cand_a)
    db = np.abs(x - cand_b)
    hi = np.maximum(cand_a, cand_b)
    out = np.where(da < db, cand_a, np.where(db < da, cand_b, hi))
    return out


def quantize_mrq_softmax(a: np.ndarray, p: MultiRegionParams) -> np.ndarray:
    """Two-region quantization of post-softmax values in [0, 1]."""
    if p.kind != POST_SOFTMAX:
        raise ContractError("quantize_mrq_softmax needs post-softmax parameters")
    a = np.asarray(a)
    ad = a.astype(np.float64)
    if ad.size and (ad.min() < -1e-6 or ad.max() > 1.0 + 1e-6):
        raise ContractError("post-softmax quantizer input must lie in [0, 1]")
    half = 2 ** (p.k - 1)
    fine = _grid_round(ad, p.s1, 0, half - 1)
    coarse = _grid_round(ad, p.s2, 0, half - 1)
    return _nearest_of(ad, fine, coarse).astype(a.dtype)


def quantize_mrq_gelu(x: np.ndarray, p: MultiRegionParams) -> np.ndarray:
    """Two-region quantization of post-GELU values (negative tail + positive body)."""
    if p.kind != POST_GELU:
        raise ContractError("quantize_mrq_gelu needs post-gelu parameters")
    x = np.asarray(x)
    xd = x.astype(np.float64)
    half = 2 ** (p.k - 1)
    negative = -_grid_round(-xd, p.s1, 0, half)
    positive = _grid_round(xd, p.s2, 0, half - 1)
    return _nearest_of(xd, negative, positive).astype(x.dtype)


def group_of(t: int, timesteps: int, groups: int) -> int:
    """1-based index of the contiguous timestep group containing t."""
    if timesteps % groups != 0:
        raise ConfigError(f"G={groups} must divide T={timesteps}")
    if t < 0 or t >= timesteps:
        raise DomainError(f"timestep {t} out of [0, {timesteps})")
    return t // (timesteps // groups) + 1


def quantize_tgq(a: np.ndarray, t: int, p: TimeGroupedParams) -> np.ndarray:
    """Dispatch to the timestep group's parameters and apply them."""
    return apply_quantizer(a, p.params_for(t))


def apply_quantizer(x: np.ndarray, params, t=None) -> np.ndarray:
    """Apply any of the three parameter kinds (TGQ needs the timestep)."""
    if isinstance(params, QuantParams):
        return quantize_uniform(x, params)
    if isinstance(params, MultiRegionParams):
        if params.kind == POST_SOFTMAX:
            return quantize_mrq_softmax(x, params)
        return quantize_mrq_gelu(x, params)
    if isinstance(params, TimeGroupedParams):
        if t is None:
            raise ContractError("time-grouped quantizer needs a timestep")
        return quantize_tgq(x, _single_timestep(t, params), params)
    raise ConfigError(f"unknown quantizer parameter type {type(params).__name__}")


def _single_timestep(t, p: TimeGroupedParams) -> int:
    """A batch must sit in one timestep group to use a TGQ site."""
    arr = np.atleast_1d(np.asarray(t, dtype=np.int64))
    groups = {group_of(int(v), p.timesteps, p.groups) for v in np.unique(arr)}
    if len(groups) != 1:
        raise ContractError("batch spans multiple timestep groups at a TGQ site")
    return int(arr[0])


def params_to_dict(params) -> dict:
    """Exact serializable form of any quantizer parameter object."""
    if params is None:
        return {"kind": "fp"}
    if isinstance(params, QuantParams):
        s = np.asarray(params.s, dtype=np.float64)
        z = np.asarray(params.z, dtype=np.int64)
        return {"kind": "uniform", "k": int(params.k),
                "s": s.tolist() if s.ndim else float(s),
                "z": z.tolist() if z.ndim else int(z),
                "channel_axis": params.channel_axis,
                "degenerate": bool(params.degenerate)}
    if isinstance(params, MultiRegionParams):
        return {"kind": "multi-region", "region_kind": params.kind, "k": int(params.k),
                "s1": float(params.s1), "s2": float(params.s2)}
    if isinstance(params, TimeGroupedParams):
        return {"kind": "time-grouped", "groups": int(params.groups),
                "timesteps": int(params.timesteps),
                "entries": [params_to_dict(e) for e in params.entries]}
    raise ConfigError(f"cannot serialize {type(params).__name__}")


def params_from_dict(d: dict):
    kind = d.get("kind")
    if kind == "fp":
        return None
    if kind == "uniform":
        s = d["s"]
        z = d["z"]
        if isinstance(s, list):
            s = np.asarray(s, dtype=np.float64)
            z = np.asarray(z, dtype=np.int64)
        return QuantParams(s, z, int(d["k"]), channel_axis=d.get("channel_axis"),
                           degenerate=bool(d.get("degenerate", False)))
    if kind == "multi-region":
        return MultiRegionParams(d["region_kind"], float(d["s1"]), float(d["s2"]),
                                 int(d["k"]))
    if kind == "time-grouped":
        return TimeGroupedParams(int(d["groups"]), int(d["timesteps"]),
                                 tuple(params_from_dict(e) for e in d["entries"]))
    raise ConfigError(f"cannot deserialize quantizer kind {kind!r}")


@dataclass
class SiteAssignment:
    """Quantizer assignment for one site; None fields mean full precision."""
    weight: QuantParams | None = None
    activation: object | None = None   # X of a linear site, or A of a matmul
    operand_b: QuantParams | None = None
    enabled: bool = True


class QuantizedModel:
    """A DiTModel plus per-site fake-quant assignments.

    Implements the quantizer protocol the model's forward pass consumes:
    ``weight(site_id, w)`` and ``activation(site_id, role, x, t)`` return the
    fake-quantized array or None for the full-precision path. Quantized
    weights are cached (parameters are frozen after calibration).
    """

    def __init__(self, model, assignments: dict[str, SiteAssignment]):
        self.model = model
        site_ids = [s.site_id for s in model.sites()]
        missing = [sid for sid in site_ids if sid not in assignments]
        if missing:
            raise ConfigError(f"sites without assignment or explicit FP flag: {missing}")
        unknown = [sid for sid in assignments if sid not in site_ids]
        if unknown:
            raise ConfigError(f"assignments for unknown sites: {unknown}")
        self.assignments = assignments
        self._weight_cache: dict[str, np.ndarray] = {}

    def weight(self, site_id: str, w: np.ndarray):
        a = self.assignments[site_id]
        if not a.enabled or a.weight is None:
            return None
        if site_id not in self._weight_cache:
            self._weight_cache[site_id] = quantize_uniform(w, a.weight)
        return self._weight_cache[site_id]

    def activation(self, site_id: str, role: str, x: np.ndarray, t=None):
        a = self.assignments[site_id]
        if not a.enabled:
            return None
        params = a.operand_b if role == "b" else a.activation
        if params is None:
            return None
        return apply_quantizer(x, params, t=t)

    def forward(self, x, t, y):
        any_enabled = any(a.enabled and (a.weight is not None or a.activation is not None
                                         or a.operand_b is not None)
                          for a in self.assignments.values())
        return self.model.forward(x, t, y, quant=self if any_enabled else None)

    def set_enabled(self, enabled: bool, site_ids=None):
        ids = site_ids if site_ids is not None else list(self.assignments)
        for sid in ids:
            self.assignments[sid].enabled = enabled
        self._weight_cache.clear()
