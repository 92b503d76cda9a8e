"""Toy diffusion transformer: patchified input, adaLN-conditioned blocks, noise head.

Every tensor that quantization may touch flows through a named *site*. Sites are
enumerated in forward order by :func:`site_registry` and the forward pass calls
back into an optional quantizer (fake-quant injection) and an optional tap
recorder (full-precision value / gradient capture) at exactly those points, so
the three consumers of the network (training, calibration, quantized sampling)
share one code path.

Conditioning follows the adaLN-Zero recipe: per-block modulation parameters are
produced by a zero-initialized linear layer on the summed timestep/class
embedding, so a freshly initialized block is an identity residual. The timestep
embedding is sinusoidal features through a 2-layer GELU MLP; the class
embedding is a learned table kept in full precision.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, DomainError

WEIGHT_LINEAR = "weight-linear"
POST_SOFTMAX_MATMUL = "post-softmax-matmul"
POST_GELU_LINEAR = "post-gelu-linear"
GENERIC_MATMUL = "generic-matmul"
GENERIC_ACTIVATION = "generic-activation"

SITE_KINDS = (WEIGHT_LINEAR, POST_SOFTMAX_MATMUL, POST_GELU_LINEAR,
              GENERIC_MATMUL, GENERIC_ACTIVATION)

LINEAR_KINDS = (WEIGHT_LINEAR, POST_GELU_LINEAR)
MATMUL_KINDS = (GENERIC_MATMUL, POST_SOFTMAX_MATMUL)


@dataclass(frozen=True)
class DiTConfig:
    image_size: int = 16
    channels: int = 1
    patch_size: int = 4
    embed_dim: int = 64
    num_blocks: int = 2
    num_heads: int = 4
    num_classes: int = 8
    timesteps: int = 100
    mlp_ratio: int = 4
    quantize_final: bool = True

    def __post_init__(self):
        if self.image_size % self.patch_size != 0:
            raise ConfigError("image_size must be divisible by patch_size")
        if self.embed_dim % self.num_heads != 0:
            raise ConfigError("embed_dim must be divisible by num_heads")
        if self.embed_dim % 2 != 0:
            raise ConfigError("embed_dim must be even (sinusoidal features)")
        for name in ("image_size", "channels", "patch_size", "embed_dim",
                     "num_blocks", "num_heads", "num_classes", "timesteps"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_tokens(self) -> int:
        return self.grid * self.grid

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.channels


@dataclass(frozen=True)
class Site:
    """One quantization site: a linear layer or a matmul inside attention."""
    site_id: str
    kind: str
    block: int  # -1 for sites outside the block stack
    weight_name: str | None = None  # parameter claimed by a linear site


def site_registry(config: DiTConfig) -> list[Site]:
    """Stable forward-order enumeration of quantization sites."""
    sites = [
        Site("t_embed.fc1", WEIGHT_LINEAR, -1, "t_embed.fc1.w"),
        Site("t_embed.fc2", POST_GELU_LINEAR, -1, "t_embed.fc2.w"),
        Site("patch_embed", WEIGHT_LINEAR, -1, "patch_embed.w"),
    ]
    for b in range(config.num_blocks):
        p = f"block{b}"
        sites += [
            Site(f"{p}.adaln", WEIGHT_LINEAR, b, f"{p}.adaln.w"),
            Site(f"{p}.attn.qkv", WEIGHT_LINEAR, b, f"{p}.attn.qkv.w"),
            Site(f"{p}.attn.qk_matmul", GENERIC_MATMUL, b),
            Site(f"{p}.attn.av_matmul", POST_SOFTMAX_MATMUL, b),
            Site(f"{p}.attn.proj", WEIGHT_LINEAR, b, f"{p}.attn.proj.w"),
            Site(f"{p}.mlp.fc1", WEIGHT_LINEAR, b, f"{p}.mlp.fc1.w"),
            Site(f"{p}.mlp.fc2", POST_GELU_LINEAR, b, f"{p}.mlp.fc2.w"),
        ]
    sites += [
        Site("final.adaln", WEIGHT_LINEAR, -1, "final.adaln.w"),
        Site("final.linear", WEIGHT_LINEAR, -1, "final.linear.w"),
    ]
    return sites


def sinusoidal_features(t: np.ndarray, dim: int, max_period: float = 10000.0) -> np.ndarray:
    """Standard transformer timestep features, shape (len(t), dim)."""
    half = dim // 2
    freqs = np.exp(-math.log(max_period) * np.arange(half, dtype=np.float64) / half)
    args = np.asarray(t, dtype=np.float64)[:, None] * freqs[None, :]
    return np.concatenate([np.cos(args), np.sin(args)], axis=-1)


def patchify(x: np.ndarray, patch: int) -> np.ndarray:
    """(B, C, H, W) -> (B, tokens, patch*patch*C), row-major over the patch grid."""
    b, c, h, w = x.shape
    gh, gw = h // patch, w // patch
    x = x.reshape(b, c, gh, patch, gw, patch)
    x = x.transpose(0, 2, 4, 3, 5, 1)
    return x.reshape(b, gh * gw, patch * patch * c)


class DiTModel:
    """Parameter container plus the shared forward pass."""

    def __init__(self, config: DiTConfig, params: dict[str, ad.Tensor]):
        self.config = config
        self.params = params

    # ------------------------------------------------------------------ init

    @classmethod
    def init(cls, config: DiTConfig, seed: int, zero_gates: bool = True,
             dtype=np.float32) -> "DiTModel":
        """Fresh model. ``zero_gates=True`` is the adaLN-Zero training init;
        gradient-check harnesses pass False to randomize every parameter."""
        rng = np.random.default_rng(seed)
        e = config.embed_dim
        hidden = config.mlp_ratio * e

        def normal(*shape):
            return rng.normal(0.0, 0.02, size=shape)

        def zeros(*shape):
            return np.zeros(shape)

        maybe_zero = normal if not zero_gates else zeros
        shapes: dict[str, np.ndarray] = {
            "t_embed.fc1.w": normal(e, e), "t_embed.fc1.b": zeros(e),
            "t_embed.fc2.w": normal(e, e), "t_embed.fc2.b": zeros(e),
            "class_emb": normal(config.num_classes, e),
            "patch_embed.w": normal(config.patch_dim, e), "patch_embed.b": zeros(e),
        }
        for b in range(config.num_blocks):
            p = f"block{b}"
            shapes.update({
                f"{p}.adaln.w": maybe_zero(e, 6 * e), f"{p}.adaln.b": zeros(6 * e),
                f"{p}.attn.qkv.w": normal(e, 3 * e), f"{p}.attn.qkv.b": zeros(3 * e),
                f"{p}.attn.proj.w": normal(e, e), f"{p}.attn.proj.b": zeros(e),
                f"{p}.mlp.fc1.w": normal(e, hidden), f"{p}.mlp.fc1.b": zeros(hidden),
                f"{p}.mlp.fc2.w": normal(hidden, e), f"{p}.mlp.fc2.b": zeros(e),
            })
        shapes.update({
            "final.adaln.w": maybe_zero(e, 2 * e), "final.adaln.b": zeros(2 * e),
            "final.linear.w": maybe_zero(e, config.patch_dim),
            "final.linear.b": zeros(config.patch_dim),
        })
        params = {k: ad.Tensor(v.astype(dtype), requires_grad=True) for k, v in shapes.items()}
        return cls(config, params)

    def astype(self, dtype) -> "DiTModel":
        params = {k: ad.Tensor(v.data.astype(dtype), requires_grad=True)
                  for k, v in self.params.items()}
        return DiTModel(self.config, params)

    def state_arrays(self) -> list[tuple[str, np.ndarray]]:
        """Name-sorted parameter arrays, the checkpoint serialization order."""
        return [(k, self.params[k].data) for k in sorted(self.params)]

    def load_state(self, arrays: dict[str, np.ndarray]):
        for k in self.params:
            if k not in arrays:
                raise ConfigError(f"checkpoint missing parameter {k}")
            if arrays[k].shape != self.params[k].data.shape:
                raise ConfigError(f"checkpoint shape mismatch for {k}")
            self.params[k] = ad.Tensor(arrays[k].astype(self.params[k].data.dtype),
                                       requires_grad=True)

    def sites(self) -> list[Site]:
        return site_registry(self.config)

    # --------------------------------------------------------------- forward

    def _validate_conditioning(self, t: np.ndarray, y: np.ndarray):
        cfg = self.config
        if np.any(t < 0) or np.any(t >= cfg.timesteps):
            raise DomainError(f"timestep out of [0, {cfg.timesteps})")
        if np.any(y < 0) or np.any(y >= cfg.num_classes):
            raise DomainError(f"class label out of [0, {cfg.num_classes})")

    def _site_linear(self, site_id, x, w_name, quant, taps, t=None):
        w = self.params[w_name]
        b = self.params[w_name[:-2] + ".b"]
        xq, wq = x, w
        if quant is not None:
            xq = _maybe_replace(x, quant.activation(site_id, "x", x.data, t))
            wq = _maybe_replace(w, quant.weight(site_id, w.data))
        out = ad.linear(xq, wq, b)
        if taps is not None:
            taps.record_linear(site_id, x, out)
        return out

    def _site_matmul(self, site_id, a, b, quant, taps, t=None):
        aq, bq = a, b
        if quant is not None:
            aq = _maybe_replace(a, quant.activation(site_id, "a", a.data, t))
            bq = _maybe_replace(b, quant.activation(site_id, "b", b.data, t))
        out = ad.matmul(aq, bq)
        if taps is not None:
            taps.record_matmul(site_id, a, b, out)
        return out

    def conditioning(self, t: np.ndarray, y: np.ndarray, quant=None, taps=None) -> ad.Tensor:
        """Summed timestep + class embedding, shape (batch, embed_dim)."""
        cfg = self.config
        t = np.atleast_1d(np.asarray(t, dtype=np.int64))
        y = np.atleast_1d(np.asarray(y, dtype=np.int64))
        self._validate_conditioning(t, y)
        feats = ad.constant(sinusoidal_features(t, cfg.embed_dim).astype(self.dtype))
        h = self._site_linear("t_embed.fc1", feats, "t_embed.fc1.w", quant, taps, t)
        h = ad.gelu(h)
        temb = self._site_linear("t_embed.fc2", h, "t_embed.fc2.w", quant, taps, t)
        yemb = ad.embedding(self.params["class_emb"], y)
        return temb + yemb

    @property
    def dtype(self):
        return self.params["patch_embed.w"].data.dtype

    def block_modulation(self, block: int, t, y) -> dict[str, np.ndarray]:
        """adaLN scale/shift/gate triples for one block (diagnostic surface)."""
        cond = self.conditioning(t, y)
        mods = ad.linear(cond, self.params[f"block{block}.adaln.w"],
                         self.params[f"block{block}.adaln.b"])
        parts = ad.split(mods, 6, axis=-1)
        names = ("shift_attn", "scale_attn", "gate_attn",
                 "shift_mlp", "scale_mlp", "gate_mlp")
        return {n: p.data for n, p in zip(names, parts)}

    def forward(self, x, t, y, quant=None, taps=None) -> ad.Tensor:
        """Predict the noise for x_t; output has the input's image shape.

        ``quant`` is an optional fake-quant dispatcher (see quant module) and
        ``taps`` an optional recorder capturing full-precision site values.
        Neither alters the graph when absent; with quantizers disabled the
        output is bit-identical to the plain forward.
        """
        cfg = self.config
        xd = x.data if isinstance(x, ad.Tensor) else np.asarray(x)
        if xd.ndim == 3:
            xd = xd[None]
        if xd.shape[1:] != (cfg.channels, cfg.image_size, cfg.image_size):
            raise DomainError(f"input shape {xd.shape} does not match config")
        if not np.all(np.isfinite(xd)):
            raise DomainError("model input contains non-finite values")
        batch = xd.shape[0]
        t = np.broadcast_to(np.atleast_1d(np.asarray(t, dtype=np.int64)), (batch,))
        y = np.broadcast_to(np.atleast_1d(np.asarray(y, dtype=np.int64)), (batch,))

        cond = self.conditioning(t, y, quant, taps)

        patches = ad.constant(patchify(xd, cfg.patch_size).astype(self.dtype))
        tok = self._site_linear("patch_embed", patches, "patch_embed.w", quant, taps, t)

        heads, hd = cfg.num_heads, cfg.embed_dim // cfg.num_heads
        n = cfg.num_tokens
        for b in range(cfg.num_blocks):
            p = f"block{b}"
            mods = self._site_linear(f"{p}.adaln", cond, f"{p}.adaln.w", quant, taps, t)
            sh_a, sc_a, g_a, sh_m, sc_m, g_m = [
                ad.reshape(m, (batch, 1, cfg.embed_dim)) for m in ad.split(mods, 6, -1)]

            h = ad.layer_norm(tok)
            h = h * (1.0 + sc_a) + sh_a
            qkv = self._site_linear(f"{p}.attn.qkv", h, f"{p}.attn.qkv.w", quant, taps, t)
            q, k, v = ad.split(qkv, 3, -1)
            q = ad.transpose(ad.reshape(q, (batch, n, heads, hd)), (0, 2, 1, 3))
            k = ad.transpose(ad.reshape(k, (batch, n, heads, hd)), (0, 2, 1, 3))
            v = ad.transpose(ad.reshape(v, (batch, n, heads, hd)), (0, 2, 1, 3))
            q = q * (1.0 / math.sqrt(hd))
            kt = ad.transpose(k, (0, 1, 3, 2))
            logits = self._site_matmul(f"{p}.attn.qk_matmul", q, kt, quant, taps, t)
            probs = ad.softmax(logits, -1)
            ctx = self._site_matmul(f"{p}.attn.av_matmul", probs, v, quant, taps, t)
            ctx = ad.reshape(ad.transpose(ctx, (0, 2, 1, 3)), (batch, n, cfg.embed_dim))
            attn_out = self._site_linear(f"{p}.attn.proj", ctx, f"{p}.attn.proj.w",
                                         quant, taps, t)
            tok = tok + g_a * attn_out

            h = ad.layer_norm(tok)
            h = h * (1.0 + sc_m) + sh_m
            h = self._site_linear(f"{p}.mlp.fc1", h, f"{p}.mlp.fc1.w", quant, taps, t)
            h = ad.gelu(h)
            mlp_out = self._site_linear(f"{p}.mlp.fc2", h, f"{p}.mlp.fc2.w", quant, taps, t)
            tok = tok + g_m * mlp_out

        fmods = self._site_linear("final.adaln", cond, "final.adaln.w", quant, taps, t)
        f_sh, f_sc = [ad.reshape(m, (batch, 1, cfg.embed_dim)) for m in ad.split(fmods, 2, -1)]
        h = ad.layer_norm(tok)
        h = h * (1.0 + f_sc) + f_sh
        out = self._site_linear("final.linear", h, "final.linear.w", quant, taps, t)

        # unpatchify back to (B, C, H, W)
        g, ps, c = cfg.grid, cfg.patch_size, cfg.channels
        out = ad.reshape(out, (batch, g, g, ps, ps, c))
        out = ad.transpose(out, (0, 5, 1, 3, 2, 4))
        out = ad.reshape(out, (batch, c, cfg.image_size, cfg.image_size))
        return out


def _maybe_replace(tensor: ad.Tensor, new_data):
    """Swap in fake-quantized values; None means the site is at full precision."""
    if new_data is None:
        return tensor
    return ad.constant(new_data)
