"""Run configuration: a flat, human-editable ``section.key = value`` file.

Every random choice in the pipeline flows from a named seed here; nothing
reads wall-clock entropy. Unknown keys and malformed values fail parsing with
the offending key named.
"""

from __future__ import annotations

from dataclasses import dataclass

from .errors import ConfigError
from .model import DiTConfig


def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("true", "1", "yes", "on"):
        return True
    if low in ("false", "0", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


# key -> (parser, default)
_SCHEMA: dict[str, tuple] = {
    "model.image_size": (int, 16),
    "model.channels": (int, 1),
    "model.patch_size": (int, 4),
    "model.embed_dim": (int, 64),
    "model.num_blocks": (int, 2),
    "model.num_heads": (int, 4),
    "model.num_classes": (int, 8),
    "model.mlp_ratio": (int, 4),
    "model.quantize_final": (_parse_bool, True),
    "schedule.timesteps": (int, 100),
    "schedule.beta_1": (float, 1e-4),
    "schedule.beta_end": (float, 0.02),
    "train.steps": (int, 2000),
    "train.batch_size": (int, 64),
    "train.lr": (float, 1e-3),
    "calib.groups": (int, 10),
    "calib.samples_per_group": (int, 32),
    "calib.mode": (str, "forward"),
    "calib.k_w": (int, 8),
    "calib.k_a": (int, 8),
    "calib.rounds": (int, 3),
    "calib.num_candidates": (int, 100),
    "calib.per_channel": (_parse_bool, False),
    "ablation.num_seeds": (int, 5),
    "ablation.k_w": (int, 6),
    "ablation.k_a": (int, 6),
    "ablation.samples_per_group": (int, 8),
    "ablation.num_candidates": (int, 32),
    "ablation.num_generated": (int, 96),
    "ablation.num_divergence": (int, 4),
    "generate.num_samples": (int, 128),
    "seeds.dataset": (int, 1000),
    "seeds.train": (int, 2000),
    "seeds.calib": (int, 3000),
    "seeds.sample": (int, 4000),
    "seeds.projection": (int, 5000),
}


def parse_config_text(text: str) -> dict[str, str]:
    """Raw ``key = value`` lines; '#' starts a comment; blank lines ignored."""
    raw: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, value = stripped.split("=", 1)
        key = key.strip()
        if key in raw:
            raise ConfigError(f"duplicate config key {key!r}")
        raw[key] = value.strip()
    return raw


@dataclass(frozen=True)
class RunConfig:
    values: dict

    @classmethod
    def from_text(cls, text: str) -> "RunConfig":
        raw = parse_config_text(text)
        values = {}
        for key, (parser, default) in _SCHEMA.items():
            if key in raw:
                try:
                    values[key] = parser(raw.pop(key))
                except (ValueError, TypeError) as exc:
                    raise ConfigError(f"bad value for config key {key!r}: {exc}") from exc
            else:
                values[key] = default
        if raw:
            raise ConfigError(f"unknown config key {sorted(raw)[0]!r}")
        cfg = cls(values)
        cfg.validate()
        return cfg

    @classmethod
    def defaults(cls) -> "RunConfig":
        return cls.from_text("")

    def __getitem__(self, key: str):
        return self.values[key]

    def validate(self):
        v = self.values
        if v["schedule.timesteps"] % v["calib.groups"] != 0:
            raise ConfigError(
                f"calib.groups={v['calib.groups']} must divide "
                f"schedule.timesteps={v['schedule.timesteps']}")
        for key in ("calib.k_w", "calib.k_a", "ablation.k_w", "ablation.k_a"):
            if not 2 <= v[key] <= 8:
                raise ConfigError(f"{key} must lie in [2, 8]")
        if v["calib.mode"] not in ("forward", "trajectory"):
            raise ConfigError("calib.mode must be 'forward' or 'trajectory'")
        # constructing the model config exercises its own invariants
        self.dit_config()

    def dit_config(self) -> DiTConfig:
        v = self.values
        return DiTConfig(
            image_size=v["model.image_size"], channels=v["model.channels"],
            patch_size=v["model.patch_size"], embed_dim=v["model.embed_dim"],
            num_blocks=v["model.num_blocks"], num_heads=v["model.num_heads"],
            num_classes=v["model.num_classes"], timesteps=v["schedule.timesteps"],
            mlp_ratio=v["model.mlp_ratio"], quantize_final=v["model.quantize_final"])

    def to_text(self) -> str:
        lines = [f"{key} = {self.values[key]}" for key in _SCHEMA]
        return "\n".join(lines) + "\n"


def load_config(path) -> RunConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return RunConfig.from_text(fh.read())
