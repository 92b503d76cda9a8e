"""Deterministic on-disk artifacts: checkpoints, quant sidecars, archives, tables.

Tensor payloads are raw little-endian bytes described by a plain-text manifest
(name, dtype, offset, byte count, shape per tensor, plus a sha256 of the
payload), so every artifact is a pure function of its inputs and byte-stable
across runs.
"""

from __future__ import annotations

import hashlib
import json
import os

import numpy as np

from .errors import ConfigError
from .model import DiTConfig, DiTModel
from .quant import QuantizedModel, SiteAssignment, params_from_dict, params_to_dict

_DTYPES = {"<f4": np.dtype("<f4"), "<i8": np.dtype("<i8")}


# ------------------------------------------------------------ tensor container

def save_tensors(stem: str, arrays: dict[str, np.ndarray],
                 header: dict[str, str] | None = None) -> None:
    """Write ``<stem>.manifest`` + ``<stem>.bin`` (tensors in name order)."""
    names = sorted(arrays)
    chunks: list[bytes] = []
    directory: list[str] = []
    offset = 0
    for name in names:
        arr = arrays[name]
        if arr.dtype.kind == "f":
            data = np.ascontiguousarray(arr, dtype="<f4").tobytes()
            dtype = "<f4"
        elif arr.dtype.kind in "iu":
            data = np.ascontiguousarray(arr, dtype="<i8").tobytes()
            dtype = "<i8"
        else:
            raise ConfigError(f"unsupported tensor dtype {arr.dtype} for {name}")
        shape = ",".join(str(d) for d in arr.shape) if arr.ndim else ""
        directory.append(f"tensor {name} {dtype} {offset} {len(data)} {shape}")
        chunks.append(data)
        offset += len(data)
    payload = b"".join(chunks)
    lines = ["format = ditquant-tensors-v1",
             f"payload_sha256 = {hashlib.sha256(payload).hexdigest()}"]
    for key in sorted(header or {}):
        lines.append(f"{key} = {header[key]}")
    lines.extend(directory)
    _write_text(stem + ".manifest", "\n".join(lines) + "\n")
    with open(stem + ".bin", "wb") as fh:
        fh.write(payload)


def load_tensors(stem: str) -> tuple[dict[str, str], dict[str, np.ndarray]]:
    with open(stem + ".manifest", "r", encoding="utf-8") as fh:
        manifest = fh.read()
    with open(stem + ".bin", "rb") as fh:
        payload = fh.read()
    header: dict[str, str] = {}
    entries: list[tuple] = []
    for line in manifest.splitlines():
        line = line.strip()
        if not line:
            continue
        if line.startswith("tensor "):
            parts = line.split(" ")
            if len(parts) not in (5, 6):
                raise ConfigError(f"malformed tensor directory line: {line!r}")
            name, dtype, offset, nbytes = parts[1], parts[2], int(parts[3]), int(parts[4])
            shape = tuple(int(d) for d in parts[5].split(",")) if len(parts) == 6 and parts[5] else ()
            entries.append((name, dtype, offset, nbytes, shape))
        elif " = " in line:
            key, value = line.split(" = ", 1)
            header[key] = value
        else:
            raise ConfigError(f"malformed manifest line: {line!r}")
    digest = header.get("payload_sha256")
    if digest != hashlib.sha256(payload).hexdigest():
        raise ConfigError(f"payload digest mismatch for {stem}")
    total = sum(n for _, _, _, n, _ in entries)
    if total != len(payload):
        raise ConfigError(f"payload length {len(payload)} != directory total {total}")
    spans = sorted((off, off + n) for _, _, off, n, _ in entries)
    for (a0, a1), (b0, _) in zip(spans, spans[1:]):
        if b0 < a1:
            raise ConfigError("overlapping tensor offsets in manifest")
    arrays: dict[str, np.ndarray] = {}
    for name, dtype, offset, nbytes, shape in entries:
        if dtype not in _DTYPES:
            raise ConfigError(f"unknown tensor dtype {dtype!r}")
        arr = np.frombuffer(payload[offset:offset + nbytes], dtype=_DTYPES[dtype])
        arrays[name] = arr.reshape(shape).copy()
    return header, arrays


# ----------------------------------------------------------------- checkpoints

_CONFIG_FIELDS = ("image_size", "channels", "patch_size", "embed_dim", "num_blocks",
                  "num_heads", "num_classes", "timesteps", "mlp_ratio",
                  "quantize_final")


def save_checkpoint(stem: str, model: DiTModel) -> None:
    header = {"kind": "checkpoint"}
    for name in _CONFIG_FIELDS:
        header[f"config.{name}"] = str(getattr(model.config, name))
    save_tensors(stem, dict(model.state_arrays()), header)


def load_checkpoint(stem: str) -> DiTModel:
    header, arrays = load_tensors(stem)
    if header.get("kind") != "checkpoint":
        raise ConfigError(f"{stem} is not a checkpoint")
    kwargs = {}
    for name in _CONFIG_FIELDS:
        raw = header.get(f"config.{name}")
        if raw is None:
            raise ConfigError(f"checkpoint manifest missing config.{name}")
        kwargs[name] = raw == "True" if name == "quantize_final" else int(raw)
    config = DiTConfig(**kwargs)
    model = DiTModel.init(config, seed=0)
    model.load_state(arrays)
    return model


def checkpoint_digest(stem: str) -> str:
    header, _ = load_tensors(stem)
    return header["payload_sha256"]


# -------------------------------------------------------------------- sidecars

def save_sidecar(path: str, qm: QuantizedModel, provenance: dict) -> None:
    """Persist per-site quantizer assignments plus calibration provenance."""
    sites = {}
    for sid, a in qm.assignments.items():
        sites[sid] = {"enabled": bool(a.enabled),
                      "weight": params_to_dict(a.weight),
                      "activation": params_to_dict(a.activation),
                      "operand_b": params_to_dict(a.operand_b)}
    body = {"sites": sites, "provenance": provenance}
    canonical = json.dumps(body, sort_keys=True)
    doc = {"format": "ditquant-sidecar-v1",
           "content_sha256": hashlib.sha256(canonical.encode()).hexdigest(),
           **body}
    _write_text(path, json.dumps(doc, sort_keys=True, indent=1) + "\n")


def load_sidecar(path: str, model: DiTModel) -> tuple[QuantizedModel, dict]:
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("format") != "ditquant-sidecar-v1":
        raise ConfigError(f"{path} is not a quant sidecar")
    body = {"sites": doc["sites"], "provenance": doc["provenance"]}
    canonical = json.dumps(body, sort_keys=True)
    if hashlib.sha256(canonical.encode()).hexdigest() != doc.get("content_sha256"):
        raise ConfigError(f"sidecar digest mismatch: {path} is corrupt")
    assignments = {}
    for sid, rec in doc["sites"].items():
        assignments[sid] = SiteAssignment(
            weight=params_from_dict(rec["weight"]),
            activation=params_from_dict(rec["activation"]),
            operand_b=params_from_dict(rec["operand_b"]),
            enabled=bool(rec["enabled"]))
    return QuantizedModel(model, assignments), doc["provenance"]


# ----------------------------------------------------------------- sample sets

def save_archive(stem: str, samples: np.ndarray, labels: np.ndarray,
                 header: dict[str, str] | None = None,
                 preview_path: str | None = None) -> None:
    head = {"kind": "samples"}
    head.update(header or {})
    save_tensors(stem, {"samples": samples.astype(np.float32),
                        "labels": labels.astype(np.int64)}, head)
    if preview_path is not None and len(samples):
        _write_preview(preview_path, samples)


def load_archive(stem: str) -> tuple[np.ndarray, np.ndarray, dict[str, str]]:
    header, arrays = load_tensors(stem)
    if header.get("kind") != "samples":
        raise ConfigError(f"{stem} is not a sample archive")
    return arrays["samples"], arrays["labels"], header


def _write_preview(path: str, samples: np.ndarray, max_tiles: int = 64) -> None:
    """8-bit preview grid of the first samples, mapped from [-1, 1]."""
    from PIL import Image

    tiles = samples[:max_tiles]
    n = len(tiles)
    cols = int(np.ceil(np.sqrt(n)))
    rows = int(np.ceil(n / cols))
    c, h, w = tiles.shape[1:]
    grid = np.zeros((rows * h, cols * w, c), dtype=np.uint8)
    clipped = np.clip((tiles + 1.0) * 127.5, 0, 255).astype(np.uint8)
    for i in range(n):
        r, col = divmod(i, cols)
        grid[r * h:(r + 1) * h, col * w:(col + 1) * w] = clipped[i].transpose(1, 2, 0)
    img = Image.fromarray(grid[:, :, 0] if c == 1 else grid)
    img.save(path, format="PNG")


# --------------------------------------------------------------- metric tables

def save_metric_table(path_stem: str, rows: list[dict]) -> None:
    """CSV table plus a JSON mirror, both with deterministic ordering."""
    columns = sorted({k for row in rows for k in row})
    lines = [",".join(columns)]
    for row in rows:
        lines.append(",".join(_csv_cell(row.get(col)) for col in columns))
    _write_text(path_stem + ".csv", "\n".join(lines) + "\n")
    _write_text(path_stem + ".json", json.dumps(rows, sort_keys=True, indent=1,
                                                default=_json_default) + "\n")


def _csv_cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _json_default(value):
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, (np.floating, np.integer)):
        return value.item()
    raise TypeError(f"not JSON serializable: {type(value)}")


def _write_text(path: str, text: str) -> None:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(text)
