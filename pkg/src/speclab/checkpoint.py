"""Self-describing binary checkpoint container.

Layout (see docs/checkpoint_format.md):

    bytes 0..7    magic  b"SPECLAB1"
    bytes 8..11   header length N, uint32 little-endian
    bytes 12..12+N  header, UTF-8 JSON
    remainder     weight payload, named blocks concatenated in header order

The header carries the format version, the model config, and one entry per
block with name, shape, dtype and byte offset into the payload. All numeric
payload is little-endian float64 in C order regardless of platform. A JSON
manifest mirroring the config is written next to the checkpoint for human
inspection.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .model import ModelConfig, Weights

MAGIC = b"SPECLAB1"
FORMAT_VERSION = 1
_DTYPE = "<f8"


def save_checkpoint(path, weights: Weights) -> None:
    """Write weights plus config header; also emits ``<path>.manifest.json``."""
    path = Path(path)
    blocks = []
    offset = 0
    for name, arr in weights.items():
        nbytes = arr.size * 8
        blocks.append({"name": name, "shape": list(arr.shape),
                       "dtype": _DTYPE, "offset": offset, "nbytes": nbytes})
        offset += nbytes
    header = {
        "format_version": FORMAT_VERSION,
        "endianness": "little",
        "config": weights.cfg.to_dict(),
        "blocks": blocks,
    }
    header_bytes = json.dumps(header).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(np.uint32(len(header_bytes)).tobytes())
        f.write(header_bytes)
        for _, arr in weights.items():
            f.write(np.ascontiguousarray(arr, dtype=_DTYPE).tobytes())
    write_manifest(manifest_path(path), weights.cfg)


def manifest_path(path) -> Path:
    return Path(str(path) + ".manifest.json")


def write_manifest(path, cfg: ModelConfig) -> None:
    with open(path, "w") as f:
        json.dump(cfg.to_dict(), f, indent=2, sort_keys=True)
        f.write("\n")


def load_checkpoint(path) -> Weights:
    """Read a checkpoint; validates magic, version, shapes and finiteness."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    raw = path.read_bytes()
    if raw[:8] != MAGIC:
        raise ValueError(f"{path} is not a speclab checkpoint (bad magic)")
    header_len = int(np.frombuffer(raw[8:12], dtype="<u4")[0])
    header = json.loads(raw[12:12 + header_len].decode("utf-8"))
    if header.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint version {header.get('format_version')}")
    cfg = ModelConfig.from_dict(header["config"])
    payload = raw[12 + header_len:]
    blocks: dict[str, np.ndarray] = {}
    for spec in header["blocks"]:
        start = spec["offset"]
        arr = np.frombuffer(payload[start:start + spec["nbytes"]],
                            dtype=spec["dtype"])
        blocks[spec["name"]] = arr.astype(np.float64).reshape(spec["shape"])
    weights = Weights(cfg, blocks)
    weights.validate_finite()
    return weights
