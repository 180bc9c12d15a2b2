"""Versioned checkpoint container: JSON header + raw float64 buffers.

Round trips are bit-exact on tensor values and byte-identical on the
whole file given identical inputs, which the reproducibility contract
relies on (no timestamps, no compression).
"""
from __future__ import annotations

import json
import struct
from dataclasses import asdict
from pathlib import Path

import numpy as np
import torch

from .model import ModelConfig, TransformerLM

MAGIC = b"PLCKPT1\n"
FORMAT_VERSION = 1


def save_checkpoint(path, model: TransformerLM, extra: dict | None = None) -> None:
    """Write config + named parameters (+ JSON-able ``extra`` metadata)."""
    named = sorted(model.named_parameters(), key=lambda kv: kv[0])
    header = {
        "format": FORMAT_VERSION,
        "config": asdict(model.config),
        "extra": extra or {},
        "tensors": [{"name": n, "shape": list(p.shape)} for n, p in named],
    }
    blob = json.dumps(header, sort_keys=True).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for _, p in named:
            fh.write(np.ascontiguousarray(p.detach().numpy(), dtype="<f8").tobytes())


def load_checkpoint(path) -> tuple[TransformerLM, dict]:
    """Rebuild the model from a checkpoint; returns (model, extra)."""
    with open(path, "rb") as fh:
        magic = fh.read(len(MAGIC))
        if magic != MAGIC:
            raise ValueError(f"{path}: not a poslab checkpoint")
        (hlen,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(hlen).decode())
        if header.get("format") != FORMAT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint format {header.get('format')}")
        model = TransformerLM(ModelConfig(**header["config"]), seed=0)
        params = dict(model.named_parameters())
        expected = sorted(params)
        listed = [t["name"] for t in header["tensors"]]
        if listed != expected:
            raise ValueError(f"{path}: tensor names do not match the architecture")
        with torch.no_grad():
            for spec in header["tensors"]:
                shape = tuple(spec["shape"])
                count = int(np.prod(shape)) if shape else 1
                buf = fh.read(count * 8)
                if len(buf) != count * 8:
                    raise ValueError(f"{path}: truncated tensor data for {spec['name']}")
                arr = np.frombuffer(buf, dtype="<f8").reshape(shape)
                params[spec["name"]].copy_(torch.from_numpy(arr.copy()))
    return model, header["extra"]
