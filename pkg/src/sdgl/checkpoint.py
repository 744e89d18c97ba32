"""Checkpoint persistence.

Little-endian binary layout:

    magic bytes  b"SDGL"
    u32          format version (currently 1)
    u64 + bytes  length-prefixed UTF-8 JSON header: config, step counter,
                 dropout RNG state, tensor count
    repeated     per-tensor record: u32 name length, name bytes, u32 rank,
                 rank x u64 dims, row-major f64 payload

Save followed by load reproduces forward outputs bit-identically.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor
from .data import Scaler
from .model import ModelConfig, SDGLModel

MAGIC = b"SDGL"
VERSION = 1


class CheckpointError(ValueError):
    """File is not a valid checkpoint."""


@dataclass
class Checkpoint:
    model: SDGLModel
    scaler: Scaler
    step: int


def save(path, model: SDGLModel, scaler: Scaler) -> None:
    tensors = dict(model.state_tensors())
    tensors["scaler.mean"] = Tensor(scaler.mean)
    tensors["scaler.std"] = Tensor(scaler.std)
    header = {
        "config": model.config.to_dict(),
        "step": model.step_count,
        "rng": _encode_rng_state(model.dropout_rng.get_state()),
        "rng_seed": model.dropout_rng.seed,
        "tensor_count": len(tensors),
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for name, t in sorted(tensors.items()):
            nb = name.encode("utf-8")
            fh.write(struct.pack("<I", len(nb)))
            fh.write(nb)
            dims = t.data.shape
            fh.write(struct.pack("<I", len(dims)))
            for d in dims:
                fh.write(struct.pack("<Q", d))
            fh.write(np.ascontiguousarray(t.data, dtype="<f8").tobytes())


def load(path) -> Checkpoint:
    with open(path, "rb") as fh:
        if fh.read(4) != MAGIC:
            raise CheckpointError(f"{path}: bad magic, not an SDGL checkpoint")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != VERSION:
            raise CheckpointError(f"{path}: unsupported format version {version}")
        (hlen,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(hlen).decode("utf-8"))
        tensors: dict[str, np.ndarray] = {}
        for _ in range(header["tensor_count"]):
            (nlen,) = struct.unpack("<I", fh.read(4))
            name = fh.read(nlen).decode("utf-8")
            (rank,) = struct.unpack("<I", fh.read(4))
            dims = tuple(struct.unpack("<Q", fh.read(8))[0] for _ in range(rank))
            count = int(np.prod(dims)) if dims else 1
            data = np.frombuffer(fh.read(count * 8), dtype="<f8").reshape(dims)
            tensors[name] = data.astype(np.float64)

    config = ModelConfig.from_dict(header["config"])
    model = SDGLModel(config)
    model.step_count = int(header["step"])
    model.dropout_rng.set_state(_decode_rng_state(header["rng"]))
    for name, t in model.state_tensors().items():
        if name not in tensors:
            raise CheckpointError(f"{path}: missing tensor record {name!r}")
        if tensors[name].shape != t.data.shape:
            raise CheckpointError(
                f"{path}: tensor {name!r} has shape {tensors[name].shape}, "
                f"expected {t.data.shape}"
            )
        t.data = tensors[name].copy()
    scaler = Scaler(tensors["scaler.mean"], tensors["scaler.std"])
    return Checkpoint(model=model, scaler=scaler, step=model.step_count)


def _encode_rng_state(state: dict) -> dict:
    """Philox state contains numpy integer arrays; make it JSON-safe."""

    def enc(v):
        if isinstance(v, dict):
            return {k: enc(x) for k, x in v.items()}
        if isinstance(v, np.ndarray):
            return {"__ndarray__": v.tolist(), "dtype": str(v.dtype)}
        if isinstance(v, (np.integer,)):
            return int(v)
        return v

    return enc(state)


def _decode_rng_state(state: dict):
    def dec(v):
        if isinstance(v, dict):
            if "__ndarray__" in v:
                return np.array(v["__ndarray__"], dtype=v["dtype"])
            return {k: dec(x) for k, x in v.items()}
        return v

    return dec(state)
