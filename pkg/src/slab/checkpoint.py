"""Checkpoint container: config, lineage, named float32 tensors, checksum.

Layout: magic ``SLAB`` | u32 version | u32 header length | header JSON |
raw little-endian row-major float32 tensor data | trailing SHA-256 of all
preceding bytes. The header carries the tensor directory (name, shape,
offset), the encoder config, lineage metadata, the vocabulary fingerprint
and, for resumable pre-training checkpoints, the Adam step counter.
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .encoder import EncoderConfig, tensor_shapes
from .util import atomic_write_bytes

MAGIC = b"SLAB"
FORMAT_VERSION = 1

STRATEGIES = ("GENERIC", "FP", "SC")


class CheckpointError(ValueError):
    """Base class for checkpoint load failures."""


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


class CheckpointIntegrityError(CheckpointError):
    pass


class CheckpointFormatError(CheckpointError):
    """Tensor directory disagrees with the config-implied shapes."""


@dataclass
class Lineage:
    strategy: str            # GENERIC | FP | SC
    parent_id: str | None
    steps: int               # cumulative pre-training steps completed

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"Lineage: unknown strategy {self.strategy!r}")
        if self.strategy == "FP" and not self.parent_id:
            raise ValueError("Lineage: FP checkpoints require a parent id")
        if self.strategy != "FP" and self.parent_id:
            raise ValueError(f"Lineage: {self.strategy} checkpoints cannot have a parent")
        if self.steps < 0:
            raise ValueError("Lineage: steps must be non-negative")


@dataclass
class Checkpoint:
    config: EncoderConfig
    weights: dict[str, T.Tensor]
    vocab_fingerprint: str
    lineage: Lineage
    creation_step: int = 0
    opt_m: dict[str, np.ndarray] | None = None
    opt_v: dict[str, np.ndarray] | None = None
    opt_t: int | None = None
    checkpoint_id: str = ""

    def validate_shapes(self) -> None:
        expected = tensor_shapes(self.config)
        if set(self.weights) != set(expected):
            missing = sorted(set(expected) - set(self.weights))
            extra = sorted(set(self.weights) - set(expected))
            raise CheckpointFormatError(f"weight names disagree with config "
                                        f"(missing {missing[:3]}, extra {extra[:3]})")
        for name, shape in expected.items():
            if tuple(self.weights[name].shape) != shape:
                raise CheckpointFormatError(
                    f"tensor '{name}' has shape {tuple(self.weights[name].shape)}, "
                    f"config implies {shape}")

    def clone_weights(self) -> dict[str, T.Tensor]:
        return {k: T.Tensor(v.data.copy(), requires_grad=True, dtype=np.float32)
                for k, v in self.weights.items()}


def save_checkpoint(checkpoint: Checkpoint, path) -> str:
    """Atomically write one checkpoint; returns its content-derived id."""
    checkpoint.validate_shapes()
    names = sorted(checkpoint.weights)
    blobs: list[bytes] = []
    directory = []
    offset = 0
    entries = [(n, checkpoint.weights[n].data) for n in names]
    if checkpoint.opt_m is not None and checkpoint.opt_v is not None:
        entries += [(f"opt.m.{n}", checkpoint.opt_m[n]) for n in sorted(checkpoint.opt_m)]
        entries += [(f"opt.v.{n}", checkpoint.opt_v[n]) for n in sorted(checkpoint.opt_v)]
    for name, arr in entries:
        raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        directory.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blobs.append(raw)
        offset += len(raw)
    header = {
        "kind": "encoder-checkpoint",
        "config": asdict(checkpoint.config),
        "lineage": asdict(checkpoint.lineage),
        "vocab_fingerprint": checkpoint.vocab_fingerprint,
        "creation_step": checkpoint.creation_step,
        "opt_t": checkpoint.opt_t,
        "tensors": directory,
        "data_length": offset,
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    body = (MAGIC + struct.pack("<II", FORMAT_VERSION, len(header_bytes))
            + header_bytes + b"".join(blobs))
    digest = hashlib.sha256(body).digest()
    atomic_write_bytes(path, body + digest)
    checkpoint.checkpoint_id = digest.hex()[:16]
    return checkpoint.checkpoint_id


def load_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if len(raw) < 12 or raw[:4] != MAGIC:
        raise CheckpointFormatError(f"{path}: not a SLAB checkpoint")
    version, header_len = struct.unpack("<II", raw[4:12])
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    if len(raw) < 12 + header_len + 32:
        raise CheckpointTruncatedError(f"{path}: truncated file (header incomplete)")
    header = json.loads(raw[12:12 + header_len].decode("utf-8"))
    expected_len = 12 + header_len + header["data_length"] + 32
    if len(raw) != expected_len:
        raise CheckpointTruncatedError(f"{path}: truncated file "
                                       f"({len(raw)} bytes, expected {expected_len})")
    body, digest = raw[:-32], raw[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointIntegrityError(f"{path}: checksum mismatch")

    config = EncoderConfig(**header["config"])
    lineage = Lineage(**header["lineage"])
    data = raw[12 + header_len:len(raw) - 32]
    weights: dict[str, T.Tensor] = {}
    opt_m: dict[str, np.ndarray] = {}
    opt_v: dict[str, np.ndarray] = {}
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        start = entry["offset"]
        arr = np.frombuffer(data, dtype="<f4", count=count, offset=start)
        arr = arr.reshape(shape).astype(np.float32)
        name = entry["name"]
        if name.startswith("opt.m."):
            opt_m[name[6:]] = arr.copy()
        elif name.startswith("opt.v."):
            opt_v[name[6:]] = arr.copy()
        else:
            weights[name] = T.Tensor(arr.copy(), requires_grad=True, dtype=np.float32)
    ckpt = Checkpoint(
        config=config,
        weights=weights,
        vocab_fingerprint=header["vocab_fingerprint"],
        lineage=lineage,
        creation_step=header["creation_step"],
        opt_m=opt_m or None,
        opt_v=opt_v or None,
        opt_t=header.get("opt_t"),
        checkpoint_id=digest.hex()[:16],
    )
    ckpt.validate_shapes()
    if opt_m or opt_v:
        for name, arr in list(opt_m.items()) + list(opt_v.items()):
            if name not in weights or tuple(arr.shape) != tuple(weights[name].shape):
                raise CheckpointFormatError(f"optimizer tensor '{name}' disagrees with weights")
    return ckpt
