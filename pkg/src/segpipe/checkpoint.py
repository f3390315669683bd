"""Model state dictionaries and the SGC1 checkpoint container.

Layout: ``SGC1`` magic, 32-byte config hash, u32 record count, then per
record a u16 name length, the UTF-8 name and an embedded SGT1 tensor.
Scalar metadata is stored as one-element float64 records under ``meta/``.
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .blocks import Module
from .tensor import atomic_write, decode_sgt, encode_sgt

SGC_MAGIC = b"SGC1"


def config_hash(arch_config: dict) -> bytes:
    return hashlib.sha256(json.dumps(arch_config, sort_keys=True).encode()).digest()


def state_dict(model: Module) -> dict[str, np.ndarray]:
    out = {}
    for name, p in model.named_parameters():
        out[name] = p.value.copy()
    for name, rs in model.named_running_stats():
        if rs.recorded:
            out[f"{name}.mean"] = rs.mean.copy()
            out[f"{name}.var"] = rs.var.copy()
    return out


def load_state_dict(model: Module, state: dict[str, np.ndarray], strict: bool = True) -> None:
    params = dict(model.named_parameters())
    for name, p in params.items():
        if name not in state:
            if strict:
                raise KeyError(f"checkpoint has no tensor for parameter {name}")
            continue
        arr = np.asarray(state[name])
        if arr.shape != p.value.shape:
            raise ValueError(f"shape mismatch for {name}: {arr.shape} vs {p.value.shape}")
        p.value = arr.astype(p.value.dtype).copy()
        p.grad = np.zeros_like(p.value)
    dtype = next(iter(params.values())).value.dtype if params else np.float32
    for name, rs in model.named_running_stats():
        if f"{name}.mean" in state:
            rs.mean = np.asarray(state[f"{name}.mean"]).astype(dtype).copy()
            rs.var = np.asarray(state[f"{name}.var"]).astype(dtype).copy()
        else:
            rs.mean = rs.var = None
    if strict:
        known = set(params) | {f"{n}.{s}" for n, _ in model.named_running_stats() for s in ("mean", "var")}
        extra = [k for k in state if k not in known and not k.startswith(("opt/", "meta/"))]
        if extra:
            raise KeyError(f"checkpoint tensors not in model: {extra[:5]}")


@dataclass
class Checkpoint:
    tensors: dict[str, np.ndarray]
    config_hash: bytes = b"\0" * 32
    metadata: dict[str, float] = field(default_factory=dict)

    @classmethod
    def from_model(cls, model: Module, chash: bytes, optimizer=None, **metadata) -> "Checkpoint":
        tensors = state_dict(model)
        if optimizer is not None:
            tensors.update({k: v.copy() for k, v in optimizer.state_dict().items()})
        return cls(tensors, chash, {k: float(v) for k, v in metadata.items()})

    def model_state(self) -> dict[str, np.ndarray]:
        return {k: v for k, v in self.tensors.items() if not k.startswith(("opt/", "meta/"))}

    def optimizer_state(self) -> dict[str, np.ndarray]:
        return {k: v for k, v in self.tensors.items() if k.startswith("opt/")}

    def apply_to(self, model: Module, expected_hash: bytes | None = None) -> Module:
        if expected_hash is not None and expected_hash != self.config_hash:
            raise ValueError("checkpoint was written for a different architecture configuration")
        load_state_dict(model, self.model_state())
        return model

    def to_bytes(self) -> bytes:
        if len(self.config_hash) != 32:
            raise ValueError("config hash must be 32 bytes")
        records = list(self.tensors.items())
        records += [(f"meta/{k}", np.array([v], dtype=np.float64)) for k, v in self.metadata.items()]
        parts = [SGC_MAGIC, self.config_hash, struct.pack("<I", len(records))]
        for name, arr in records:
            raw = name.encode()
            if len(raw) > 0xFFFF:
                raise ValueError(f"record name too long: {name[:40]}...")
            parts.append(struct.pack("<H", len(raw)) + raw)
            parts.append(encode_sgt(np.asarray(arr)))
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, buf: bytes) -> "Checkpoint":
        if buf[:4] != SGC_MAGIC:
            raise ValueError("bad SGC1 magic")
        chash = bytes(buf[4:36])
        (count,) = struct.unpack_from("<I", buf, 36)
        pos = 40
        tensors, meta = {}, {}
        for _ in range(count):
            (n,) = struct.unpack_from("<H", buf, pos)
            name = bytes(buf[pos + 2:pos + 2 + n]).decode()
            t, pos = decode_sgt(buf, pos + 2 + n)
            if name.startswith("meta/"):
                meta[name[5:]] = float(t.data.ravel()[0])
            else:
                tensors[name] = t.data
        if pos != len(buf):
            raise ValueError("trailing bytes after SGC1 records")
        return cls(tensors, chash, meta)

    def save(self, path) -> None:
        atomic_write(path, self.to_bytes())

    @classmethod
    def load(cls, path) -> "Checkpoint":
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())

