"""Dense tensors, seeded random streams, weight init and the SGT1 file format.

A :class:`Tensor` is a validated wrapper around a contiguous numpy array of
float32 or float64 with at most four axes (batch, channel, height, width).
The autodiff layer works on the underlying arrays directly; this module is
the checked public surface used for I/O, initialisation and plain arithmetic.
"""
from __future__ import annotations

import os
import struct
import zlib
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

DTYPES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
DTYPE_CODES = {v: k for k, v in DTYPES.items()}
SGT_MAGIC = b"SGT1"


class ShapeError(ValueError):
    pass


def _check_shape(shape: Sequence[int]) -> tuple[int, ...]:
    shape = tuple(int(s) for s in shape)
    if not 1 <= len(shape) <= 4:
        raise ShapeError(f"tensor order must be 1..4, got shape {shape}")
    if any(s < 1 for s in shape):
        raise ShapeError(f"all extents must be >= 1, got shape {shape}")
    return shape


class Tensor:
    """Row-major float tensor of order <= 4."""

    __slots__ = ("data",)

    def __init__(self, data, dtype=None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        if arr.dtype not in DTYPES:
            arr = arr.astype(np.float32 if dtype is None else dtype)
        _check_shape(arr.shape)
        self.data = np.ascontiguousarray(arr)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def numel(self) -> int:
        return int(self.data.size)

    def numpy(self) -> np.ndarray:
        return self.data

    def __array__(self, dtype=None, copy=None):
        return self.data if dtype is None else self.data.astype(dtype)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name})"

    def __eq__(self, other):
        if not isinstance(other, Tensor):
            return NotImplemented
        return self.shape == other.shape and self.dtype == other.dtype and np.array_equal(self.data, other.data)

    def __add__(self, other):
        return elementwise("add", self, other)

    def __sub__(self, other):
        return elementwise("sub", self, other)

    def __mul__(self, other):
        return elementwise("mul", self, other)

    def __truediv__(self, other):
        return elementwise("div", self, other)

    def __neg__(self):
        return elementwise("neg", self)


def full(shape, value, dtype=np.float32) -> Tensor:
    return Tensor(np.full(_check_shape(shape), value, dtype=dtype))


def zeros(shape, dtype=np.float32) -> Tensor:
    return full(shape, 0.0, dtype)


def ones(shape, dtype=np.float32) -> Tensor:
    return full(shape, 1.0, dtype)


def flat_index(index: Sequence[int], shape: Sequence[int]) -> int:
    """Row-major linearisation, e.g. ((b*C + c)*H + h)*W + w."""
    flat = 0
    for i, n in zip(index, shape):
        if not 0 <= i < n:
            raise IndexError(f"index {tuple(index)} out of range for shape {tuple(shape)}")
        flat = flat * n + i
    return flat


def multi_index(flat: int, shape: Sequence[int]) -> tuple[int, ...]:
    out = []
    for n in reversed(shape):
        flat, r = divmod(flat, n)
        out.append(r)
    if flat:
        raise IndexError("flat index out of range")
    return tuple(reversed(out))


def _operand(a: Tensor, b) -> np.ndarray | float:
    if b is None:
        return None
    if isinstance(b, (int, float, np.floating)):
        return float(b)
    b = b.data if isinstance(b, Tensor) else np.asarray(b)
    if b.shape == a.shape:
        return b
    # per-channel broadcast only: [1, C, 1, 1] against [B, C, H, W]
    if a.data.ndim == 4 and b.shape == (1, a.shape[1], 1, 1):
        return b
    raise ShapeError(f"cannot combine shapes {a.shape} and {b.shape}")


_BINARY = {"add": np.add, "sub": np.subtract, "mul": np.multiply, "div": np.divide, "max": np.maximum}
_UNARY = {"exp": np.exp, "log": np.log, "neg": np.negative}


def elementwise(op: str, a: Tensor, b=None, strict: bool = True) -> Tensor:
    """Pointwise ``op`` on ``a`` (and ``b``: same shape, scalar, or [1,C,1,1]).

    In strict mode, division by an exact zero raises ZeroDivisionError;
    otherwise it yields +-inf as IEEE arithmetic does.
    """
    if not isinstance(a, Tensor):
        a = Tensor(a)
    if op in _UNARY:
        if b is not None:
            raise TypeError(f"{op} is unary")
        with np.errstate(divide="ignore", invalid="ignore"):
            return Tensor(_UNARY[op](a.data).astype(a.dtype, copy=False))
    if op not in _BINARY:
        raise ValueError(f"unknown elementwise op {op!r}")
    if b is None:
        raise TypeError(f"{op} needs two operands")
    rhs = _operand(a, b)
    if op == "div" and strict and np.any(np.asarray(rhs) == 0):
        raise ZeroDivisionError("division by exact zero in strict mode")
    with np.errstate(divide="ignore", invalid="ignore"):
        out = _BINARY[op](a.data, rhs)
    return Tensor(out.astype(a.dtype, copy=False))


def reduce(op: str, a: Tensor, axes: Iterable[int] | None = None, keepdims: bool = False) -> Tensor:
    """Sum, mean or max over ``axes`` (all axes when None; empty tuple copies)."""
    if not isinstance(a, Tensor):
        a = Tensor(a)
    fn = {"sum": np.sum, "mean": np.mean, "max": np.max}.get(op)
    if fn is None:
        raise ValueError(f"unknown reduction {op!r}")
    if axes is None:
        axes = tuple(range(a.data.ndim))
    axes = tuple(int(ax) for ax in axes)
    if len(set(axes)) != len(axes):
        raise ValueError(f"repeated axes {axes}")
    for ax in axes:
        if not -a.data.ndim <= ax < a.data.ndim:
            raise IndexError(f"axis {ax} out of range for order {a.data.ndim}")
    if not axes:
        return Tensor(a.data.copy())
    out = fn(a.data, axis=axes, keepdims=keepdims)
    return Tensor(np.asarray(out, dtype=a.dtype).reshape(np.shape(out) or (1,)))


# ---------------------------------------------------------------------------
# random streams


class Rng:
    """Seeded random source with named, independent substreams.

    Backed by numpy's PCG64 bit generator. ``stream(tag, index)`` derives a
    child from ``SeedSequence([seed, crc32(tag), index])`` so that streams
    depend only on (seed, tag, index), never on how much of another stream
    was consumed.
    """

    def __init__(self, seed: int = 0, _key: tuple[int, ...] = ()):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self._key = _key
        self.gen = np.random.Generator(np.random.PCG64(np.random.SeedSequence([self.seed, *_key])))

    def stream(self, tag: str, index: int = 0) -> "Rng":
        return Rng(self.seed, self._key + (zlib.crc32(tag.encode()), int(index)))

    def __getattr__(self, name):
        # normal, uniform, integers, permutation, random ... from the generator
        if name == "gen":
            raise AttributeError(name)
        return getattr(self.gen, name)


def fan_in_out(shape: Sequence[int]) -> tuple[int, int]:
    shape = tuple(shape)
    if len(shape) == 4:
        rf = shape[2] * shape[3]
        return shape[1] * rf, shape[0] * rf
    if len(shape) == 2:
        return shape[1], shape[0]
    n = int(np.prod(shape))
    return n, n


def init_weights(scheme: str, shape, rng: Rng, dtype=np.float32) -> Tensor:
    """Sample an initial weight tensor.

    he_normal: N(0, 2/fan_in) with fan_in = in_channels*kh*kw.
    glorot_uniform: U(-b, b), b = sqrt(6/(fan_in+fan_out)).
    """
    shape = _check_shape(shape)
    if scheme == "zeros":
        return zeros(shape, dtype)
    fan_in, fan_out = fan_in_out(shape)
    if scheme == "he_normal":
        data = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)
    elif scheme == "glorot_uniform":
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        data = rng.uniform(-bound, bound, size=shape)
    else:
        raise ValueError(f"unknown init scheme {scheme!r}")
    return Tensor(data.astype(dtype))


# ---------------------------------------------------------------------------
# SGT1 binary format


def encode_sgt(t: Tensor | np.ndarray) -> bytes:
    arr = t.data if isinstance(t, Tensor) else np.asarray(t)
    if arr.dtype not in DTYPES:
        arr = arr.astype(np.float32)
    _check_shape(arr.shape)
    head = SGT_MAGIC + struct.pack("<BB", DTYPES[arr.dtype], arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + np.ascontiguousarray(arr).astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()


def decode_sgt(buf, offset: int = 0) -> tuple[Tensor, int]:
    """Parse one SGT1 tensor starting at ``offset``; return it and the end offset."""
    mv = memoryview(buf)
    if bytes(mv[offset:offset + 4]) != SGT_MAGIC:
        raise ValueError("bad SGT1 magic")
    code, ndim = struct.unpack_from("<BB", mv, offset + 4)
    if code not in DTYPE_CODES or not 1 <= ndim <= 4:
        raise ValueError(f"bad SGT1 header (dtype code {code}, ndim {ndim})")
    pos = offset + 6
    shape = struct.unpack_from(f"<{ndim}I", mv, pos)
    pos += 4 * ndim
    dtype = DTYPE_CODES[code].newbyteorder("<")
    n = int(np.prod(shape))
    end = pos + n * dtype.itemsize
    if end > len(mv):
        raise ValueError("truncated SGT1 payload")
    arr = np.frombuffer(mv[pos:end], dtype=dtype).astype(DTYPE_CODES[code]).reshape(shape)
    return Tensor(arr), end


def atomic_write(path, payload: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".{path.name}.tmp{os.getpid()}")
    with open(tmp, "wb") as fh:
        fh.write(payload)
    os.replace(tmp, path)


def save_sgt(path, t: Tensor | np.ndarray) -> None:
    atomic_write(path, encode_sgt(t))


def load_sgt(path) -> Tensor:
    with open(path, "rb") as fh:
        buf = fh.read()
    t, end = decode_sgt(buf)
    if end != len(buf):
        raise ValueError(f"{path}: trailing bytes after SGT1 payload")
    return t


__all__ = [
    "Tensor", "Rng", "ShapeError", "zeros", "ones", "full", "elementwise", "reduce",
    "init_weights", "flat_index", "multi_index", "encode_sgt", "decode_sgt",
    "save_sgt", "load_sgt", "atomic_write",
]
