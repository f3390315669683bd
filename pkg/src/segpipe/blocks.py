"""Parameterised layers and the two residual block variants."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, RunningStats
from .tensor import Rng, init_weights


class Module:
    """Minimal container: parameters and sub-modules are found by walking attributes."""

    def children(self) -> Iterator[tuple[str, "Module"]]:
        for key, val in vars(self).items():
            if isinstance(val, Module):
                yield key, val
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield f"{key}.{i}", item

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for key, val in vars(self).items():
            if isinstance(val, Parameter):
                yield prefix + key, val
        for key, child in self.children():
            yield from child.named_parameters(f"{prefix}{key}.")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_running_stats(self, prefix: str = "") -> Iterator[tuple[str, RunningStats]]:
        for key, val in vars(self).items():
            if isinstance(val, RunningStats):
                yield prefix + key, val
        for key, child in self.children():
            yield from child.named_running_stats(f"{prefix}{key}.")

    def num_parameters(self) -> int:
        return sum(p.value.size for p in self.parameters())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def astype(self, dtype) -> "Module":
        for p in self.parameters():
            p.value = p.value.astype(dtype)
            p.grad = np.zeros_like(p.value)
        for _, rs in self.named_running_stats():
            if rs.recorded:
                rs.mean = rs.mean.astype(dtype)
                rs.var = rs.var.astype(dtype)
        return self


class Conv2d(Module):
    def __init__(self, cin, cout, k, rng: Rng, stride=1, bias=True, init="he_normal", dtype=np.float32):
        self.cin, self.cout, self.k, self.stride = cin, cout, k, stride
        self.weight = Parameter(init_weights(init, (cout, cin, k, k), rng, dtype))
        self.bias = Parameter(np.zeros(cout, dtype=dtype), decay_exempt=True) if bias else None

    def __call__(self, x, train=True, rng=None):
        return ad.conv2d(x, self.weight, self.bias, self.stride, "same")


class BatchNorm2d(Module):
    def __init__(self, channels, dtype=np.float32, momentum=0.1, eps=1e-5):
        self.gamma = Parameter(np.ones(channels, dtype=dtype), decay_exempt=True)
        self.beta = Parameter(np.zeros(channels, dtype=dtype), decay_exempt=True)
        self.running = RunningStats()
        self.momentum, self.eps = momentum, eps

    def __call__(self, x, train=True, rng=None):
        return ad.batchnorm(x, self.gamma, self.beta, train, self.running, self.momentum, self.eps)


class PreActConv(Module):
    """BN -> ReLU -> conv, the unit the residual functions are chained from."""

    def __init__(self, cin, cout, k, rng, stride=1, dtype=np.float32):
        self.bn = BatchNorm2d(cin, dtype)
        self.conv = Conv2d(cin, cout, k, rng, stride=stride, dtype=dtype)

    def __call__(self, x, train=True, rng=None):
        return self.conv(ad.relu(self.bn(x, train)))


@dataclass(frozen=True)
class ResidualBlockCfg:
    variant: str  # "simple" | "bottleneck"
    in_width: int
    out_width: int
    resample: str = "none"  # "none" | "down" | "up"
    dropout: float = 0.0

    def __post_init__(self):
        if self.variant not in ("simple", "bottleneck"):
            raise ValueError(f"unknown block variant {self.variant!r}")
        if self.resample not in ("none", "down", "up"):
            raise ValueError(f"unknown resample mode {self.resample!r}")
        if self.in_width < 1 or self.out_width < 1:
            raise ValueError("block widths must be >= 1")
        if self.variant == "bottleneck" and self.out_width % 4:
            raise ValueError(f"bottleneck output width {self.out_width} not divisible by 4")
        if not 0 <= self.dropout < 1:
            raise ValueError("dropout rate must be in [0, 1)")

    @property
    def inner_width(self) -> int:
        return self.out_width // 4 if self.variant == "bottleneck" else self.out_width


class ResidualBlock(Module):
    """x -> shortcut(x) + H(x).

    simple: H = two BN-ReLU-conv3x3 stages; downsampling max-pools the input
    first. bottleneck: H = BN-ReLU-conv1x1 (reduce to out/4), BN-ReLU-conv3x3
    (stride 2 when downsampling), BN-ReLU-conv1x1 (restore). Upsampling
    repeats the input before both paths. The shortcut is the identity when
    shapes match, else a 1x1 projection (stride 2 for a strided bottleneck).
    """

    def __init__(self, cfg: ResidualBlockCfg, rng: Rng, dtype=np.float32):
        self.cfg = cfg
        cin, cout, mid = cfg.in_width, cfg.out_width, cfg.inner_width
        if cfg.variant == "simple":
            self.stages = [PreActConv(cin, cout, 3, rng, dtype=dtype),
                           PreActConv(cout, cout, 3, rng, dtype=dtype)]
            stride = 1
        else:
            stride = 2 if cfg.resample == "down" else 1
            self.stages = [PreActConv(cin, mid, 1, rng, dtype=dtype),
                           PreActConv(mid, mid, 3, rng, stride=stride, dtype=dtype),
                           PreActConv(mid, cout, 1, rng, dtype=dtype)]
        self.shortcut = None
        if cin != cout or stride != 1:
            self.shortcut = Conv2d(cin, cout, 1, rng, stride=stride, dtype=dtype)
        self._stride = stride

    @property
    def final_conv(self) -> Conv2d:
        return self.stages[-1].conv

    def residual_convs(self) -> list[Conv2d]:
        return [st.conv for st in self.stages]

    def __call__(self, x, train=True, rng=None):
        cfg = self.cfg
        if cfg.resample == "up":
            x = ad.upsample2(x)
        elif cfg.resample == "down" and cfg.variant == "simple":
            x = ad.maxpool2(x)
        h = self.stages[0](x, train)
        for st in self.stages[1:]:
            if cfg.dropout:
                h = ad.dropout(h, cfg.dropout, train, rng)
            h = st(h, train)
        s = self.shortcut(x) if self.shortcut is not None else x
        return ad.add(s, h)


def residual_block(x, block: ResidualBlock, train: bool = True, rng=None):
    """Apply one residual block (functional spelling of ``block(x, train)``)."""
    if ad.as_node(x).shape[1] != block.cfg.in_width:
        raise ad.ShapeError(f"block expects width {block.cfg.in_width}, got {ad.as_node(x).shape[1]}")
    return block(x, train, rng)
