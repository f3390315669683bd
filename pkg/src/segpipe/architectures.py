"""The UNet-like pre-processor, the FC-ResNet, and the end-to-end pipeline.

Each network is a :class:`ModelGraph`: an ordered list of table rows
(:class:`LayerSpec`), one executable row module per spec, and skip wiring
from a source row's output into a destination row's input (channel concat
for the pre-processor, summation for the FC-ResNet).
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .blocks import Conv2d, Module, PreActConv, ResidualBlock, ResidualBlockCfg
from .tensor import Rng

ROW_KINDS = ("input", "conv3", "conv2", "conv1", "simple_block", "bottleneck_block",
             "maxpool", "upsample", "concat_merge", "sum_skip", "classifier")


@dataclass(frozen=True)
class LayerSpec:
    name: str
    kind: str
    output_width: int
    repetition: int = 1
    resample: str = "none"
    activation: str = "none"  # after each conv of a conv row: relu | none | sigmoid
    preact: bool = False      # conv rows only: BN -> ReLU before each conv

    def __post_init__(self):
        if self.kind not in ROW_KINDS:
            raise ValueError(f"unknown row kind {self.kind!r}")
        if self.repetition < 1 or self.output_width < 1:
            raise ValueError(f"row {self.name!r}: repetition and width must be >= 1")


@dataclass
class Skip:
    source: str
    dest: str
    mode: str  # "concat" | "sum"
    projection: Conv2d | None = None


def scaled(width: int, scale: float) -> int:
    w = int(round(width * scale))
    if w < 1:
        raise ValueError(f"scale {scale} turns width {width} into zero")
    return w


# ---------------------------------------------------------------------------
# row modules


class ConvRow(Module):
    def __init__(self, spec: LayerSpec, cin: int, k: int, rng: Rng, dtype):
        self.spec = spec
        self.units = []
        for _ in range(spec.repetition):
            unit = PreActConv(cin, spec.output_width, k, rng, dtype=dtype) if spec.preact \
                else Conv2d(cin, spec.output_width, k, rng, dtype=dtype)
            self.units.append(unit)
            cin = spec.output_width

    def convs(self):
        return [u.conv if isinstance(u, PreActConv) else u for u in self.units]

    def __call__(self, x, train=True, rng=None):
        for unit in self.units:
            x = unit(x, train)
            if self.spec.activation == "relu":
                x = ad.relu(x)
            elif self.spec.activation == "sigmoid":
                x = ad.sigmoid(x)
        return x


class BlockRow(Module):
    def __init__(self, spec: LayerSpec, cin: int, rng: Rng, dtype, dropout=0.0):
        self.spec = spec
        variant = "simple" if spec.kind == "simple_block" else "bottleneck"
        self.blocks = []
        for i in range(spec.repetition):
            cfg = ResidualBlockCfg(variant, cin, spec.output_width,
                                   spec.resample if i == 0 else "none", dropout)
            self.blocks.append(ResidualBlock(cfg, rng, dtype))
            cin = spec.output_width

    def __call__(self, x, train=True, rng=None):
        for blk in self.blocks:
            x = blk(x, train, rng)
        return x


class OpRow(Module):
    """Parameter-free rows: input, maxpool, upsample, concat merge."""

    def __init__(self, spec: LayerSpec):
        self.spec = spec

    def __call__(self, x, train=True, rng=None):
        if self.spec.kind == "maxpool":
            return ad.maxpool2(x)
        if self.spec.kind == "upsample":
            return ad.upsample2(x)
        return x


def _row_hw(spec: LayerSpec, h: int, w: int) -> tuple[int, int]:
    if spec.kind == "maxpool" or spec.resample == "down":
        return (h + 1) // 2, (w + 1) // 2
    if spec.kind == "upsample" or spec.resample == "up":
        return 2 * h, 2 * w
    return h, w


@dataclass
class SummaryRow:
    name: str
    kind: str
    resolution: tuple[int, int]
    width: int
    repetition: int
    params: int
    cumulative: int = 0


class ModelGraph(Module):
    def __init__(self, name: str, in_width: int, scale: float = 1.0):
        self.name = name
        self.in_width = in_width
        self.scale = scale
        self.specs: list[LayerSpec] = []
        self.rows: list[Module] = []
        self.skips: list[Skip] = []
        self._index: dict[str, int] = {}

    def add_row(self, spec: LayerSpec, module: Module) -> None:
        if spec.name in self._index:
            raise ValueError(f"duplicate row name {spec.name!r}")
        self._index[spec.name] = len(self.specs)
        self.specs.append(spec)
        self.rows.append(module)

    def row(self, name: str) -> Module:
        return self.rows[self._index[name]]

    def spec(self, name: str) -> LayerSpec:
        return self.specs[self._index[name]]

    def named_parameters(self, prefix: str = ""):
        # rows in table order, each followed by projections feeding into it
        for spec, mod in zip(self.specs, self.rows):
            for sk in self.skips:
                if sk.dest == spec.name and sk.projection is not None:
                    yield from sk.projection.named_parameters(f"{prefix}{_slug(spec.name)}.skip_from_{_slug(sk.source)}.")
            yield from mod.named_parameters(f"{prefix}{_slug(spec.name)}.")

    def named_running_stats(self, prefix: str = ""):
        for spec, mod in zip(self.specs, self.rows):
            yield from mod.named_running_stats(f"{prefix}{_slug(spec.name)}.")

    def children(self):
        for spec, mod in zip(self.specs, self.rows):
            yield _slug(spec.name), mod
        for sk in self.skips:
            if sk.projection is not None:
                yield f"skip_{_slug(sk.source)}_{_slug(sk.dest)}", sk.projection

    def __call__(self, x, train=True, rng=None):
        sources = {sk.source for sk in self.skips}
        into = {sk.dest: sk for sk in self.skips}
        saved = {}
        for spec, mod in zip(self.specs, self.rows):
            sk = into.get(spec.name)
            if sk is not None:
                s = saved[sk.source]
                if sk.projection is not None:
                    s = sk.projection(s)
                x = ad.concat_channels(x, s) if sk.mode == "concat" else ad.add(x, s)
            x = mod(x, train, rng)
            if spec.name in sources:
                saved[spec.name] = x
        return x

    def shape_table(self, h: int, w: int) -> list[SummaryRow]:
        """Per-row output resolution/width and parameter counts, without running the net."""
        res = {}
        width = self.in_width
        rows = []
        total = 0
        for spec, mod in zip(self.specs, self.rows):
            n = mod.num_parameters()
            for sk in self.skips:
                if sk.dest == spec.name:
                    if res[sk.source] != (h, w):
                        raise ValueError(f"skip {sk.source} -> {sk.dest} joins {res[sk.source]} and {(h, w)}")
                    if sk.projection is not None:
                        n += sk.projection.num_parameters()
            h, w = _row_hw(spec, h, w)
            res[spec.name] = (h, w)
            width = spec.output_width if spec.kind != "input" else self.in_width
            total += n
            rows.append(SummaryRow(spec.name, spec.kind, (h, w), width, spec.repetition, n, total))
        return rows

    def conv_counts(self) -> dict[str, int]:
        residual = projection = 0
        for mod in self.rows:
            if isinstance(mod, ConvRow):
                residual += len(mod.units)
            elif isinstance(mod, BlockRow):
                for blk in mod.blocks:
                    residual += len(blk.stages)
                    projection += blk.shortcut is not None
        projection += sum(sk.projection is not None for sk in self.skips)
        return {"residual_path": residual, "projection": projection, "total": residual + projection}

    def residual_blocks(self) -> list[ResidualBlock]:
        return [blk for mod in self.rows if isinstance(mod, BlockRow) for blk in mod.blocks]


def _slug(name: str) -> str:
    return name.lower().replace(" ", "")


# ---------------------------------------------------------------------------
# builders

FCN_TABLE = [
    # name, kind, width, repetition
    ("Down 1", "conv3", 16, 2), ("Pooling 1", "maxpool", 16, 1),
    ("Down 2", "conv3", 32, 2), ("Pooling 2", "maxpool", 32, 1),
    ("Down 3", "conv3", 64, 2), ("Pooling 3", "maxpool", 64, 1),
    ("Down 4", "conv3", 128, 2), ("Pooling 4", "maxpool", 128, 1),
    ("Across", "conv3", 256, 2),
    ("Up 1", "upsample", 256, 1), ("Merge 1", "concat_merge", None, 1),
    ("Up 2", "conv2", 128, 1), ("Up 3", "conv3", 128, 2),
    ("Up 4", "upsample", 128, 1), ("Merge 2", "concat_merge", None, 1),
    ("Up 5", "conv2", 64, 1), ("Up 6", "conv3", 64, 2),
    ("Up 7", "upsample", 64, 1), ("Merge 3", "concat_merge", None, 1),
    ("Up 8", "conv2", 32, 1), ("Up 9", "conv3", 32, 2),
    ("Up 10", "upsample", 32, 1), ("Merge 4", "concat_merge", None, 1),
    ("Up 11", "conv2", 16, 1), ("Up 12", "conv3", 16, 2),
    ("Output", "conv3", 1, 1),
]
FCN_MERGES = {"Merge 1": "Down 4", "Merge 2": "Down 3", "Merge 3": "Down 2", "Merge 4": "Down 1"}

RESNET_TABLE = [
    # name, kind, width, repetition, resample
    ("Down 1", "conv3", 32, 1, "none"),
    ("Down 2", "simple_block", 32, 1, "down"),
    ("Down 3", "bottleneck_block", 128, 3, "down"),
    ("Down 4", "bottleneck_block", 256, 8, "down"),
    ("Down 5", "bottleneck_block", 512, 10, "down"),
    ("Across", "bottleneck_block", 1024, 3, "none"),
    ("Up 1", "bottleneck_block", 512, 10, "up"),
    ("Up 2", "bottleneck_block", 256, 8, "up"),
    ("Up 3", "bottleneck_block", 128, 3, "up"),
    ("Up 4", "simple_block", 32, 1, "up"),
    ("Up 5", "conv3", 32, 1, "none"),
    ("Classifier", "classifier", 1, 1, "none"),
]
# contracting-stage output -> input of the expanding stage at the same resolution
RESNET_LONG_SKIPS = [("Down 4", "Up 2"), ("Down 3", "Up 3"), ("Down 2", "Up 4"), ("Down 1", "Up 5")]


def build_fcn_preprocessor(scale: float = 1.0, seed: int = 0, dtype=np.float32, rng: Rng | None = None) -> ModelGraph:
    """UNet-like pre-processor with 4 pool/repeat levels and a linear 1-channel output."""
    if not 0 < scale <= 1:
        raise ValueError(f"scale must be in (0, 1], got {scale}")
    rng = rng or Rng(seed).stream("init/fcn")
    g = ModelGraph("fcn", 1, scale)
    g.add_row(LayerSpec("Input", "input", 1), OpRow(LayerSpec("Input", "input", 1)))
    width = 1
    out_width = {}
    for name, kind, w, rep in FCN_TABLE:
        if kind == "concat_merge":
            w = width + out_width[FCN_MERGES[name]]
            spec = LayerSpec(name, kind, w, rep)
            g.add_row(spec, OpRow(spec))
            g.skips.append(Skip(FCN_MERGES[name], name, "concat"))
        elif kind in ("maxpool", "upsample"):
            spec = LayerSpec(name, kind, width, rep)
            g.add_row(spec, OpRow(spec))
        else:
            w = 1 if name == "Output" else scaled(w, scale)
            k = 2 if kind == "conv2" else 3
            act = "relu" if (kind == "conv3" and name != "Output") else "none"
            spec = LayerSpec(name, kind, w, rep, activation=act)
            g.add_row(spec, ConvRow(spec, width, k, rng, dtype))
        width = spec.output_width
        out_width[name] = width
    _name_parameters(g)
    return g


def build_fc_resnet(scale: float = 1.0, seed: int = 0, dtype=np.float32, long_skips: bool = True,
                    dropout: float = 0.0, rng: Rng | None = None) -> ModelGraph:
    """FC-ResNet: entry conv, simple + bottleneck stages down, across, up, final conv, sigmoid classifier."""
    if not 0 < scale <= 1:
        raise ValueError(f"scale must be in (0, 1], got {scale}")
    rng = rng or Rng(seed).stream("init/fc_resnet")
    g = ModelGraph("fc_resnet", 1, scale)
    width = 1
    out_width = {}
    for name, kind, w, rep, resample in RESNET_TABLE:
        w = 1 if kind == "classifier" else scaled(w, scale)
        if kind == "bottleneck_block" and w % 4:
            raise ValueError(f"scale {scale}: bottleneck width {w} of {name!r} not divisible by 4")
        for src, dst in RESNET_LONG_SKIPS if long_skips else ():
            if dst == name:
                proj = Conv2d(out_width[src], width, 1, rng, dtype=dtype) if out_width[src] != width else None
                g.skips.append(Skip(src, dst, "sum", proj))
        if kind in ("simple_block", "bottleneck_block"):
            spec = LayerSpec(name, kind, w, rep, resample)
            g.add_row(spec, BlockRow(spec, width, rng, dtype, dropout))
        elif kind == "classifier":
            spec = LayerSpec(name, kind, w, rep, activation="sigmoid", preact=True)
            g.add_row(spec, ConvRow(spec, width, 1, rng, dtype))
        else:
            # the entry conv sees the raw input; later convs are pre-activated
            spec = LayerSpec(name, kind, w, rep, preact=name != "Down 1")
            g.add_row(spec, ConvRow(spec, width, 3, rng, dtype))
        width = w
        out_width[name] = w
    _name_parameters(g)
    return g


class Pipeline(Module):
    """Pre-processor followed by FC-ResNet; outputs per-pixel foreground probability."""

    def __init__(self, fcn: ModelGraph, resnet: ModelGraph):
        self.fcn = fcn
        self.resnet = resnet
        self.scale = resnet.scale

    def preprocess(self, x, train=False, rng=None):
        return self.fcn(x, train, rng)

    def __call__(self, x, train=True, rng=None):
        return self.resnet(self.fcn(x, train, rng), train, rng)

    def shape_table(self, h: int, w: int) -> list[SummaryRow]:
        rows = []
        total = 0
        for prefix, graph in (("FCN", self.fcn), ("FC-ResNet", self.resnet)):
            for r in graph.shape_table(h, w):
                total += r.params
                rows.append(SummaryRow(f"{prefix} {r.name}", r.kind, r.resolution, r.width,
                                       r.repetition, r.params, total))
        return rows


def build_pipeline(scale: float = 1.0, seed: int = 0, dtype=np.float32, long_skips: bool = True,
                   dropout: float = 0.0) -> Pipeline:
    root = Rng(seed)
    fcn = build_fcn_preprocessor(scale, dtype=dtype, rng=root.stream("init/fcn"))
    resnet = build_fc_resnet(scale, dtype=dtype, long_skips=long_skips, dropout=dropout,
                             rng=root.stream("init/fc_resnet"))
    p = Pipeline(fcn, resnet)
    _name_parameters(p)
    return p


def build_model(arch: str, scale: float = 1.0, seed: int = 0, dtype=np.float32, **kw):
    if arch == "fcn":
        return build_fcn_preprocessor(scale, seed, dtype)
    if arch in ("resnet", "fc_resnet", "fc-resnet"):
        return build_fc_resnet(scale, seed, dtype, **kw)
    if arch == "pipeline":
        return build_pipeline(scale, seed, dtype, **kw)
    raise ValueError(f"unknown architecture {arch!r}")


def _name_parameters(model: Module) -> None:
    seen = set()
    for name, p in model.named_parameters():
        if name in seen:
            raise ValueError(f"duplicate parameter name {name}")
        seen.add(name)
        p.name = name


def zero_residual_outputs(model: Module) -> None:
    """Zero the last conv of every residual function so each block reduces to its shortcut."""
    graphs = [model.fcn, model.resnet] if isinstance(model, Pipeline) else [model]
    for g in graphs:
        for blk in g.residual_blocks():
            conv = blk.final_conv
            conv.weight.value[...] = 0
            if conv.bias is not None:
                conv.bias.value[...] = 0


# ---------------------------------------------------------------------------
# summaries


def summarize(model, h: int = 512, w: int = 512) -> list[SummaryRow]:
    return model.shape_table(h, w)


def format_summary(rows: list[SummaryRow]) -> str:
    head = f"{'layer':<22} {'kind':<17} {'resolution':>11} {'width':>6} {'rep':>4} {'params':>11} {'total':>11}"
    lines = [head, "-" * len(head)]
    for r in rows:
        res = f"{r.resolution[0]}x{r.resolution[1]}"
        lines.append(f"{r.name:<22} {r.kind:<17} {res:>11} {r.width:>6} {r.repetition:>4} {r.params:>11,} {r.cumulative:>11,}")
    lines.append(f"{'total':<22} {'':<17} {'':>11} {'':>6} {'':>4} {sum(r.params for r in rows):>11,}")
    return "\n".join(lines)


def summary_csv(rows: list[SummaryRow]) -> str:
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(["layer", "kind", "height", "width_px", "channels", "repetition", "params", "cumulative"])
    for r in rows:
        wr.writerow([r.name, r.kind, r.resolution[0], r.resolution[1], r.width, r.repetition, r.params, r.cumulative])
    wr.writerow(["total", "", "", "", "", "", sum(r.params for r in rows), rows[-1].cumulative if rows else 0])
    return buf.getvalue()

