"""Central finite-difference checks of every differentiable op, block and the pipeline.

Ops are looked up on the ``autodiff`` module at call time so that a test can
swap in a faulty op and watch the suite fail.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import losses
from .losses import relative_error
from .tensor import Rng

EPS = 1e-5
OP_TOL = 1e-4
LOSS_TOL = 1e-6
PIPELINE_TOL = 1e-3


@dataclass
class CheckResult:
    name: str
    max_rel_error: float
    tol: float
    details: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.max_rel_error) and self.max_rel_error < self.tol)


def numeric_grad(f, arr: np.ndarray, eps: float = EPS, indices=None) -> np.ndarray:
    """d f / d arr by central differences at ``indices`` (all entries by default)."""
    idx = range(arr.size) if indices is None else indices
    out = np.zeros(len(idx) if indices is not None else arr.size)
    for k, i in enumerate(idx):
        old = arr.flat[i]
        arr.flat[i] = old + eps
        fp = f()
        arr.flat[i] = old - eps
        fm = f()
        arr.flat[i] = old
        out[k] = (fp - fm) / (2 * eps)
    return out if indices is not None else out.reshape(arr.shape)


def check_function(name: str, build, arrays: dict[str, np.ndarray], tol: float = OP_TOL,
                   seed: int = 0, max_entries: int = 60) -> CheckResult:
    """``build(nodes)`` maps a dict of leaf nodes to an output node.

    The scalar probed is sum(output * R) for a fixed random R. Each array in
    ``arrays`` is a float64 leaf; up to ``max_entries`` of its entries are
    perturbed.
    """
    rng = np.random.default_rng(seed)
    nodes = {k: ad.variable(v) for k, v in arrays.items()}
    out = build(nodes)
    weights = rng.standard_normal(out.value.shape)
    ad.backward(ad.weighted_total(out, weights))

    def scalar():
        fresh = {k: ad.variable(v, requires_grad=False) for k, v in arrays.items()}
        return float((build(fresh).value * weights).sum())

    worst = 0.0
    per_input = {}
    for key, arr in arrays.items():
        analytic = nodes[key].grad if nodes[key].grad is not None else np.zeros_like(arr)
        if arr.size <= max_entries:
            sel = None
            a = analytic
        else:
            sel = rng.choice(arr.size, size=max_entries, replace=False)
            a = analytic.ravel()[sel]
        n = numeric_grad(scalar, arr, indices=sel)
        err = relative_error(a, n)
        per_input[key] = err
        worst = max(worst, err)
    return CheckResult(name, worst, tol, per_input)


def _rand(rng, *shape, low=None):
    x = rng.standard_normal(shape)
    if low is not None:
        # keep away from kinks so +-eps never crosses one
        x = np.where(np.abs(x) < low, np.sign(x + 1e-12) * low, x)
    return x


def op_suite(seed: int = 0) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    results = []

    def conv_case(name, B, C, H, W, O, k, stride):
        arrays = {"x": _rand(rng, B, C, H, W), "w": _rand(rng, O, C, k, k), "b": _rand(rng, O)}
        results.append(check_function(
            name, lambda n: ad.conv2d(n["x"], n["w"], n["b"], stride, "same"), arrays))

    conv_case("conv2d_3x3", 2, 3, 6, 6, 4, 3, 1)
    conv_case("conv2d_3x3_stride2", 2, 2, 8, 8, 3, 3, 2)
    conv_case("conv2d_2x2", 1, 3, 5, 5, 2, 2, 1)
    conv_case("conv2d_1x1_stride2", 2, 4, 8, 8, 3, 1, 2)

    results.append(check_function("maxpool2", lambda n: ad.maxpool2(n["x"]), {"x": _rand(rng, 2, 3, 6, 6)}))
    results.append(check_function("maxpool2_odd", lambda n: ad.maxpool2(n["x"]), {"x": _rand(rng, 1, 2, 5, 7)}))
    results.append(check_function("upsample2", lambda n: ad.upsample2(n["x"]), {"x": _rand(rng, 2, 3, 4, 4)}))

    def bn_train(n):
        return ad.batchnorm(n["x"], n["gamma"], n["beta"], True)

    results.append(check_function(
        "batchnorm_train", bn_train,
        {"x": _rand(rng, 2, 3, 4, 4) * 2 + 1, "gamma": _rand(rng, 3), "beta": _rand(rng, 3)}))

    stats = ad.RunningStats()
    stats.mean, stats.var = rng.standard_normal(3), rng.uniform(0.5, 2.0, 3)
    results.append(check_function(
        "batchnorm_eval", lambda n: ad.batchnorm(n["x"], n["gamma"], n["beta"], False, stats),
        {"x": _rand(rng, 2, 3, 4, 4), "gamma": _rand(rng, 3), "beta": _rand(rng, 3)}))

    results.append(check_function("relu", lambda n: ad.relu(n["x"]), {"x": _rand(rng, 2, 3, 4, 4, low=1e-3)}))
    results.append(check_function("sigmoid", lambda n: ad.sigmoid(n["x"]), {"x": _rand(rng, 2, 3, 4, 4)}))
    results.append(check_function(
        "dropout", lambda n: ad.dropout(n["x"], 0.3, True, np.random.default_rng(7)), {"x": _rand(rng, 2, 3, 4, 4)}))
    results.append(check_function(
        "concat_channels", lambda n: ad.concat_channels(n["a"], n["b"]),
        {"a": _rand(rng, 2, 2, 4, 4), "b": _rand(rng, 2, 3, 4, 4)}))
    results.append(check_function(
        "add", lambda n: ad.add(n["a"], n["b"]), {"a": _rand(rng, 2, 4, 4, 4), "b": _rand(rng, 2, 4, 4, 4)}))

    loss = losses.loss_gradient_check(seed=seed)
    results.append(CheckResult("dice_loss", loss["max_rel_error"], LOSS_TOL,
                               {"void_grad_max": loss["void_grad_max"]}))
    return results


def _params_case(name, module, forward, x, tol, seed, max_params=None, per_param_entries=6):
    """Check gradients of ``forward(x)`` w.r.t. the input and (a sample of) module parameters."""
    rng = np.random.default_rng(seed)
    module.astype(np.float64)
    module.zero_grad()
    xnode = ad.variable(x)
    out = forward(xnode)
    weights = rng.standard_normal(out.value.shape)
    ad.backward(ad.weighted_total(out, weights))

    def scalar():
        return float((forward(ad.variable(x, requires_grad=False)).value * weights).sum())

    named = list(module.named_parameters())
    picks = []  # (label, array, flat index, analytic)
    for pname, p in named:
        k = min(per_param_entries, p.value.size)
        for i in rng.choice(p.value.size, size=k, replace=False):
            picks.append((pname, p.value, int(i), float(p.grad.flat[i])))
    if max_params is not None and len(picks) > max_params:
        sel = rng.choice(len(picks), size=max_params, replace=False)
        picks = [picks[i] for i in sel]
    for i in rng.choice(x.size, size=min(per_param_entries, x.size), replace=False):
        picks.append(("input", x, int(i), float(xnode.grad.flat[i])))

    analytic = np.array([p[3] for p in picks])
    numeric = np.array([numeric_grad(scalar, arr, indices=[i])[0] for _, arr, i, _ in picks])
    err = relative_error(analytic, numeric)
    return CheckResult(name, err, tol, {"entries": len(picks)})


def block_suite(seed: int = 0) -> list[CheckResult]:
    from .blocks import ResidualBlock, ResidualBlockCfg

    results = []
    rng = np.random.default_rng(seed)
    cases = [
        ("simple_block", ResidualBlockCfg("simple", 4, 4, "none")),
        ("simple_block_down", ResidualBlockCfg("simple", 3, 4, "down")),
        ("simple_block_up", ResidualBlockCfg("simple", 4, 2, "up")),
        ("bottleneck_block", ResidualBlockCfg("bottleneck", 8, 8, "none")),
        ("bottleneck_block_down", ResidualBlockCfg("bottleneck", 4, 8, "down")),
        ("bottleneck_block_up", ResidualBlockCfg("bottleneck", 8, 4, "up")),
    ]
    for i, (name, cfg) in enumerate(cases):
        blk = ResidualBlock(cfg, Rng(seed).stream("gradcheck/block", i), np.float64)
        x = rng.standard_normal((2, cfg.in_width, 8, 8))
        results.append(_params_case(name, blk, lambda n, b=blk: b(n, True), x, OP_TOL, seed + i,
                                    per_param_entries=3))
    return results


def pipeline_check(seed: int = 0, size: int = 32, scale: float = 0.125, n_params: int = 20) -> CheckResult:
    """Dice loss of the whole pipeline vs. central differences on a random parameter sample."""
    from .architectures import build_pipeline

    rng = np.random.default_rng(seed)
    model = build_pipeline(scale, seed=seed, dtype=np.float64)
    x = rng.uniform(0, 100, size=(2, 1, size, size))
    yy, xx = np.mgrid[:size, :size]
    disk = ((yy - size / 2) ** 2 + (xx - size / 3) ** 2 < (size / 4) ** 2).astype(np.int64)
    mask = np.broadcast_to(disk, (2, 1, size, size)).copy()

    def forward(n):
        return losses.dice_loss(model(n, True), mask)

    return _params_case("pipeline_dice_loss", model, forward, x, PIPELINE_TOL, seed,
                        max_params=n_params, per_param_entries=1)


def run(scope: str = "ops", seed: int = 0) -> list[CheckResult]:
    if scope == "ops":
        return op_suite(seed)
    if scope == "blocks":
        return block_suite(seed)
    if scope == "pipeline":
        return [pipeline_check(seed)]
    if scope == "all":
        return op_suite(seed) + block_suite(seed) + [pipeline_check(seed)]
    raise ValueError(f"unknown gradcheck scope {scope!r}")


def format_report(results: list[CheckResult]) -> str:
    lines = [f"{'check':<26} {'max_rel_error':>14} {'tol':>8}  status"]
    for r in results:
        lines.append(f"{r.name:<26} {r.max_rel_error:>14.3e} {r.tol:>8.0e}  {'PASS' if r.passed else 'FAIL'}")
    return "\n".join(lines)
