"""segpipe command line.

Exit codes: 0 ok, 2 config/input error, 3 non-finite numbers, 4 failed check.
Every command writes under ``--out`` and finishes by writing
``outputs.json`` (relative path, size and sha256 of each produced file).
Wall-clock timings go to ``run.log`` only, so all other outputs are
reproducible byte for byte.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import gradcheck as gc
from .analysis import analyze_normalization
from .architectures import build_model, build_pipeline, format_summary, summarize, summary_csv
from .checkpoint import Checkpoint, config_hash
from .config import ConfigError, RunConfig, from_dict, load_config
from .data import Subset, crop_back, generate_splits, group_slices_to_volume, load_dataset
from .losses import dice_coefficient
from .optim import NumericalError
from .postprocess import largest_component
from .tensor import Rng, atomic_write, load_sgt, save_sgt
from .train import load_members, predict_ensemble, split_indices, train, train_ensemble

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_CHECK = 0, 2, 3, 4
COMMANDS = ("train", "predict", "evaluate", "gradcheck", "summary", "postprocess", "analyze", "gen-synthetic")

log = logging.getLogger("segpipe")


class CheckFailed(RuntimeError):
    pass


class Outputs:
    """Tracks files written under the output directory."""

    def __init__(self, root: Path):
        self.root = root
        self.files: list[Path] = []
        self.synthetic: dict | None = None

    def path(self, rel) -> Path:
        p = self.root / rel
        p.parent.mkdir(parents=True, exist_ok=True)
        return p

    def text(self, rel, content: str) -> Path:
        p = self.path(rel)
        atomic_write(p, content.encode())
        return self.add(p)

    def tensor(self, rel, arr) -> Path:
        p = self.path(rel)
        save_sgt(p, np.asarray(arr))
        return self.add(p)

    def add(self, p: Path) -> Path:
        if p not in self.files:
            self.files.append(p)
        return p

    def write_manifest(self) -> None:
        entries = []
        for p in sorted(set(self.files)):
            data = p.read_bytes()
            entries.append({"path": p.relative_to(self.root).as_posix(), "bytes": len(data),
                            "sha256": hashlib.sha256(data).hexdigest()})
        atomic_write(self.root / "outputs.json", (json.dumps({"files": entries}, indent=2) + "\n").encode())


def _dtype(cfg: RunConfig):
    return np.dtype(cfg.arch.dtype).type


def _builder(cfg: RunConfig, seed: int | None = None):
    def build(member_seed: int | None = None):
        s = cfg.seed if member_seed is None else member_seed
        return build_pipeline(cfg.arch.scale, s if seed is None else seed, _dtype(cfg),
                              cfg.arch.long_skips, cfg.arch.dropout)
    return build


def _dataset(cfg: RunConfig, split: str, out: Outputs | None = None):
    path = cfg.resolve(getattr(cfg.data, split))
    if path is None:
        if cfg.task == "synthetic" and out is not None:
            paths = _synthetic(cfg, out)
            if split in paths:
                return load_dataset(paths[split])
        raise ConfigError(f"config has no data.{split} manifest")
    try:
        return load_dataset(path)
    except FileNotFoundError as exc:
        raise ConfigError(f"missing data file: {exc}") from exc
    except (ValueError, OSError) as exc:
        raise ConfigError(f"bad dataset {path}: {exc}") from exc


def _synthetic(cfg: RunConfig, out: Outputs) -> dict:
    if out.synthetic is None:
        out.synthetic = generate_splits(cfg.synthetic, out.root / "data")
        for p in sorted((out.root / "data").rglob("*")):
            if p.is_file():
                out.add(p)
    return out.synthetic


def _checkpoints(args) -> list[Path]:
    if not args.checkpoints:
        return []
    return [Path(p) for p in args.checkpoints.split(",") if p]


def _members(cfg: RunConfig, args) -> list:
    paths = _checkpoints(args)
    if not paths:
        raise ConfigError("--checkpoints is required for this command")
    try:
        return load_members(paths, _builder(cfg), config_hash(cfg.arch_dict()))
    except FileNotFoundError as exc:
        raise ConfigError(f"checkpoint not found: {exc.filename}") from exc
    except (KeyError, ValueError) as exc:
        raise ConfigError(f"checkpoint does not match the configured architecture: {exc}") from exc


# ---------------------------------------------------------------------------
# commands


def cmd_gen_synthetic(cfg: RunConfig, args, out: Outputs) -> int:
    paths = _synthetic(cfg, out)
    for split, p in paths.items():
        print(f"{split}: {p}")
    return EXIT_OK


def cmd_train(cfg: RunConfig, args, out: Outputs) -> int:
    chash = config_hash(cfg.arch_dict())
    train_ds = _dataset(cfg, "train", out)
    t = cfg.train
    if t.ensemble > 1:
        results = train_ensemble(_builder(cfg), train_ds, cfg.optim, t.ensemble, cfg.seed, cfg.augment,
                                 t.patience, t.max_epochs, out.root, chash, t.val_fraction)
        for m in range(t.ensemble):
            for name in ("best.sgc", "history.csv"):
                out.add(out.root / f"member_{m:02d}" / name)
        rows = ["member,best_epoch,best_val_dice"]
        rows += [f"{m},{r.state.best_epoch},{r.state.best_dice!r}" for m, r in enumerate(results)]
        out.text("ensemble.csv", "\n".join(rows) + "\n")
        print("\n".join(rows))
        return EXIT_OK
    if cfg.data.val is None and cfg.task != "synthetic":
        tr, va = split_indices(len(train_ds), Rng(cfg.seed).stream("split", 0), t.val_fraction)
        train_ds, val_ds = Subset(train_ds, tr), Subset(train_ds, va)
    else:
        val_ds = _dataset(cfg, "val", out)
    model = _builder(cfg)()
    res = train(model, train_ds, val_ds, cfg.optim, cfg.augment, t.patience, t.max_epochs, cfg.seed,
                out.root, chash)
    out.add(out.root / "best.sgc")
    out.add(out.root / "history.csv")
    print(f"best epoch {res.state.best_epoch}  val dice {res.state.best_dice:.4f}  "
          f"epochs run {len(res.state.history)}")
    return EXIT_OK


def _predict_split(cfg: RunConfig, args, out: Outputs, split: str):
    models = _members(cfg, args)
    ds = _dataset(cfg, split, out)
    preds = []
    for rec in ds:
        p = predict_ensemble(models, rec.image[None])[0]
        preds.append((rec, crop_back(p, rec.original_hw)))
    return ds, preds


def cmd_predict(cfg: RunConfig, args, out: Outputs) -> int:
    split = "test" if cfg.data.test is not None else "val"
    _, preds = _predict_split(cfg, args, out, split)
    for rec, p in preds:
        out.tensor(f"predictions/{rec.name}.sgt", p)
    vols = [(rec, p) for rec, p in preds if rec.volume_id is not None]
    if vols:
        stacks = group_slices_to_volume([p for _, p in vols], [(r.volume_id, r.slice_index) for r, _ in vols])
        for vid, stack in stacks.items():
            out.tensor(f"volumes/{vid}.sgt", stack)
    print(f"wrote {len(preds)} probability maps")
    return EXIT_OK


def cmd_evaluate(cfg: RunConfig, args, out: Outputs) -> int:
    split = "test" if cfg.data.test is not None else "val"
    if _checkpoints(args):
        _, preds = _predict_split(cfg, args, out, split)
    else:
        pred_dir = cfg.resolve(cfg.data.predictions)
        if pred_dir is None:
            raise ConfigError("evaluate needs --checkpoints or data.predictions")
        ds = _dataset(cfg, split, out)
        preds = []
        for rec in ds:
            f = pred_dir / f"{rec.name}.sgt"
            if not f.exists():
                raise ConfigError(f"missing prediction {f}")
            preds.append((rec, load_sgt(f).data))
    rows, scores = ["image,dice"], []
    for rec, p in preds:
        if rec.mask is None:
            raise ConfigError(f"sample {rec.name!r} has no mask to evaluate against")
        d = dice_coefficient(p, crop_back(rec.mask, rec.original_hw))
        scores.append(d)
        rows.append(f"{rec.name},{d!r}")
    rows.append(f"mean,{float(np.mean(scores))!r}")
    out.text("dice.csv", "\n".join(rows) + "\n")
    print(f"mean dice {np.mean(scores):.4f} over {len(scores)} images")
    return EXIT_OK


def cmd_gradcheck(cfg: RunConfig, args, out: Outputs) -> int:
    results = gc.run(args.scope, args.seed if args.seed is not None else 0)
    report = gc.format_report(results)
    out.text("gradcheck.txt", report + "\n")
    print(report)
    if not all(r.passed for r in results):
        raise CheckFailed("gradient check failed")
    return EXIT_OK


def cmd_summary(cfg: RunConfig, args, out: Outputs) -> int:
    scale = args.scale if args.scale is not None else (cfg.arch.scale if args.config else 1.0)
    model = build_model(args.arch, scale, 0)
    rows = summarize(model, args.size, args.size)
    text = format_summary(rows)
    out.text("summary.txt", text + "\n")
    out.text("summary.csv", summary_csv(rows))
    print(text)
    return EXIT_OK


def cmd_postprocess(cfg: RunConfig, args, out: Outputs) -> int:
    src = cfg.resolve(cfg.data.predictions)
    if src is None or not src.is_dir():
        raise ConfigError("postprocess needs data.predictions pointing at a directory of SGT1 maps")
    files = sorted(src.glob("*.sgt"))
    if not files:
        raise ConfigError(f"no .sgt files in {src}")
    pp = cfg.postprocess
    for f in files:
        arr = load_sgt(f).data
        vol = arr[0] if arr.ndim == 3 and arr.shape[0] == 1 else arr
        if vol.ndim == 4 and vol.shape[1] == 1:
            vol = vol[:, 0]
        res = largest_component(vol, pp.threshold, pp.connectivity)
        out.tensor(f"postprocessed/{f.name}", res.reshape(arr.shape).astype(np.float32))
    print(f"post-processed {len(files)} maps")
    return EXIT_OK


def cmd_analyze(cfg: RunConfig, args, out: Outputs) -> int:
    paths = _checkpoints(args)
    model = _builder(cfg)()
    untrained = True
    if paths:
        try:
            ck = Checkpoint.load(paths[0])
        except FileNotFoundError as exc:
            raise ConfigError(f"checkpoint not found: {exc.filename}") from exc
        try:
            ck.apply_to(model, config_hash(cfg.arch_dict()))
        except (KeyError, ValueError) as exc:
            raise ConfigError(f"checkpoint does not match the configured architecture: {exc}") from exc
        untrained = "epoch" not in ck.metadata
    ds = _dataset(cfg, cfg.analysis.split, out)
    rep = analyze_normalization(model, ds, cfg.analysis.bins, untrained, cfg.analysis.exclude_void)
    out.text("histograms.csv", rep.histogram_csv())
    out.text("histogram_summary.csv", rep.summary_csv(cfg.analysis.fit))
    print(rep.summary_csv(cfg.analysis.fit), end="")
    for note in rep.notes:
        print(f"note: {note}")
    return EXIT_OK


HANDLERS = {
    "train": cmd_train, "predict": cmd_predict, "evaluate": cmd_evaluate, "gradcheck": cmd_gradcheck,
    "summary": cmd_summary, "postprocess": cmd_postprocess, "analyze": cmd_analyze,
    "gen-synthetic": cmd_gen_synthetic,
}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="segpipe", description="Two-stage FCN + FC-ResNet segmentation pipeline.")
    ap.add_argument("command", choices=COMMANDS)
    ap.add_argument("--config", help="run config JSON (defaults to the synthetic preset)")
    ap.add_argument("--seed", type=int)
    ap.add_argument("--out", default="segpipe_out")
    ap.add_argument("--scale", type=float)
    ap.add_argument("--checkpoints", help="comma-separated checkpoint paths")
    ap.add_argument("--scope", default="all", choices=("ops", "blocks", "pipeline", "all"), help="gradcheck scope")
    ap.add_argument("--arch", default="pipeline", choices=("pipeline", "fcn", "resnet"), help="summary model")
    ap.add_argument("--size", type=int, default=512, help="summary input extent")
    ap.add_argument("-v", "--verbose", action="store_true")
    return ap


def _resolve_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else from_dict({})
    if args.seed is not None:
        if args.seed < 0:
            raise ConfigError("--seed must be >= 0")
        cfg.seed = args.seed
        cfg.synthetic = replace(cfg.synthetic, seed=args.seed)
    if args.scale is not None:
        if not 0 < args.scale <= 1:
            raise ConfigError("--scale must be in (0, 1]")
        cfg.arch = replace(cfg.arch, scale=args.scale)
    return cfg


def _limit_threads():
    n = os.environ.get("SEGPIPE_THREADS")
    if not n:
        return None
    try:
        n = int(n)
    except ValueError as exc:
        raise ConfigError(f"SEGPIPE_THREADS must be an integer, got {n!r}") from exc
    if n < 1:
        raise ConfigError("SEGPIPE_THREADS must be >= 1")
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    out = Outputs(Path(args.out))
    out.root.mkdir(parents=True, exist_ok=True)
    handler = logging.FileHandler(out.root / "run.log")
    handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
    root = logging.getLogger("segpipe")
    root.addHandler(handler)
    root.setLevel(logging.INFO)
    if args.verbose:
        root.addHandler(logging.StreamHandler(sys.stderr))
    t0 = time.time()
    code = EXIT_OK
    try:
        limiter = _limit_threads()
        cfg = _resolve_config(args)
        out.text("config.resolved.json", json.dumps(cfg.to_dict(), indent=2, default=list) + "\n")
        code = HANDLERS[args.command](cfg, args, out)
        if limiter is not None:
            limiter.restore_original_limits()
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        code = EXIT_CONFIG
    except (NumericalError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        code = EXIT_NUMERIC
    except CheckFailed as exc:
        print(f"check failed: {exc}", file=sys.stderr)
        code = EXIT_CHECK
    finally:
        log.info("%s finished with exit code %d in %.2fs", args.command, code, time.time() - t0)
        root.removeHandler(handler)
        handler.close()
        out.write_manifest()
    return code


if __name__ == "__main__":
    sys.exit(main())
