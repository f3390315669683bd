"""Per-class intensity histograms before and after the pre-processor.

Trains the desk-scale model first unless --checkpoint is given, then writes
histograms.csv and histogram_summary.csv next to it.

    python3 scripts/normalization_analysis.py --out runs/norm
"""
import argparse
from pathlib import Path

from segpipe.analysis import analyze_normalization
from segpipe.architectures import build_pipeline
from segpipe.checkpoint import Checkpoint, config_hash
from segpipe.config import from_dict, load_config
from segpipe.data import generate_splits, load_dataset
from segpipe.tensor import atomic_write
from segpipe.train import train


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config")
    ap.add_argument("--checkpoint")
    ap.add_argument("--out", default="runs/norm")
    ap.add_argument("--bins", type=int, default=100)
    args = ap.parse_args()

    cfg = load_config(args.config) if args.config else from_dict({})
    out = Path(args.out)
    chash = config_hash(cfg.arch_dict())
    paths = generate_splits(cfg.synthetic, out / "data")
    val = load_dataset(paths["val"])
    model = build_pipeline(cfg.arch.scale, cfg.seed, long_skips=cfg.arch.long_skips)
    if args.checkpoint:
        Checkpoint.load(args.checkpoint).apply_to(model, chash)
    else:
        res = train(model, load_dataset(paths["train"]), val, cfg.optim, cfg.augment, cfg.train.patience,
                    cfg.train.max_epochs, cfg.seed, out, chash)
        res.checkpoint.apply_to(model, chash)
    rep = analyze_normalization(model, val, args.bins)
    atomic_write(out / "histograms.csv", rep.histogram_csv().encode())
    atomic_write(out / "histogram_summary.csv", rep.summary_csv().encode())
    print(rep.summary_csv(), end="")


if __name__ == "__main__":
    main()
