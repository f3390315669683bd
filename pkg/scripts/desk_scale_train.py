"""Train the pipeline on the synthetic disks task and report train/val Dice.

    python3 scripts/desk_scale_train.py --out runs/desk --seed 0
"""
import argparse
import time
from pathlib import Path

from segpipe.architectures import build_pipeline
from segpipe.checkpoint import config_hash
from segpipe.config import from_dict, load_config
from segpipe.data import generate_splits, load_dataset
from segpipe.train import evaluate, train


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", help="run config JSON (default: synthetic preset)")
    ap.add_argument("--out", default="runs/desk")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--epochs", type=int, help="override train.max_epochs")
    args = ap.parse_args()

    cfg = load_config(args.config) if args.config else from_dict({"seed": args.seed})
    out = Path(args.out)
    paths = generate_splits(cfg.synthetic, out / "data")
    tr, va = load_dataset(paths["train"]), load_dataset(paths["val"])
    model = build_pipeline(cfg.arch.scale, cfg.seed, long_skips=cfg.arch.long_skips, dropout=cfg.arch.dropout)
    epochs = args.epochs or cfg.train.max_epochs

    def progress(state):
        if state.epoch % 10 == 0:
            print(f"epoch {state.epoch:4d}  val dice {state.history[-1][3]:.4f}", flush=True)

    t0 = time.time()
    res = train(model, tr, va, cfg.optim, cfg.augment, cfg.train.patience, epochs, cfg.seed, out,
                config_hash(cfg.arch_dict()), on_epoch=progress)
    best = res.checkpoint.apply_to(build_pipeline(cfg.arch.scale, 0, long_skips=cfg.arch.long_skips))
    print(f"best epoch {res.state.best_epoch}: train dice {evaluate(best, tr)[1]:.4f}, "
          f"val dice {evaluate(best, va)[1]:.4f}, {time.time() - t0:.0f}s")


if __name__ == "__main__":
    main()
