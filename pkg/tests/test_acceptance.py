"""Acceptance gate: one PASS/FAIL line per criterion, printed even under capture."""
import os
import time

import numpy as np
import pytest

from segpipe import autodiff as ad
from segpipe import gradcheck as gc
from segpipe.architectures import build_fc_resnet, build_fcn_preprocessor, summarize, zero_residual_outputs
from segpipe.augment import AugmentConfig, WarpConfig, apply, spline_warp
from segpipe.checkpoint import Checkpoint, config_hash
from segpipe.cli import EXIT_OK, main
from segpipe.config import from_dict
from segpipe.data import load_dataset
from segpipe.architectures import build_pipeline
from segpipe.losses import dice_loss_value
from segpipe.postprocess import largest_component
from segpipe.tensor import Rng, decode_sgt, encode_sgt, load_sgt, save_sgt
from segpipe.train import evaluate, predict_ensemble

from test_architectures import FCN_ROWS, RESNET_ROWS


@pytest.fixture
def report(capsys):
    def emit(n, ok, detail):
        with capsys.disabled():
            print(f"\ncriterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
        assert ok, detail
    return emit


def test_criterion_01_gradient_suite(report):
    t0 = time.time()
    results = gc.run("all", seed=0)
    elapsed = time.time() - t0
    failed = [r.name for r in results if not r.passed]
    loss = next(r for r in results if r.name == "dice_loss")
    pipe = next(r for r in results if r.name.startswith("pipeline"))
    ok = not failed and loss.tol <= 1e-6 and pipe.tol <= 1e-3 and elapsed < 120
    report(1, ok, f"{len(results)} checks, failed={failed}, loss err {loss.max_rel_error:.1e}, "
                  f"pipeline err {pipe.max_rel_error:.1e}, {elapsed:.1f}s")


def test_criterion_02_architecture_tables(report, tmp_path):
    t0 = time.time()
    fcn = [(r.name, r.resolution, r.width) for r in summarize(build_fcn_preprocessor(1.0))]
    res = [(r.name, r.resolution, r.width) for r in summarize(build_fc_resnet(1.0))]
    ok_fcn = fcn == [(n, (s, s), w) for n, s, w in FCN_ROWS]
    ok_res = res == [(n, (s, s), w) for n, s, w, _ in RESNET_ROWS]
    # the CLI view of the same table
    assert main(["summary", "--out", str(tmp_path), "--size", "512"]) == EXIT_OK
    csv_rows = (tmp_path / "summary.csv").read_text().splitlines()[1:-1]
    cli_pairs = [(r.split(",")[2], r.split(",")[4]) for r in csv_rows]
    ok_cli = ("512", "1") in cli_pairs and ("32", "1024") in cli_pairs
    report(2, ok_fcn and ok_res and ok_cli,
           f"FCN rows {len(fcn)} match={ok_fcn}, FC-ResNet rows {len(res)} match={ok_res}, "
           f"{time.time() - t0:.1f}s")


def test_criterion_03_parameter_budget(report):
    fcn, res = build_fcn_preprocessor(1.0), build_fc_resnet(1.0)
    nf, nr = fcn.num_parameters(), res.num_parameters()
    convs = res.conv_counts()["residual_path"]
    dev = (abs(nf / 1.8e6 - 1), abs(nr / 11e6 - 1), abs((nf + nr) / 12.8e6 - 1))
    ok = dev[0] < 0.05 and dev[1] < 0.10 and dev[2] < 0.07 and 135 <= convs <= 145
    report(3, ok, f"FCN {nf:,} ({dev[0]:.1%}), FC-ResNet {nr:,} ({dev[1]:.1%}), "
                  f"pipeline {nf + nr:,} ({dev[2]:.1%}), residual convs {convs}")


def test_criterion_04_residual_identity(report):
    model = build_fc_resnet(1.0, seed=0)
    zero_residual_outputs(model)
    checked, bad = 0, []
    for i, blk in enumerate(model.residual_blocks()):
        if blk.shortcut is not None or blk.cfg.resample != "none":
            continue
        x = np.random.default_rng(i).standard_normal((1, blk.cfg.in_width, 4, 4)).astype(np.float32)
        out = blk(ad.variable(x, False), True, Rng(i)).value
        checked += 1
        if out.tobytes() != x.tobytes():
            bad.append(i)
    report(4, checked > 0 and not bad, f"{checked} shape-matched blocks, non-identity: {bad}")


@pytest.fixture(scope="module")
def desk_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("desk")
    old = os.environ.get("SEGPIPE_THREADS")
    os.environ["SEGPIPE_THREADS"] = "1"
    try:
        times, codes = [], []
        for name in ("a", "b"):
            t0 = time.time()
            codes.append(main(["train", "--out", str(root / name), "--seed", "0"]))
            times.append(time.time() - t0)
    finally:
        if old is None:
            os.environ.pop("SEGPIPE_THREADS")
        else:
            os.environ["SEGPIPE_THREADS"] = old
    return root, codes, times


def test_criterion_05_desk_scale_training(report, desk_run):
    root, codes, times = desk_run
    cfg = from_dict({})
    ck = Checkpoint.load(root / "a" / "best.sgc")
    model = ck.apply_to(build_pipeline(cfg.arch.scale, 0), config_hash(cfg.arch_dict()))
    train_dice = evaluate(model, load_dataset(root / "a" / "data" / "train" / "manifest.json"))[1]
    val_dice = evaluate(model, load_dataset(root / "a" / "data" / "val" / "manifest.json"))[1]
    hist_a = (root / "a" / "history.csv").read_bytes()
    same = hist_a == (root / "b" / "history.csv").read_bytes()
    epochs = len(hist_a.decode().splitlines()) - 1
    ok = (codes == [EXIT_OK, EXIT_OK] and train_dice >= 0.95 and val_dice >= 0.85 and epochs <= 200
          and max(times) <= 900 and same)
    report(5, ok, f"train Dice {train_dice:.4f}, val Dice {val_dice:.4f} at epoch {int(ck.metadata['epoch'])}, "
                  f"{epochs} epochs, {times[0]:.0f}s/{times[1]:.0f}s, history identical={same}")


def test_criterion_06_loss_unit_values(report):
    y = np.zeros((1, 1, 4, 4), np.uint8)
    y[..., 1:3, 1:3] = 1
    perfect = dice_loss_value(y.astype(np.float64), y)[0]
    empty = dice_loss_value(np.zeros(y.shape), y)[0]
    # prediction covers half the foreground plus an equal-area false positive
    half_mask = np.zeros((1, 1, 4, 4), np.uint8)
    half_mask[..., 0, :] = 1
    pred = np.zeros((1, 1, 4, 4))
    pred[..., 0, :2] = 1
    pred[..., 1, :2] = 1
    half = dice_loss_value(pred, half_mask)[0]
    ok = abs(perfect + 1) <= 1e-6 and abs(empty) <= 1e-6 and abs(half + 0.5) <= 1e-6
    report(6, ok, f"perfect {perfect}, all-zero {empty}, half-overlap {half}")


def test_criterion_07_ensemble_and_postprocess(report):
    x = np.random.default_rng(0).uniform(0, 200, (1, 1, 32, 32)).astype(np.float32)
    members = []
    for _ in range(3):
        m = build_pipeline(0.125, seed=5)
        with ad.no_grad():
            m(ad.variable(x, False), True)  # record batch-norm statistics
        members.append(m)
    single = predict_ensemble(members[:1], x)
    ens_ok = np.array_equal(predict_ensemble(members, x), single)
    v = np.zeros((5, 20, 20), np.float32)
    v[0:4, 0:5, 0:5] = 0.9
    v[0:2, 12:16, 12:17] = 0.8
    out = largest_component(v)
    kept_ok = out.sum() == 100 and out[0:4, 0:5, 0:5].all()
    idem = np.array_equal(largest_component(out.astype(np.float32)), out)
    report(7, ens_ok and kept_ok and idem,
           f"identical-member mean exact={ens_ok}, larger blob kept={kept_ok}, idempotent={idem}")


def test_criterion_08_augmentation(report):
    rng = np.random.default_rng(0)
    img = rng.uniform(0, 200, (1, 48, 48)).astype(np.float32)
    mask = rng.choice(np.array([0, 1, 255], np.uint8), (1, 48, 48))
    ident = apply(img, mask, AugmentConfig(), Rng(0).stream("a", 0))
    ident_ok = np.array_equal(ident[0], img) and np.array_equal(ident[1], mask)
    flip = AugmentConfig(flip_h=True, prob=1.0)
    once = apply(img, mask, flip, Rng(1).stream("a", 0))
    twice = apply(*once, flip, Rng(1).stream("a", 1))
    flip_ok = np.array_equal(twice[0], img) and np.array_equal(twice[1], mask) and not np.array_equal(once[0], img)
    warped, wmask = spline_warp(img, mask, 16, 0.0, Rng(2).stream("w", 0))
    warp_err = float(np.abs(warped - img).max())
    full = AugmentConfig(flip_h=True, flip_v=True, shear_max=0.41, rotation_max=25, crop_size=32,
                         warp=WarpConfig(True, 16, 6.0), prob=1.0)
    labels = set()
    for k in range(20):
        labels |= set(np.unique(apply(img, mask, full, Rng(3).stream("a", k))[1]).tolist())
    labels_ok = labels <= {0, 1, 255}
    report(8, ident_ok and flip_ok and warp_err < 1e-6 and np.array_equal(wmask, mask) and labels_ok,
           f"identity={ident_ok}, double flip={flip_ok}, sigma-0 warp err {warp_err:.1e}, mask labels {sorted(labels)}")


def test_criterion_09_normalization_analysis(report, desk_run):
    root, _, _ = desk_run
    out = root / "analysis"
    code = main(["analyze", "--out", str(out), "--checkpoints", str(root / "a" / "best.sgc")])
    cfg = from_dict({})
    rows = [r.split(",") for r in (out / "histogram_summary.csv").read_text().splitlines()[1:]]
    by = {(r[0], int(r[1])): r for r in rows}
    val = load_dataset(root / "a" / "data" / "val" / "manifest.json")
    masks = np.stack([r.mask for r in val])
    lo, hi = cfg.synthetic.intensity_range
    inp = [by[("input", c)] for c in (0, 1)]
    rng_ok = min(float(r[5]) for r in inp) == lo and max(float(r[6]) for r in inp) == hi
    counts_ok = all(int(by[(s, c)][2]) == int((masks == c).sum()) for s in ("input", "preprocessed") for c in (0, 1))
    fit_ok = all(r[3] and r[4] for r in rows) and len(rows) == 4
    trained = all(r[7] == "0" for r in rows)
    hist_rows = (out / "histograms.csv").read_text().splitlines()
    shift = {c: float(by[("preprocessed", c)][3]) for c in (0, 1)}
    report(9, code == EXIT_OK and rng_ok and counts_ok and fit_ok and trained and len(hist_rows) > 1,
           f"input range [{min(float(r[5]) for r in inp)}, {max(float(r[6]) for r in inp)}] vs [{lo}, {hi}], "
           f"counts match={counts_ok}, fitted={fit_ok}, preprocessed means {shift[0]:.3f}/{shift[1]:.3f}")


def test_criterion_10_persistence(report, tmp_path):
    rng = np.random.default_rng(0)
    arrays = [rng.standard_normal((2, 3, 4)).astype(np.float32), rng.standard_normal(5), np.zeros((1, 1, 1, 1))]
    sgt_ok = True
    for i, a in enumerate(arrays):
        save_sgt(tmp_path / f"{i}.sgt", a)
        b = load_sgt(tmp_path / f"{i}.sgt").data
        sgt_ok &= a.dtype == b.dtype and a.tobytes() == b.tobytes()
        sgt_ok &= encode_sgt(decode_sgt(encode_sgt(a))[0]) == encode_sgt(a)
    model = build_pipeline(0.125, seed=3)
    x = rng.uniform(0, 200, (2, 1, 32, 32)).astype(np.float32)
    with ad.no_grad():
        model(ad.variable(x, False), True)
        ref = model(ad.variable(x, False), False).value
    h = config_hash({"arch": "pipeline", "scale": 0.125, "long_skips": True})
    Checkpoint.from_model(model, h, epoch=1).save(tmp_path / "m.sgc")
    raw = (tmp_path / "m.sgc").read_bytes()
    back = Checkpoint.load(tmp_path / "m.sgc")
    ck_ok = back.to_bytes() == raw
    fresh = back.apply_to(build_pipeline(0.125, seed=77), h)
    with ad.no_grad():
        again = fresh(ad.variable(x, False), False).value
    fwd_ok = again.tobytes() == ref.tobytes()
    report(10, sgt_ok and ck_ok and fwd_ok, f"SGT1 bit-exact={sgt_ok}, checkpoint bytes={ck_ok}, forward bitwise={fwd_ok}")
