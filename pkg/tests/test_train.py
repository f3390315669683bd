import numpy as np
import pytest

from segpipe import autodiff as ad
from segpipe.architectures import build_pipeline
from segpipe.checkpoint import Checkpoint
from segpipe.data import SyntheticTaskCfg, generate_splits, load_dataset
from segpipe.optim import OptimConfig
from segpipe.train import evaluate, load_members, predict, predict_ensemble, split_indices, train, train_ensemble
from segpipe.tensor import Rng

SCALE = 0.0625


@pytest.fixture(scope="module")
def tiny(tmp_path_factory):
    root = tmp_path_factory.mktemp("tiny")
    paths = generate_splits(SyntheticTaskCfg(size=32, seed=1, splits={"train": 4, "val": 2}), root)
    return load_dataset(paths["train"]), load_dataset(paths["val"])


def build(seed=0):
    return build_pipeline(SCALE, seed)


OPT = OptimConfig(lr0=3e-3, lr_decay=1e-3, batch_size=2, weight_decay=1e-4)


def test_patience_zero_stops_at_first_non_improving_epoch(tiny):
    res = train(build(), *tiny, OPT, patience=0, max_epochs=6, seed=0)
    dices = [h[3] for h in res.state.history]
    best = -np.inf
    for i, d in enumerate(dices):
        if d <= best:
            assert i == len(dices) - 1
        best = max(best, d)
    assert len(dices) == 6 or dices[-1] <= max(dices[:-1])


def test_patience_rule_and_best_checkpoint(tiny, tmp_path):
    res = train(build(), *tiny, OPT, patience=2, max_epochs=8, seed=0, out_dir=tmp_path)
    dices = [h[3] for h in res.state.history]
    assert res.state.best_dice == max(dices)
    assert res.state.best_epoch == int(np.argmax(dices))
    n = len(dices)
    assert n == 8 or n - 1 - res.state.best_epoch == 2
    ck = Checkpoint.load(tmp_path / "best.sgc")
    assert ck.metadata["epoch"] == res.state.best_epoch
    # the saved weights reproduce the recorded best validation Dice
    model = ck.apply_to(build(99))
    assert evaluate(model, tiny[1])[1] == pytest.approx(res.state.best_dice, abs=1e-6)
    assert (tmp_path / "history.csv").read_text() == res.history_csv
    assert res.history_csv.splitlines()[0] == "epoch,train_loss,val_loss,val_dice,lr"


def test_same_seed_same_history(tiny):
    a = train(build(3), *tiny, OPT, patience=5, max_epochs=3, seed=3)
    b = train(build(3), *tiny, OPT, patience=5, max_epochs=3, seed=3)
    assert a.history_csv == b.history_csv
    c = train(build(4), *tiny, OPT, patience=5, max_epochs=3, seed=4)
    assert c.history_csv != a.history_csv


def test_empty_split_rejected(tiny):
    with pytest.raises(ValueError):
        train(build(), [], tiny[1], OPT)
    with pytest.raises(ValueError):
        train(build(), tiny[0], tiny[1], OPT, patience=-1)


def warmed(seed, x):
    # one train-mode pass records batch-norm running statistics
    m = build(seed)
    with ad.no_grad():
        m(ad.variable(x, requires_grad=False), True)
    return m


def test_predict_ensemble_examples(tiny):
    x = tiny[1][0].image[None]
    m1 = warmed(0, x)
    out1 = predict(m1, x)
    assert np.array_equal(predict_ensemble([m1], x), out1)
    m1b = warmed(0, x)
    assert np.array_equal(predict_ensemble([m1, m1b], x), out1)
    m2 = warmed(1, x)
    out2 = predict(m2, x)
    mean = predict_ensemble([m1, m2], x)
    assert mean.dtype == out1.dtype
    assert np.allclose(mean, (out1.astype(np.float64) + out2) / 2, atol=1e-7)
    with pytest.raises(ValueError):
        predict_ensemble([], x)


class Const:
    def __init__(self, v):
        self.v = v

    def __call__(self, x, train=True, rng=None):
        return ad.variable(np.full(x.value.shape, self.v, np.float32), requires_grad=False)


def test_ensemble_mean_of_constants():
    x = np.zeros((1, 1, 4, 4), np.float32)
    assert np.allclose(predict_ensemble([Const(0.2), Const(0.6)], x), 0.4)


def test_split_indices():
    tr, va = split_indices(10, Rng(0).stream("split", 0), 0.2)
    assert len(va) == 2 and len(tr) == 8 and sorted(tr + va) == list(range(10))
    assert split_indices(10, Rng(0).stream("split", 0)) == (tr, va)
    assert split_indices(10, Rng(0).stream("split", 1)) != (tr, va)
    with pytest.raises(ValueError):
        split_indices(1, Rng(0))


def test_train_ensemble_members(tiny, tmp_path):
    ds = tiny[0]
    res = train_ensemble(build, ds, OPT, n=2, base_seed=0, patience=1, max_epochs=2, out_dir=tmp_path)
    assert len(res) == 2
    for m in range(2):
        assert (tmp_path / f"member_{m:02d}" / "best.sgc").exists()
    models = load_members([tmp_path / f"member_{m:02d}" / "best.sgc" for m in range(2)], lambda: build(7))
    x = ds[0].image[None]
    p = predict_ensemble(models, x)
    assert p.shape == x.shape and np.all((p >= 0) & (p <= 1))
    with pytest.raises(ValueError):
        train_ensemble(build, ds, OPT, n=0)
