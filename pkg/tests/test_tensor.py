import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from segpipe.tensor import (
    Rng, ShapeError, Tensor, decode_sgt, elementwise, encode_sgt, flat_index, full, init_weights,
    load_sgt, multi_index, ones, reduce, save_sgt, zeros,
)

shapes = st.lists(st.integers(1, 5), min_size=1, max_size=4).map(tuple)


def test_constant_fills():
    z = zeros([2, 3])
    assert z.numel == 6 and np.all(z.numpy() == 0.0)
    assert full([1], 7.5).numpy().tolist() == [7.5]
    assert reduce("sum", ones([1, 1, 2, 2])).numpy()[0] == 4.0


@pytest.mark.parametrize("shape", [[0], [2, 0, 3], [], [1, 1, 1, 1, 1]])
def test_bad_shapes_rejected(shape):
    with pytest.raises(ShapeError):
        zeros(shape)


def test_elementwise_examples():
    assert elementwise("add", Tensor([1.0, 2.0]), Tensor([3.0, 4.0])).numpy().tolist() == [4, 6]
    assert np.all(elementwise("mul", full([2, 2], 3.0), 0).numpy() == 0)
    assert elementwise("exp", Tensor([0.0])).numpy().tolist() == [1.0]
    assert elementwise("neg", Tensor([2.0])).numpy().tolist() == [-2.0]
    assert elementwise("max", Tensor([1.0, 5.0]), Tensor([3.0, 2.0])).numpy().tolist() == [3, 5]


def test_division_by_zero_modes():
    a = Tensor([1.0, -1.0])
    with pytest.raises(ZeroDivisionError):
        elementwise("div", a, Tensor([0.0, 1.0]))
    out = elementwise("div", a, 0.0, strict=False).numpy()
    assert out[0] == np.inf and out[1] == -np.inf


def test_incompatible_shapes():
    with pytest.raises(ShapeError):
        elementwise("add", zeros([2, 3]), zeros([3, 2]))
    with pytest.raises(ShapeError):
        elementwise("add", zeros([1, 3, 2, 2]), zeros([1, 2, 1, 1]))


@given(st.integers(1, 2), st.integers(1, 4), st.integers(1, 8), st.integers(1, 8), st.integers(0, 2**16))
def test_channel_broadcast_matches_loop(b, c, h, w, seed):
    r = np.random.default_rng(seed)
    x = r.standard_normal((b, c, h, w)).astype(np.float32)
    bias = r.standard_normal((1, c, 1, 1)).astype(np.float32)
    got = elementwise("add", Tensor(x), Tensor(bias)).numpy()
    ref = np.empty_like(x)
    for i in range(b):
        for j in range(c):
            for k in range(h):
                for m in range(w):
                    ref[i, j, k, m] = x[i, j, k, m] + bias[0, j, 0, 0]
    assert np.array_equal(got, ref)


def test_reduce_examples():
    assert reduce("sum", Tensor([[1.0, 2.0], [3.0, 4.0]])).numpy()[0] == 10
    assert reduce("mean", Tensor([2.0, 4.0])).numpy()[0] == 3
    assert reduce("max", Tensor([[1.0, 5.0], [3.0, 2.0]]), axes=[1]).numpy().tolist() == [5, 3]
    a = Tensor(np.arange(6.0).reshape(2, 3))
    assert reduce("sum", a, axes=[0], keepdims=True).shape == (1, 3)
    assert reduce("sum", a, axes=()) == a
    with pytest.raises(IndexError):
        reduce("sum", a, axes=[2])
    with pytest.raises(ValueError):
        reduce("sum", a, axes=[0, 0])


@given(shapes, st.data())
def test_linearization_round_trip(shape, data):
    flat = data.draw(st.integers(0, int(np.prod(shape)) - 1))
    idx = multi_index(flat, shape)
    assert flat_index(idx, shape) == flat
    assert flat == np.ravel_multi_index(idx, shape)


def test_row_major_formula():
    B, C, H, W = 2, 3, 4, 5
    assert flat_index((1, 2, 3, 4), (B, C, H, W)) == ((1 * C + 2) * H + 3) * W + 4


@given(hnp.arrays(np.float32, shapes, elements=st.floats(-100, 100, width=32)))
def test_mean_is_sum_over_numel(a):
    t = Tensor(a)
    m = reduce("mean", t).numpy()[0]
    s = reduce("sum", t).numpy()[0] / t.numel
    assert m == pytest.approx(s, rel=1e-6, abs=1e-6)


def test_he_normal_moments():
    w = init_weights("he_normal", [16, 1, 3, 3], Rng(0)).numpy()
    assert w.shape == (16, 1, 3, 3)
    big = np.concatenate([init_weights("he_normal", [16, 1, 3, 3], Rng(0).stream("m", i)).numpy().ravel()
                          for i in range(700)])
    assert big.size >= 10**5
    assert abs(big.std() / np.sqrt(2 / 9) - 1) < 0.2
    assert abs(big.mean()) < 0.01


def test_glorot_uniform_bound():
    w = init_weights("glorot_uniform", [8, 8, 3, 3], Rng(3), np.float64).numpy()
    bound = np.sqrt(6 / (72 + 72))
    assert np.abs(w).max() <= bound
    assert np.abs(w).max() > 0.9 * bound


def test_zeros_scheme_and_determinism():
    assert not init_weights("zeros", [4, 2, 3, 3], Rng(1)).numpy().any()
    a = init_weights("he_normal", [4, 2, 3, 3], Rng(42)).numpy()
    b = init_weights("he_normal", [4, 2, 3, 3], Rng(42)).numpy()
    assert a.tobytes() == b.tobytes()
    with pytest.raises(ValueError):
        init_weights("orthogonal", [2, 2], Rng(0))


def test_rng_streams_are_independent_of_consumption():
    r = Rng(5)
    first = r.stream("a", 1).normal(size=3)
    r.stream("b").normal(size=1000)
    assert np.array_equal(first, Rng(5).stream("a", 1).normal(size=3))
    assert not np.array_equal(first, Rng(5).stream("a", 2).normal(size=3))
    assert not np.array_equal(first, Rng(6).stream("a", 1).normal(size=3))


@given(hnp.arrays(st.sampled_from([np.float32, np.float64]), shapes,
                  elements=st.floats(allow_nan=False, width=32)))
def test_sgt_round_trip(a):
    buf = encode_sgt(a)
    t, end = decode_sgt(buf)
    assert end == len(buf)
    assert t.dtype == a.dtype and t.shape == a.shape
    assert t.numpy().tobytes() == a.tobytes()


def test_sgt_layout_and_file(tmp_path):
    a = np.arange(6, dtype=np.float32).reshape(2, 3)
    buf = encode_sgt(a)
    assert buf[:4] == b"SGT1" and buf[4] == 0 and buf[5] == 2
    assert int.from_bytes(buf[6:10], "little") == 2 and int.from_bytes(buf[10:14], "little") == 3
    assert len(buf) == 14 + 6 * 4
    save_sgt(tmp_path / "a.sgt", a)
    assert (tmp_path / "a.sgt").read_bytes() == buf
    assert load_sgt(tmp_path / "a.sgt") == Tensor(a)
    with pytest.raises(ValueError):
        decode_sgt(b"XXXX" + buf[4:])
    with pytest.raises(ValueError):
        decode_sgt(buf[:-1])
