import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from segpipe import augment as aug
from segpipe.augment import AugmentConfig, WarpConfig
from segpipe.tensor import Rng


def sample(seed=0, size=32):
    r = np.random.default_rng(seed)
    img = r.uniform(0, 200, (1, size, size)).astype(np.float32)
    yy, xx = np.mgrid[:size, :size]
    mask = ((yy - size / 2) ** 2 + (xx - size / 3) ** 2 < (size / 4) ** 2).astype(np.uint8)[None]
    mask[0, :2] = 255
    return img, mask


def test_zero_config_is_identity():
    img, mask = sample()
    cfg = AugmentConfig(crop_size=32, prob=1.0)
    assert cfg.is_identity
    a, m = aug.apply(img, mask, cfg, Rng(0))
    assert np.array_equal(a, img) and np.array_equal(m, mask)


def test_double_hflip_is_identity():
    img, mask = sample(1)
    cfg = AugmentConfig(flip_h=True, prob=1.0)
    a, m = aug.apply(img, mask, cfg, Rng(0))
    assert np.array_equal(a[..., ::-1], img)
    a, m = aug.apply(a, m, cfg, Rng(1))
    assert np.array_equal(a, img) and np.array_equal(m, mask)


def test_vflip():
    img, mask = sample(2)
    a, m = aug.apply(img, mask, AugmentConfig(flip_v=True, prob=1.0), Rng(0))
    assert np.array_equal(a, img[:, ::-1]) and np.array_equal(m, mask[:, ::-1])


def test_rotation_90_permutation():
    img = np.array([[0.0, 1.0], [2.0, 3.0]])
    coords = aug.affine_coords(aug.rotation_matrix(90), (2, 2))
    a, m = aug.warp_pair(img, img.astype(np.uint8), coords, image_order=0)
    assert a.tolist() == [[1, 3], [0, 2]]
    assert m.tolist() == [[1, 3], [0, 2]]


def test_spline_warp_sigma_zero_and_constant():
    img, mask = sample(3)
    a, m = aug.spline_warp(img, mask, 8, 0.0, Rng(0))
    assert np.abs(a - img).max() < 1e-6 and np.array_equal(m, mask)
    const = np.full((1, 32, 32), 7.25, np.float32)
    a, _ = aug.spline_warp(const, None, 8, 5.0, Rng(1))
    assert np.all(a == 7.25)
    with pytest.raises(ValueError):
        aug.spline_warp(img, mask, 1, 1.0, Rng(0))


def test_warp_roughly_preserves_mean():
    yy, xx = np.mgrid[:64, :64]
    smooth = (100 + 50 * np.sin(yy / 9.0) * np.cos(xx / 11.0)).astype(np.float32)[None]
    a, _ = aug.spline_warp(smooth, None, 16, 2.0, Rng(4))
    assert abs(a.mean() / smooth.mean() - 1) < 0.05


full_cfg = st.builds(
    AugmentConfig, flip_h=st.booleans(), flip_v=st.booleans(), shear_max=st.floats(0, 0.5),
    rotation_max=st.floats(0, 45), crop_size=st.sampled_from([None, 16, 24]), crop_foreground=st.booleans(),
    warp=st.builds(WarpConfig, enabled=st.booleans(), grid_spacing=st.integers(4, 16), sigma=st.floats(0, 4)),
    prob=st.floats(0, 1),
)


@given(full_cfg, st.integers(0, 10**6))
def test_labels_closed_and_deterministic(cfg, seed):
    img, mask = sample(seed % 7)
    a, m = aug.apply(img, mask, cfg, Rng(seed))
    assert set(np.unique(m)) <= {0, 1, 255}
    size = cfg.crop_size or 32
    assert a.shape == m.shape == (1, size, size)
    a2, m2 = aug.apply(img, mask, cfg, Rng(seed))
    assert np.array_equal(a, a2) and np.array_equal(m, m2)
    assert img.min() <= a.min() and a.max() <= img.max()


def test_foreground_crop():
    img = np.zeros((1, 64, 64), np.float32)
    mask = np.zeros((1, 64, 64), np.uint8)
    mask[0, 30:33, 30:33] = 1

    def hits(fg):
        cfg = AugmentConfig(crop_size=8, crop_foreground=fg)
        return sum(bool((aug.apply(img, mask, cfg, Rng(s))[1] == 1).any()) for s in range(40))

    assert hits(True) >= 34 and hits(False) <= 10


def test_config_validation():
    with pytest.raises(ValueError):
        AugmentConfig(rotation_max=180)
    with pytest.raises(ValueError):
        AugmentConfig(shear_max=-1)
    with pytest.raises(ValueError):
        aug.apply(*sample(), AugmentConfig(crop_size=64), Rng(0))
    img, mask = sample()
    with pytest.raises(ValueError):
        aug.apply(img, mask[:, :8], AugmentConfig(), Rng(0))
    assert AugmentConfig(warp={"enabled": True}).warp.enabled


def test_shear_matrix_axes():
    assert aug.shear_matrix(0.41, 0).tolist() == [[1, 0.41], [0, 1]]
    assert aug.shear_matrix(0.41, 1).tolist() == [[1, 0], [0.41, 1]]
