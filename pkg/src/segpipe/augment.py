"""Geometric training-time augmentation applied identically to image and mask.

One backward coordinate map is built per sample (flip, rotation and shear
about the image centre, plus an optional elastic displacement field) and
used to resample both arrays once: bilinearly for the image with edge
replication, nearest-neighbour for the mask with void fill. A random crop
follows.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import ndimage

from .losses import VOID


@dataclass
class WarpConfig:
    enabled: bool = False
    grid_spacing: int = 64
    sigma: float = 10.0


@dataclass
class AugmentConfig:
    flip_h: bool = False
    flip_v: bool = False
    shear_max: float = 0.0
    rotation_max: float = 0.0  # degrees
    crop_size: int | None = None
    crop_foreground: bool = False
    warp: WarpConfig = field(default_factory=WarpConfig)
    prob: float = 0.5  # independent probability of each transform
    image_order: int = 1  # 1 bilinear, 0 nearest

    def __post_init__(self):
        if isinstance(self.warp, dict):
            self.warp = WarpConfig(**self.warp)
        if self.shear_max < 0:
            raise ValueError("shear_max must be >= 0")
        if not 0 <= self.rotation_max < 180:
            raise ValueError("rotation_max must be in [0, 180)")
        if not 0 <= self.prob <= 1:
            raise ValueError("prob must be in [0, 1]")
        if self.crop_size is not None and self.crop_size < 1:
            raise ValueError("crop_size must be >= 1")
        if self.warp.grid_spacing < 2 or self.warp.sigma < 0:
            raise ValueError("warp needs grid_spacing >= 2 and sigma >= 0")

    def to_dict(self) -> dict:
        return asdict(self)

    @property
    def is_identity(self) -> bool:
        return not (self.flip_h or self.flip_v or self.shear_max or self.rotation_max
                    or (self.warp.enabled and self.warp.sigma))


def rotation_matrix(degrees: float) -> np.ndarray:
    """Maps output (row, col) offsets to input offsets; positive angles turn the image counter-clockwise."""
    t = np.deg2rad(degrees)
    c, s = np.cos(t), np.sin(t)
    return np.array([[c, s], [-s, c]])


def shear_matrix(k: float, axis: int) -> np.ndarray:
    m = np.eye(2)
    if axis == 0:
        m[0, 1] = k
    else:
        m[1, 0] = k
    return m


def elastic_displacement(shape, grid_spacing: int, sigma: float, rng) -> np.ndarray:
    """Dense [2, H, W] field: N(0, sigma^2) vectors on a coarse grid, cubic-spline interpolated."""
    h, w = shape
    if sigma == 0:
        return np.zeros((2, h, w))
    gh = max(int(np.ceil((h - 1) / grid_spacing)) + 1, 2)
    gw = max(int(np.ceil((w - 1) / grid_spacing)) + 1, 2)
    coarse = rng.normal(0.0, sigma, size=(2, gh, gw))
    rr, cc = np.meshgrid(np.arange(h) / grid_spacing, np.arange(w) / grid_spacing, indexing="ij")
    return np.stack([ndimage.map_coordinates(coarse[i], [rr, cc], order=3, mode="nearest") for i in range(2)])


def _snap(coords: np.ndarray) -> np.ndarray:
    # kill 1e-16 trig residue so exact permutations stay exact
    r = np.round(coords)
    return np.where(np.abs(coords - r) < 1e-9, r, coords)


def warp_pair(image: np.ndarray, mask: np.ndarray | None, coords: np.ndarray, image_order: int = 1):
    """Resample 2D ``image`` / ``mask`` at backward-mapped ``coords`` [2, h, w]."""
    coords = _snap(coords)
    img = ndimage.map_coordinates(image.astype(np.float64), coords, order=image_order, mode="nearest")
    img = img.astype(image.dtype)
    if mask is None:
        return img, None
    h, w = mask.shape
    rr, cc = np.round(coords[0]).astype(np.int64), np.round(coords[1]).astype(np.int64)
    inside = (rr >= 0) & (rr < h) & (cc >= 0) & (cc < w)
    out = np.full(coords.shape[1:], VOID, dtype=mask.dtype)
    out[inside] = mask[rr[inside], cc[inside]]
    return img, out


def spline_warp(image: np.ndarray, mask: np.ndarray | None, grid_spacing: int, sigma: float, rng,
                image_order: int = 1):
    """Elastic deformation alone (identity when sigma is 0)."""
    if grid_spacing < 2 or sigma < 0:
        raise ValueError("spline_warp needs grid_spacing >= 2 and sigma >= 0")
    img2, squeeze = _as2d(image)
    m2 = None if mask is None else _as2d(mask)[0]
    h, w = img2.shape
    base = np.stack(np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij"))
    coords = base + elastic_displacement((h, w), grid_spacing, sigma, rng)
    img, msk = warp_pair(img2, m2, coords, image_order)
    return squeeze(img), (None if msk is None else squeeze(msk))


def _as2d(a: np.ndarray):
    a = np.asarray(a)
    if a.ndim == 2:
        return a, lambda x: x
    if a.ndim == 3 and a.shape[0] == 1:
        return a[0], lambda x: x[None]
    raise ValueError(f"expected [H,W] or [1,H,W], got {a.shape}")


def affine_coords(matrix: np.ndarray, shape) -> np.ndarray:
    """Backward map [2, h, w]: input (row, col) sampled for each output pixel, about the centre."""
    h, w = shape
    centre = np.array([(h - 1) / 2.0, (w - 1) / 2.0])[:, None, None]
    base = np.stack(np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij"))
    return np.einsum("ij,jhw->ihw", matrix, base - centre) + centre


def random_affine(cfg: AugmentConfig, rng) -> np.ndarray:
    m = np.eye(2)
    if cfg.shear_max and rng.random() < cfg.prob:
        m = shear_matrix(rng.uniform(-cfg.shear_max, cfg.shear_max), int(rng.integers(2))) @ m
    if cfg.rotation_max and rng.random() < cfg.prob:
        m = rotation_matrix(rng.uniform(-cfg.rotation_max, cfg.rotation_max)) @ m
    if cfg.flip_v and rng.random() < cfg.prob:
        m = np.diag([-1.0, 1.0]) @ m
    if cfg.flip_h and rng.random() < cfg.prob:
        m = np.diag([1.0, -1.0]) @ m
    return m


def crop_origin(mask: np.ndarray | None, h: int, w: int, size: int, cfg: AugmentConfig, rng) -> tuple[int, int]:
    if size > h or size > w:
        raise ValueError(f"crop {size} larger than transformed extent {h}x{w}")
    r = c = 0
    for _ in range(100 if (cfg.crop_foreground and mask is not None) else 1):
        r = int(rng.integers(h - size + 1))
        c = int(rng.integers(w - size + 1))
        if not cfg.crop_foreground or mask is None or (mask[r:r + size, c:c + size] == 1).any():
            break
    return r, c


def apply(image: np.ndarray, mask: np.ndarray | None, cfg: AugmentConfig, rng):
    """Randomly transform an (image, mask) pair; both [H,W] or [1,H,W]."""
    img2, squeeze = _as2d(image)
    m2 = None if mask is None else _as2d(mask)[0]
    if m2 is not None and m2.shape != img2.shape:
        raise ValueError("image and mask extents differ")
    h, w = img2.shape
    m = random_affine(cfg, rng)
    identity = np.array_equal(m, np.eye(2)) and not (cfg.warp.enabled and cfg.warp.sigma)
    if identity:
        img, msk = img2, m2
    else:
        coords = affine_coords(m, (h, w))
        if cfg.warp.enabled and cfg.warp.sigma and rng.random() < cfg.prob:
            coords = coords + elastic_displacement((h, w), cfg.warp.grid_spacing, cfg.warp.sigma, rng)
        img, msk = warp_pair(img2, m2, coords, cfg.image_order)
    size = cfg.crop_size
    if size is not None and (size, size) != (h, w):
        r, c = crop_origin(msk, h, w, size, cfg, rng)
        img = img[r:r + size, c:c + size]
        msk = None if msk is None else msk[r:r + size, c:c + size]
    img = np.ascontiguousarray(img)
    return squeeze(img), (None if msk is None else squeeze(np.ascontiguousarray(msk)))
