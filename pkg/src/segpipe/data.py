"""Dataset manifests, batching, volume grouping and synthetic segmentation tasks.

Manifest (``manifest.json``, paths relative to the manifest's directory)::

    {
      "split": "train",
      "void_label": 255,
      "class_map": {"0": "background", "1": "foreground"},
      "records": [
        {"image": "images/0000.sgt", "mask": "masks/0000.sgt",
         "volume_id": null, "slice_index": null}
      ]
    }

Images are used as raw intensities: nothing here rescales or standardises.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from . import augment as aug
from .losses import VOID
from .tensor import Rng, atomic_write, load_sgt, save_sgt

PAD_MULTIPLE = 32


@dataclass
class SampleRecord:
    image: np.ndarray            # [1, H, W] float32, padded
    mask: np.ndarray | None      # [1, H, W] uint8, padded with void
    volume_id: str | None = None
    slice_index: int | None = None
    original_hw: tuple[int, int] = (0, 0)
    name: str = ""


def pad_to_multiple(image: np.ndarray, mask: np.ndarray | None, multiple: int = PAD_MULTIPLE):
    """Pad [1,H,W] arrays at the bottom/right: edge replication for the image, void for the mask."""
    h, w = image.shape[-2:]
    ph, pw = (-h) % multiple, (-w) % multiple
    if not (ph or pw):
        return image, mask
    spec = ((0, 0), (0, ph), (0, pw))
    image = np.pad(image, spec, mode="edge")
    if mask is not None:
        mask = np.pad(mask, spec, mode="constant", constant_values=VOID)
    return image, mask


def crop_back(pred: np.ndarray, original_hw: tuple[int, int]) -> np.ndarray:
    h, w = original_hw
    return pred[..., :h, :w]


def _as_chw(arr: np.ndarray) -> np.ndarray:
    if arr.ndim == 2:
        return arr[None]
    if arr.ndim == 3 and arr.shape[0] == 1:
        return arr
    if arr.ndim == 4 and arr.shape[:2] == (1, 1):
        return arr[0]
    raise ValueError(f"expected a single-channel 2D image, got shape {arr.shape}")


class Dataset(Sequence):
    """Lazily loaded records of one manifest, in listed order."""

    def __init__(self, manifest_path, pad_multiple: int = PAD_MULTIPLE, cache: bool = True):
        self.path = Path(manifest_path)
        with open(self.path) as fh:
            doc = json.load(fh)
        if not isinstance(doc, dict) or not isinstance(doc.get("records"), list):
            raise ValueError(f"{self.path}: manifest must be an object with a 'records' list")
        unknown = set(doc) - {"split", "void_label", "class_map", "records"}
        if unknown:
            raise ValueError(f"{self.path}: unknown manifest keys {sorted(unknown)}")
        self.split = doc.get("split")
        self.void_label = int(doc.get("void_label", VOID))
        if self.void_label != VOID:
            raise ValueError(f"void label is fixed at {VOID}")
        self.class_map = {int(k): v for k, v in doc.get("class_map", {"0": "background", "1": "foreground"}).items()}
        self.records = []
        root = self.path.parent
        for i, rec in enumerate(doc["records"]):
            extra = set(rec) - {"image", "mask", "volume_id", "slice_index"}
            if "image" not in rec or extra:
                raise ValueError(f"{self.path}: bad record {i}: {rec}")
            img = root / rec["image"]
            msk = root / rec["mask"] if rec.get("mask") else None
            for p in (img, msk):
                if p is not None and not p.exists():
                    raise FileNotFoundError(p)
            self.records.append((img, msk, rec.get("volume_id"), rec.get("slice_index")))
        self.pad_multiple = pad_multiple
        self._cache = {} if cache else None

    def __len__(self) -> int:
        return len(self.records)

    def __getitem__(self, i):
        if isinstance(i, slice):
            return [self[j] for j in range(*i.indices(len(self)))]
        if self._cache is not None and i in self._cache:
            return self._cache[i]
        img_path, msk_path, vol, sl = self.records[i]
        image = _as_chw(load_sgt(img_path).data).astype(np.float32)
        mask = None
        if msk_path is not None:
            raw = _as_chw(load_sgt(msk_path).data)
            if raw.shape != image.shape:
                raise ValueError(f"{msk_path}: mask extents {raw.shape} != image extents {image.shape}")
            allowed = set(self.class_map) | {VOID}
            labels = set(np.unique(raw).tolist())
            if not labels <= allowed or np.any(raw != np.round(raw)):
                raise ValueError(f"{msk_path}: unknown labels {sorted(labels - allowed)}")
            mask = raw.astype(np.uint8)
        hw = image.shape[-2:]
        image, mask = pad_to_multiple(image, mask, self.pad_multiple)
        rec = SampleRecord(image, mask, vol, sl, (int(hw[0]), int(hw[1])), img_path.stem)
        if self._cache is not None:
            self._cache[i] = rec
        return rec

    @property
    def has_masks(self) -> bool:
        return all(r[1] is not None for r in self.records)


def load_dataset(manifest_path, pad_multiple: int = PAD_MULTIPLE) -> Dataset:
    return Dataset(manifest_path, pad_multiple)


class Subset(Sequence):
    def __init__(self, base: Sequence, indices):
        self.base = base
        self.indices = list(indices)

    def __len__(self):
        return len(self.indices)

    def __getitem__(self, i):
        return self.base[self.indices[i]]


def batch_iterator(dataset: Sequence[SampleRecord], batch_size: int, shuffle: bool = True,
                   augment: aug.AugmentConfig | None = None, rng: Rng | None = None,
                   epoch: int = 0) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Yield (images [B,1,h,w] float32, masks [B,1,h,w] uint8); the last batch may be short.

    The permutation and every sample's augmentation come from substreams of
    ``rng`` keyed by epoch (and sample position), so runs are reproducible and
    epochs differ.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    rng = rng or Rng(0)
    n = len(dataset)
    order = rng.stream("shuffle", epoch).permutation(n) if shuffle else np.arange(n)
    for start in range(0, n, batch_size):
        imgs, msks = [], []
        for pos in order[start:start + batch_size]:
            rec = dataset[int(pos)]
            if rec.mask is None:
                raise ValueError(f"sample {rec.name!r} has no mask; cannot train on it")
            img, msk = rec.image, rec.mask
            if augment is not None:
                img, msk = aug.apply(img, msk, augment, rng.stream(f"augment/{epoch}", int(pos)))
            imgs.append(img)
            msks.append(msk)
        yield np.stack(imgs).astype(np.float32), np.stack(msks)


def group_slices_to_volume(predictions: Sequence[np.ndarray], provenance: Sequence[tuple]) -> dict[str, np.ndarray]:
    """Stack per-slice maps into {volume_id: [D,H,W]} in slice-index order."""
    groups: dict[str, list] = {}
    for pred, (vol, idx) in zip(predictions, provenance):
        pred = np.asarray(pred)
        if pred.ndim == 3:
            pred = pred[0]
        groups.setdefault(vol, []).append((int(idx), pred))
    out = {}
    for vol, items in groups.items():
        items.sort(key=lambda t: t[0])
        idx = [i for i, _ in items]
        if idx != list(range(idx[0], idx[0] + len(idx))):
            raise ValueError(f"volume {vol!r}: slice indices {idx} are not contiguous")
        out[vol] = np.stack([p for _, p in items])
    return out


def write_manifest(path, records: list[dict], split: str | None = None, class_map=None) -> None:
    doc = {"split": split, "void_label": VOID,
           "class_map": class_map or {"0": "background", "1": "foreground"}, "records": records}
    atomic_write(path, (json.dumps(doc, indent=2) + "\n").encode())


# ---------------------------------------------------------------------------
# synthetic tasks


@dataclass
class SyntheticTaskCfg:
    shape: str = "disks"  # disks | membranes
    size: int = 64
    count: int = 8
    intensity_range: tuple[float, float] = (0.0, 200.0)
    background_level: tuple[float, float] = (20.0, 60.0)
    foreground_level: tuple[float, float] = (140.0, 180.0)
    noise_sigma: float = 15.0
    texture: float = 10.0
    n_disks: tuple[int, int] = (1, 3)
    radius: tuple[float, float] = (0.08, 0.2)  # fraction of image size
    cells: int = 10
    membrane_width: float = 2.0
    seed: int = 0
    splits: dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        if self.shape not in ("disks", "membranes"):
            raise ValueError(f"unknown synthetic shape {self.shape!r}")
        if self.size < 8 or self.count < 1:
            raise ValueError("synthetic size must be >= 8 and count >= 1")
        lo, hi = self.intensity_range
        if not lo < hi:
            raise ValueError("intensity_range must be increasing")
        for name in ("background_level", "foreground_level"):
            a, b = getattr(self, name)
            if not lo <= a <= b <= hi:
                raise ValueError(f"{name} must lie inside intensity_range")
        if self.noise_sigma < 0 or self.texture < 0:
            raise ValueError("noise_sigma and texture must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)


def _smooth_field(rng: Rng, size: int, amplitude: float) -> np.ndarray:
    from scipy import ndimage

    f = ndimage.gaussian_filter(rng.standard_normal((size, size)), sigma=size / 10, mode="wrap")
    f /= f.std() or 1.0
    return amplitude * f


def _disks(cfg: SyntheticTaskCfg, rng: Rng, clean: bool):
    n = cfg.size
    yy, xx = np.mgrid[:n, :n] + 0.5
    coverage = np.zeros((n, n))
    geometry = []
    for _ in range(int(rng.integers(cfg.n_disks[0], cfg.n_disks[1] + 1))):
        r = rng.uniform(*cfg.radius) * n
        cy, cx = rng.uniform(r, n - r, size=2)
        d = np.hypot(yy - cy, xx - cx)
        cov = (d <= r).astype(float) if clean else np.clip(r - d + 0.5, 0, 1)
        coverage = np.maximum(coverage, cov)
        geometry.append((cy, cx, r))
    mask = (coverage >= 0.5).astype(np.uint8)
    return coverage, mask, geometry


def _membranes(cfg: SyntheticTaskCfg, rng: Rng, clean: bool):
    n = cfg.size
    seeds = rng.uniform(0, n, size=(cfg.cells, 2))
    yy, xx = np.mgrid[:n, :n] + 0.5
    d = np.sort(np.hypot(yy[..., None] - seeds[:, 0], xx[..., None] - seeds[:, 1]), axis=-1)
    gap = d[..., 1] - d[..., 0]
    mask = (gap >= cfg.membrane_width).astype(np.uint8)  # cell interior = class 1
    coverage = mask.astype(float) if clean else np.clip((gap - cfg.membrane_width) / 2 + 0.5, 0, 1)
    return coverage, mask, [tuple(s) for s in seeds]


def synthesize(cfg: SyntheticTaskCfg, index: int) -> tuple[np.ndarray, np.ndarray, dict]:
    """One (image [1,H,W] float32, mask [1,H,W] uint8, geometry record)."""
    rng = Rng(cfg.seed).stream(f"synthetic/{cfg.shape}", index)
    clean = cfg.noise_sigma == 0
    maker = _disks if cfg.shape == "disks" else _membranes
    coverage, mask, geometry = maker(cfg, rng, clean)
    bg = rng.uniform(*cfg.background_level)
    fg = rng.uniform(*cfg.foreground_level)
    img = bg + coverage * (fg - bg)
    if not clean:
        img = img + _smooth_field(rng, cfg.size, cfg.texture) * (1 - coverage)
        img = img + rng.normal(0, cfg.noise_sigma, size=img.shape)
    img = np.clip(img, *cfg.intensity_range)
    info = {"index": index, "background": float(bg), "foreground": float(fg), "geometry": geometry,
            "foreground_fraction": float(mask.mean())}
    return img[None].astype(np.float32), mask[None], info


def generate_synthetic(cfg: SyntheticTaskCfg, out_dir, split: str | None = "train", offset: int = 0) -> Path:
    """Write ``out_dir/{images,masks,manifest.json}``; return the manifest path."""
    out = Path(out_dir)
    try:
        (out / "images").mkdir(parents=True, exist_ok=True)
        (out / "masks").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot write synthetic dataset to {out}: {exc}") from exc
    records, infos = [], []
    for k in range(cfg.count):
        img, mask, info = synthesize(cfg, offset + k)
        name = f"{offset + k:04d}.sgt"
        save_sgt(out / "images" / name, img)
        save_sgt(out / "masks" / name, mask.astype(np.float32))
        records.append({"image": f"images/{name}", "mask": f"masks/{name}", "volume_id": None, "slice_index": None})
        infos.append(info)
    manifest = out / "manifest.json"
    class_map = {"0": "background", "1": "foreground"} if cfg.shape == "disks" else {"0": "membrane", "1": "cell"}
    write_manifest(manifest, records, split, class_map)
    atomic_write(out / "generator.json", (json.dumps({"config": cfg.to_dict(), "samples": infos},
                                                     indent=2, default=float) + "\n").encode())
    return manifest


def generate_splits(cfg: SyntheticTaskCfg, out_dir) -> dict[str, Path]:
    """One dataset directory per split, each with disjoint sample indices."""
    splits = cfg.splits or {"train": cfg.count}
    paths, offset = {}, 0
    for name, count in splits.items():
        sub = SyntheticTaskCfg(**{**cfg.to_dict(), "count": count, "splits": {}})
        paths[name] = generate_synthetic(sub, Path(out_dir) / name, name, offset)
        offset += count
    return paths
