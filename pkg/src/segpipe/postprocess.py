"""Keep only the largest connected foreground structure of a prediction."""
from __future__ import annotations

import numpy as np
from scipy import ndimage

_STRUCTURES = {
    (2, 4): ndimage.generate_binary_structure(2, 1),
    (2, 8): ndimage.generate_binary_structure(2, 2),
    (3, 6): ndimage.generate_binary_structure(3, 1),
    (3, 26): ndimage.generate_binary_structure(3, 3),
}


def largest_component(volume: np.ndarray, threshold: float = 0.5, connectivity: int | None = None) -> np.ndarray:
    """Binarize at ``threshold`` and zero everything but the biggest component.

    ``volume`` is [D,H,W] (connectivity 6 or 26, default 26) or [H,W]
    (4 or 8, default 8). Equal-sized components resolve to the one met first
    in row-major scan order. Returns a uint8 array.
    """
    v = np.asarray(volume)
    if v.ndim not in (2, 3):
        raise ValueError(f"expected [H,W] or [D,H,W], got {v.shape}")
    if not 0 < threshold < 1:
        raise ValueError("threshold must be in (0, 1)")
    if connectivity is None:
        connectivity = 26 if v.ndim == 3 else 8
    key = (v.ndim, connectivity)
    if key not in _STRUCTURES:
        raise ValueError(f"connectivity {connectivity} not valid for a {v.ndim}D input")
    binary = v >= threshold
    labels, n = ndimage.label(binary, structure=_STRUCTURES[key])
    if n == 0:
        return np.zeros(v.shape, dtype=np.uint8)
    sizes = np.bincount(labels.ravel())[1:]
    keep = int(np.argmax(sizes)) + 1  # argmax takes the lowest label on ties
    return (labels == keep).astype(np.uint8)


def component_count(volume: np.ndarray, connectivity: int | None = None) -> int:
    v = np.asarray(volume).astype(bool)
    connectivity = connectivity or (26 if v.ndim == 3 else 8)
    return int(ndimage.label(v, structure=_STRUCTURES[(v.ndim, connectivity)])[1])
