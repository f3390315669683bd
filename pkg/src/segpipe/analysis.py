"""Per-class intensity histograms before and after the learned pre-processor."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .losses import VOID

STAGES = ("input", "preprocessed")


@dataclass
class StageHistogram:
    stage: str
    cls: int
    edges: np.ndarray
    counts: np.ndarray
    mu: float
    sigma: float
    vmin: float
    vmax: float

    @property
    def n(self) -> int:
        return int(self.counts.sum())


@dataclass
class HistogramReport:
    histograms: list[StageHistogram]
    bins: int
    untrained: bool = False
    notes: list[str] = field(default_factory=list)

    def get(self, stage: str, cls: int) -> StageHistogram:
        for h in self.histograms:
            if h.stage == stage and h.cls == cls:
                return h
        raise KeyError((stage, cls))

    def histogram_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["bin_left", "bin_right", "count", "stage", "class"])
        for h in self.histograms:
            for i, c in enumerate(h.counts):
                w.writerow([repr(float(h.edges[i])), repr(float(h.edges[i + 1])), int(c), h.stage, h.cls])
        return buf.getvalue()

    def summary_csv(self, fit: bool = True) -> str:
        """One row per (stage, class); ``fit=False`` leaves the normal-fit columns empty."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["stage", "class", "count", "mu", "sigma", "min", "max", "untrained"])
        for h in self.histograms:
            mu, sigma = (repr(h.mu), repr(h.sigma)) if fit else ("", "")
            w.writerow([h.stage, h.cls, h.n, mu, sigma, repr(h.vmin), repr(h.vmax),
                        int(self.untrained)])
        return buf.getvalue()


def histogram(values: np.ndarray, bins: int) -> tuple[np.ndarray, np.ndarray]:
    """Histogram over the observed [min, max]; a constant sample lands in one bin."""
    values = np.asarray(values, dtype=np.float64).ravel()
    lo, hi = float(values.min()), float(values.max())
    if lo == hi:
        return np.array([lo, hi]), np.array([values.size])
    counts, edges = np.histogram(values, bins=bins, range=(lo, hi))
    return edges, counts


def analyze_normalization(model, dataset, bins: int = 100, untrained: bool = False,
                          exclude_void: bool = True) -> HistogramReport:
    """Histogram each mask class at the pipeline input and at the pre-processor output.

    Regions to ignore (e.g. outside an organ) are marked void in the masks and
    skipped; ``exclude_void=False`` histograms them as their own class.
    """
    if bins < 1:
        raise ValueError("bins must be >= 1")
    per = {}
    for rec in dataset:
        if rec.mask is None:
            raise ValueError(f"sample {rec.name!r} has no mask; class histograms need masks")
        with ad.no_grad():
            out = model.preprocess(ad.variable(rec.image[None], requires_grad=False), False).value[0]
        if out.shape[0] != 1:
            raise ValueError("pre-processor must output a single channel")
        h, w = rec.original_hw
        m = rec.mask[0, :h, :w]
        stages = {"input": rec.image[0, :h, :w], "preprocessed": out[0, :h, :w]}
        for cls in np.unique(m):
            cls = int(cls)
            if cls == VOID and exclude_void:
                continue
            sel = m == cls
            for stage, arr in stages.items():
                per.setdefault((stage, cls), []).append(arr[sel].astype(np.float64))
    if not per:
        raise ValueError("dataset has no non-void pixels")
    hists = []
    for stage in STAGES:
        for cls in sorted(c for s, c in per if s == stage):
            v = np.concatenate(per[(stage, cls)])
            edges, counts = histogram(v, bins)
            hists.append(StageHistogram(stage, cls, edges, counts, float(v.mean()), float(v.std()),
                                        float(v.min()), float(v.max())))
    notes = ["checkpoint has no training record; histograms describe an untrained pre-processor"] if untrained else []
    return HistogramReport(hists, bins, untrained, notes)
