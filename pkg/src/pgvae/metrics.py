"""Reconstruction and segmentation metrics.

Per-patch values are computed in float64 on numpy arrays; a
:class:`MetricReport` aggregates them by plain means over patches.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import ndimage, signal

RECON_KEYS = ("mse", "mae", "rmse", "psnr", "ssim")
SEG_KEYS = ("dice", "iou", "precision", "recall", "hausdorff")
METRIC_KEYS = RECON_KEYS + SEG_KEYS
HEADERS = {
    "mse": "MSE", "mae": "MAE", "rmse": "RMSE", "psnr": "PSNR (dB)", "ssim": "SSIM",
    "dice": "Dice", "iou": "IoU", "precision": "Precision", "recall": "Recall",
    "hausdorff": "Hausdorff (px)",
}


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


def _as_binary(a, name: str) -> np.ndarray:
    a = np.asarray(a)
    if a.dtype != bool:
        if not np.isin(a, (0, 1)).all():
            raise ValueError(f"{name} is not binary")
        a = a.astype(bool)
    return a


def binarize(probs, threshold: float = 0.5) -> np.ndarray:
    return (np.asarray(probs) > threshold).astype(np.uint8)


def confusion_counts(pred, truth) -> ConfusionCounts:
    p = _as_binary(pred, "pred")
    t = _as_binary(truth, "truth")
    if p.shape != t.shape:
        raise ValueError(f"shape mismatch: {p.shape} vs {t.shape}")
    tp = int(np.count_nonzero(p & t))
    fp = int(np.count_nonzero(p & ~t))
    fn = int(np.count_nonzero(~p & t))
    return ConfusionCounts(tp, fp, fn, p.size - tp - fp - fn)


def _ratio(num: int, den: int, c: ConfusionCounts) -> float:
    if den == 0:
        both_empty = c.tp == 0 and c.fp == 0 and c.fn == 0
        return 1.0 if both_empty else 0.0
    return num / den


def dice(c: ConfusionCounts) -> float:
    return _ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn, c)


def iou(c: ConfusionCounts) -> float:
    return _ratio(c.tp, c.tp + c.fp + c.fn, c)


def precision(c: ConfusionCounts) -> float:
    return _ratio(c.tp, c.tp + c.fp, c)


def recall(c: ConfusionCounts) -> float:
    return _ratio(c.tp, c.tp + c.fn, c)


def _directed(a: np.ndarray, b: np.ndarray) -> float:
    # exact Euclidean distance from every pixel to the nearest b pixel
    dist = ndimage.distance_transform_edt(~b)
    return float(dist[a].max())


def hausdorff(pred, truth) -> float:
    """Symmetric Hausdorff distance between foreground pixel sets, in pixels.

    Exactly one empty mask gives the patch diagonal; two empty masks give 0.
    """
    p = _as_binary(pred, "pred")
    t = _as_binary(truth, "truth")
    if p.shape != t.shape:
        raise ValueError(f"shape mismatch: {p.shape} vs {t.shape}")
    pe, te = not p.any(), not t.any()
    if pe and te:
        return 0.0
    if pe or te:
        return float(math.sqrt(sum(s * s for s in p.shape)))
    return max(_directed(p, t), _directed(t, p))


def _pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def mse_m(a, b) -> float:
    a, b = _pair(a, b)
    return float(np.mean((a - b) ** 2))


def mae_m(a, b) -> float:
    a, b = _pair(a, b)
    return float(np.mean(np.abs(a - b)))


def rmse_m(a, b) -> float:
    return math.sqrt(mse_m(a, b))


def psnr(mse: float, peak: float = 2.0) -> float:
    """10 log10(peak^2 / mse). The default peak is the width of [-1, 1].

    Returns +inf for mse == 0.
    """
    if mse < 0:
        raise ValueError("mse must be non-negative")
    if mse == 0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def _gaussian_window(size: int, sigma: float) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(r ** 2) / (2 * sigma ** 2))
    g /= g.sum()
    return g


def ssim(a, b, window: int = 11, sigma: float = 1.5, k1: float = 0.01, k2: float = 0.03,
         data_range: float = 2.0) -> float:
    """Mean SSIM over all fully contained Gaussian windows (population
    statistics)."""
    a, b = _pair(a, b)
    if a.ndim != 2 or min(a.shape) < window:
        raise ValueError(f"patch {a.shape} smaller than window {window}")
    g = _gaussian_window(window, sigma)
    kernel = np.outer(g, g)

    def filt(x):
        return signal.convolve2d(x, kernel, mode="valid")

    mu_a, mu_b = filt(a), filt(b)
    var_a = filt(a * a) - mu_a ** 2
    var_b = filt(b * b) - mu_b ** 2
    cov = filt(a * b) - mu_a * mu_b
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    s = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / ((mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2))
    return float(s.mean())


def patch_metrics(recon, image, pred_mask, true_mask, peak: float = 2.0) -> dict:
    m = mse_m(recon, image)
    c = confusion_counts(pred_mask, true_mask)
    return {
        "mse": m,
        "mae": mae_m(recon, image),
        "rmse": math.sqrt(m),
        "psnr": psnr(m, peak),
        "ssim": ssim(recon, image, data_range=peak),
        "dice": dice(c),
        "iou": iou(c),
        "precision": precision(c),
        "recall": recall(c),
        "hausdorff": hausdorff(pred_mask, true_mask),
    }


@dataclass
class MetricReport:
    """Per-patch rows plus their means.

    Patches with infinite PSNR (perfect reconstruction) are left out of the
    PSNR mean and counted in ``psnr_inf_count``.
    """

    rows: list
    ratio: Optional[float] = None
    aggregate: dict = field(default_factory=dict)
    psnr_inf_count: int = 0
    samples: list = field(default_factory=list, repr=False)

    def __post_init__(self):
        if not self.aggregate:
            self.aggregate, self.psnr_inf_count = aggregate(self.rows)

    @property
    def n_patches(self) -> int:
        return len(self.rows)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["patch"] + [HEADERS[k] for k in METRIC_KEYS])
        for i, r in enumerate(self.rows):
            w.writerow([i] + [repr(float(r[k])) for k in METRIC_KEYS])
        w.writerow(["mean"] + [repr(float(self.aggregate[k])) for k in METRIC_KEYS])
        return buf.getvalue()


def aggregate(rows) -> tuple[dict, int]:
    if not rows:
        raise ValueError("cannot aggregate zero patches")
    out = {}
    for k in METRIC_KEYS:
        vals = [r[k] for r in rows]
        if k == "psnr":
            finite = [v for v in vals if math.isfinite(v)]
            out[k] = float(np.mean(finite)) if finite else math.inf
        else:
            out[k] = float(np.mean(vals))
    inf_count = sum(1 for r in rows if not math.isfinite(r["psnr"]))
    return out, inf_count
