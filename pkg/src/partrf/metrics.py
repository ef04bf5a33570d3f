"""Image and segmentation metrics.

mIOU follows the motion-grouping protocol: each predicted part is assigned
the ground-truth label it overlaps most within the first ten frames, then
IoU is accumulated jointly over the whole sequence per ground-truth label
and averaged over object labels (background label 0 is excluded from the
mean by default).
"""

from __future__ import annotations

import warnings

import numpy as np
from scipy import ndimage

PSNR_CAP_DB = 100.0


def psnr(img_a: np.ndarray, img_b: np.ndarray) -> float:
    """Peak signal-to-noise ratio in dB for [0, 1] images; 100 dB cap at MSE 0."""
    a = np.asarray(img_a, dtype=np.float64)
    b = np.asarray(img_b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"psnr shape mismatch: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP_DB
    return min(10.0 * np.log10(1.0 / mse), PSNR_CAP_DB)


def _gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    half = (size - 1) / 2.0
    x = np.arange(size) - half
    g = np.exp(-(x**2) / (2.0 * sigma**2))
    w = np.outer(g, g)
    return w / w.sum()


def ssim(img_a: np.ndarray, img_b: np.ndarray, window: int = 11,
         sigma: float = 1.5, k1: float = 0.01, k2: float = 0.03,
         dynamic_range: float = 1.0) -> float:
    """Windowed structural similarity, averaged over valid windows/channels."""
    a = np.asarray(img_a, dtype=np.float64)
    b = np.asarray(img_b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"ssim shape mismatch: {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a = a[..., None]
        b = b[..., None]
    if a.shape[0] < window or a.shape[1] < window:
        raise ValueError(f"image {a.shape[:2]} smaller than the {window}x{window} window")
    w = _gaussian_window(window, sigma)
    c1 = (k1 * dynamic_range) ** 2
    c2 = (k2 * dynamic_range) ** 2
    margin = window // 2
    scores = []
    for ch in range(a.shape[2]):
        x, y = a[..., ch], b[..., ch]

        def f(img):
            return ndimage.correlate(img, w, mode="constant")[margin:-margin, margin:-margin]

        mu_x, mu_y = f(x), f(y)
        xx = f(x * x) - mu_x**2
        yy = f(y * y) - mu_y**2
        xy = f(x * y) - mu_x * mu_y
        num = (2 * mu_x * mu_y + c1) * (2 * xy + c2)
        den = (mu_x**2 + mu_y**2 + c1) * (xx + yy + c2)
        scores.append(np.mean(num / den))
    return float(np.mean(scores))


def fit_assignment(pred: np.ndarray, gt: np.ndarray, n_frames: int = 10) -> dict[int, int]:
    """Map each predicted part id to the GT label it overlaps most.

    Overlap counts come from the first `n_frames` frames; if fewer frames
    exist, all are used with a warning. Ties break to the lowest GT label.
    """
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"mask shape mismatch: {pred.shape} vs {gt.shape}")
    if pred.shape[0] < n_frames:
        warnings.warn(
            f"only {pred.shape[0]} frames available for label assignment "
            f"(protocol uses {n_frames}); using all frames", stacklevel=2)
        n_frames = pred.shape[0]
    head_pred = pred[:n_frames].reshape(-1)
    head_gt = gt[:n_frames].reshape(-1)
    mapping: dict[int, int] = {}
    for part in np.unique(head_pred):
        if part == 0:
            continue
        sel = head_gt[head_pred == part]
        labels, counts = np.unique(sel, return_counts=True)
        mapping[int(part)] = int(labels[np.argmax(counts)])
    return mapping


def miou(pred: np.ndarray, gt: np.ndarray, n_assign_frames: int = 10,
         include_background: bool = False):
    """Mean IoU after label assignment; jointly accumulated over all frames.

    Args:
        pred: (T, H, W) integer predicted part labels, 0 = background.
        gt: (T, H, W) integer ground-truth labels, 0 = background.
    Returns:
        (mean IoU over labels, {label: IoU}, {part: assigned label}).
    """
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"mask sequence shapes differ: {pred.shape} vs {gt.shape}")
    mapping = fit_assignment(pred, gt, n_assign_frames)
    relabeled = np.zeros_like(gt)
    for part, label in mapping.items():
        relabeled[pred == part] = label

    labels = [int(v) for v in np.unique(gt)]
    if not include_background:
        labels = [v for v in labels if v != 0]
    per_label: dict[int, float] = {}
    for label in labels:
        p = relabeled == label
        g = gt == label
        inter = np.logical_and(p, g).sum()
        union = np.logical_or(p, g).sum()
        per_label[label] = float(inter / union) if union else 0.0
    mean = float(np.mean(list(per_label.values()))) if per_label else 0.0
    return mean, per_label, mapping
