"""Metric kernels: continuous image metrics, categorical map metrics, geodesy.

All kernels are pure numpy and are pinned by brute-force oracles in the test
suite. SSIM uses the standard 11x11 Gaussian window (sigma 1.5) with
k1 = 0.01, k2 = 0.03, evaluated over valid windows only.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.signal import convolve2d
from scipy.stats import wasserstein_distance

EARTH_RADIUS_KM = 6371.0

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


class MetricError(Exception):
    pass


def _check_shapes(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise MetricError(f"shape mismatch: {a.shape} vs {b.shape}")


def mae(a: np.ndarray, b: np.ndarray) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    _check_shapes(a, b)
    return float(np.abs(a - b).mean())


def rmse(a: np.ndarray, b: np.ndarray) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    _check_shapes(a, b)
    return float(np.sqrt(((a - b) ** 2).mean()))


def psnr(a: np.ndarray, b: np.ndarray, data_range: float) -> float:
    """10 log10(range^2 / MSE) in dB; +inf for identical inputs."""
    if data_range <= 0:
        raise MetricError(f"data_range must be positive, got {data_range}")
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    _check_shapes(a, b)
    mse = float(((a - b) ** 2).mean())
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(data_range**2 / mse)


def _gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    r = (size - 1) // 2
    x = np.arange(-r, r + 1, dtype=np.float64)
    g = np.exp(-(x**2) / (2.0 * sigma**2))
    k = np.outer(g, g)
    return k / k.sum()


def ssim(a: np.ndarray, b: np.ndarray, data_range: float) -> float:
    """Mean local SSIM over valid Gaussian windows; channels are averaged."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    _check_shapes(a, b)
    if a.ndim == 3:
        return float(np.mean([ssim(a[c], b[c], data_range) for c in range(a.shape[0])]))
    if a.ndim != 2:
        raise MetricError(f"ssim expects 2D or 3D arrays, got ndim={a.ndim}")
    if min(a.shape) < SSIM_WINDOW:
        raise MetricError(f"image {a.shape} smaller than {SSIM_WINDOW}x{SSIM_WINDOW} window")
    w = _gaussian_window()
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2

    def local_mean(x):
        return convolve2d(x, w, mode="valid")

    mu_a = local_mean(a)
    mu_b = local_mean(b)
    var_a = local_mean(a * a) - mu_a**2
    var_b = local_mean(b * b) - mu_b**2
    cov = local_mean(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    return float((num / den).mean())


def confusion_matrix(pred: np.ndarray, gt: np.ndarray, classes: int) -> np.ndarray:
    pred = np.asarray(pred).ravel()
    gt = np.asarray(gt).ravel()
    if pred.shape != gt.shape:
        raise MetricError("confusion matrix inputs must have equal size")
    for name, arr in (("pred", pred), ("gt", gt)):
        if arr.min() < 0 or arr.max() >= classes:
            raise MetricError(f"{name} classes outside [0, {classes})")
    return np.bincount(gt * classes + pred, minlength=classes * classes).reshape(
        classes, classes
    )


def categorical_metrics(pred: np.ndarray, gt: np.ndarray, classes: int,
                        scores: np.ndarray | None = None) -> dict:
    """Pixel accuracy, IoU family, and F1 from the confusion matrix.

    mIoU and mean F1 average over classes present in GT or prediction;
    frequency-weighted IoU weights by GT class frequency. Top-3 accuracy is
    computed when per-class ``scores`` of shape (K, H, W) are provided.
    """
    cm = confusion_matrix(pred, gt, classes)
    total = cm.sum()
    top1 = float(np.trace(cm)) / total
    gt_count = cm.sum(axis=1)
    pred_count = cm.sum(axis=0)
    tp = np.diag(cm).astype(np.float64)
    union = gt_count + pred_count - tp
    present = union > 0
    iou = np.zeros(classes)
    iou[present] = tp[present] / union[present]
    miou = float(iou[present].mean())
    fw_iou = float((gt_count * iou).sum() / total)
    f1 = np.zeros(classes)
    denom = gt_count + pred_count
    f1[denom > 0] = 2 * tp[denom > 0] / denom[denom > 0]
    mean_f1 = float(f1[present].mean())
    out = {"top1": top1, "miou": miou, "fw_iou": fw_iou, "mean_f1": mean_f1}
    if scores is not None:
        if scores.shape != (classes,) + np.asarray(gt).shape:
            raise MetricError(f"scores shape {scores.shape} does not match")
        order = np.argsort(-scores.reshape(classes, -1), axis=0)[:3]
        hit = (order == np.asarray(gt).ravel()[None, :]).any(axis=0)
        out["top3"] = float(hit.mean())
    return out


def geodesic_km(p: tuple, q: tuple) -> float:
    """Haversine great-circle distance in km; Earth radius 6371.0 km."""
    lat1, lon1 = p
    lat2, lon2 = q
    for lat, lon in ((lat1, lon1), (lat2, lon2)):
        if not -90.0 <= lat <= 90.0 or not -180.0 <= lon <= 180.0:
            raise MetricError(f"coordinates out of range: ({lat}, {lon})")
    phi1, phi2 = math.radians(lat1), math.radians(lat2)
    dphi = math.radians(lat2 - lat1)
    dlam = math.radians(lon2 - lon1)
    h = math.sin(dphi / 2) ** 2 + math.cos(phi1) * math.cos(phi2) * math.sin(dlam / 2) ** 2
    return 2.0 * EARTH_RADIUS_KM * math.asin(min(1.0, math.sqrt(h)))


def geo_stats(errors) -> dict:
    errors = np.asarray(errors, dtype=np.float64)
    if errors.size == 0:
        raise MetricError("no errors to summarize")
    return {
        "median": float(np.median(errors)),
        "mean": float(errors.mean()),
        "std": float(errors.std()),
        "rmse": float(np.sqrt((errors**2).mean())),
    }


def wasserstein_1d(a, b) -> float:
    """1-D Wasserstein distance between two samples."""
    return float(wasserstein_distance(np.asarray(a).ravel(), np.asarray(b).ravel()))
