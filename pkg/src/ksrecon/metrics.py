"""Image quality measures and the composite training loss.

The similarity measures use global per-image statistics: one mean, one
variance and one covariance per image (population form, divisor N). The
dissimilarity index is

    dssim = 1/2 - (2*mu_y*mu_yh + c1) * (2*cov + c2)
                  / (2 * (mu_y^2 + mu_yh^2 + c1) * (var_y + var_yh + c2))

with ssim = 1 - 2 * dssim, so dssim is 0 exactly when ssim is 1. The
stabilizing constants default to c1 = (0.01 L)^2 and c2 = (0.03 L)^2 for
dynamic range L = 1.

A sliding-window variant (11x11 Gaussian, sigma 1.5) is provided for
evaluation output only; the training loss always uses the global form.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T

__all__ = [
    "MetricReport",
    "SsimConstants",
    "composite_loss",
    "dssim",
    "mse",
    "psnr",
    "ssim",
    "ssim_windowed",
]


@dataclass(frozen=True)
class SsimConstants:
    dynamic_range: float = 1.0
    c1: float = 1e-4
    c2: float = 9e-4

    @staticmethod
    def for_range(dynamic_range: float) -> "SsimConstants":
        return SsimConstants(
            dynamic_range=dynamic_range,
            c1=(0.01 * dynamic_range) ** 2,
            c2=(0.03 * dynamic_range) ** 2,
        )


DEFAULT_CONSTANTS = SsimConstants()


def _check_shapes(y: np.ndarray, yhat: np.ndarray):
    if y.shape != yhat.shape:
        raise ValueError(f"shape mismatch: {y.shape} vs {yhat.shape}")


def mse(y: np.ndarray, yhat: np.ndarray) -> float:
    """Mean squared difference over all pixels."""
    _check_shapes(y, yhat)
    d = np.asarray(y, dtype=np.float64) - np.asarray(yhat, dtype=np.float64)
    return float(np.mean(d * d))


def dssim(y: np.ndarray, yhat: np.ndarray, consts: SsimConstants = DEFAULT_CONSTANTS) -> float:
    """Structural dissimilarity from global image statistics, in [0, 1]."""
    _check_shapes(y, yhat)
    a = np.asarray(y, dtype=np.float64)
    b = np.asarray(yhat, dtype=np.float64)
    mu_a, mu_b = a.mean(), b.mean()
    var_a, var_b = a.var(), b.var()
    cov = ((a - mu_a) * (b - mu_b)).mean()
    num = (2.0 * mu_a * mu_b + consts.c1) * (2.0 * cov + consts.c2)
    den = 2.0 * (mu_a * mu_a + mu_b * mu_b + consts.c1) * (var_a + var_b + consts.c2)
    return 0.5 - num / den


def ssim(y: np.ndarray, yhat: np.ndarray, consts: SsimConstants = DEFAULT_CONSTANTS) -> float:
    return 1.0 - 2.0 * dssim(y, yhat, consts)


def psnr(y: np.ndarray, yhat: np.ndarray, dynamic_range: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; +inf for identical images."""
    err = mse(y, yhat)
    if err == 0.0:
        return math.inf
    return 10.0 * math.log10(dynamic_range * dynamic_range / err)


def _gaussian_kernel(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    half = (size - 1) / 2.0
    x = np.arange(size) - half
    k = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return k / k.sum()


def ssim_windowed(
    y: np.ndarray,
    yhat: np.ndarray,
    consts: SsimConstants = DEFAULT_CONSTANTS,
    window: int = 11,
    sigma: float = 1.5,
) -> float:
    """Mean of the local similarity map over valid 11x11 Gaussian windows."""
    _check_shapes(y, yhat)
    if min(y.shape) < window:
        raise ValueError(f"image {y.shape} smaller than the {window}x{window} window")
    a = np.asarray(y, dtype=np.float64)
    b = np.asarray(yhat, dtype=np.float64)
    k = _gaussian_kernel(window, sigma)

    def smooth(img):
        tmp = np.apply_along_axis(lambda r: np.convolve(r, k, mode="valid"), 1, img)
        return np.apply_along_axis(lambda c: np.convolve(c, k, mode="valid"), 0, tmp)

    mu_a = smooth(a)
    mu_b = smooth(b)
    var_a = smooth(a * a) - mu_a * mu_a
    var_b = smooth(b * b) - mu_b * mu_b
    cov = smooth(a * b) - mu_a * mu_b
    num = (2.0 * mu_a * mu_b + consts.c1) * (2.0 * cov + consts.c2)
    den = (mu_a**2 + mu_b**2 + consts.c1) * (var_a + var_b + consts.c2)
    return float((num / den).mean())


@dataclass
class MetricReport:
    """Per-image quality summary; serializes to one JSON object."""

    id: str
    mse: float
    ssim: float
    dssim: float
    psnr: float

    def to_json(self) -> str:
        return json.dumps(
            {"id": self.id, "mse": self.mse, "ssim": self.ssim,
             "dssim": self.dssim, "psnr": self.psnr}
        )

    @staticmethod
    def from_images(id: str, y: np.ndarray, yhat: np.ndarray,
                    consts: SsimConstants = DEFAULT_CONSTANTS) -> "MetricReport":
        d = dssim(y, yhat, consts)
        return MetricReport(
            id=id,
            mse=mse(y, yhat),
            ssim=1.0 - 2.0 * d,
            dssim=d,
            psnr=psnr(y, yhat, consts.dynamic_range),
        )


def composite_loss(y, yhat: T.Tensor, consts: SsimConstants = DEFAULT_CONSTANTS) -> T.Tensor:
    """MSE plus batch-mean DSSIM as a differentiable scalar.

    ``y`` is the (B, C, H, W) target batch (array or Tensor, no gradient
    needed); ``yhat`` the prediction participating in the graph. The MSE
    term averages over all elements; the DSSIM term evaluates the global
    statistics per image and averages over the batch, so the loss scale is
    independent of the batch size.
    """
    target = y if isinstance(y, T.Tensor) else T.Tensor(y)
    if target.data.shape != yhat.data.shape:
        raise ValueError(f"shape mismatch: {target.data.shape} vs {yhat.data.shape}")
    if target.data.ndim != 4:
        raise ValueError(f"composite_loss expects (B, C, H, W), got {target.data.shape}")

    diff = yhat - target
    mse_term = (diff * diff).mean()

    axes = (1, 2, 3)
    mu_y = target.mean(axis=axes, keepdims=True)
    mu_h = yhat.mean(axis=axes, keepdims=True)
    dy = target - mu_y
    dh = yhat - mu_h
    var_y = (dy * dy).mean(axis=axes, keepdims=True)
    var_h = (dh * dh).mean(axis=axes, keepdims=True)
    cov = (dy * dh).mean(axis=axes, keepdims=True)
    num = (2.0 * mu_y * mu_h + consts.c1) * (2.0 * cov + consts.c2)
    den = 2.0 * (mu_y * mu_y + mu_h * mu_h + consts.c1) * (var_y + var_h + consts.c2)
    dssim_term = (0.5 - num / den).mean()

    return mse_term + dssim_term
