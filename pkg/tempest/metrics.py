import logging
import math
from dataclasses import dataclass
from typing import Dict, List, Optional

import numpy as np
from scipy import ndimage

from tempest.errors import InvalidArgumentError

logger = logging.getLogger(__name__)

SSIM_WINDOW = 7
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
UCE_BINS = 10


def _pair(x: np.ndarray, x_hat: np.ndarray):
    x = np.asarray(x, dtype=float)
    x_hat = np.asarray(x_hat, dtype=float)
    if x.shape != x_hat.shape:
        raise InvalidArgumentError(f"shapes differ: {x.shape} vs {x_hat.shape}")
    return x, x_hat


def psnr(x: np.ndarray, x_hat: np.ndarray, peak: float = 1.0) -> float:
    """
    Peak signal-to-noise ratio in dB; identical images give +inf.
    """
    x, x_hat = _pair(x, x_hat)
    err = float(np.mean((x - x_hat) ** 2))
    if err == 0.0:
        return math.inf
    return 10.0 * math.log10(peak ** 2 / err)


def ssim(x: np.ndarray, x_hat: np.ndarray, data_range: float = 1.0) -> float:
    """
    Mean structural similarity over 7x7 Gaussian windows (sigma 1.5).

    Args:
        x: Reference image
        x_hat: Test image
        data_range: Dynamic range of the pixel values

    Returns:
        Mean SSIM in [-1, 1]
    """
    x, x_hat = _pair(x, x_hat)
    if min(x.shape) < SSIM_WINDOW:
        raise InvalidArgumentError(f"SSIM needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {x.shape}")
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    radius = SSIM_WINDOW // 2

    def blur(image: np.ndarray) -> np.ndarray:
        return ndimage.gaussian_filter(image, SSIM_SIGMA, truncate=radius / SSIM_SIGMA, mode="reflect")

    mu_x, mu_y = blur(x), blur(x_hat)
    var_x = blur(x * x) - mu_x ** 2
    var_y = blur(x_hat * x_hat) - mu_y ** 2
    cov = blur(x * x_hat) - mu_x * mu_y
    numerator = (2 * mu_x * mu_y + c1) * (2 * cov + c2)
    denominator = (mu_x ** 2 + mu_y ** 2 + c1) * (var_x + var_y + c2)
    # Only windows that lie fully inside the image are scored.
    valid = (slice(radius, x.shape[0] - radius), slice(radius, x.shape[1] - radius))
    return float(np.mean((numerator / denominator)[valid]))


@dataclass
class CalibrationBin:
    index: int
    count: int
    mean_error: float
    mean_uncertainty: float


def calibration_bins(sq_error: np.ndarray, uncertainty: np.ndarray, n_bins: int = UCE_BINS) -> List[CalibrationBin]:
    """
    Partition pixels into equal-width uncertainty bins over [0, max(uncertainty)].

    Empty bins are omitted. When every uncertainty is zero all pixels share a single bin.
    """
    sq_error, uncertainty = _pair(sq_error, uncertainty)
    if n_bins < 1:
        raise InvalidArgumentError(f"need at least one bin, got {n_bins}")
    if np.any(uncertainty < 0):
        raise InvalidArgumentError("uncertainty must be non-negative")
    err, unc = sq_error.ravel(), uncertainty.ravel()
    top = unc.max() if unc.size else 0.0
    if top == 0.0:
        index = np.zeros(unc.size, dtype=int)
    else:
        index = np.minimum((unc / top * n_bins).astype(int), n_bins - 1)
    bins = []
    for k in range(n_bins):
        members = index == k
        count = int(members.sum())
        if count:
            bins.append(CalibrationBin(k, count, float(err[members].mean()), float(unc[members].mean())))
    return bins


def uce(sq_error: np.ndarray, uncertainty: np.ndarray, n_bins: int = UCE_BINS, scale: bool = False) -> float:
    """
    Uncertainty calibration error: sum over bins of |B_k| / m * |err(B_k) - uncert(B_k)|.

    Args:
        sq_error: Per-pixel squared error of the predictive mean
        uncertainty: Per-pixel predictive variance
        n_bins: Number of equal-width bins
        scale: Report x100

    Returns:
        UCE
    """
    bins = calibration_bins(sq_error, uncertainty, n_bins)
    total = sum(b.count for b in bins)
    value = sum(b.count / total * abs(b.mean_error - b.mean_uncertainty) for b in bins)
    return 100.0 * value if scale else value


def metrics_row(
    reconstruction: np.ndarray,
    gt: Optional[np.ndarray],
    uncertainty: Optional[np.ndarray],
    uce_scale: bool = False,
) -> Dict[str, float]:
    """Metrics for one run; PSNR/SSIM need a ground truth and UCE needs both."""
    row: Dict[str, float] = {}
    if gt is None:
        return row
    row["psnr"] = psnr(gt, reconstruction)
    row["ssim"] = ssim(gt, reconstruction)
    if uncertainty is not None:
        row["uce"] = uce((np.asarray(gt) - reconstruction) ** 2, uncertainty, scale=uce_scale)
    return row
