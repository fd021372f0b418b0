import math

import numpy as np
import pytest

from tempest.errors import InvalidArgumentError
from tempest.metrics import calibration_bins, metrics_row, psnr, ssim, uce


def test_psnr_examples(rng):
    x = rng.uniform(size=(16, 16))
    assert psnr(x, x) == math.inf
    assert psnr(np.zeros((8, 8)), np.full((8, 8), 0.1)) == pytest.approx(20.0, abs=1e-9)


def test_psnr_rejects_mismatched_shapes():
    with pytest.raises(InvalidArgumentError):
        psnr(np.zeros((4, 4)), np.zeros((4, 5)))


def test_ssim_of_identical_images_is_one(rng):
    x = rng.uniform(size=(32, 32))
    assert ssim(x, x) == pytest.approx(1.0, abs=1e-12)


def test_ssim_is_symmetric(rng):
    x, y = rng.uniform(size=(2, 24, 24))
    assert ssim(x, y) == pytest.approx(ssim(y, x), rel=1e-12)


def test_ssim_of_constants_is_the_luminance_term():
    a, b = 0.2, 0.7
    c1 = (0.01) ** 2
    expected = (2 * a * b + c1) / (a * a + b * b + c1)
    assert ssim(np.full((16, 16), a), np.full((16, 16), b)) == pytest.approx(expected, rel=1e-6)


def test_ssim_of_inverted_binary_image_is_negative(rng):
    x = (rng.uniform(size=(32, 32)) > 0.5).astype(float)
    assert ssim(x, 1.0 - x) < 0


def test_ssim_needs_a_full_window():
    with pytest.raises(InvalidArgumentError):
        ssim(np.zeros((6, 6)), np.zeros((6, 6)))


def test_uce_is_zero_for_perfect_calibration(rng):
    err = rng.uniform(size=(20, 20))
    assert uce(err, err) == pytest.approx(0.0, abs=1e-12)


def test_uce_with_a_single_populated_bin():
    assert uce(np.full((4, 4), 0.1), np.full((4, 4), 0.2)) == pytest.approx(0.1, abs=1e-12)
    assert uce(np.full((4, 4), 0.1), np.full((4, 4), 0.2), scale=True) == pytest.approx(10.0, abs=1e-9)


def test_zero_uncertainty_reports_the_mean_error(rng):
    err = rng.uniform(size=(8, 8))
    bins = calibration_bins(err, np.zeros((8, 8)))
    assert len(bins) == 1
    assert uce(err, np.zeros((8, 8))) == pytest.approx(err.mean(), rel=1e-12)


def test_uce_matches_a_histogram_oracle(rng):
    err = rng.uniform(size=400)
    unc = rng.uniform(size=400) ** 2
    counts, edges = np.histogram(unc, bins=10, range=(0.0, unc.max()))
    err_sums, _ = np.histogram(unc, bins=edges, weights=err)
    unc_sums, _ = np.histogram(unc, bins=edges, weights=unc)
    filled = counts > 0
    expected = np.sum(counts[filled] / 400 * np.abs(err_sums[filled] / counts[filled] - unc_sums[filled] / counts[filled]))
    assert uce(err, unc) == pytest.approx(expected, rel=1e-12)
    assert sum(b.count for b in calibration_bins(err, unc)) == 400


@pytest.mark.parametrize("c", [0.5, 2.0, 10.0])
def test_uce_scales_with_its_inputs(c, rng):
    err = rng.uniform(size=(10, 10))
    unc = rng.uniform(size=(10, 10))
    assert uce(c * err, c * unc) == pytest.approx(c * uce(err, unc), rel=1e-12)


def test_empty_bins_are_omitted():
    unc = np.array([0.0, 0.01, 1.0])
    bins = calibration_bins(np.zeros(3), unc)
    assert [b.index for b in bins] == [0, 9]
    assert [b.count for b in bins] == [2, 1]


def test_negative_uncertainty_is_rejected():
    with pytest.raises(InvalidArgumentError):
        uce(np.zeros(3), np.array([0.1, -0.1, 0.2]))


def test_metrics_row(rng):
    gt = rng.uniform(size=(16, 16))
    recon = np.clip(gt + 0.05, 0, 1)
    assert metrics_row(recon, None, None) == {}
    assert set(metrics_row(recon, gt, None)) == {"psnr", "ssim"}
    row = metrics_row(recon, gt, np.full((16, 16), 0.0025))
    assert set(row) == {"psnr", "ssim", "uce"}
    assert row["uce"] >= 0
