"""
Degradation operators y = F[x] and the classical baselines.

Every linear operator accepts either a 2-D image array or a Tensor whose last
two axes are spatial; tensors stay in the autodiff graph, arrays come back as
arrays. For tensors, the backward pass of each operator is its exact adjoint.
"""

import functools
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence, Tuple, Union

import numpy as np
from scipy import ndimage, sparse

from tempest import tensor_engine as te
from tempest.errors import InvalidArgumentError
from tempest.helpers import substream
from tempest.schema import TaskKind, TaskSpec
from tempest.tensor_engine import Tensor

logger = logging.getLogger(__name__)

ImageLike = Union[np.ndarray, Tensor]


@dataclass
class Sinogram:
    """Line integrals; row i holds the projection at ``angles[i]``."""

    values: np.ndarray
    angles: np.ndarray

    def __post_init__(self):
        if self.values.ndim != 2 or self.values.shape[0] != len(self.angles) or len(self.angles) < 1:
            raise InvalidArgumentError(f"sinogram shape {self.values.shape} does not match {len(self.angles)} angles")
        if not np.all(np.isfinite(self.values)):
            raise InvalidArgumentError("sinogram contains non-finite values")

    @property
    def n_angles(self) -> int:
        return self.values.shape[0]

    @property
    def n_detectors(self) -> int:
        return self.values.shape[1]

    def to_csv(self, path: Union[str, Path]) -> None:
        np.savetxt(path, self.values, delimiter=",", fmt="%.17g")

    @classmethod
    def from_csv(cls, path: Union[str, Path], angles: np.ndarray) -> "Sinogram":
        return cls(np.atleast_2d(np.loadtxt(path, delimiter=",")), np.asarray(angles, dtype=float))


def _as_tensor(x: ImageLike) -> Tuple[Tensor, bool]:
    if isinstance(x, Tensor):
        return x, False
    x = np.asarray(x, dtype=float)
    if x.ndim != 2:
        raise InvalidArgumentError(f"images are 2-D, got shape {x.shape}")
    return Tensor(x), True


def op_identity(x: ImageLike) -> ImageLike:
    return x


def op_downsample_nn(x: ImageLike, factor: int = 4) -> ImageLike:
    """
    Nearest-neighbour downsampling: keep the top-left pixel of each factor x factor block.
    """
    height, width = x.shape[-2:]
    if height % factor or width % factor:
        raise InvalidArgumentError(f"image {height}x{width} is not divisible by {factor}")
    tensor, was_array = _as_tensor(x)
    out = te.stride_select(tensor, factor)
    return out.data if was_array else out


def op_mask(x: ImageLike, m: np.ndarray) -> ImageLike:
    """Zero the occluded pixels (m == 0) so they drop out of the likelihood."""
    m = np.asarray(m, dtype=float)
    if m.shape != tuple(x.shape[-2:]):
        raise InvalidArgumentError(f"mask shape {m.shape} does not match image {x.shape[-2:]}")
    if isinstance(x, Tensor):
        return x * Tensor(np.broadcast_to(m, x.shape).copy())
    return np.asarray(x, dtype=float) * m


@functools.lru_cache(maxsize=16)
def _radon_matrix(size: int, angles: Tuple[float, ...]) -> sparse.csr_matrix:
    centre = (size - 1) / 2.0
    n_steps = int(np.ceil(np.sqrt(2.0) * size)) + 1
    steps = np.arange(n_steps) - (n_steps - 1) / 2.0
    offsets = np.arange(size) - centre
    rows, cols, vals = [], [], []
    ray_ids = np.broadcast_to(np.arange(size)[:, None], (size, n_steps))
    for a, theta in enumerate(angles):
        cos_t, sin_t = np.cos(theta), np.sin(theta)
        col = centre + offsets[:, None] * cos_t - steps[None, :] * sin_t
        row = centre + offsets[:, None] * sin_t + steps[None, :] * cos_t
        r0, c0 = np.floor(row), np.floor(col)
        fr, fc = row - r0, col - c0
        for dr, dc, weight in (
            (0, 0, (1 - fr) * (1 - fc)),
            (0, 1, (1 - fr) * fc),
            (1, 0, fr * (1 - fc)),
            (1, 1, fr * fc),
        ):
            rr, cc = (r0 + dr).astype(int), (c0 + dc).astype(int)
            valid = (rr >= 0) & (rr < size) & (cc >= 0) & (cc < size) & (weight > 0)
            rows.append(a * size + ray_ids[valid])
            cols.append(rr[valid] * size + cc[valid])
            vals.append(weight[valid])
    matrix = sparse.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(len(angles) * size, size * size),
    )
    return matrix.tocsr()


def radon_matrix(size: int, angles: Sequence[float]) -> sparse.csr_matrix:
    """
    Sparse parallel-beam projector.

    Each ray is sampled at unit steps with bilinear interpolation; there are
    ``size`` detectors centred on the image and rotation is about the image centre.
    """
    if len(angles) == 0:
        raise InvalidArgumentError("radon needs at least one angle")
    return _radon_matrix(int(size), tuple(float(a) for a in angles))


def op_radon(x: ImageLike, angles: Sequence[float]) -> Union[Sinogram, Tensor]:
    """
    Parallel-beam Radon transform.

    Args:
        x: Square image (array) or tensor with square trailing axes
        angles: Projection angles in radians

    Returns:
        Sinogram for array input; for tensor input a tensor whose trailing axes are
        [n_angles, size] and whose backward pass is the unfiltered backprojection
    """
    height, width = x.shape[-2:]
    if height != width:
        raise InvalidArgumentError(f"radon needs a square image, got {height}x{width}")
    angles = np.asarray(angles, dtype=float)
    matrix = radon_matrix(height, angles)
    if isinstance(x, Tensor):
        if x.size != height * width:
            raise InvalidArgumentError("radon works on a single image")
        out_shape = tuple(x.shape[:-2]) + (len(angles), height)
        return te.linear_map(x, matrix, out_shape)
    values = matrix @ np.asarray(x, dtype=float).ravel()
    return Sinogram(values.reshape(len(angles), height), angles)


def backproject(values: np.ndarray, angles: np.ndarray, size: int) -> np.ndarray:
    """Smear each projection back across the image with linear interpolation."""
    centre = (size - 1) / 2.0
    coords = np.arange(size) - centre
    xs, ys = np.meshgrid(coords, coords)
    detectors = np.arange(values.shape[1]) - (values.shape[1] - 1) / 2.0
    image = np.zeros((size, size))
    for projection, theta in zip(values, angles):
        t = xs * np.cos(theta) + ys * np.sin(theta)
        image += np.interp(t, detectors, projection, left=0.0, right=0.0)
    return image


def ramp_filter(n_detectors: int) -> np.ndarray:
    """Ram-Lak frequency response on a zero-padded grid of the next power of two."""
    padded = max(64, int(2 ** np.ceil(np.log2(2 * n_detectors))))
    n = np.concatenate((np.arange(1, padded // 2 + 1, 2), np.arange(padded // 2 - 1, 0, -2)))
    kernel = np.zeros(padded)
    kernel[0] = 0.25
    kernel[1::2] = -1.0 / (np.pi * n) ** 2
    return 2.0 * np.real(np.fft.fft(kernel))


def op_fbp(s: Sinogram, angles: Optional[Sequence[float]] = None, size: Optional[int] = None,
           clip: bool = True) -> np.ndarray:
    """
    Filtered back-projection.

    Args:
        s: Sinogram
        angles: Projection angles (defaults to the sinogram's own)
        size: Output side length (defaults to the detector count)
        clip: Clip the result to [0, 1] for scoring

    Returns:
        Reconstructed image
    """
    angles = s.angles if angles is None else np.asarray(angles, dtype=float)
    if len(angles) != s.n_angles:
        raise InvalidArgumentError(f"{len(angles)} angles for a sinogram with {s.n_angles} projections")
    size = size or s.n_detectors
    response = ramp_filter(s.n_detectors)
    padded = np.zeros((s.n_angles, response.size))
    padded[:, :s.n_detectors] = s.values
    filtered = np.real(np.fft.ifft(np.fft.fft(padded, axis=1) * response, axis=1))[:, :s.n_detectors]
    image = backproject(filtered, angles, size) * np.pi / (2 * len(angles))
    return np.clip(image, 0.0, 1.0) if clip else image


def op_upsample_bilinear4x(x: np.ndarray, factor: int = 4) -> np.ndarray:
    """Bilinear upsampling with pixel-centre alignment (align-corners false) and edge clamping."""
    x = np.asarray(x, dtype=float)
    return ndimage.zoom(x, factor, order=1, mode="nearest", grid_mode=True)


def apply_operator(task: TaskSpec, x: ImageLike, mask: Optional[np.ndarray] = None) -> ImageLike:
    """Apply the task's forward operator F (without noise)."""
    if task.kind == TaskKind.DENOISE:
        return op_identity(x)
    if task.kind == TaskKind.SR:
        return op_downsample_nn(x, task.scale)
    if task.kind == TaskKind.INPAINT:
        if mask is None:
            raise InvalidArgumentError("inpainting needs a mask")
        return op_mask(x, mask)
    out = op_radon(x, task.angles())
    return out.values if isinstance(out, Sinogram) else out


def to_log_domain(x: np.ndarray, task: TaskSpec) -> np.ndarray:
    """Map intensities to normalised log intensities in [0, 1]."""
    lo, hi = np.log(task.log_offset), np.log(1.0 + task.log_offset)
    return (np.log(np.asarray(x, dtype=float) + task.log_offset) - lo) / (hi - lo)


def from_log_domain(v: np.ndarray, task: TaskSpec) -> np.ndarray:
    lo, hi = np.log(task.log_offset), np.log(1.0 + task.log_offset)
    return np.exp(np.asarray(v, dtype=float) * (hi - lo) + lo) - task.log_offset


def corrupt(x: np.ndarray, task: TaskSpec, seed: int, mask: Optional[np.ndarray] = None) -> np.ndarray:
    """
    Produce the observation y for a ground-truth image.

    Denoising adds N(0, noise_std^2) (on normalised log intensities when
    ``task.log_domain`` is set); the other tasks apply their operator.

    Args:
        x: Ground truth in [0, 1]
        task: Task description
        seed: Run seed; the "corruption" substream is used
        mask: Observation mask for inpainting

    Returns:
        Observation array (a sinogram's values for CT)
    """
    x = np.asarray(x, dtype=float)
    if task.kind == TaskKind.DENOISE:
        base = to_log_domain(x, task) if task.log_domain else x
        if task.noise_std == 0:
            return base.copy()
        rng = substream(seed, "corruption")
        return base + rng.normal(0.0, task.noise_std, size=x.shape)
    return apply_operator(task, x, mask)


def prepare_ground_truth(image: np.ndarray, size: int, smoothing: float = 1.0) -> np.ndarray:
    """
    Low-noise reference: Gaussian smoothing, then anti-aliased resize to size x size.
    """
    from skimage.transform import resize

    smoothed = ndimage.gaussian_filter(np.asarray(image, dtype=float), smoothing)
    return np.clip(resize(smoothed, (size, size), anti_aliasing=True), 0.0, 1.0)


def baseline(task: TaskSpec, y: np.ndarray) -> Optional[Tuple[str, np.ndarray]]:
    """Classical reconstruction for tasks that have one: FBP for CT, bilinear for SR."""
    if task.kind == TaskKind.CT:
        return "fbp", op_fbp(Sinogram(y, task.angles()))
    if task.kind == TaskKind.SR:
        return "bilinear", np.clip(op_upsample_bilinear4x(y, task.scale), 0.0, 1.0)
    return None
