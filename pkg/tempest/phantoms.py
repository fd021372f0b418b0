"""Synthetic test images for the desk-scale experiments."""

import logging
from typing import Optional, Tuple

import numpy as np
from skimage import data, draw
from skimage.transform import resize

from tempest.errors import InvalidArgumentError
from tempest.helpers import substream
from tempest.schema import PhantomKind, PhantomSpec

logger = logging.getLogger(__name__)

MIN_SIZE = 32
STROKES = 6
STROKE_WIDTH = 1


def disk_radius(size: int) -> int:
    return size * 25 // 64


def shepp_logan(size: int) -> np.ndarray:
    phantom = data.shepp_logan_phantom()
    return np.clip(resize(phantom, (size, size), anti_aliasing=True), 0.0, 1.0)


def disk(size: int) -> np.ndarray:
    """Unit-intensity disk of radius ``disk_radius(size)`` centred in the image."""
    image = np.zeros((size, size))
    centre = (size - 1) / 2.0
    rr, cc = draw.disk((centre, centre), disk_radius(size), shape=image.shape)
    image[rr, cc] = 1.0
    return image


def text_mask(size: int, seed: int) -> np.ndarray:
    """
    Observation mask with thin occluding strokes, like text or hair over an image.

    Returns:
        Array with 1 where pixels are observed and 0 under the strokes
    """
    rng = substream(seed, "corruption")
    mask = np.ones((size, size))
    margin = size // 8
    for _ in range(STROKES):
        r0, c0, r1, c1 = rng.integers(margin, size - margin, size=4)
        rr, cc = draw.line(int(r0), int(c0), int(r1), int(c1))
        for dr in range(-STROKE_WIDTH, STROKE_WIDTH + 1):
            mask[np.clip(rr + dr, 0, size - 1), cc] = 0.0
    return mask


def make_phantom(spec: PhantomSpec) -> Tuple[np.ndarray, Optional[np.ndarray]]:
    """
    Build a phantom and, for the text-mask kind, its paired inpainting mask.

    Args:
        spec: Kind, size and seed

    Returns:
        (image in [0, 1], mask or None)
    """
    if spec.size < MIN_SIZE:
        raise InvalidArgumentError(f"phantom size must be at least {MIN_SIZE}, got {spec.size}")
    if spec.kind == PhantomKind.DISK:
        return disk(spec.size), None
    image = shepp_logan(spec.size)
    if spec.kind == PhantomKind.TEXT_MASK:
        return image, text_mask(spec.size, spec.seed)
    return image, None
