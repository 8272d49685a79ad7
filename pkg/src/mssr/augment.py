"""Flip/rotation transforms and patch cropping."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import SeededRng
from .tensor import Tensor


@dataclass(frozen=True)
class GeometricTransform:
    """Left-right flip, then up-down flip, then a 90 degree counter-clockwise rotation."""

    flip_lr: bool = False
    flip_ud: bool = False
    rot90: bool = False

    def apply(self, image):
        return apply_geometric(self, image)

    def invert(self, image):
        return invert_geometric(self, image)


# the eight ensemble members in order: I0..I3, then r(I0)..r(I3)
ALL_TRANSFORMS = tuple(
    GeometricTransform(lr, ud, rot)
    for rot in (False, True)
    for lr, ud in ((False, False), (True, False), (False, True), (True, True))
)


def _unwrap(image):
    if isinstance(image, Tensor):
        return image.data, True
    return np.asarray(image), False


def _rewrap(arr, was_tensor):
    arr = np.ascontiguousarray(arr)
    return Tensor(arr, dtype=arr.dtype) if was_tensor else arr


def apply_geometric(t: GeometricTransform, image):
    a, wrapped = _unwrap(image)
    if t.flip_lr:
        a = a[..., :, ::-1]
    if t.flip_ud:
        a = a[..., ::-1, :]
    if t.rot90:
        a = np.rot90(a, 1, axes=(-2, -1))
    return _rewrap(a, wrapped)


def invert_geometric(t: GeometricTransform, image):
    a, wrapped = _unwrap(image)
    if t.rot90:
        a = np.rot90(a, -1, axes=(-2, -1))
    if t.flip_ud:
        a = a[..., ::-1, :]
    if t.flip_lr:
        a = a[..., :, ::-1]
    return _rewrap(a, wrapped)


def sample_augmentation(rng: SeededRng) -> GeometricTransform:
    lr, ud, rot = rng.bits(3).tolist()
    return GeometricTransform(lr, ud, rot)


def crop_patch(lr: np.ndarray, hr: np.ndarray, size: int, rng: SeededRng) -> tuple[np.ndarray, np.ndarray]:
    """Same-position ``size`` x ``size`` crops of an equally sized (c, h, w) or (1, c, h, w) pair."""
    if lr.shape != hr.shape:
        raise ValueError(f"LR/HR size mismatch: {lr.shape} vs {hr.shape}")
    h, w = lr.shape[-2:]
    if h < size or w < size:
        raise ValueError(f"image {h}x{w} is smaller than the {size}x{size} patch")
    y = rng.randint(h - size + 1)
    x = rng.randint(w - size + 1)
    return lr[..., y:y + size, x:x + size], hr[..., y:y + size, x:x + size]


def center_crop(image: np.ndarray, size: int) -> np.ndarray:
    h, w = image.shape[-2:]
    size_h, size_w = min(size, h), min(size, w)
    y, x = (h - size_h) // 2, (w - size_w) // 2
    return image[..., y:y + size_h, x:x + size_w]
