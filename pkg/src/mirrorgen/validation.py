"""Input validation helpers shared by the estimators and functional APIs."""

import numpy as np


class ShapeError(ValueError):
    """Array shapes are inconsistent with each other or with a contract."""


class EmptyMaskError(ValueError):
    """A mask that must select at least one pixel is empty."""


class NonFiniteError(ValueError):
    """An array contains NaN (or other disallowed non-finite values)."""


def check_image(img, patch_factor=None, name="image"):
    """Return ``img`` as a float64 array of shape (H, W, 3) or (N, H, W, 3)."""
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim not in (3, 4) or arr.shape[-1] != 3:
        raise ShapeError(f"{name} must have shape (H, W, 3) or (N, H, W, 3), got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{name} contains non-finite values")
    if patch_factor is not None:
        h, w = arr.shape[-3], arr.shape[-2]
        if h % patch_factor or w % patch_factor:
            raise ShapeError(
                f"{name} dimensions {h}x{w} are not divisible by patch factor {patch_factor}"
            )
    return arr


def check_mask(mask, shape=None, name="mask"):
    """Return a boolean (H, W) mask; accepts {0,1}, {0,255} or bool input."""
    arr = np.asarray(mask)
    if arr.ndim == 3 and arr.shape[-1] == 1:
        arr = arr[..., 0]
    if arr.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {arr.shape}")
    if arr.dtype != bool:
        values = np.unique(arr)
        if not np.all(np.isin(values, (0, 1, 255))):
            raise ValueError(f"{name} is not binary (values {values[:8]})")
        arr = arr > 0
    if shape is not None and arr.shape != tuple(shape):
        raise ShapeError(f"{name} shape {arr.shape} does not match {tuple(shape)}")
    return arr


def check_same_shape(a, b, names=("a", "b")):
    if np.shape(a) != np.shape(b):
        raise ShapeError(f"{names[0]} shape {np.shape(a)} != {names[1]} shape {np.shape(b)}")
