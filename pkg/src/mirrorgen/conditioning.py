"""Depth normalization, latent-resolution resizing and condition assembly."""

from dataclasses import dataclass

import numpy as np
import torch
from sklearn.base import BaseEstimator, TransformerMixin

from . import codec
from .validation import EmptyMaskError, NonFiniteError, ShapeError, check_image, check_mask

DEPTH_DELTA = 0.5
MASK_FILL = 0.5


@dataclass
class NormalizedDepth:
    data: np.ndarray
    d_max: float
    delta: float = DEPTH_DELTA


@dataclass
class ConditionBundle:
    """Conditioning inputs at latent resolution, channels-last.

    ``z_m`` is the encoded masked image, ``x_m`` the resized mirror mask and
    ``x_d`` the resized normalized depth.
    """

    z_m: np.ndarray
    x_m: np.ndarray
    x_d: np.ndarray

    def __post_init__(self):
        hw = self.z_m.shape[:2]
        for name in ("x_m", "x_d"):
            arr = getattr(self, name)
            if arr.ndim == 2:
                arr = arr[..., None]
                setattr(self, name, arr)
            if arr.shape != hw + (1,):
                raise ShapeError(f"{name} shape {arr.shape} does not match latent grid {hw}")

    @property
    def latent_shape(self):
        return self.z_m.shape


def stack_conditions(bundles, dtype=torch.float32):
    """Batch bundles into NCHW tensors ``{'z_m', 'x_m', 'x_d'}``."""
    out = {}
    for key in ("z_m", "x_m", "x_d"):
        arr = np.stack([getattr(b, key) for b in bundles])
        out[key] = torch.from_numpy(np.ascontiguousarray(arr.transpose(0, 3, 1, 2))).to(dtype)
    return out


def normalize_depth(d, m, delta=DEPTH_DELTA):
    """Map first-hit depth to [-1, 1] relative to the farthest mirror pixel.

    Depth is clipped to ``[0, d_max + delta]`` where ``d_max`` is the maximum
    depth over the mirror mask, then rescaled linearly so that 0 maps to -1
    and ``d_max + delta`` maps to +1. ``+inf`` (rays that hit nothing) is
    treated as far and maps to +1; NaN raises.
    """
    d = np.asarray(d, dtype=np.float64)
    if d.ndim != 2:
        raise ShapeError(f"depth must be 2-D, got shape {d.shape}")
    m = check_mask(m, shape=d.shape, name="mirror mask")
    if not m.any():
        raise EmptyMaskError("mirror mask is empty; d_max is undefined")
    if np.isnan(d).any() or np.isneginf(d).any():
        raise NonFiniteError("depth contains NaN or -inf")
    if (d < 0).any():
        raise ValueError("depth must be non-negative")
    on_mirror = d[m]
    if not np.isfinite(on_mirror).all():
        raise NonFiniteError("depth on the mirror mask must be finite")
    d_max = float(on_mirror.max())
    far = d_max + delta
    if far <= 0:
        raise ValueError("d_max + delta must be positive")
    clipped = np.clip(d, 0.0, far)
    out = (clipped / far - 0.5) * 2.0
    return NormalizedDepth(np.clip(out, -1.0, 1.0), d_max, delta)


def resize_to_latent(raster, target_h, target_w, mode="area_mean"):
    """Downsample ``raster`` (H, W) or (H, W, C) by an integer factor."""
    arr = np.asarray(raster, dtype=np.float64)
    h, w = arr.shape[:2]
    if target_h <= 0 or target_w <= 0 or h % target_h or w % target_w:
        raise ShapeError(f"cannot resize {h}x{w} to {target_h}x{target_w}: not an integer factor")
    fy, fx = h // target_h, w // target_w
    if mode == "area_mean":
        blocks = arr.reshape(target_h, fy, target_w, fx, *arr.shape[2:])
        return blocks.mean(axis=(1, 3))
    if mode == "nearest":
        return arr[fy // 2 :: fy, fx // 2 :: fx]
    raise ValueError(f"unknown resize mode {mode!r}")


def masked_image(img, m, fill=MASK_FILL):
    img = check_image(img)
    m = check_mask(m, shape=img.shape[:2])
    out = img.copy()
    out[m] = fill
    return out


def build_condition(img, m, d, patch_factor=codec.DEFAULT_PATCH, mask_mode="area_mean",
                    delta=DEPTH_DELTA):
    """Assemble ``[z_m, x_m, x_d]`` for one image, mirror mask and depth map."""
    img = check_image(img, patch_factor=patch_factor)
    if img.ndim != 3:
        raise ShapeError("build_condition expects a single (H, W, 3) image")
    m = check_mask(m, shape=img.shape[:2], name="mirror mask")
    d = np.asarray(d, dtype=np.float64)
    if d.shape != img.shape[:2]:
        raise ShapeError(f"depth shape {d.shape} does not match image {img.shape[:2]}")
    nd = normalize_depth(d, m, delta)
    z_m = codec.encode(masked_image(img, m), patch_factor)
    hl, wl = z_m.shape[:2]
    x_m = resize_to_latent(m.astype(np.float64), hl, wl, mask_mode)
    x_d = resize_to_latent(nd.data, hl, wl, "area_mean")
    return ConditionBundle(z_m, x_m[..., None], x_d[..., None])


class DepthNormalizer(TransformerMixin, BaseEstimator):
    """Per-sample depth normalization as a transformer.

    ``transform`` takes a sequence of ``(depth, mirror_mask)`` pairs and returns
    the stacked normalized maps. ``d_max`` is computed per sample, so ``fit``
    learns nothing beyond the input resolution.
    """

    def __init__(self, delta=DEPTH_DELTA):
        self.delta = delta

    def fit(self, X, y=None):
        pairs = list(X)
        if not pairs:
            raise ValueError("DepthNormalizer.fit received no samples")
        self.depth_shape_ = np.shape(pairs[0][0])
        return self

    def transform(self, X):
        return np.stack([normalize_depth(d, m, self.delta).data for d, m in X])
