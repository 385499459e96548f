"""Invertible patch codec between pixel space and the diffusion latent space.

Each ``f x f`` pixel patch is folded into the channel axis (space-to-depth) and
values are mapped affinely from [0, 1] to [-1, 1]. A 64x64x3 image becomes a
16x16x48 latent for ``f = 4``.
"""

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from .validation import ShapeError, check_image

DEFAULT_PATCH = 4


def latent_channels(patch_factor=DEFAULT_PATCH):
    return 3 * patch_factor * patch_factor


def encode(img, patch_factor=DEFAULT_PATCH):
    """Map an image (H, W, 3) or batch (N, H, W, 3) in [0, 1] to latents.

    Returns an array of shape (..., H/f, W/f, 3 f^2).
    """
    f = int(patch_factor)
    x = check_image(img, patch_factor=f)
    *lead, h, w, c = x.shape
    x = x.reshape(*lead, h // f, f, w // f, f, c)
    n = len(lead)
    # (..., h/f, w/f, fy, fx, c)
    order = tuple(range(n)) + (n, n + 2, n + 1, n + 3, n + 4)
    x = x.transpose(order).reshape(*lead, h // f, w // f, f * f * c)
    return 2.0 * x - 1.0


def decode(z, patch_factor=DEFAULT_PATCH):
    """Inverse of :func:`encode`; the result is clipped to [0, 1]."""
    f = int(patch_factor)
    z = np.asarray(z, dtype=np.float64)
    if z.ndim not in (3, 4):
        raise ShapeError(f"latent must be 3-D or 4-D, got shape {z.shape}")
    *lead, hl, wl, ch = z.shape
    if ch != latent_channels(f):
        raise ShapeError(f"latent has {ch} channels, expected {latent_channels(f)} for f={f}")
    x = (z + 1.0) * 0.5
    x = x.reshape(*lead, hl, wl, f, f, 3)
    n = len(lead)
    order = tuple(range(n)) + (n, n + 2, n + 1, n + 3, n + 4)
    x = x.transpose(order).reshape(*lead, hl * f, wl * f, 3)
    return np.clip(x, 0.0, 1.0)


class PatchCodec(TransformerMixin, BaseEstimator):
    """Transformer wrapper around :func:`encode` / :func:`decode`.

    Stateless; ``fit`` only validates that the input is divisible by
    ``patch_factor`` and records the input resolution.
    """

    def __init__(self, patch_factor=DEFAULT_PATCH):
        self.patch_factor = patch_factor

    def fit(self, X, y=None):
        x = check_image(X, patch_factor=self.patch_factor)
        self.image_shape_ = x.shape[-3:]
        self.n_latent_channels_ = latent_channels(self.patch_factor)
        return self

    def transform(self, X):
        return encode(X, self.patch_factor)

    def inverse_transform(self, Z):
        return decode(Z, self.patch_factor)
