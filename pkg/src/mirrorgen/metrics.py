"""Region-restricted image quality metrics and reflection segmentation.

All images are float arrays in [0, 1] with shape (H, W, 3); regions are
boolean (H, W) masks.
"""

import math

import numpy as np
from scipy import ndimage
import torch
import torch.nn.functional as F

from .validation import EmptyMaskError, ShapeError, check_mask, check_same_shape

PSNR_CAP = 100.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
SSIM_MIN_COVERAGE = 0.5


def _region(region, shape):
    if region is None:
        return np.ones(shape[:2], bool)
    return check_mask(region, shape=shape[:2], name="region")


def psnr(a, b, region=None, data_range=1.0):
    """PSNR over pixels in ``region`` (all channels); identical regions give 100 dB."""
    a, b = np.asarray(a, float), np.asarray(b, float)
    check_same_shape(a, b)
    r = _region(region, a.shape)
    if not r.any():
        raise EmptyMaskError("PSNR region is empty")
    mse = float(np.mean((a[r] - b[r]) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(data_range ** 2 / mse))


def gaussian_window(size=SSIM_WINDOW, sigma=SSIM_SIGMA):
    ax = np.arange(size) - (size - 1) / 2
    g = np.exp(-(ax ** 2) / (2 * sigma ** 2))
    w = np.outer(g, g)
    return w / w.sum()


def ssim_map(a, b, region=None, data_range=1.0):
    """Per-window SSIM with statistics weighted by the region mask.

    Returns ``(map, valid)`` over window centres that keep the whole window
    inside the image; ``valid`` marks windows with at least half of their
    Gaussian weight inside the region. Pixels outside the region never
    influence the statistics.
    """
    a, b = np.asarray(a, float), np.asarray(b, float)
    check_same_shape(a, b)
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    r = _region(region, a.shape).astype(float)
    win = gaussian_window()
    half = SSIM_WINDOW // 2
    h, w = r.shape
    if h < SSIM_WINDOW or w < SSIM_WINDOW:
        raise ShapeError(f"image {h}x{w} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window")
    crop = (slice(half, h - half), slice(half, w - half))

    def filt(x):
        return ndimage.correlate(x, win, mode="constant", cval=0.0)[crop]

    cover = filt(r)
    valid = cover >= SSIM_MIN_COVERAGE
    safe = np.where(cover > 0, cover, 1.0)
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    maps = []
    for ch in range(a.shape[2]):
        x, y = a[..., ch], b[..., ch]
        mx, my = filt(r * x) / safe, filt(r * y) / safe
        sxx = filt(r * x * x) / safe - mx * mx
        syy = filt(r * y * y) / safe - my * my
        sxy = filt(r * x * y) / safe - mx * my
        num = (2 * mx * my + c1) * (2 * sxy + c2)
        den = (mx * mx + my * my + c1) * (sxx + syy + c2)
        maps.append(num / den)
    return np.mean(maps, axis=0), valid


def ssim(a, b, region=None, data_range=1.0):
    m, valid = ssim_map(a, b, region, data_range)
    if not valid.any():
        raise EmptyMaskError("region is smaller than one SSIM window")
    return float(np.mean(m[valid]))


class RandomFeaturePerceptual:
    """LPIPS-style distance on a fixed random convolutional feature stack.

    Features from three ReLU conv stages (strides 1, 2, 2) are unit-normalized
    across channels; the distance is the region-weighted spatial mean of the
    squared feature difference, averaged over stages. Inputs are multiplied
    by the region mask (after mapping to [-1, 1]) so pixels outside the region
    cannot leak in through the receptive field.

    This is a surrogate with LPIPS's algebraic properties, not LPIPS.
    """

    def __init__(self, seed=0, widths=(16, 32, 64)):
        g = torch.Generator().manual_seed(seed)
        self.layers = []
        cin = 3
        for i, cout in enumerate(widths):
            wgt = torch.randn(cout, cin, 3, 3, generator=g, dtype=torch.float64)
            wgt *= math.sqrt(2.0 / (cin * 9))
            self.layers.append((wgt, 1 if i == 0 else 2))
            cin = cout

    def features(self, x):
        feats = []
        h = x
        for wgt, stride in self.layers:
            h = F.relu(F.conv2d(h, wgt, stride=stride, padding=1))
            feats.append(h / (h.norm(dim=1, keepdim=True) + 1e-10))
        return feats

    def __call__(self, a, b, region=None):
        a, b = np.asarray(a, float), np.asarray(b, float)
        check_same_shape(a, b)
        r = _region(region, a.shape)
        if not r.any():
            raise EmptyMaskError("perceptual-distance region is empty")
        rt = torch.from_numpy(r.astype(np.float64))[None, None]

        def prep(img):
            t = torch.from_numpy(np.ascontiguousarray(img.transpose(2, 0, 1)))[None]
            return (t * 2 - 1) * rt

        with torch.no_grad():
            fa, fb = self.features(prep(a)), self.features(prep(b))
            total = 0.0
            for xa, xb in zip(fa, fb):
                wgt = F.adaptive_avg_pool2d(rt, xa.shape[-2:])
                diff = ((xa - xb) ** 2).sum(dim=1, keepdim=True)
                total += float((diff * wgt).sum() / wgt.sum().clamp_min(1e-12))
        return total / len(fa)


_PERCEPTUAL = {"backend": None}


def set_perceptual_backend(fn):
    """Install a callable ``fn(a, b, region) -> float``; ``None`` restores the default."""
    _PERCEPTUAL["backend"] = fn


def perceptual_distance(a, b, region=None):
    if _PERCEPTUAL["backend"] is None:
        _PERCEPTUAL["backend"] = RandomFeaturePerceptual()
    return float(_PERCEPTUAL["backend"](a, b, region))


# text-image alignment has no bundled backend
_CLIP = {"scorer": None}


def set_clip_scorer(fn):
    """Install ``fn(image, prompt) -> float`` for text-image alignment scores."""
    _CLIP["scorer"] = fn


def clip_score(image, prompt):
    """Alignment score from the installed scorer, or ``None`` when there is none."""
    if _CLIP["scorer"] is None:
        return None
    return float(_CLIP["scorer"](image, prompt))


def reflection_iou(gt_mask, pred_mask):
    """|A & B| / |A | B|; two empty masks score 1.0."""
    a = check_mask(gt_mask, name="ground-truth mask")
    b = check_mask(pred_mask, shape=a.shape, name="predicted mask")
    union = np.count_nonzero(a | b)
    if union == 0:
        return 1.0
    return np.count_nonzero(a & b) / union


def segment_reflection(generated, reference, mirror_mask, threshold=0.1):
    """Pixels inside the mirror whose colour departs from an empty-mirror render.

    The per-pixel deviation is the max absolute channel difference; the
    thresholded mask is cleaned with a 3x3 opening then closing and clipped
    back to the mirror region.
    """
    g, ref = np.asarray(generated, float), np.asarray(reference, float)
    check_same_shape(g, ref, ("generated", "reference"))
    m = check_mask(mirror_mask, shape=g.shape[:2], name="mirror mask")
    dev = np.abs(g - ref).max(axis=-1)
    raw = (dev > threshold) & m
    st = np.ones((3, 3), bool)
    out = ndimage.binary_closing(ndimage.binary_opening(raw, st), st)
    return out & m


def select_representative(candidates, gt, mirror_mask):
    """Index of the candidate with the highest SSIM inside the mirror; ties -> lowest."""
    if len(candidates) == 0:
        raise ValueError("no candidates to select from")
    return first_argmax([ssim(c, gt, mirror_mask) for c in candidates])


def first_argmax(scores):
    best, idx = -math.inf, 0
    for i, s in enumerate(scores):
        if s > best:
            best, idx = s, i
    return idx
