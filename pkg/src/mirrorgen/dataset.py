"""On-disk formats: PFM float rasters, PNG images and the dataset tree.

Layout::

    <root>/<scene_id>/<cam_id>/rgb.png           8-bit RGB
                               depth.pfm         float32, +inf = no hit
                               normal.pfm        float32 x3
                               instance.png      16-bit ids
                               mirror_mask.png   8-bit, 0 / 255
                               empty_mirror.png  8-bit RGB render without the object
                               meta.json
"""

import json
import os
from pathlib import Path
import re

import numpy as np
from PIL import Image

from .render import RenderSample

SAMPLE_FILES = ("rgb.png", "depth.pfm", "normal.pfm", "instance.png", "mirror_mask.png", "meta.json")


class DatasetError(IOError):
    pass


def write_pfm(path, data):
    """Little-endian PFM; rows are stored bottom-to-top as the format requires."""
    arr = np.asarray(data, dtype="<f4")
    if arr.ndim == 2:
        header = "Pf"
    elif arr.ndim == 3 and arr.shape[2] == 3:
        header = "PF"
    else:
        raise ValueError(f"PFM supports (H, W) or (H, W, 3) arrays, got {arr.shape}")
    h, w = arr.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"{header}\n{w} {h}\n-1.0\n".encode("ascii"))
        fh.write(np.ascontiguousarray(arr[::-1]).tobytes())


def read_pfm(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    m = re.match(rb"(P[Ff])\s+(\d+)\s+(\d+)\s+(\S+)\s", raw)
    if not m:
        raise DatasetError(f"{path}: not a PFM file")
    kind, w, h, scale = m.group(1), int(m.group(2)), int(m.group(3)), float(m.group(4))
    channels = 3 if kind == b"PF" else 1
    dtype = "<f4" if scale < 0 else ">f4"
    arr = np.frombuffer(raw, dtype=dtype, count=w * h * channels, offset=m.end())
    arr = arr.reshape((h, w, channels) if channels == 3 else (h, w))[::-1]
    return np.ascontiguousarray(arr.astype(np.float32))


def to_uint8(img):
    return np.round(np.clip(np.asarray(img, float), 0.0, 1.0) * 255).astype(np.uint8)


def write_png(path, img):
    Image.fromarray(to_uint8(img)).save(path, optimize=False)


def read_png(path):
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0


def write_mask(path, mask):
    Image.fromarray(np.where(np.asarray(mask, bool), 255, 0).astype(np.uint8)).save(path)


def read_mask(path):
    with Image.open(path) as im:
        return np.asarray(im.convert("L")) > 127


def write_ids(path, ids):
    Image.fromarray(np.asarray(ids, dtype=np.uint16)).save(path)


def read_ids(path):
    with Image.open(path) as im:
        return np.asarray(im, dtype=np.uint16)


def write_sample(sample_dir, sample, empty_mirror=None):
    d = Path(sample_dir)
    try:
        d.mkdir(parents=True, exist_ok=True)
        write_png(d / "rgb.png", sample.rgb)
        write_pfm(d / "depth.pfm", sample.depth)
        write_pfm(d / "normal.pfm", sample.normals)
        write_ids(d / "instance.png", sample.instances)
        write_mask(d / "mirror_mask.png", sample.mirror_mask)
        if empty_mirror is not None:
            write_png(d / "empty_mirror.png", empty_mirror)
        (d / "meta.json").write_text(json.dumps(sample.meta, indent=2, sort_keys=True) + "\n",
                                     encoding="utf-8")
    except OSError as exc:
        raise DatasetError(f"failed to write sample to {d}: {exc}") from exc
    return d


def read_sample(sample_dir):
    d = Path(sample_dir)
    missing = [f for f in SAMPLE_FILES if not (d / f).is_file()]
    if missing:
        raise DatasetError(f"{d}: missing {', '.join(missing)}")
    try:
        return RenderSample(
            rgb=read_png(d / "rgb.png"),
            depth=read_pfm(d / "depth.pfm"),
            normals=read_pfm(d / "normal.pfm"),
            instances=read_ids(d / "instance.png"),
            mirror_mask=read_mask(d / "mirror_mask.png"),
            meta=json.loads((d / "meta.json").read_text(encoding="utf-8")),
        )
    except (OSError, ValueError) as exc:
        raise DatasetError(f"{d}: corrupt sample ({exc})") from exc


def read_empty_mirror(sample_dir):
    path = Path(sample_dir) / "empty_mirror.png"
    if not path.is_file():
        raise DatasetError(f"{path}: empty-mirror reference not found")
    return read_png(path)


def list_samples(root):
    """Sorted ``<scene>/<cam>`` directories that contain a meta.json."""
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"dataset directory {root} does not exist")
    out = sorted(p.parent for p in root.glob("*/*/meta.json"))
    return out


def sample_key(sample_dir):
    p = Path(sample_dir)
    return f"{p.parent.name}/{p.name}"


def default_output_root():
    return Path(os.environ.get("MIRRORGEN_OUTPUT_ROOT", "."))
