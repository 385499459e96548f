"""Known/unknown benchmark splits and the evaluation harness."""

from collections import Counter
from dataclasses import asdict, dataclass, field
import json
import logging
from pathlib import Path

import numpy as np

from . import dataset as ds
from . import metrics

logger = logging.getLogger(__name__)

METRIC_FIELDS = (
    "psnr_unmasked", "ssim_unmasked", "lpips_unmasked",
    "psnr_masked", "ssim_masked", "lpips_masked",
    "iou_reflection",
)


class SplitError(ValueError):
    pass


class UnpairedSampleError(ValueError):
    pass


@dataclass
class BenchSplit:
    known_ids: list
    unknown_ids: list
    unknown_categories: list
    seed: int = 0

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: d[k] for k in cls.__dataclass_fields__ if k in d})

    def group_of(self, object_id):
        return "unknown" if object_id in set(self.unknown_ids) else "known"


def build_split(catalog, n_unknown_objects, seed=0):
    """Hold out the rarest categories until ``n_unknown_objects`` are covered.

    Categories are ranked by ascending object count (ties by name) and moved
    whole into the unknown set, so known and unknown never share a category.
    """
    entries = list(catalog.entries if hasattr(catalog, "entries") else catalog)
    if not entries:
        raise SplitError("catalog is empty")
    if n_unknown_objects < 0 or n_unknown_objects >= len(entries):
        raise SplitError(
            f"n_unknown_objects={n_unknown_objects} must be in [0, {len(entries)})"
        )
    counts = Counter(e["category"] for e in entries)
    order = sorted(counts, key=lambda c: (counts[c], c))
    unknown_cats, covered = [], 0
    for cat in order:
        if covered >= n_unknown_objects:
            break
        unknown_cats.append(cat)
        covered += counts[cat]
    if len(unknown_cats) == len(order) and n_unknown_objects > 0:
        raise SplitError("reaching the requested unknown count leaves no known categories")
    held = set(unknown_cats)
    rng = np.random.default_rng(seed)
    known = sorted(e["object_id"] for e in entries if e["category"] not in held)
    unknown = sorted(e["object_id"] for e in entries if e["category"] in held)
    # stable content, seeded order within each list
    known = [known[i] for i in rng.permutation(len(known))]
    unknown = [unknown[i] for i in rng.permutation(len(unknown))]
    return BenchSplit(known, unknown, sorted(held), int(seed))


@dataclass
class MetricsReport:
    per_sample: list = field(default_factory=list)
    aggregates: dict = field(default_factory=dict)
    split: dict = field(default_factory=dict)

    def to_json(self):
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"


def _mean_rows(rows):
    out = {}
    for key in METRIC_FIELDS:
        vals = [r[key] for r in rows if r.get(key) is not None]
        out[key] = float(np.mean(vals)) if vals else None
    out["count"] = len(rows)
    return out


def score_sample(generated, gt, mirror_mask, empty_reference=None, threshold=0.1):
    """Metric record for one generated image against its ground truth."""
    m = np.asarray(mirror_mask, bool)
    rec = {
        "psnr_unmasked": metrics.psnr(generated, gt, ~m),
        "ssim_unmasked": metrics.ssim(generated, gt, ~m),
        "lpips_unmasked": metrics.perceptual_distance(generated, gt, ~m),
        "psnr_masked": metrics.psnr(generated, gt, m),
        "ssim_masked": metrics.ssim(generated, gt, m),
        "lpips_masked": metrics.perceptual_distance(generated, gt, m),
        "iou_reflection": None,
    }
    if empty_reference is not None:
        gt_seg = metrics.segment_reflection(gt, empty_reference, m, threshold)
        pred_seg = metrics.segment_reflection(generated, empty_reference, m, threshold)
        rec["iou_reflection"] = metrics.reflection_iou(gt_seg, pred_seg)
    return rec


def candidate_paths(gen_dir):
    paths = list(Path(gen_dir).glob("gen_*.png"))

    def seed_of(p):
        try:
            return int(p.stem.split("_", 1)[1])
        except ValueError:
            return p.stem

    return sorted(paths, key=seed_of)


def evaluate(dataset_dir, generated_dir, split=None, threshold=0.1):
    """Score every generated sample against the matching ground truth.

    ``generated_dir`` mirrors the dataset layout and holds ``gen_<seed>.png``
    candidates per sample; the representative candidate is the one with the
    best SSIM inside the mirror mask.
    """
    dataset_dir, generated_dir = Path(dataset_dir), Path(generated_dir)
    gen_dirs = sorted({p.parent for p in generated_dir.glob("*/*/gen_*.png")})
    if not gen_dirs:
        raise UnpairedSampleError(f"no generated candidates found under {generated_dir}")
    unpaired = [ds.sample_key(g) for g in gen_dirs
                if not (dataset_dir / ds.sample_key(g) / "meta.json").is_file()]
    if unpaired:
        raise UnpairedSampleError(f"generated samples without ground truth: {', '.join(unpaired)}")

    rows = []
    for g in gen_dirs:
        key = ds.sample_key(g)
        sample = ds.read_sample(dataset_dir / key)
        cand_paths = candidate_paths(g)
        cands = [ds.read_png(p) for p in cand_paths]
        m = sample.mirror_mask
        cand_scores = [metrics.ssim(c, sample.rgb, m) for c in cands]
        best = metrics.first_argmax(cand_scores)
        try:
            empty = ds.read_empty_mirror(dataset_dir / key)
        except ds.DatasetError:
            logger.warning("%s: no empty-mirror reference; IoU skipped", key)
            empty = None
        rec = score_sample(cands[best], sample.rgb, m, empty, threshold)
        prompt = sample.meta.get("prompt", "")
        clip = metrics.clip_score(cands[best], prompt)
        object_id = sample.meta.get("object_id")
        rec.update(
            sample=key,
            object_id=object_id,
            category=sample.meta.get("category"),
            group=split.group_of(object_id) if split is not None else "all",
            selected=cand_paths[best].name,
            candidate_ssim_masked=cand_scores,
            clip_similarity=clip,
        )
        rows.append(rec)

    aggregates = {"all": _mean_rows(rows)}
    for group in sorted({r["group"] for r in rows}):
        aggregates[group] = _mean_rows([r for r in rows if r["group"] == group])
    return MetricsReport(rows, aggregates, split.to_dict() if split is not None else {})
