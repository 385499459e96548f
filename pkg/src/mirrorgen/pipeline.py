"""Mirror inpainting: condition -> reverse diffusion -> decode -> blend."""

from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator
import torch

from . import codec, conditioning, dataset as ds, diffusion, model as mdl, training
from .validation import check_image, check_mask

DEFAULT_SEEDS = 4


def inpaint(model, image, mask, depth, prompt, seeds=range(DEFAULT_SEEDS), steps=diffusion.DEFAULT_STEPS,
            cfg_scale=diffusion.DEFAULT_CFG, sampler="deterministic", sched=None,
            patch_factor=codec.DEFAULT_PATCH, blend=True):
    """Generate one candidate per seed for a single image.

    Returns a float array (n_seeds, H, W, 3) in [0, 1]. Pixels outside the
    mirror mask are copied from ``image`` when ``blend`` is set.
    """
    img = check_image(image, patch_factor=patch_factor)
    m = check_mask(mask, shape=img.shape[:2], name="mirror mask")
    bundle = conditioning.build_condition(img, m, depth, patch_factor)
    seeds = [int(s) for s in seeds]
    if not seeds:
        raise ValueError("at least one seed is required")
    n = len(seeds)
    dtype = next(model.parameters()).dtype
    cond = {k: v.repeat(n, 1, 1, 1) for k, v in conditioning.stack_conditions([bundle], dtype).items()}
    sched = sched or diffusion.make_schedule()
    model.eval()
    text = model.embed([prompt] * n, dtype=dtype)
    null = model.null_text(n).to(dtype)
    z = diffusion.sample(model, cond, sched, steps=steps, cfg_scale=cfg_scale, sampler=sampler,
                         seed=seeds, text=text, null_text=null, dtype=dtype)
    out = codec.decode(z.double().numpy().transpose(0, 2, 3, 1), patch_factor)
    if blend:
        out[:, ~m] = img[~m]
    return out


def inpaint_sample_dir(model, sample_dir, out_dir, prompt=None, n_seeds=DEFAULT_SEEDS, seed=0, **kw):
    """Inpaint one dataset sample and write ``gen_<seed>.png`` files."""
    s = ds.read_sample(sample_dir)
    prompt = s.meta.get("prompt", "") if prompt is None else prompt
    seeds = [seed + i for i in range(n_seeds)]
    images = inpaint(model, s.rgb, s.mirror_mask, s.depth, prompt, seeds, **kw)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for sd, img in zip(seeds, images):
        p = out / f"gen_{sd}.png"
        ds.write_png(p, img)
        paths.append(p)
    return paths


class MirrorInpainter(BaseEstimator):
    """Estimator facade: ``fit`` trains on a dataset directory, ``predict``
    inpaints samples.

    ``predict`` takes a list of :class:`~mirrorgen.render.RenderSample` (or
    sample directories) and returns an array (N, n_seeds, H, W, 3).
    """

    def __init__(self, train_config=None, out_dir="run", steps=diffusion.DEFAULT_STEPS,
                 cfg_scale=diffusion.DEFAULT_CFG, n_seeds=DEFAULT_SEEDS, sampler="deterministic",
                 seed=0):
        self.train_config = train_config
        self.out_dir = out_dir
        self.steps = steps
        self.cfg_scale = cfg_scale
        self.n_seeds = n_seeds
        self.sampler = sampler
        self.seed = seed

    def fit(self, X, y=None):
        cfg = self.train_config
        if cfg is None:
            cfg = training.TrainConfig()
        elif isinstance(cfg, dict):
            cfg = training.TrainConfig.from_dict(cfg)
        result = training.run_training(X, cfg, self.out_dir)
        self.model_ = result["model"]
        self.sched_ = diffusion.make_schedule(cfg.timesteps, cfg.schedule)
        self.losses_ = result["losses"]
        return self

    @classmethod
    def from_checkpoint(cls, path, **params):
        est = cls(**params)
        est.model_, extra = mdl.load_checkpoint(path)
        cfg = training.TrainConfig.from_dict(extra["train_config"]) if "train_config" in extra else None
        est.sched_ = diffusion.make_schedule(cfg.timesteps, cfg.schedule) if cfg else diffusion.make_schedule()
        return est

    def _check_fitted(self):
        if not hasattr(self, "model_"):
            raise RuntimeError("MirrorInpainter is not fitted; call fit or from_checkpoint first")

    def predict(self, X):
        self._check_fitted()
        seeds = [self.seed + i for i in range(self.n_seeds)]
        out = []
        for item in X:
            s = item if hasattr(item, "rgb") else ds.read_sample(item)
            out.append(inpaint(self.model_, s.rgb, s.mirror_mask, s.depth, s.meta.get("prompt", ""),
                               seeds, steps=self.steps, cfg_scale=self.cfg_scale,
                               sampler=self.sampler, sched=self.sched_))
        return np.stack(out)
