"""Training loop for the conditioning branch.

Only conditioning-branch and injector parameters are optimized unless
``freeze_generation`` is False. Text prompts are replaced by the null
embedding with probability ``prompt_drop_prob`` per sample.
"""

from dataclasses import asdict, dataclass, field
import json
import logging
import math
from pathlib import Path

import numpy as np
import torch

from . import codec, conditioning, dataset as ds, diffusion, model as mdl

logger = logging.getLogger(__name__)


class NonFiniteLossError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    learning_rate: float = 1e-5
    # linear ramp from lr/warmup_steps to lr over the first steps
    warmup_steps: int = 0
    batch_size: int = 16
    max_steps: int = 20000
    prompt_drop_prob: float = 0.2
    freeze_generation: bool = True
    weight_decay: float = 1e-2
    seed: int = 0
    checkpoint_every: int = 1000
    grad_accum: int = 1
    timesteps: int = diffusion.DEFAULT_T
    schedule: str = "linear"
    val_fraction: float = 0.0
    # steps of plain denoising training for the generation branch before it is
    # frozen; stands in for a pretrained backbone when none is available
    generation_pretrain_steps: int = 0
    generation_pretrain_lr: float = 1e-3
    model: dict = field(default_factory=dict)

    def __post_init__(self):
        if not 0.0 <= self.prompt_drop_prob <= 1.0:
            raise ValueError("prompt_drop_prob must lie in [0, 1]")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be non-negative")
        if self.batch_size < 1 or self.max_steps < 1 or self.checkpoint_every < 1:
            raise ValueError("batch_size, max_steps and checkpoint_every must be positive")
        if self.grad_accum < 1 or self.batch_size % self.grad_accum:
            raise ValueError("grad_accum must divide batch_size")
        if self.warmup_steps < 0:
            raise ValueError("warmup_steps must be non-negative")
        if self.generation_pretrain_steps < 0:
            raise ValueError("generation_pretrain_steps must be non-negative")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ValueError("val_fraction must lie in [0, 1)")

    def lr_at(self, step):
        """Learning rate for optimizer step ``step`` (1-based)."""
        if self.warmup_steps and step < self.warmup_steps:
            return self.learning_rate * step / self.warmup_steps
        return self.learning_rate

    def model_config(self):
        cfg = dict(self.model)
        cfg["freeze_generation"] = self.freeze_generation
        return mdl.UNetConfig.from_dict(cfg)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown TrainConfig fields: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


# ---------------------------------------------------------------------------
# optimizer


def adamw_update(params, grads, state, lr, weight_decay=0.0, betas=(0.9, 0.999), eps=1e-8):
    """One decoupled-weight-decay Adam step.

    ``state`` holds ``step`` and per-parameter ``m`` / ``v`` lists; it is
    created on first use. Parameters are updated in place and also returned::

        p <- p * (1 - lr * wd)
        m <- b1 m + (1 - b1) g ;  v <- b2 v + (1 - b2) g^2
        p <- p - lr * (m / (1 - b1^k)) / (sqrt(v / (1 - b2^k)) + eps)
    """
    b1, b2 = betas
    if "m" not in state:
        state["step"] = 0
        state["m"] = [torch.zeros_like(p) for p in params]
        state["v"] = [torch.zeros_like(p) for p in params]
    if len(grads) != len(params):
        raise ValueError("one gradient per parameter is required")
    state["step"] += 1
    k = state["step"]
    bc1, bc2 = 1 - b1 ** k, 1 - b2 ** k
    with torch.no_grad():
        for p, g, m, v in zip(params, grads, state["m"], state["v"]):
            if g is None:
                g = torch.zeros_like(p)
            if g.shape != p.shape:
                raise ValueError(f"gradient shape {tuple(g.shape)} != parameter {tuple(p.shape)}")
            p.mul_(1 - lr * weight_decay)
            m.mul_(b1).add_(g, alpha=1 - b1)
            v.mul_(b2).addcmul_(g, g, value=1 - b2)
            denom = (v / bc2).sqrt_().add_(eps)
            p.addcdiv_(m, denom, value=-lr / bc1)
    return params, state


# ---------------------------------------------------------------------------
# data


@dataclass
class TrainingData:
    x0: torch.Tensor               # (N, C, h, w) clean latents
    condition: dict                # NCHW tensors z_m, x_m, x_d
    prompts: list
    keys: list

    def __len__(self):
        return len(self.prompts)

    def subset(self, idx):
        idx = torch.as_tensor(idx, dtype=torch.long)
        return TrainingData(self.x0[idx], {k: v[idx] for k, v in self.condition.items()},
                            [self.prompts[i] for i in idx.tolist()],
                            [self.keys[i] for i in idx.tolist()])


def load_training_data(dataset_dir, patch_factor=codec.DEFAULT_PATCH, dtype=torch.float32):
    dirs = ds.list_samples(dataset_dir)
    if not dirs:
        raise ds.DatasetError(f"dataset {dataset_dir} contains no samples")
    latents, bundles, prompts, keys = [], [], [], []
    for d in dirs:
        s = ds.read_sample(d)
        try:
            bundles.append(conditioning.build_condition(s.rgb, s.mirror_mask, s.depth, patch_factor))
        except ValueError as exc:
            raise ds.DatasetError(f"{d}: cannot build condition ({exc})") from exc
        latents.append(codec.encode(s.rgb, patch_factor))
        prompts.append(s.meta.get("prompt", ""))
        keys.append(ds.sample_key(d))
    x0 = torch.from_numpy(np.stack(latents).transpose(0, 3, 1, 2).copy()).to(dtype)
    return TrainingData(x0, conditioning.stack_conditions(bundles, dtype), prompts, keys)


@dataclass
class TrainBatch:
    x0: torch.Tensor
    eps: torch.Tensor
    t: torch.Tensor
    condition: dict
    prompt: list
    drop: list

    def __post_init__(self):
        if self.x0.shape != self.eps.shape:
            raise ValueError("x0 and eps shapes differ")


def draw_batch(data, size, generator, sched, drop_prob):
    idx = torch.randint(0, len(data), (size,), generator=generator)
    t = torch.randint(0, sched.T, (size,), generator=generator)
    eps = torch.randn(data.x0[idx].shape, generator=generator, dtype=data.x0.dtype)
    drop = (torch.rand(size, generator=generator) < drop_prob).tolist()
    return TrainBatch(
        x0=data.x0[idx], eps=eps, t=t,
        condition={k: v[idx] for k, v in data.condition.items()},
        prompt=[data.prompts[i] for i in idx.tolist()], drop=drop,
    )


# ---------------------------------------------------------------------------
# steps


def batch_loss(model, batch, sched):
    z_t = diffusion.q_sample(batch.x0, batch.eps, batch.t, sched)
    text = model.embed(batch.prompt, drop=batch.drop, dtype=batch.x0.dtype)
    return diffusion.denoise_loss(model(z_t, batch.t, batch.condition, text), batch.eps)


def train_step(model, batches, sched, config, opt_state):
    """Accumulate gradients over ``batches`` (micro-batches) and apply AdamW.

    Returns the mean loss as a float. ``opt_state`` is updated in place.
    """
    if isinstance(batches, TrainBatch):
        batches = [batches]
    params = model.trainable_parameters()
    for p in params:
        p.grad = None
    total = 0.0
    for b in batches:
        loss = batch_loss(model, b, sched) / len(batches)
        if not torch.isfinite(loss):
            raise NonFiniteLossError(
                f"non-finite loss {loss.item()} (timesteps {b.t.tolist()}, prompts dropped {sum(b.drop)})"
            )
        loss.backward()
        total += float(loss.detach())
    lr = config.lr_at(opt_state.get("step", 0) + 1)
    adamw_update(params, [p.grad for p in params], opt_state, lr, config.weight_decay)
    return total


def pretrain_generation(model, data, sched, config, generator, log=None):
    """Train the generation branch alone (no injections) before freezing it."""
    params = list(model.generation.parameters())
    for p in params:
        p.requires_grad_(True)
    state, losses = {}, []
    for step in range(1, config.generation_pretrain_steps + 1):
        b = draw_batch(data, config.batch_size, generator, sched, config.prompt_drop_prob)
        for p in params:
            p.grad = None
        z_t = diffusion.q_sample(b.x0, b.eps, b.t, sched)
        text = model.embed(b.prompt, drop=b.drop, dtype=b.x0.dtype)
        loss = diffusion.denoise_loss(model.forward_generation(z_t, b.t, text), b.eps)
        if not torch.isfinite(loss):
            raise NonFiniteLossError(f"non-finite loss {loss.item()} during generation pretraining")
        loss.backward()
        adamw_update(params, [p.grad for p in params], state, config.generation_pretrain_lr,
                     config.weight_decay)
        losses.append(float(loss.detach()))
        if log is not None:
            log.write(f"{step}\t{losses[-1]:.8e}\n")
    model.apply_freeze_policy()
    return losses


def validation_batch(data, sched, seed, size=None):
    g = torch.Generator().manual_seed(seed)
    n = len(data)
    size = size or n
    idx = torch.arange(size) % n
    t = torch.linspace(0, sched.T - 1, size).round().long()
    eps = torch.randn(data.x0[idx].shape, generator=g, dtype=data.x0.dtype)
    return TrainBatch(data.x0[idx], eps, t, {k: v[idx] for k, v in data.condition.items()},
                      [data.prompts[i] for i in idx.tolist()], [False] * size)


@torch.no_grad()
def validation_loss(model, batch, sched, chunk=32):
    total, n = 0.0, len(batch.prompt)
    for s in range(0, n, chunk):
        sl = slice(s, s + chunk)
        sub = TrainBatch(batch.x0[sl], batch.eps[sl], batch.t[sl],
                         {k: v[sl] for k, v in batch.condition.items()},
                         batch.prompt[sl], batch.drop[sl])
        total += float(batch_loss(model, sub, sched)) * len(sub.prompt)
    return total / n


def set_deterministic(enabled=True):
    if enabled:
        torch.set_num_threads(1)
        torch.use_deterministic_algorithms(True)


def run_training(dataset_dir, config, out_dir, hooks=None, data=None):
    """Train on every sample under ``dataset_dir``; write logs and checkpoints.

    Writes ``loss.log`` (``step<TAB>loss``), ``ckpt_<step>.ckpt`` every
    ``checkpoint_every`` steps, ``final.ckpt`` and ``best.ckpt`` (lowest
    validation loss among the checkpoints) plus ``train_config.json``.
    ``hooks`` may contain ``on_batch(step, batch)``.
    """
    hooks = hooks or {}
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    data = data if data is not None else load_training_data(dataset_dir)
    if len(data) == 0:
        raise ds.DatasetError(f"dataset {dataset_dir} contains no samples")

    g = torch.Generator().manual_seed(config.seed)
    n_val = int(math.floor(len(data) * config.val_fraction))
    if n_val:
        perm = torch.randperm(len(data), generator=g).tolist()
        val_data, train_data = data.subset(perm[:n_val]), data.subset(perm[n_val:])
    else:
        val_data = train_data = data

    sched = diffusion.make_schedule(config.timesteps, config.schedule)
    model = mdl.build(config.model_config(), seed=config.seed)
    model.train()
    if config.generation_pretrain_steps:
        with open(out / "pretrain.log", "w", encoding="utf-8") as plog:
            pretrain_generation(model, train_data, sched, config, g, plog)
        mdl.clone_conditioning(model)
    opt_state = {}
    val_batch = validation_batch(val_data, sched, config.seed + 1)
    micro = config.batch_size // config.grad_accum
    (out / "train_config.json").write_text(json.dumps(config.to_dict(), indent=2, sort_keys=True) + "\n",
                                           encoding="utf-8")
    losses, best = [], (math.inf, None)
    with open(out / "loss.log", "w", encoding="utf-8") as log:
        for step in range(1, config.max_steps + 1):
            batches = [draw_batch(train_data, micro, g, sched, config.prompt_drop_prob)
                       for _ in range(config.grad_accum)]
            if "on_batch" in hooks:
                for b in batches:
                    hooks["on_batch"](step, b)
            loss = train_step(model, batches, sched, config, opt_state)
            losses.append(loss)
            log.write(f"{step}\t{loss:.8e}\n")
            if step % config.checkpoint_every == 0 or step == config.max_steps:
                vl = validation_loss(model, val_batch, sched)
                extra = {"step": step, "val_loss": vl, "train_config": config.to_dict()}
                mdl.save_checkpoint(model, out / f"ckpt_{step:06d}.ckpt", extra)
                logger.info("step %d loss %.5f val %.5f", step, loss, vl)
                if vl < best[0]:
                    best = (vl, step)
                    mdl.save_checkpoint(model, out / "best.ckpt", extra)
    mdl.save_checkpoint(model, out / "final.ckpt",
                        {"step": config.max_steps, "train_config": config.to_dict()})
    return {"losses": losses, "best_step": best[1], "best_val_loss": best[0], "model": model,
            "out_dir": str(out)}


def read_loss_log(path):
    steps, losses = [], []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        s, v = line.split("\t")
        steps.append(int(s))
        losses.append(float(v))
    return steps, losses
