"""Discrete-time diffusion: schedules, forward noising, loss and samplers.

Everything uses epsilon prediction. Sampling runs on a uniformly subsampled
set of the training timesteps ("trailing" spacing, so the first step starts
at t = T - 1).
"""

from dataclasses import dataclass
import math

import numpy as np
import torch

from .validation import ShapeError

DEFAULT_T = 1000
DEFAULT_STEPS = 50
DEFAULT_CFG = 7.5


@dataclass(frozen=True)
class NoiseSchedule:
    beta: np.ndarray
    alpha_bar: np.ndarray
    kind: str = "linear"

    @property
    def T(self):
        return len(self.beta)

    @property
    def alpha(self):
        return 1.0 - self.beta


def make_schedule(T=DEFAULT_T, kind="linear", beta_start=1e-4, beta_end=2e-2):
    """Build a linear-beta or cosine schedule with ``T`` steps.

    For ``T`` much smaller than 1000 the linear endpoints are rescaled by
    1000 / T so the final ``alpha_bar`` stays comparable.
    """
    if not isinstance(T, (int, np.integer)) or T < 2:
        raise ValueError(f"T must be an integer >= 2, got {T!r}")
    if kind == "linear":
        scale = 1000.0 / T
        beta = np.linspace(beta_start * scale, min(beta_end * scale, 0.999), T)
    elif kind == "cosine":
        s = 0.008
        grid = np.arange(T + 1, dtype=np.float64) / T
        f = np.cos((grid + s) / (1 + s) * math.pi / 2) ** 2
        beta = np.clip(1.0 - f[1:] / f[:-1], 1e-8, 0.999)
    else:
        raise ValueError(f"unknown schedule kind {kind!r}")
    alpha_bar = np.cumprod(1.0 - beta)
    return NoiseSchedule(beta=beta, alpha_bar=alpha_bar, kind=kind)


def _gather(values, t, ndim, like):
    v = torch.as_tensor(values, dtype=like.dtype, device=like.device)[t]
    return v.reshape(v.shape + (1,) * (ndim - v.ndim))


def q_sample(x0, eps, t, sched):
    """Closed-form forward process: sqrt(ab_t) x0 + sqrt(1 - ab_t) eps.

    ``t`` is a scalar or a per-sample integer tensor of length N.
    """
    if x0.shape != eps.shape:
        raise ShapeError(f"x0 shape {tuple(x0.shape)} != eps shape {tuple(eps.shape)}")
    t = torch.as_tensor(t, dtype=torch.long)
    if (t < 0).any() or (t >= sched.T).any():
        raise ValueError(f"timestep out of range [0, {sched.T})")
    if t.ndim == 1 and t.shape[0] != x0.shape[0]:
        raise ShapeError("per-sample timesteps must match the batch size")
    ab = _gather(sched.alpha_bar, t, x0.ndim, x0)
    return ab.sqrt() * x0 + (1.0 - ab).sqrt() * eps


def denoise_loss(model_out, eps):
    if model_out.shape != eps.shape:
        raise ShapeError(f"prediction shape {tuple(model_out.shape)} != target {tuple(eps.shape)}")
    return torch.mean((model_out - eps) ** 2)


def cfg_combine(eps_cond, eps_uncond, scale):
    if eps_cond.shape != eps_uncond.shape:
        raise ShapeError("conditional and unconditional predictions differ in shape")
    if scale < 0:
        raise ValueError("guidance scale must be non-negative")
    if scale == 1:
        return eps_cond
    return eps_uncond + scale * (eps_cond - eps_uncond)


def inference_timesteps(T, steps):
    if steps < 1 or steps > T:
        raise ValueError(f"steps must be in [1, {T}], got {steps}")
    ts = np.round(np.linspace(T, 0, steps + 1))[:-1].astype(np.int64) - 1
    return ts


def _noise(shape, generator, dtype):
    return torch.randn(shape, generator=generator, dtype=dtype)


@torch.no_grad()
def sample(model, condition, sched, steps=DEFAULT_STEPS, cfg_scale=DEFAULT_CFG,
           sampler="deterministic", seed=0, text=None, null_text=None, clip_x0=True,
           dtype=torch.float32):
    """Run the reverse process and return the final clean-latent estimate.

    ``model(z_t, t, condition, text)`` must return an epsilon prediction of
    the same shape as ``z_t`` (NCHW). ``condition`` is a dict of NCHW tensors
    with at least ``z_m`` (its shape fixes the latent shape). When
    ``cfg_scale != 1`` the model is also queried with ``null_text`` and the
    predictions are combined with :func:`cfg_combine`.

    ``seed`` may be an int or a list of ints (one per batch row) so that
    candidates drawn in one batch match candidates drawn one at a time.
    """
    if sampler not in ("deterministic", "ancestral"):
        raise ValueError(f"unknown sampler {sampler!r}")
    shape = tuple(condition["z_m"].shape)
    n = shape[0]
    seeds = [seed] * n if isinstance(seed, (int, np.integer)) else list(seed)
    if len(seeds) != n:
        raise ValueError("one seed per batch row is required")
    gens = [torch.Generator().manual_seed(int(s)) for s in seeds]
    z = torch.cat([_noise((1,) + shape[1:], g, dtype) for g in gens])

    guided = cfg_scale != 1 and text is not None
    if guided and null_text is None:
        raise ValueError("classifier-free guidance needs a null text embedding")

    ab = sched.alpha_bar
    ts = inference_timesteps(sched.T, steps)
    for i, t in enumerate(ts):
        ab_t = float(ab[t])
        ab_prev = float(ab[ts[i + 1]]) if i + 1 < len(ts) else 1.0
        tt = torch.full((n,), int(t), dtype=torch.long)
        if guided:
            cond2 = {k: torch.cat([v, v]) for k, v in condition.items()}
            out = model(torch.cat([z, z]), torch.cat([tt, tt]), cond2,
                        torch.cat([text, null_text]))
            eps = cfg_combine(out[:n], out[n:], cfg_scale)
        else:
            eps = model(z, tt, condition, text)
        x0 = (z - math.sqrt(1.0 - ab_t) * eps) / math.sqrt(ab_t)
        if clip_x0:
            x0 = x0.clamp(-1.0, 1.0)
            # keep eps consistent with the clipped x0
            eps = (z - math.sqrt(ab_t) * x0) / math.sqrt(1.0 - ab_t)
        if sampler == "deterministic":
            z = math.sqrt(ab_prev) * x0 + math.sqrt(1.0 - ab_prev) * eps
        else:
            var = (1.0 - ab_prev) / (1.0 - ab_t) * (1.0 - ab_t / ab_prev)
            var = max(var, 0.0)
            direction = math.sqrt(max(1.0 - ab_prev - var, 0.0)) * eps
            z = math.sqrt(ab_prev) * x0 + direction
            if var > 0:
                z = z + math.sqrt(var) * torch.cat([_noise((1,) + shape[1:], g, dtype) for g in gens])
    return z
