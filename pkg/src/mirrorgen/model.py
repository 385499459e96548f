"""Dual-branch denoiser: frozen text-conditioned U-Net plus a trainable clone.

The conditioning branch is a copy of the generation U-Net without text
cross-attention. It reads ``[z_t, z_m, x_m, x_d]`` and its per-block features
are added to the generation branch through zero-initialized 1x1 convolutions::

    h_k <- h_k + w * Z_k(c_k)

for every block ``k`` listed in ``UNetConfig.injection_points()``. The
injected ``h_k`` is what the next block (and the skip connection) sees.
"""

from dataclasses import asdict, dataclass, field
import copy
import hashlib
import json
import math
import re
import struct

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from . import codec

CHECKPOINT_MAGIC = b"DBUNETCK"
CHECKPOINT_VERSION = 1


@dataclass
class UNetConfig:
    base_channels: int = 32
    channel_multipliers: tuple = (1, 2)
    attention_levels: tuple = (1,)
    time_embed_dim: int = 128
    text_embed_dim: int = 64
    text_max_len: int = 16
    text_vocab: int = 1024
    latent_channels: int = codec.latent_channels(codec.DEFAULT_PATCH)
    norm_groups: int = 8
    preservation_scale: float = 1.0
    freeze_generation: bool = True

    def __post_init__(self):
        self.channel_multipliers = tuple(int(m) for m in self.channel_multipliers)
        self.attention_levels = tuple(int(a) for a in self.attention_levels)
        if self.num_levels < 2:
            raise ValueError("UNetConfig needs at least two resolution levels")
        if self.base_channels < 1 or any(m < 1 for m in self.channel_multipliers):
            raise ValueError("channel counts must be positive")
        if any(a < 0 or a >= self.num_levels for a in self.attention_levels):
            raise ValueError("attention level index out of range")
        for ch in self.level_channels:
            if ch % _groups(ch, self.norm_groups):
                raise ValueError(f"channels {ch} not divisible into norm groups")

    @property
    def num_levels(self):
        return len(self.channel_multipliers)

    @property
    def level_channels(self):
        return [self.base_channels * m for m in self.channel_multipliers]

    @property
    def in_channels_generation(self):
        return self.latent_channels

    @property
    def in_channels_conditioning(self):
        return 2 * self.latent_channels + 2

    def block_channels(self):
        """Ordered ``(name, channels)`` for every block output, input to output."""
        ch = self.level_channels
        L = self.num_levels
        out = [("stem", ch[0])]
        for lvl in range(L):
            out.append((f"down{lvl}", ch[lvl]))
            if lvl < L - 1:
                out.append((f"down{lvl}_ds", ch[lvl]))
        out.append(("mid", ch[-1]))
        for lvl in reversed(range(L)):
            out.append((f"up{lvl}_a", ch[lvl]))
            out.append((f"up{lvl}_b", ch[lvl]))
            if lvl > 0:
                out.append((f"up{lvl}_us", ch[lvl]))
        return out

    def injection_points(self):
        """Pairs of (conditioning block, generation block) joined by a zero conv."""
        return [(name, name) for name, _ in self.block_channels()]

    def to_dict(self):
        d = asdict(self)
        d["channel_multipliers"] = list(self.channel_multipliers)
        d["attention_levels"] = list(self.attention_levels)
        return d

    @classmethod
    def from_dict(cls, d):
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        return cls(**known)


def _groups(ch, max_groups):
    g = min(max_groups, ch)
    while ch % g:
        g -= 1
    return g


def timestep_embedding(t, dim):
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / half)
    args = t.to(torch.float64)[:, None] * freqs[None]
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


class ResBlock(nn.Module):
    def __init__(self, cin, cout, temb_dim, groups):
        super().__init__()
        self.norm1 = nn.GroupNorm(_groups(cin, groups), cin)
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.temb = nn.Linear(temb_dim, cout)
        self.norm2 = nn.GroupNorm(_groups(cout, groups), cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x, temb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.temb(F.silu(temb))[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


class Attention(nn.Module):
    """Single-head attention; ``context=None`` means self-attention."""

    def __init__(self, dim, context_dim=None):
        super().__init__()
        context_dim = context_dim or dim
        self.q = nn.Linear(dim, dim, bias=False)
        self.k = nn.Linear(context_dim, dim, bias=False)
        self.v = nn.Linear(context_dim, dim, bias=False)
        self.out = nn.Linear(dim, dim)

    def forward(self, x, context=None):
        ctx = x if context is None else context
        q, k, v = self.q(x), self.k(ctx), self.v(ctx)
        w = torch.softmax(q @ k.transpose(1, 2) / math.sqrt(q.shape[-1]), dim=-1)
        return self.out(w @ v)


class SpatialAttention(nn.Module):
    def __init__(self, ch, groups, text_dim=None):
        super().__init__()
        self.norm = nn.GroupNorm(_groups(ch, groups), ch)
        self.self_attn = Attention(ch)
        if text_dim is not None:
            self.norm_cross = nn.LayerNorm(ch)
            self.cross_attn = Attention(ch, text_dim)
        else:
            self.cross_attn = None

    def forward(self, x, text=None):
        n, c, h, w = x.shape
        tokens = self.norm(x).reshape(n, c, h * w).transpose(1, 2)
        tokens = tokens + self.self_attn(tokens)
        if self.cross_attn is not None:
            tokens = tokens + self.cross_attn(self.norm_cross(tokens), text)
        return x + tokens.transpose(1, 2).reshape(n, c, h, w)


class Stage(nn.Module):
    """Residual block with optional attention."""

    def __init__(self, cin, cout, temb_dim, groups, attn, text_dim):
        super().__init__()
        self.res = ResBlock(cin, cout, temb_dim, groups)
        self.attn = SpatialAttention(cout, groups, text_dim) if attn else None

    def forward(self, x, temb, text):
        h = self.res(x, temb)
        if self.attn is not None:
            h = self.attn(h, text)
        return h


class UNet(nn.Module):
    """Small U-Net whose block outputs can be read and modified.

    ``forward(x, t, text, injections=None, return_features=False)``:
    ``injections`` maps block names to tensors added to that block's output.
    With ``with_head=False`` the network stops after the last up block and
    returns the list of block features (used by the conditioning branch).
    """

    def __init__(self, cfg, in_channels, cross_attention=True, with_head=True):
        super().__init__()
        self.cfg = cfg
        g = cfg.norm_groups
        ch = cfg.level_channels
        L = cfg.num_levels
        text_dim = cfg.text_embed_dim if cross_attention else None
        temb = cfg.time_embed_dim
        self.time_mlp = nn.Sequential(
            nn.Linear(cfg.base_channels, temb), nn.SiLU(), nn.Linear(temb, temb)
        )
        self.stem = nn.Conv2d(in_channels, ch[0], 3, padding=1)
        self.down = nn.ModuleList()
        self.downsample = nn.ModuleList()
        prev = ch[0]
        for lvl in range(L):
            self.down.append(Stage(prev, ch[lvl], temb, g, lvl in cfg.attention_levels, text_dim))
            prev = ch[lvl]
            if lvl < L - 1:
                self.downsample.append(nn.Conv2d(prev, prev, 3, stride=2, padding=1))
        self.mid_a = ResBlock(ch[-1], ch[-1], temb, g)
        self.mid_attn = SpatialAttention(ch[-1], g, text_dim)
        self.mid_b = ResBlock(ch[-1], ch[-1], temb, g)
        skip_ch = [c for _, c in cfg.block_channels()[: 2 * L]]
        self.up = nn.ModuleList()
        self.upsample = nn.ModuleList()
        prev = ch[-1]
        for lvl in reversed(range(L)):
            attn = lvl in cfg.attention_levels
            a = Stage(prev + skip_ch.pop(), ch[lvl], temb, g, attn, text_dim)
            b = Stage(ch[lvl] + skip_ch.pop(), ch[lvl], temb, g, attn, text_dim)
            self.up.append(nn.ModuleList([a, b]))
            prev = ch[lvl]
            if lvl > 0:
                self.upsample.append(nn.Conv2d(prev, prev, 3, padding=1))
        self.with_head = with_head
        if with_head:
            self.out_norm = nn.GroupNorm(_groups(ch[0], g), ch[0])
            self.out_conv = nn.Conv2d(ch[0], cfg.latent_channels, 3, padding=1)

    def forward(self, x, t, text=None, injections=None):
        cfg = self.cfg
        L = cfg.num_levels
        inj = injections or {}
        feats = []

        def emit(name, h):
            if name in inj:
                h = h + inj[name]
            feats.append(h)
            return h

        temb = self.time_mlp(timestep_embedding(t, cfg.base_channels).to(x.dtype))
        h = emit("stem", self.stem(x))
        skips = [h]
        for lvl in range(L):
            h = emit(f"down{lvl}", self.down[lvl](h, temb, text))
            skips.append(h)
            if lvl < L - 1:
                h = emit(f"down{lvl}_ds", self.downsample[lvl](h))
                skips.append(h)
        h = self.mid_b(self.mid_attn(self.mid_a(h, temb), text), temb)
        h = emit("mid", h)
        for i, lvl in enumerate(reversed(range(L))):
            a, b = self.up[i]
            h = emit(f"up{lvl}_a", a(torch.cat([h, skips.pop()], dim=1), temb, text))
            h = emit(f"up{lvl}_b", b(torch.cat([h, skips.pop()], dim=1), temb, text))
            if lvl > 0:
                h = F.interpolate(h, scale_factor=2, mode="nearest")
                h = emit(f"up{lvl}_us", self.upsample[L - 1 - lvl](h))
        if not self.with_head:
            return feats
        return self.out_conv(F.silu(self.out_norm(h)))


class HashedTextEncoder(nn.Module):
    """Deterministic prompt embedding: hashed word ids into a fixed table.

    The table is a non-trainable buffer drawn from a fixed seed, independent of
    the model seed. Padding positions and the null prompt are all-zero vectors.
    """

    def __init__(self, dim=64, max_len=16, vocab=1024, seed=1234):
        super().__init__()
        self.dim, self.max_len, self.vocab = dim, max_len, vocab
        g = torch.Generator().manual_seed(seed)
        table = torch.randn(vocab, dim, generator=g) / math.sqrt(dim)
        self.register_buffer("table", table, persistent=False)

    def tokenize(self, text):
        words = re.findall(r"[a-z0-9]+", (text or "").lower())[: self.max_len]
        # id 0 is reserved for padding
        return [1 + int.from_bytes(hashlib.sha1(w.encode()).digest()[:4], "little") % (self.vocab - 1)
                for w in words]

    def null(self, n=1, dtype=torch.float32):
        return torch.zeros(n, self.max_len, self.dim, dtype=dtype)

    def forward(self, texts, drop=None, dtype=torch.float32):
        if isinstance(texts, str):
            texts = [texts]
        drop = [False] * len(texts) if drop is None else list(drop)
        out = self.null(len(texts), dtype)
        for i, (text, dropped) in enumerate(zip(texts, drop)):
            ids = [] if dropped else self.tokenize(text)
            if ids:
                out[i, : len(ids)] = self.table[torch.tensor(ids)].to(dtype)
        return out


@dataclass
class TextEmbedding:
    tokens: list
    vectors: torch.Tensor
    is_null: bool = field(default=False)


_DEFAULT_ENCODERS = {}


def _encoder_for(dim, max_len, vocab):
    key = (dim, max_len, vocab)
    if key not in _DEFAULT_ENCODERS:
        _DEFAULT_ENCODERS[key] = HashedTextEncoder(dim, max_len, vocab)
    return _DEFAULT_ENCODERS[key]


def embed_prompt(text, drop=False, config=None):
    """Embed one prompt. ``drop=True`` or an empty prompt gives the null embedding."""
    cfg = config or UNetConfig()
    enc = _encoder_for(cfg.text_embed_dim, cfg.text_max_len, cfg.text_vocab)
    tokens = [] if drop else enc.tokenize(text)
    vectors = enc([text], drop=[drop])[0]
    return TextEmbedding(tokens=tokens, vectors=vectors, is_null=not tokens)


class DualBranchModel(nn.Module):
    def __init__(self, cfg):
        super().__init__()
        self.cfg = cfg
        self.generation = UNet(cfg, cfg.in_channels_generation, cross_attention=True, with_head=True)
        self.conditioning = UNet(cfg, cfg.in_channels_conditioning, cross_attention=False,
                                 with_head=False)
        self.injectors = nn.ModuleDict(
            {name: nn.Conv2d(ch, ch, 1) for name, ch in cfg.block_channels()}
        )
        self.text_encoder = HashedTextEncoder(cfg.text_embed_dim, cfg.text_max_len, cfg.text_vocab)
        self.w = cfg.preservation_scale

    def condition_input(self, z_t, condition):
        return torch.cat([z_t, condition["z_m"], condition["x_m"], condition["x_d"]], dim=1)

    def injected_residuals(self, z_t, t, condition, w=None):
        """Per-block ``w * Z_k(c_k)`` added to the generation branch."""
        w = self.w if w is None else w
        missing = {"z_m", "x_m", "x_d"} - set(condition)
        if missing:
            raise KeyError(f"condition is missing fields: {sorted(missing)}")
        feats = self.conditioning(self.condition_input(z_t, condition), t)
        names = [n for n, _ in self.cfg.block_channels()]
        return {name: w * self.injectors[name](f) for name, f in zip(names, feats)}

    def forward_generation(self, z_t, t, text):
        return self.generation(z_t, t, text)

    def forward(self, z_t, t, condition, text, w=None):
        w = self.w if w is None else w
        if condition["z_m"].shape != z_t.shape:
            raise ValueError(
                f"z_m shape {tuple(condition['z_m'].shape)} != z_t shape {tuple(z_t.shape)}"
            )
        if w == 0:
            return self.generation(z_t, t, text)
        return self.generation(z_t, t, text, injections=self.injected_residuals(z_t, t, condition, w))

    def embed(self, prompts, drop=None, dtype=None):
        dtype = dtype or next(self.parameters()).dtype
        return self.text_encoder(prompts, drop=drop, dtype=dtype)

    def null_text(self, n=1):
        return self.text_encoder.null(n, next(self.parameters()).dtype)

    def trainable_parameters(self):
        """Parameters the trainer updates under the current freeze policy."""
        params = list(self.conditioning.parameters()) + list(self.injectors.parameters())
        if not self.cfg.freeze_generation:
            params += list(self.generation.parameters())
        return params

    def apply_freeze_policy(self):
        for p in self.generation.parameters():
            p.requires_grad_(not self.cfg.freeze_generation)
        return self


def forward_joint(model, z_t, condition, t, text, w=None):
    return model(z_t, t, condition, text, w=w)


def clone_conditioning(model):
    """Re-initialize the conditioning branch from the generation branch.

    Shared layers are copied; the stem copies the generation stem for the
    ``z_t`` channels, keeps its own weights for ``z_m`` channels and zeroes
    the mask and depth channels. Every injector is set to all-zero.
    """
    gen_state = model.generation.state_dict()
    cond_state = model.conditioning.state_dict()
    for name, value in cond_state.items():
        if name in gen_state and gen_state[name].shape == value.shape:
            cond_state[name] = gen_state[name].clone()
    lc = model.cfg.latent_channels
    stem_w = cond_state["stem.weight"].clone()
    stem_w[:, :lc] = gen_state["stem.weight"]
    stem_w[:, 2 * lc :] = 0.0
    cond_state["stem.weight"] = stem_w
    cond_state["stem.bias"] = gen_state["stem.bias"].clone()
    model.conditioning.load_state_dict(cond_state)
    with torch.no_grad():
        for conv in model.injectors.values():
            conv.weight.zero_()
            conv.bias.zero_()
    return model


def build(config=None, seed=0, dtype=torch.float32):
    """Construct a dual-branch model with deterministic initialization.

    The generation branch uses PyTorch's default (Kaiming-uniform) layer
    initialization under ``torch.manual_seed(seed)``. The conditioning branch
    is a copy of it minus cross-attention; its stem copies the generation
    stem for the ``z_t`` channels, keeps a fresh init for ``z_m`` channels
    and zeroes the mask and depth channels. Every injector is all-zero.
    """
    cfg = copy.deepcopy(config) if config is not None else UNetConfig()
    state = torch.random.get_rng_state()
    torch.manual_seed(seed)
    try:
        model = DualBranchModel(cfg)
    finally:
        torch.random.set_rng_state(state)

    clone_conditioning(model)
    model.to(dtype)
    model.apply_freeze_policy()
    return model


def parameter_hash(module):
    """SHA-256 over parameter names and raw bytes, in ``named_parameters`` order."""
    h = hashlib.sha256()
    for name, p in module.named_parameters():
        h.update(name.encode())
        h.update(p.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def save_checkpoint(model, path, extra=None):
    """Write a checkpoint: magic, version, JSON header, float32 LE blobs.

    Layout::

        8 bytes  magic b"DBUNETCK"
        u32 LE   format version
        u32 LE   header length in bytes
        header   UTF-8 JSON {"config", "tensors": [{name, shape, offset, count}], "extra"}
        blobs    concatenated little-endian float32 data, offsets relative to blob start
    """
    state = {k: v.detach().cpu() for k, v in model.state_dict().items()}
    entries, offset, blobs = [], 0, []
    for name in sorted(state):
        arr = state[name].numpy().astype("<f4", copy=False)
        data = np.ascontiguousarray(arr).tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "count": int(arr.size)})
        blobs.append(data)
        offset += len(data)
    header = json.dumps(
        {"config": model.cfg.to_dict(), "tensors": entries, "extra": extra or {}}, sort_keys=True
    ).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(header)))
        fh.write(header)
        for b in blobs:
            fh.write(b)


def read_checkpoint(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a dual-branch checkpoint")
    version, hlen = struct.unpack("<II", raw[8:16])
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(raw[16 : 16 + hlen].decode("utf-8"))
    base = 16 + hlen
    tensors = {}
    for e in header["tensors"]:
        start = base + e["offset"]
        arr = np.frombuffer(raw, dtype="<f4", count=e["count"], offset=start)
        tensors[e["name"]] = torch.from_numpy(arr.reshape(e["shape"]).astype(np.float32))
    return header, tensors


def load_checkpoint(path, dtype=torch.float32):
    header, tensors = read_checkpoint(path)
    cfg = UNetConfig.from_dict(header["config"])
    model = build(cfg, seed=0)
    model.load_state_dict(tensors)
    model.to(dtype)
    model.apply_freeze_policy()
    return model, header.get("extra", {})
