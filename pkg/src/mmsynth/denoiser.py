"""Latent-space noise predictor.

A small UNet over latent grids. Each down stage runs a bottleneck
residual block (1x1, 3x3, 1x1 convolutions with a residual join), a
dual-branch receptive-field fusion (5x5 and 7x7 convolutions blended
per element by a learned attention unit), and optionally a transformer
block where latent tokens attend to themselves and then to condition
tokens; stage outputs are remembered, wavelet-filtered, and re-injected
as skip connections on the symmetric up path. The final projection is
zero-initialized so an untrained network predicts exactly zero noise.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, asdict, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .conditions import GateParams, gate_channels
from .coopfilter import FilterPolicy, cooperative_filter

PAD_MODES = ("zeros", "circular")


@dataclass(frozen=True)
class DenoiserSpec:
    """Architecture description; resolutions derive from latent_size."""

    latent_channels: int = 4
    latent_size: int = 8
    cond_channels: int = 17
    base_width: int = 64
    channel_mult: tuple[int, ...] = (1, 2)
    n_transformer_blocks: int = 1
    n_heads: int = 4
    time_embed_dim: int = 128
    attention_resolutions: tuple[int, ...] | None = None
    pad_mode: str = "zeros"
    cond_concat: bool = False
    modified_blocks: bool = True
    coop_skips: bool = True
    autoweight: bool = True

    def __post_init__(self):
        if self.base_width < 1 or self.latent_channels < 1 or self.cond_channels < 1:
            raise ValueError("widths and channel counts must be positive")
        if self.pad_mode not in PAD_MODES:
            raise ValueError(f"pad_mode must be one of {PAD_MODES}")
        if self.time_embed_dim % 2:
            raise ValueError("time_embed_dim must be even")
        if self.latent_size % (2 ** self.depth):
            raise ValueError(
                f"latent size {self.latent_size} not divisible by 2^{self.depth}"
            )
        for r in self.resolved_attention():
            if r not in self.ladder():
                raise ValueError(f"attention size {r} not on feature ladder {self.ladder()}")

    @property
    def depth(self) -> int:
        return len(self.channel_mult)

    def ladder(self) -> tuple[int, ...]:
        """Feature sizes from the latent down to the bottleneck."""
        return tuple(self.latent_size // 2**i for i in range(self.depth + 1))

    def resolved_attention(self) -> tuple[int, ...]:
        """Default: the three coarsest rungs of the ladder."""
        if self.attention_resolutions is not None:
            return self.attention_resolutions
        return tuple(sorted(self.ladder())[:3])

    def stage_widths(self) -> tuple[int, ...]:
        return tuple(self.base_width * m for m in self.channel_mult)


def sinusoidal_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    """Classic frequency features of the raw step index, (B, dim)."""
    half = dim // 2
    dtype = t.dtype if t.is_floating_point() else torch.float32
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=dtype) / half)
    args = t.to(dtype)[:, None] * freqs[None]
    return torch.cat([torch.cos(args), torch.sin(args)], dim=-1)


def _conv(cin, cout, k, pad_mode, stride=1):
    return nn.Conv2d(cin, cout, k, stride=stride, padding=k // 2, padding_mode=pad_mode)


def _zeroed(module: nn.Conv2d) -> nn.Conv2d:
    nn.init.zeros_(module.weight)
    nn.init.zeros_(module.bias)
    return module


class BottleneckResBlock(nn.Module):
    """1x1 -> 3x3 -> 1x1 conv chain with residual join and step features.

    The closing convolution is zero-initialized, so a freshly built
    block is the identity whenever input and output widths agree.
    """

    def __init__(self, cin, cout, temb_dim, pad_mode):
        super().__init__()
        mid = max(cout // 2, 8)
        self.norm1 = nn.GroupNorm(min(8, cin), cin)
        self.conv1 = nn.Conv2d(cin, mid, 1)
        self.temb_proj = nn.Linear(temb_dim, mid)
        self.norm2 = nn.GroupNorm(min(8, mid), mid)
        self.conv2 = _conv(mid, mid, 3, pad_mode)
        self.norm3 = nn.GroupNorm(min(8, mid), mid)
        self.conv3 = _zeroed(nn.Conv2d(mid, cout, 1))
        self.skip = nn.Identity() if cin == cout else nn.Conv2d(cin, cout, 1)

    def forward(self, x, temb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.temb_proj(F.silu(temb))[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        h = self.conv3(F.silu(self.norm3(h)))
        return self.skip(x) + h


class PlainResBlock(nn.Module):
    """Two 3x3 convolutions with a residual join; the unmodified variant."""

    def __init__(self, cin, cout, temb_dim, pad_mode):
        super().__init__()
        self.norm1 = nn.GroupNorm(min(8, cin), cin)
        self.conv1 = _conv(cin, cout, 3, pad_mode)
        self.temb_proj = nn.Linear(temb_dim, cout)
        self.norm2 = nn.GroupNorm(min(8, cout), cout)
        self.conv2 = _zeroed(_conv(cout, cout, 3, pad_mode))
        self.skip = nn.Identity() if cin == cout else nn.Conv2d(cin, cout, 1)

    def forward(self, x, temb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.temb_proj(F.silu(temb))[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


class ReceptiveFusion(nn.Module):
    """Blend 5x5 and 7x7 conv branches with learned per-element weights.

    The blend weight is the squashed sum of a local (per-pixel) and a
    global (pooled) channel-attention pass over the summed branches.
    Branch convolutions start at zero, so the module opens as identity.
    """

    def __init__(self, width, pad_mode):
        super().__init__()
        squeeze = max(width // 4, 8)
        self.branch5 = _zeroed(_conv(width, width, 5, pad_mode))
        self.branch7 = _zeroed(_conv(width, width, 7, pad_mode))
        self.local = nn.Sequential(
            nn.Conv2d(width, squeeze, 1), nn.SiLU(), nn.Conv2d(squeeze, width, 1)
        )
        self.pooled = nn.Sequential(
            nn.Conv2d(width, squeeze, 1), nn.SiLU(), nn.Conv2d(squeeze, width, 1)
        )

    def forward(self, x):
        b5, b7 = self.branch5(x), self.branch7(x)
        s = b5 + b7
        logits = self.local(s) + self.pooled(s.mean(dim=(-2, -1), keepdim=True))
        blend = torch.sigmoid(logits)
        return x + blend * b5 + (1.0 - blend) * b7


class CondTransformer(nn.Module):
    """Token mixer over a feature map with condition injection.

    Feature pixels become tokens (no positional code; spatial structure
    comes from the surrounding convolutions). Each inner block applies
    self-attention, cross-attention onto the condition tokens, and a
    position-wise MLP, all pre-normalized with residual joins. The
    output projection starts small, so the module opens near the
    identity while keeping the condition path live from the first
    optimizer step.
    """

    def __init__(self, width, cond_dim, n_blocks, n_heads):
        super().__init__()
        if width % n_heads:
            raise ValueError(f"width {width} not divisible by {n_heads} heads")
        self.norm_in = nn.GroupNorm(min(8, width), width)
        self.proj_in = nn.Conv2d(width, width, 1)
        self.blocks = nn.ModuleList()
        for _ in range(n_blocks):
            self.blocks.append(
                nn.ModuleDict(
                    {
                        "ln1": nn.LayerNorm(width),
                        "self_attn": nn.MultiheadAttention(width, n_heads, batch_first=True),
                        "ln2": nn.LayerNorm(width),
                        "cross_attn": nn.MultiheadAttention(
                            width, n_heads, kdim=cond_dim, vdim=cond_dim, batch_first=True
                        ),
                        "ln3": nn.LayerNorm(width),
                        "mlp": nn.Sequential(
                            nn.Linear(width, 4 * width), nn.GELU(), nn.Linear(4 * width, width)
                        ),
                    }
                )
            )
        self.proj_out = nn.Conv2d(width, width, 1)
        with torch.no_grad():
            self.proj_out.weight *= 0.1
            nn.init.zeros_(self.proj_out.bias)

    def forward(self, x, cond_tokens):
        b, c, h, w = x.shape
        t = self.proj_in(self.norm_in(x)).flatten(2).transpose(1, 2)  # (B, hw, C)
        for blk in self.blocks:
            q = blk["ln1"](t)
            t = t + blk["self_attn"](q, q, q, need_weights=False)[0]
            q = blk["ln2"](t)
            t = t + blk["cross_attn"](q, cond_tokens, cond_tokens, need_weights=False)[0]
            t = t + blk["mlp"](blk["ln3"](t))
        t = t.transpose(1, 2).reshape(b, c, h, w)
        return x + self.proj_out(t)


class _DownStage(nn.Module):
    def __init__(self, cin, cout, size, spec: DenoiserSpec):
        super().__init__()
        block = BottleneckResBlock if spec.modified_blocks else PlainResBlock
        self.res = block(cin, cout, spec.time_embed_dim, spec.pad_mode)
        self.fuse = (
            ReceptiveFusion(cout, spec.pad_mode) if spec.modified_blocks else None
        )
        self.attn = (
            CondTransformer(cout, spec.cond_channels, spec.n_transformer_blocks, spec.n_heads)
            if size in spec.resolved_attention()
            else None
        )
        self.down = _conv(cout, cout, 3, spec.pad_mode, stride=2)


class _UpStage(nn.Module):
    def __init__(self, cin, skip_w, cout, size, spec: DenoiserSpec):
        super().__init__()
        block = BottleneckResBlock if spec.modified_blocks else PlainResBlock
        self.up_conv = _conv(cin, cin, 3, spec.pad_mode)
        self.res = block(cin + skip_w, cout, spec.time_embed_dim, spec.pad_mode)
        self.attn = (
            CondTransformer(cout, spec.cond_channels, spec.n_transformer_blocks, spec.n_heads)
            if size in spec.resolved_attention()
            else None
        )


class DenoiserNet(nn.Module):
    def __init__(self, spec: DenoiserSpec):
        super().__init__()
        self.spec = spec
        widths = spec.stage_widths()
        sizes = spec.ladder()
        temb = spec.time_embed_dim
        self.time_mlp = nn.Sequential(nn.Linear(temb, temb), nn.SiLU(), nn.Linear(temb, temb))
        self.gate = GateParams(spec.cond_channels) if spec.autoweight else None

        cin = spec.latent_channels + (spec.cond_channels if spec.cond_concat else 0)
        self.conv_in = _conv(cin, widths[0], 3, spec.pad_mode)

        self.down_stages = nn.ModuleList()
        prev = widths[0]
        for i, w in enumerate(widths):
            self.down_stages.append(_DownStage(prev, w, sizes[i], spec))
            prev = w

        self.mid_res1 = (BottleneckResBlock if spec.modified_blocks else PlainResBlock)(
            prev, prev, temb, spec.pad_mode
        )
        self.mid_attn = (
            CondTransformer(prev, spec.cond_channels, spec.n_transformer_blocks, spec.n_heads)
            if sizes[-1] in spec.resolved_attention()
            else None
        )
        self.mid_res2 = (BottleneckResBlock if spec.modified_blocks else PlainResBlock)(
            prev, prev, temb, spec.pad_mode
        )

        self.up_stages = nn.ModuleList()
        for i in reversed(range(len(widths))):
            cout = widths[i - 1] if i > 0 else widths[0]
            self.up_stages.append(_UpStage(prev, widths[i], cout, sizes[i], spec))
            prev = cout

        self.norm_out = nn.GroupNorm(min(8, prev), prev)
        self.conv_out = _zeroed(_conv(prev, spec.latent_channels, 3, spec.pad_mode))
        self.filter_policy = FilterPolicy(wrap=spec.pad_mode == "circular")

    def forward(self, latent, t, cond):
        if latent.shape[1] != self.spec.latent_channels:
            raise ValueError(f"expected {self.spec.latent_channels} latent channels")
        if cond.shape[1] != self.spec.cond_channels:
            raise ValueError(
                f"condition stack has {cond.shape[1]} channels, spec says {self.spec.cond_channels}"
            )
        if cond.shape[0] != latent.shape[0]:
            raise ValueError("latent and condition batch sizes differ")
        temb = self.time_mlp(sinusoidal_embedding(t, self.spec.time_embed_dim))
        if self.gate is not None:
            cond = gate_channels(cond, self.gate)
        tokens = cond.flatten(2).transpose(1, 2)

        x = torch.cat([latent, cond], dim=1) if self.spec.cond_concat else latent
        x = self.conv_in(x)
        skips = []
        for stage in self.down_stages:
            x = stage.res(x, temb)
            if stage.fuse is not None:
                x = stage.fuse(x)
            if stage.attn is not None:
                x = stage.attn(x, tokens)
            skips.append(x)
            x = stage.down(x)

        x = self.mid_res1(x, temb)
        if self.mid_attn is not None:
            x = self.mid_attn(x, tokens)
        x = self.mid_res2(x, temb)

        for stage in self.up_stages:
            x = F.interpolate(x, scale_factor=2, mode="nearest")
            x = stage.up_conv(x)
            s = skips.pop()
            if self.spec.coop_skips:
                s = cooperative_filter(s, policy=self.filter_policy)
            x = stage.res(torch.cat([x, s], dim=1), temb)
            if stage.attn is not None:
                x = stage.attn(x, tokens)

        return self.conv_out(F.silu(self.norm_out(x)))


@dataclass
class DenoiserState:
    """Network plus its averaged shadow parameters and a step counter."""

    model: DenoiserNet
    ema: dict[str, torch.Tensor] = field(default_factory=dict)
    step_count: int = 0

    def __post_init__(self):
        if not self.ema:
            self.ema = {
                k: v.detach().clone() for k, v in self.model.named_parameters()
            }


def build_denoiser(spec: DenoiserSpec, seed: int = 0) -> DenoiserState:
    """Deterministically initialized network with shadow copy attached."""
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        model = DenoiserNet(spec)
    return DenoiserState(model=model)


def parameter_count(state: DenoiserState) -> int:
    return sum(p.numel() for p in state.model.parameters())


def predict_noise(state: DenoiserState, latent_t, t, cond, use_ema: bool = False):
    """Run the (optionally averaged) network on one latent or a batch.

    `t` may be an int applied to the whole batch or a length-B vector
    of step indices, all >= 1.
    """
    model = ema_model(state) if use_ema else state.model
    x = latent_t if isinstance(latent_t, torch.Tensor) else torch.as_tensor(
        np.asarray(latent_t), dtype=torch.float32
    )
    c = cond if isinstance(cond, torch.Tensor) else torch.as_tensor(
        np.asarray(cond), dtype=torch.float32
    )
    single = x.ndim == 3
    if single:
        x = x[None]
    if c.ndim == 3:
        c = c.expand(x.shape[0], *c.shape) if x.shape[0] > 1 else c[None]
    tv = torch.as_tensor(t, dtype=torch.float32).reshape(-1)
    if tv.numel() == 1:
        tv = tv.expand(x.shape[0])
    if (tv < 1).any():
        raise ValueError("step indices must be >= 1")
    out = model(x, tv, c)
    return out[0] if single else out


def ema_update(state: DenoiserState, rate: float = 0.9999) -> DenoiserState:
    """Pull the shadow toward the live parameters by (1 - rate).

    Written as the plain two-product recurrence so an elementwise
    reference loop reproduces it bit for bit.
    """
    if not (0.0 <= rate < 1.0):
        raise ValueError("rate must lie in [0, 1)")
    with torch.no_grad():
        for name, param in state.model.named_parameters():
            shadow = state.ema[name]
            shadow.copy_(shadow * rate + param.detach() * (1.0 - rate))
    return state


def ema_model(state: DenoiserState) -> DenoiserNet:
    """Fresh network carrying the shadow parameters (used for sampling)."""
    model = DenoiserNet(state.model.spec)
    sd = {k: v.detach().clone() for k, v in state.model.state_dict().items()}
    sd.update({k: v.clone() for k, v in state.ema.items()})
    model.load_state_dict(sd)
    model.eval()
    return model


def save_denoiser(state: DenoiserState, path, config_hash: str = "") -> None:
    spec_dict = asdict(state.model.spec)
    torch.save(
        {
            "kind": "denoiser",
            "spec": spec_dict,
            "state_dict": state.model.state_dict(),
            "ema": state.ema,
            "step_count": state.step_count,
            "config_hash": config_hash,
        },
        path,
    )


def load_denoiser(path) -> DenoiserState:
    blob = torch.load(path, weights_only=True)
    if blob.get("kind") != "denoiser":
        raise ValueError(f"not a denoiser checkpoint: {path}")
    sd = dict(blob["spec"])
    for key in ("channel_mult", "attention_resolutions"):
        if sd.get(key) is not None:
            sd[key] = tuple(sd[key])
    spec = DenoiserSpec(**sd)
    model = DenoiserNet(spec)
    model.load_state_dict(blob["state_dict"])
    state = DenoiserState(model=model, ema=dict(blob["ema"]), step_count=int(blob["step_count"]))
    state.config_hash = blob.get("config_hash", "")
    return state
