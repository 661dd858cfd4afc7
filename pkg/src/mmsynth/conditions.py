"""Condition assembly and adaptive channel weighting.

The guidance stack for one synthesis task holds, channels leading:
the encoded latents of every source modality (alphabetical order),
four pooled tissue-class occupancy masks, and one pooled density map.
A small learned gate rescales each channel by a factor in (1, 2)
according to its relative energy, so no condition is ever silenced
but informative channels can be emphasised.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn

from .phantoms import SliceSample, density_map

ROLE_LATENT = "modality-latent"
ROLE_MASK = "mask"
ROLE_DENSITY = "density"

BRAIN_CLASSES = (1, 2, 3, 4)  # white matter, gray matter, fluid, lesion


@dataclass
class ConditionSet:
    """Assembled guidance grid with a tag for every channel."""

    y: torch.Tensor  # (channels, h, w) float32
    channel_roles: list[str] = field(default_factory=list)

    def __post_init__(self):
        if self.y.ndim != 3:
            raise ValueError(f"expected (channels, h, w) grid, got shape {tuple(self.y.shape)}")
        if len(self.channel_roles) != self.y.shape[0]:
            raise ValueError(
                f"{len(self.channel_roles)} roles for {self.y.shape[0]} channels"
            )

    @property
    def channels(self) -> int:
        return self.y.shape[0]


def area_pool(grid, factor: int):
    """Exact block averaging by an integer factor on the last two dims."""
    x = grid if isinstance(grid, torch.Tensor) else torch.as_tensor(np.asarray(grid), dtype=torch.float32)
    h, w = x.shape[-2:]
    if factor < 1 or h % factor or w % factor:
        raise ValueError(f"factor {factor} does not tile grid {(h, w)}")
    pooled = x.reshape(*x.shape[:-2], h // factor, factor, w // factor, factor).mean(dim=(-3, -1))
    return pooled.numpy() if not isinstance(grid, torch.Tensor) else pooled


def one_hot_masks(tissue: np.ndarray) -> torch.Tensor:
    """Per-class occupancy planes for the four brain classes, (4, H, W)."""
    labels = torch.as_tensor(np.asarray(tissue))
    return torch.stack([(labels == c).float() for c in BRAIN_CLASSES])


def build_structural_condition(
    sample: SliceSample,
    target_modality: str,
    source_modality: str | None,
    codec,
    sources: list[str] | None = None,
    include_structure: bool = True,
) -> ConditionSet:
    """Assemble the guidance stack for synthesizing one modality.

    Sources default to every modality in the sample except the target,
    sorted by name; the density map is derived from `source_modality`
    or, when None, the alphabetically first source. Structural channels
    (masks plus density) are pooled to the latent resolution and can be
    dropped wholesale with include_structure=False.
    """
    if sources is None:
        sources = sorted(m for m in sample.images if m != target_modality)
    else:
        sources = sorted(sources)
    if target_modality in sources:
        raise ValueError(f"target modality '{target_modality}' listed among sources")
    if not sources:
        raise ValueError("no source modalities available")
    for name in sources:
        if name not in sample.images:
            raise KeyError(f"source modality '{name}' not in sample")

    factor = codec.downsample_factor
    h, w = sample.tissue.labels.shape
    if h % factor or w % factor:
        raise ValueError(f"image size {(h, w)} not divisible by codec factor {factor}")

    planes: list[torch.Tensor] = []
    roles: list[str] = []
    for name in sources:
        latent = codec.encode(torch.as_tensor(sample.images[name], dtype=torch.float32))
        if latent.shape[-2:] != (h // factor, w // factor):
            raise ValueError(
                f"latent shape {tuple(latent.shape)} mismatches pooled size {(h // factor, w // factor)}"
            )
        planes.append(latent.detach())
        roles.extend([ROLE_LATENT] * latent.shape[0])

    if include_structure:
        masks = area_pool(one_hot_masks(sample.tissue.labels), factor)
        planes.append(masks)
        roles.extend([ROLE_MASK] * masks.shape[0])
        dens_source = source_modality if source_modality is not None else sources[0]
        if dens_source not in sample.images:
            raise KeyError(f"density source '{dens_source}' not in sample")
        dens = area_pool(torch.as_tensor(density_map(sample, dens_source)), factor)
        planes.append(dens[None])
        roles.append(ROLE_DENSITY)

    return ConditionSet(y=torch.cat(planes, dim=0).float(), channel_roles=roles)


class GateParams(nn.Module):
    """Learned per-channel energy gate; factor strictly inside (1, 2).

    scale multiplies each channel's energy before normalization, slope
    and offset shape the squashing that turns normalized energy into a
    gate factor. At initialization every channel is gated by exactly
    1.5 so training starts symmetric.
    """

    def __init__(self, channels: int, eps: float = 1e-4):
        super().__init__()
        if channels < 1:
            raise ValueError("need at least one channel")
        if eps <= 0:
            raise ValueError("eps must be positive")
        self.channels = int(channels)
        self.eps = float(eps)
        self.scale = nn.Parameter(torch.ones(channels))
        self.slope = nn.Parameter(torch.zeros(channels))
        self.offset = nn.Parameter(torch.zeros(channels))

    def forward(self, y: torch.Tensor) -> torch.Tensor:
        return gate_channels(y, self)


def channel_energy(plane, scale: float = 1.0, eps: float = 1e-4) -> float:
    """Scaled root energy of one channel: scale * sqrt(sum(x^2) + eps)."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    x = np.asarray(plane.detach() if isinstance(plane, torch.Tensor) else plane, dtype=np.float64)
    if not np.isfinite(x).all():
        raise ValueError("non-finite values in channel")
    return float(scale) * float(np.sqrt((x * x).sum() + eps))


def normalize_energies(energies, eps: float = 1e-4):
    """Map raw channel energies onto a common scale.

    Each entry becomes sqrt(S) * g / sqrt(sum(g^2) + eps) where S is the
    number of channels, so equal inputs map to 1 and the stabilizer
    guards the all-zero case.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    if isinstance(energies, torch.Tensor):
        s = energies.shape[-1]
        denom = torch.sqrt((energies * energies).sum(dim=-1, keepdim=True) + eps)
        return float(np.sqrt(s)) * energies / denom
    g = np.asarray(energies, dtype=np.float64)
    if g.ndim != 1 or g.size < 1:
        raise ValueError("expected a non-empty vector of energies")
    return np.sqrt(g.size) * g / np.sqrt((g * g).sum() + eps)


def gate_channels(y: torch.Tensor, params: GateParams) -> torch.Tensor:
    """Rescale condition channels by their gated relative energy.

    Accepts (channels, h, w) or (batch, channels, h, w); the gate factor
    is computed per channel (and per batch item) and lies in (1, 2) for
    finite inputs, so gating never removes a channel.
    """
    squeeze = y.ndim == 3
    yb = y[None] if squeeze else y
    if yb.ndim != 4:
        raise ValueError(f"expected 3 or 4 dims, got {y.ndim}")
    if yb.shape[1] != params.channels:
        raise ValueError(f"gate sized for {params.channels} channels, input has {yb.shape[1]}")
    energy = params.scale * torch.sqrt((yb * yb).sum(dim=(-2, -1)) + params.eps)
    norm = float(np.sqrt(params.channels)) * energy / torch.sqrt(
        (energy * energy).sum(dim=-1, keepdim=True) + params.eps
    )
    factor = 1.0 + torch.sigmoid(params.slope * norm + params.offset)
    out = yb * factor[..., None, None]
    return out[0] if squeeze else out
