"""Wavelet-domain denoising of feature maps.

A feature plane is decomposed with an orthonormal Haar transform, the
approximation and diagonal bands are cleaned by similar-block matching
(each patch is replaced by the mean of its nearest neighbours), the
horizontal and vertical bands by soft thresholding, and the result is
reconstructed with the inverse transform. Everything runs on torch
tensors so the filter can sit inside a network's forward pass; numpy
arrays are accepted and returned for convenience.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
import torch
import torch.nn.functional as F

_SQRT2 = math.sqrt(2.0)


class DetailBands(NamedTuple):
    horiz: torch.Tensor  # horizontal-edge band (vertical difference)
    vert: torch.Tensor  # vertical-edge band (horizontal difference)
    diag: torch.Tensor


@dataclass
class WaveletPyramid:
    """Multi-level Haar decomposition; details[0] is the finest level."""

    approx: torch.Tensor
    details: list[DetailBands]

    @property
    def levels(self) -> int:
        return len(self.details)


@dataclass(frozen=True)
class FilterPolicy:
    threshold_mode: str = "soft"
    threshold_value: float | str = "universal"
    block_size: int = 2
    match_count: int = 4
    wrap: bool = False  # cyclic patch grid; keeps the filter shift-equivariant
    # squared-distance cutoff for accepting a matched patch into the group
    # mean; None averages all match_count candidates unconditionally
    match_gate: float | None = None

    def __post_init__(self):
        if self.threshold_mode != "soft":
            raise ValueError(f"unsupported threshold mode '{self.threshold_mode}'")
        if self.block_size < 1:
            raise ValueError("block_size must be >= 1")
        if self.match_count < 1:
            raise ValueError("match_count must be >= 1")
        if self.match_gate is not None and self.match_gate < 0:
            raise ValueError("match_gate must be >= 0")


def _as_tensor(x):
    if isinstance(x, torch.Tensor):
        return x, False
    return torch.as_tensor(np.asarray(x), dtype=torch.float32), True


def _haar_analysis(x: torch.Tensor):
    """One orthonormal Haar level on the trailing two dims (even sizes)."""
    lo_w = (x[..., :, 0::2] + x[..., :, 1::2]) / _SQRT2
    hi_w = (x[..., :, 0::2] - x[..., :, 1::2]) / _SQRT2
    approx = (lo_w[..., 0::2, :] + lo_w[..., 1::2, :]) / _SQRT2
    horiz = (lo_w[..., 0::2, :] - lo_w[..., 1::2, :]) / _SQRT2
    vert = (hi_w[..., 0::2, :] + hi_w[..., 1::2, :]) / _SQRT2
    diag = (hi_w[..., 0::2, :] - hi_w[..., 1::2, :]) / _SQRT2
    return approx, DetailBands(horiz, vert, diag)


def _haar_synthesis(approx: torch.Tensor, bands: DetailBands) -> torch.Tensor:
    horiz, vert, diag = bands
    h2, w2 = approx.shape[-2] * 2, approx.shape[-1] * 2
    lo_w = approx.new_zeros(*approx.shape[:-2], h2, approx.shape[-1])
    hi_w = torch.zeros_like(lo_w)
    lo_w[..., 0::2, :] = (approx + horiz) / _SQRT2
    lo_w[..., 1::2, :] = (approx - horiz) / _SQRT2
    hi_w[..., 0::2, :] = (vert + diag) / _SQRT2
    hi_w[..., 1::2, :] = (vert - diag) / _SQRT2
    out = lo_w.new_zeros(*approx.shape[:-2], h2, w2)
    out[..., :, 0::2] = (lo_w + hi_w) / _SQRT2
    out[..., :, 1::2] = (lo_w - hi_w) / _SQRT2
    return out


def dwt2(grid, levels: int = 1) -> WaveletPyramid:
    """Recursive orthonormal Haar analysis of the approximation band."""
    x, _ = _as_tensor(grid)
    if levels < 1:
        raise ValueError("levels must be >= 1")
    h, w = x.shape[-2:]
    div = 2**levels
    if h % div or w % div or h < div or w < div:
        raise ValueError(f"grid sides {(h, w)} not divisible by 2^{levels}")
    details: list[DetailBands] = []
    cur = x
    for _ in range(levels):
        cur, bands = _haar_analysis(cur)
        details.append(bands)
    return WaveletPyramid(approx=cur, details=details)


def idwt2(pyr: WaveletPyramid):
    """Exact inverse of dwt2 on untouched pyramids."""
    cur = pyr.approx
    for bands in reversed(pyr.details):
        for band in bands:
            if band.shape != cur.shape:
                raise ValueError(
                    f"inconsistent pyramid: band shape {tuple(band.shape)} vs {tuple(cur.shape)}"
                )
        cur = _haar_synthesis(cur, bands)
    return cur


def universal_threshold(band: torch.Tensor, finest_diag: torch.Tensor) -> torch.Tensor:
    """Noise-adaptive threshold: mad-estimated sigma times sqrt(2 ln n).

    Returns one value per plane (trailing two dims treated as the band).
    """
    flat = finest_diag.reshape(*finest_diag.shape[:-2], -1)
    sigma = flat.abs().median(dim=-1).values / 0.6745
    n = band.shape[-1] * band.shape[-2]
    return sigma * math.sqrt(2.0 * math.log(n)) if n > 1 else sigma * 0.0


def soft_threshold(coeffs, lam):
    """Shrink towards zero: sign(x) * max(|x| - lam, 0)."""
    x, from_numpy = _as_tensor(coeffs)
    if isinstance(lam, torch.Tensor):
        if (lam < 0).any():
            raise ValueError("threshold must be >= 0")
        lam = lam.reshape(*lam.shape, 1, 1)
    elif lam < 0:
        raise ValueError("threshold must be >= 0")
    out = torch.sign(x) * torch.clamp(x.abs() - lam, min=0.0)
    return out.numpy() if from_numpy else out


def block_match_filter(coeffs, policy: FilterPolicy | None = None):
    """Replace every patch by the mean of its nearest patches.

    Patches are extracted with unit stride; for each reference patch the
    `match_count` closest patches by squared distance (the reference
    itself always first) are averaged, and overlapping outputs are
    combined with uniform weights.
    """
    policy = policy or FilterPolicy()
    x, from_numpy = _as_tensor(coeffs)
    squeeze = x.ndim == 2
    planes = x.reshape(-1, *x.shape[-2:]) if not squeeze else x[None]
    h, w = planes.shape[-2:]
    if h < policy.block_size or w < policy.block_size:
        raise ValueError(f"grid {(h, w)} smaller than block_size {policy.block_size}")
    n_patches = _patch_count(h, w, policy.block_size, policy.wrap)
    if policy.match_count > n_patches:
        raise ValueError(f"match_count {policy.match_count} exceeds {n_patches} patches")
    gate = None
    if policy.match_gate is not None:
        gate = planes.new_full((planes.shape[0],), float(policy.match_gate))
    out = _block_match_planes(planes, policy.block_size, policy.match_count,
                              policy.wrap, gate)
    out = out[0] if squeeze else out.reshape(x.shape)
    return out.numpy() if from_numpy else out


def _patch_count(h: int, w: int, block: int, wrap: bool) -> int:
    return h * w if wrap else (h - block + 1) * (w - block + 1)


def _block_match_planes(planes: torch.Tensor, block: int, k: int, wrap: bool,
                        gate: torch.Tensor | None = None) -> torch.Tensor:
    n, h, w = planes.shape
    src = planes[:, None]
    if wrap and block > 1:
        src = F.pad(src, (0, block - 1, 0, block - 1), mode="circular")
    patches = F.unfold(src, block)  # (n, block^2, P)
    pt = patches.transpose(1, 2)  # (n, P, block^2)
    p = pt.shape[1]
    sq = (pt * pt).sum(-1)
    dist = sq[:, :, None] + sq[:, None, :] - 2.0 * (pt @ pt.transpose(1, 2))
    dist = dist.clamp_min(0.0)
    # the reference patch must always head its own group
    eye = torch.eye(p, dtype=torch.bool, device=planes.device)
    dist = dist.masked_fill(eye[None], -1.0)
    top = dist.topk(k, dim=-1, largest=False)
    flat = pt.reshape(n * p, -1)
    gather = (top.indices + torch.arange(n, device=planes.device)[:, None, None] * p).reshape(-1)
    groups = flat[gather].reshape(n, p, k, -1)
    if gate is None:
        rep = groups.mean(dim=2).transpose(1, 2)  # (n, block^2, P)
    else:
        # only candidates within the similarity gate enter the mean; the
        # reference itself (distance masked to -1) is always a member
        member = (top.values <= gate[:, None, None]).to(groups.dtype)
        rep = (groups * member[..., None]).sum(2) / member.sum(2)[..., None]
        rep = rep.transpose(1, 2)
    if wrap and block > 1:
        canvas = F.fold(rep, (h + block - 1, w + block - 1), block)
        acc = canvas[..., :h, :w].clone()
        acc[..., : block - 1, :] += canvas[..., h:, :w]
        acc[..., :, : block - 1] += canvas[..., :h, w:]
        acc[..., : block - 1, : block - 1] += canvas[..., h:, w:]
        return (acc / float(block * block))[:, 0]
    summed = F.fold(rep, (h, w), block)
    weight = F.fold(torch.ones_like(patches), (h, w), block)
    return (summed / weight)[:, 0]


def default_levels(h: int, w: int) -> int:
    """Two analysis levels where divisibility allows, one on small maps."""
    return 1 if min(h, w) < 16 else 2


# a matched patch joins the group mean only if its squared distance stays
# within this multiple of the expected noise-to-noise patch distance
MATCH_GATE_FACTOR = 8.0


def cooperative_filter(feature, levels: int | None = None, policy: FilterPolicy | None = None):
    """Channelwise wavelet filtering of a feature map.

    Block matching cleans the approximation and diagonal bands; soft
    thresholding (universal by default, sigma estimated from the finest
    diagonal band) cleans the horizontal and vertical bands at every
    level. Matched patches beyond a noise-scaled similarity gate are
    excluded from the group mean, so a noiseless input passes through
    nearly unchanged. The block size and match count shrink automatically
    on bands too small for the configured values, degrading to identity.
    Output shape always equals input shape.
    """
    policy = policy or FilterPolicy()
    x, from_numpy = _as_tensor(feature)
    h, w = x.shape[-2:]
    levels = default_levels(h, w) if levels is None else levels
    planes = x.reshape(-1, h, w)

    pyr = dwt2(planes, levels)
    lam_base = None
    if policy.threshold_value == "universal":
        flat = pyr.details[0].diag.reshape(planes.shape[0], -1)
        lam_base = flat.abs().median(dim=-1).values / 0.6745

    if policy.match_gate is not None:
        gate = planes.new_full((planes.shape[0],), float(policy.match_gate))
    elif lam_base is not None:
        block = policy.block_size
        gate = MATCH_GATE_FACTOR * block * block * lam_base * lam_base
    else:
        gate = None

    approx = _adaptive_block_match(pyr.approx, policy, gate)
    details = []
    for bands in pyr.details:
        n_band = bands.horiz.shape[-1] * bands.horiz.shape[-2]
        if lam_base is not None:
            lam = lam_base * math.sqrt(2.0 * math.log(n_band)) if n_band > 1 else lam_base * 0.0
        else:
            lam = float(policy.threshold_value)
        details.append(
            DetailBands(
                horiz=soft_threshold(bands.horiz, lam),
                vert=soft_threshold(bands.vert, lam),
                diag=_adaptive_block_match(bands.diag, policy, gate),
            )
        )
    out = idwt2(WaveletPyramid(approx=approx, details=details)).reshape(x.shape)
    return out.numpy() if from_numpy else out


def _adaptive_block_match(band: torch.Tensor, policy: FilterPolicy,
                          gate: torch.Tensor | None = None) -> torch.Tensor:
    h, w = band.shape[-2:]
    block = min(policy.block_size, h, w)
    n_patches = _patch_count(h, w, block, policy.wrap)
    k = min(policy.match_count, n_patches)
    if k <= 1 and n_patches <= 1:
        return band
    return _block_match_planes(band.reshape(-1, h, w), block, k, policy.wrap,
                               gate).reshape(band.shape)
