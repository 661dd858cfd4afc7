"""Procedural multi-modal brain-like phantoms with ground-truth tissue masks.

Each phantom is a 2D slice built from nested elliptical tissue regions
(fluid rim, gray-matter band, white-matter core) plus an optional tumor
blob, rendered into several modality images through per-modality
intensity tables, a smooth multiplicative bias field and additive noise.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

BACKGROUND = 0
WHITE_MATTER = 1
GRAY_MATTER = 2
CSF = 3
TUMOR = 4
TISSUE_CLASSES = (WHITE_MATTER, GRAY_MATTER, CSF, TUMOR)

DEFAULT_MODALITIES = ("m1", "m2", "m3", "m4")
VALID_SIZES = (16, 32, 64)

# Base intensity per tissue class, one table per modality. The four
# tables loosely mirror T1 / T2 / contrast-enhanced / fluid-attenuated
# contrast behaviour so that no single source modality matches the others.
_BASE_INTENSITY = {
    "m1": {WHITE_MATTER: 0.80, GRAY_MATTER: 0.58, CSF: 0.18, TUMOR: 0.45},
    "m2": {WHITE_MATTER: 0.32, GRAY_MATTER: 0.55, CSF: 0.90, TUMOR: 0.70},
    "m3": {WHITE_MATTER: 0.75, GRAY_MATTER: 0.55, CSF: 0.20, TUMOR: 0.92},
    "m4": {WHITE_MATTER: 0.45, GRAY_MATTER: 0.68, CSF: 0.12, TUMOR: 0.85},
}


@dataclass(frozen=True)
class PhantomConfig:
    """Knobs of the generator; defaults keep the SNR realistic at 32x32."""

    noise_sigma: float = 0.02
    bias_amplitude: float = 0.15
    bias_smoothness: float = 0.25  # gaussian sigma as a fraction of image size
    tumor_prob: float = 0.5
    intensity_jitter: float = 0.04
    modalities: tuple[str, ...] = DEFAULT_MODALITIES

    def __post_init__(self):
        unknown = [m for m in self.modalities if m not in _BASE_INTENSITY]
        if unknown:
            raise ValueError(f"no intensity table for modalities {unknown}")


@dataclass
class TissueMap:
    """Integer label grid: 0 background, 1 WM, 2 GM, 3 CSF, 4 tumor."""

    labels: np.ndarray

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int32)
        if self.labels.ndim != 2:
            raise ValueError("tissue labels must be a 2D grid")
        bad = set(np.unique(self.labels)) - {BACKGROUND, *TISSUE_CLASSES}
        if bad:
            raise ValueError(f"unknown tissue labels {sorted(bad)}")

    @property
    def shape(self):
        return self.labels.shape

    def brain_mask(self) -> np.ndarray:
        return self.labels > BACKGROUND


@dataclass
class SliceSample:
    """One 2D multi-modal case: per-modality images plus the label map."""

    images: dict[str, np.ndarray]
    tissue: TissueMap
    sample_id: str
    rng_seed: int

    def __post_init__(self):
        shape = self.tissue.shape
        for name, img in self.images.items():
            img = np.asarray(img, dtype=np.float32)
            if img.shape != shape:
                raise ValueError(
                    f"modality '{name}' shape {img.shape} != tissue shape {shape}"
                )
            self.images[name] = img

    @property
    def size(self) -> int:
        return self.tissue.shape[0]

    @property
    def modalities(self) -> tuple[str, ...]:
        return tuple(sorted(self.images))


def generate_phantom(seed: int, size: int, config: PhantomConfig | None = None) -> SliceSample:
    """Deterministically render one phantom from (seed, size).

    Same inputs give a bit-identical sample across runs and platforms
    (PCG64 stream, fixed draw order).
    """
    if size not in VALID_SIZES:
        raise ValueError(f"size must be one of {VALID_SIZES}, got {size}")
    cfg = config or PhantomConfig()
    rng = np.random.Generator(np.random.PCG64(seed))

    labels, radius = _tissue_geometry(rng, size, cfg)
    tissue = TissueMap(labels)

    images: dict[str, np.ndarray] = {}
    for name in cfg.modalities:
        table = dict(_BASE_INTENSITY[name])
        for cls in TISSUE_CLASSES:
            table[cls] = float(
                np.clip(table[cls] + rng.uniform(-cfg.intensity_jitter, cfg.intensity_jitter), 0.02, 0.98)
            )
        img = np.zeros((size, size), dtype=np.float64)
        for cls in TISSUE_CLASSES:
            img[labels == cls] = table[cls]

        bias = ndimage.gaussian_filter(rng.standard_normal((size, size)), cfg.bias_smoothness * size)
        bias_std = bias.std()
        if bias_std > 0:
            img *= 1.0 + cfg.bias_amplitude * (bias / bias_std)
        img += rng.normal(0.0, cfg.noise_sigma, (size, size))
        images[name] = np.clip(img, 0.0, 1.0).astype(np.float32)

    return SliceSample(images=images, tissue=tissue, sample_id=f"s{seed:06d}", rng_seed=seed)


def _tissue_geometry(rng, size, cfg):
    """Nested ellipse/annulus regions plus an optional tumor blob."""
    ys, xs = np.meshgrid(np.linspace(-1, 1, size), np.linspace(-1, 1, size), indexing="ij")
    cx, cy = rng.uniform(-0.06, 0.06, size=2)
    ax_x = rng.uniform(0.62, 0.78)
    ax_y = rng.uniform(0.72, 0.88)
    theta = rng.uniform(-0.35, 0.35)
    ct, st = np.cos(theta), np.sin(theta)
    # normalized elliptical coordinates: radius 1 at the brain boundary
    u = ((xs - cx) * ct + (ys - cy) * st) / ax_x
    v = (-(xs - cx) * st + (ys - cy) * ct) / ax_y
    radius = np.sqrt(u * u + v * v)

    wm_edge = rng.uniform(0.52, 0.62)
    gm_edge = rng.uniform(0.78, 0.88)
    labels = np.zeros((size, size), dtype=np.int32)
    labels[radius <= 1.0] = CSF
    labels[radius <= gm_edge] = GRAY_MATTER
    labels[radius <= wm_edge] = WHITE_MATTER

    # tumor drawn with fixed-order rng calls so presence stays deterministic
    has_tumor = rng.random() < cfg.tumor_prob
    angle = rng.uniform(0.0, 2.0 * np.pi)
    offset = rng.uniform(0.0, 0.40)
    ru = rng.uniform(0.12, 0.22)
    rv = rng.uniform(0.12, 0.22)
    if has_tumor:
        u0, v0 = offset * np.cos(angle), offset * np.sin(angle)
        # max elliptical radius of the blob is offset + max(ru, rv) <= 0.62,
        # keeping it strictly inside the brain with a CSF margin
        blob = ((u - u0) / ru) ** 2 + ((v - v0) / rv) ** 2 <= 1.0
        labels[blob] = TUMOR
    return labels, radius


def density_map(sample: SliceSample, source_modality: str) -> np.ndarray:
    """Per-pixel mean intensity of each tissue class in the source image.

    Background pixels are 0; every other pixel carries the class-average
    intensity of its own label.
    """
    if source_modality not in sample.images:
        raise KeyError(f"unknown modality '{source_modality}'")
    img = sample.images[source_modality]
    labels = sample.tissue.labels
    out = np.zeros_like(img, dtype=np.float32)
    for cls in TISSUE_CLASSES:
        mask = labels == cls
        if mask.any():
            out[mask] = img[mask].mean(dtype=np.float64)
    return out


def check_tissue_invariants(tissue: TissueMap) -> None:
    """Raise if the label map violates the generator's contracts."""
    labels = tissue.labels
    brain = labels > BACKGROUND
    if not brain.any():
        raise ValueError("empty brain region")
    eight = np.ones((3, 3), dtype=bool)
    n_brain, _ = _count_components(brain, eight)
    if n_brain != 1:
        raise ValueError(f"brain region has {n_brain} components")
    # simply connected: the background must be one component (no holes)
    n_bg, _ = _count_components(~brain, eight)
    if n_bg != 1:
        raise ValueError("brain region has holes")
    tumor = labels == TUMOR
    if tumor.any():
        n_tum, _ = _count_components(tumor, eight)
        if n_tum != 1:
            raise ValueError(f"tumor has {n_tum} components")
        ring = ndimage.binary_dilation(tumor, structure=eight) & ~tumor
        if (labels[ring] == BACKGROUND).any():
            raise ValueError("tumor touches the background")


def _count_components(mask, structure):
    labeled, count = ndimage.label(mask, structure=structure)
    return count, labeled
