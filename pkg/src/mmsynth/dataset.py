"""On-disk dataset format: raw float32 grids, JSON sidecars, one manifest.

Layout::

    root/manifest.json
    root/<id>/<modality>.raw   little-endian float32 buffer
    root/<id>/<modality>.json  sidecar: shape, dtype, grid name
    root/<id>/tissue.raw       label map, stored as float32 (labels are
                               small ints, exactly representable)
    root/<id>/tissue.json
    root/<id>/sample.json      sample id + generator seed

The round trip read(write(samples)) reproduces every grid bit-exactly.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .phantoms import SliceSample, TissueMap

MANIFEST_NAME = "manifest.json"
TISSUE_GRID = "tissue"
SPLIT_NAMES = ("train", "val", "test")


@dataclass
class DatasetManifest:
    root: str
    splits: dict[str, list[str]]
    modalities: list[str]
    image_size: int
    config_hash: str = ""

    def all_ids(self) -> list[str]:
        out: list[str] = []
        for name in self.splits:
            out.extend(self.splits[name])
        return out


def parse_split_ratio(text: str) -> tuple[int, ...]:
    """Parse a "140:25:35"-style ratio string."""
    parts = tuple(int(p) for p in text.split(":"))
    if len(parts) != 3 or any(p < 0 for p in parts) or sum(parts) == 0:
        raise ValueError(f"bad split ratio '{text}'")
    return parts


def split_counts(n: int, ratio: tuple[int, ...]) -> tuple[int, ...]:
    """Exact largest-remainder allocation of n items to the given ratio."""
    total = sum(ratio)
    raw = [n * r / total for r in ratio]
    counts = [int(x) for x in raw]
    remainders = [x - c for x, c in zip(raw, counts)]
    for i in sorted(range(len(ratio)), key=lambda i: -remainders[i])[: n - sum(counts)]:
        counts[i] += 1
    return tuple(counts)


def allocate_splits(ids: Sequence[str], ratio: tuple[int, ...]) -> dict[str, list[str]]:
    counts = split_counts(len(ids), ratio)
    out = {}
    pos = 0
    for name, c in zip(SPLIT_NAMES, counts):
        out[name] = list(ids[pos : pos + c])
        pos += c
    return out


def _write_grid(base: Path, name: str, array: np.ndarray) -> None:
    arr = np.ascontiguousarray(array, dtype="<f4")
    (base / f"{name}.raw").write_bytes(arr.tobytes())
    sidecar = {"name": name, "shape": list(arr.shape), "dtype": "float32"}
    (base / f"{name}.json").write_text(json.dumps(sidecar, indent=1))


def _read_grid(base: Path, name: str, sample_id: str) -> np.ndarray:
    raw = base / f"{name}.raw"
    meta = base / f"{name}.json"
    if not raw.exists() or not meta.exists():
        raise FileNotFoundError(f"sample '{sample_id}': missing grid file for '{name}'")
    sidecar = json.loads(meta.read_text())
    shape = tuple(sidecar["shape"])
    data = np.frombuffer(raw.read_bytes(), dtype="<f4")
    if data.size != int(np.prod(shape)):
        raise ValueError(f"sample '{sample_id}': grid '{name}' size does not match its sidecar")
    return data.reshape(shape).copy()


def write_dataset(
    samples: Iterable[SliceSample],
    splits: Mapping[str, Sequence[str]],
    root: str | Path,
    config_hash: str = "",
) -> DatasetManifest:
    """Persist samples and the split assignment; returns the manifest."""
    samples = list(samples)
    if not samples:
        raise ValueError("empty sample list")
    by_id = {s.sample_id: s for s in samples}
    seen: set[str] = set()
    for name, ids in splits.items():
        overlap = seen & set(ids)
        if overlap:
            raise ValueError(f"splits are not disjoint: {sorted(overlap)}")
        seen |= set(ids)
        missing = [i for i in ids if i not in by_id]
        if missing:
            raise ValueError(f"split '{name}' references unknown ids {missing}")

    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    size = samples[0].size
    modalities = list(samples[0].modalities)
    for sample in samples:
        if sample.size != size or list(sample.modalities) != modalities:
            raise ValueError(f"sample '{sample.sample_id}' disagrees with the dataset layout")
        base = root / sample.sample_id
        base.mkdir(exist_ok=True)
        for name in modalities:
            _write_grid(base, name, sample.images[name])
        _write_grid(base, TISSUE_GRID, sample.tissue.labels.astype(np.float32))
        (base / "sample.json").write_text(
            json.dumps({"sample_id": sample.sample_id, "rng_seed": sample.rng_seed})
        )

    manifest = DatasetManifest(
        root=str(root),
        splits={k: list(v) for k, v in splits.items()},
        modalities=modalities,
        image_size=size,
        config_hash=config_hash,
    )
    (root / MANIFEST_NAME).write_text(
        json.dumps(
            {
                "splits": manifest.splits,
                "modalities": manifest.modalities,
                "image_size": manifest.image_size,
                "config_hash": manifest.config_hash,
            },
            indent=1,
        )
    )
    return manifest


class PhantomDataset:
    """Lazy reader over a written dataset directory."""

    def __init__(self, root: str | Path, manifest: DatasetManifest):
        self.root = Path(root)
        self.manifest = manifest

    def ids(self, split: str) -> list[str]:
        if split not in self.manifest.splits:
            raise KeyError(f"unknown split '{split}'")
        return list(self.manifest.splits[split])

    @property
    def modalities(self) -> list[str]:
        return list(self.manifest.modalities)

    @property
    def image_size(self) -> int:
        return self.manifest.image_size

    def load_sample(self, sample_id: str) -> SliceSample:
        base = self.root / sample_id
        size = self.manifest.image_size
        images = {}
        for name in self.manifest.modalities:
            grid = _read_grid(base, name, sample_id)
            if grid.shape != (size, size):
                raise ValueError(
                    f"sample '{sample_id}': grid '{name}' shape {grid.shape} "
                    f"does not match manifest size {size}"
                )
            images[name] = grid
        tissue = _read_grid(base, TISSUE_GRID, sample_id)
        if tissue.shape != (size, size):
            raise ValueError(f"sample '{sample_id}': tissue shape mismatch vs manifest")
        meta_path = base / "sample.json"
        seed = json.loads(meta_path.read_text())["rng_seed"] if meta_path.exists() else -1
        return SliceSample(
            images=images,
            tissue=TissueMap(tissue.astype(np.int32)),
            sample_id=sample_id,
            rng_seed=seed,
        )

    def load_image(self, sample_id: str, modality: str) -> np.ndarray:
        if modality not in self.manifest.modalities:
            raise KeyError(f"unknown modality '{modality}'")
        return _read_grid(self.root / sample_id, modality, sample_id)


def generate_dataset(
    root: str | Path,
    n_samples: int,
    size: int,
    seed: int = 0,
    config=None,
    split_ratio: tuple[int, ...] = (140, 25, 35),
    config_hash: str = "",
) -> PhantomDataset:
    """Render n phantoms (seeds seed..seed+n-1), split them, write them."""
    from .phantoms import generate_phantom

    samples = [generate_phantom(seed + i, size, config) for i in range(n_samples)]
    splits = allocate_splits([s.sample_id for s in samples], split_ratio)
    manifest = write_dataset(samples, splits, root, config_hash)
    return PhantomDataset(Path(root), manifest)


def read_dataset(root: str | Path) -> PhantomDataset:
    """Open a dataset, verifying the manifest and that every id resolves."""
    root = Path(root)
    manifest_path = root / MANIFEST_NAME
    if not manifest_path.exists():
        raise FileNotFoundError(f"no {MANIFEST_NAME} under {root}")
    raw = json.loads(manifest_path.read_text())
    manifest = DatasetManifest(
        root=str(root),
        splits=raw["splits"],
        modalities=raw["modalities"],
        image_size=int(raw["image_size"]),
        config_hash=raw.get("config_hash", ""),
    )
    dataset = PhantomDataset(root, manifest)
    for sample_id in manifest.all_ids():
        base = root / sample_id
        for name in [*manifest.modalities, TISSUE_GRID]:
            if not (base / f"{name}.raw").exists():
                raise FileNotFoundError(f"sample '{sample_id}': missing grid file for '{name}'")
    return dataset
