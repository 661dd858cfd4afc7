"""Flat-key configuration handling.

One human-readable YAML file drives every pipeline verb. Keys are flat
(dotted names are literal strings, not nesting) so a config is always a
single mapping from key to scalar or short list. Unknown keys are
rejected to catch typos, and every report stamps the hash of the full
resolved configuration for reproducibility.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import yaml


def default_config() -> dict:
    return {
        # data generation
        "image_size": 32,
        "n_samples": 200,
        "split": "140:25:35",
        "modalities": ["m1", "m2", "m3", "m4"],
        "phantom.noise_sigma": 0.02,
        "phantom.bias_amplitude": 0.15,
        "phantom.bias_smoothness": 0.25,
        "phantom.tumor_prob": 0.5,
        # diffusion schedule
        "T": 1000,
        "beta1": 1e-4,
        "betaT": 0.02,
        "sample_steps": 50,
        # codec
        "codec.steps": 4000,
        "codec.batch_size": 16,
        "codec.lr": 1e-3,
        "codec.latent_channels": 4,
        "codec.kl_weight": 1e-6,
        "codec.head_gain": 3.0,
        "codec.channel_dropout": 0.1,
        "codec.channel_dropout_frac": 0.6,
        # denoiser architecture
        "denoiser.base_width": 64,
        "denoiser.channel_mult": [1, 2],
        "denoiser.n_transformer_blocks": 1,
        "denoiser.n_heads": 4,
        "denoiser.time_embed_dim": 128,
        "denoiser.pad_mode": "zeros",
        "cond_concat": False,
        # component switches
        "coop_filter.enabled": True,
        "coop_filter.levels": None,
        "coop_filter.block_size": 2,
        "coop_filter.match_count": 4,
        "coop_filter.threshold": "universal",
        "structural_guidance.enabled": True,
        "autoweight.enabled": True,
        "density_source": None,
        # training
        "target_modality": "m1",
        "n_inputs": None,
        "train.steps": 2000,
        "train.batch_size": 8,
        "train.lr": 9.6e-5,
        "train.ema_rate": 0.9999,
        "seed": 0,
    }


def validate_config(cfg: dict) -> dict:
    known = default_config()
    unknown = sorted(set(cfg) - set(known))
    if unknown:
        raise ValueError(f"unknown config keys: {', '.join(unknown)}")
    if cfg["T"] < 2:
        raise ValueError("T must be >= 2")
    if not (0.0 < cfg["beta1"] <= cfg["betaT"] < 1.0):
        raise ValueError("need 0 < beta1 <= betaT < 1")
    if not (1 <= cfg["sample_steps"] <= cfg["T"]):
        raise ValueError("sample_steps must lie in [1, T]")
    for key in ("image_size", "n_samples", "codec.steps", "train.steps",
                "train.batch_size", "codec.batch_size"):
        if cfg[key] < 1:
            raise ValueError(f"{key} must be positive")
    if not (0.0 <= cfg["train.ema_rate"] < 1.0):
        raise ValueError("train.ema_rate must lie in [0, 1)")
    return cfg


def load_config(path=None, overrides: dict | None = None) -> dict:
    """Defaults, overlaid by an optional YAML file, then by overrides."""
    cfg = default_config()
    if path is not None:
        text = Path(path).read_text()
        loaded = yaml.safe_load(text) or {}
        if not isinstance(loaded, dict):
            raise ValueError(f"config file {path} must hold a flat mapping")
        cfg.update(loaded)
    if overrides:
        cfg.update(overrides)
    return validate_config(cfg)


def save_config(cfg: dict, path) -> None:
    Path(path).write_text(yaml.safe_dump(cfg, sort_keys=True))


def config_hash(cfg: dict) -> str:
    """Stable sha256 of the fully resolved configuration."""
    blob = json.dumps(cfg, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]
