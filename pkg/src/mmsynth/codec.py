"""Image-to-latent codec: a small variational conv autoencoder.

Two stride-2 stages compress a grayscale image by a factor of 4 per
side into a few latent channels; the decoder mirrors them and squashes
its output to [0, 1]. Training minimizes reconstruction MSE plus a
tiny KL pull toward a standard normal, so the codec stays nearly
deterministic. Encoding at inference returns the posterior mean. The
codec is trained first and then frozen for all diffusion work.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F


def _norm(channels: int) -> nn.GroupNorm:
    return nn.GroupNorm(min(8, channels), channels)


class _ResBlock(nn.Module):
    """Pre-norm residual 3x3 pair; the second conv starts at zero so the
    block is the identity at initialization."""

    def __init__(self, channels: int):
        super().__init__()
        self.norm1 = _norm(channels)
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1)
        self.norm2 = _norm(channels)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1)
        nn.init.zeros_(self.conv2.weight)
        nn.init.zeros_(self.conv2.bias)

    def forward(self, x):
        h = self.conv1(F.silu(self.norm1(x)))
        h = self.conv2(F.silu(self.norm2(h)))
        return x + h


class LatentCodec(nn.Module):
    """Encoder/decoder pair with a fixed integer downsampling factor."""

    def __init__(self, latent_channels: int = 4, widths: tuple[int, int] = (32, 64),
                 kl_weight: float = 1e-6, head_gain: float = 3.0):
        super().__init__()
        w1, w2 = widths
        self.latent_channels = int(latent_channels)
        self.widths = (int(w1), int(w2))
        self.downsample_factor = 4  # two stride-2 stages
        self.kl_weight = float(kl_weight)
        self.encoder = nn.Sequential(
            nn.Conv2d(1, w1, 3, padding=1),
            _ResBlock(w1), nn.Conv2d(w1, w2, 3, stride=2, padding=1),
            _ResBlock(w2), nn.Conv2d(w2, w2, 3, stride=2, padding=1),
            _ResBlock(w2), _norm(w2), nn.SiLU(),
            nn.Conv2d(w2, 2 * latent_channels, 3, padding=1),
        )
        self.decoder = nn.Sequential(
            nn.Conv2d(latent_channels, w2, 3, padding=1),
            _ResBlock(w2), nn.Upsample(scale_factor=2, mode="nearest"),
            nn.Conv2d(w2, w2, 3, padding=1),
            _ResBlock(w2), nn.Upsample(scale_factor=2, mode="nearest"),
            nn.Conv2d(w2, w1, 3, padding=1),
            _ResBlock(w1), _norm(w1), nn.SiLU(),
            nn.Conv2d(w1, 1, 3, padding=1),
        )
        # zero the final projection so an untrained decoder emits a
        # constant 0.5 plane after squashing
        nn.init.zeros_(self.decoder[-1].weight)
        nn.init.zeros_(self.decoder[-1].bias)
        # scale the latent head so per-channel latent std starts near 1;
        # training roughly preserves that scale, keeping latents directly
        # usable by the diffusion core without a separate scaling pass
        with torch.no_grad():
            self.encoder[-1].weight *= head_gain
            self.encoder[-1].bias *= head_gain

    def posterior(self, images: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Mean and log-variance of the latent posterior, batched."""
        h, w = images.shape[-2:]
        f = self.downsample_factor
        if h % f or w % f:
            raise ValueError(f"image size {(h, w)} not divisible by {f}")
        stats = self.encoder(images)
        mean, logvar = stats.chunk(2, dim=1)
        return mean, torch.clamp(logvar, -30.0, 20.0)

    def encode(self, image):
        """Posterior mean for one image (H, W) or a batch (B, 1, H, W).

        Inference-only: the result carries no gradient graph. Training
        goes through posterior() and the decoder directly.
        """
        x, single, from_numpy = _prepare(image)
        with torch.no_grad():
            mean, _ = self.posterior(x)
        out = mean[0] if single else mean
        return out.numpy() if from_numpy else out

    def decode(self, latent):
        """Image in [0, 1] from one latent (c, h, w) or a batch (B, c, h, w)."""
        z, single, from_numpy = _prepare_latent(latent, self.latent_channels)
        with torch.no_grad():
            img = torch.sigmoid(self.decoder(z.detach()))
        out = img[0, 0] if single else img
        return out.numpy() if from_numpy else out


def _prepare(image):
    from_numpy = not isinstance(image, torch.Tensor)
    x = torch.as_tensor(np.asarray(image), dtype=torch.float32) if from_numpy else image
    if x.ndim == 2:
        return x[None, None], True, from_numpy
    if x.ndim == 3 and x.shape[0] == 1:
        return x[None], True, from_numpy
    if x.ndim == 4:
        return x, False, from_numpy
    raise ValueError(f"unsupported image shape {tuple(x.shape)}")


def _prepare_latent(latent, channels):
    from_numpy = not isinstance(latent, torch.Tensor)
    z = torch.as_tensor(np.asarray(latent), dtype=torch.float32) if from_numpy else latent
    if z.ndim == 3 and z.shape[0] == channels:
        return z[None], True, from_numpy
    if z.ndim == 4 and z.shape[1] == channels:
        return z, False, from_numpy
    raise ValueError(f"expected {channels} latent channels, got shape {tuple(z.shape)}")


def codec_loss(codec: LatentCodec, images: torch.Tensor,
               generator: torch.Generator | None = None,
               channel_dropout: float = 0.0):
    """Reconstruction MSE plus weighted KL to the standard normal.

    Returns (total, reconstruction, kl) where total carries gradients.
    With channel_dropout > 0, whole latent channels are zeroed at random
    (and the survivors rescaled) during the decode pass. The decoder then
    cannot lean on any single channel, which spreads the code across all
    of them and keeps every channel's variance in a usable range.
    """
    mean, logvar = codec.posterior(images)
    noise = torch.randn(mean.shape, generator=generator)
    z = mean + torch.exp(0.5 * logvar) * noise
    if channel_dropout > 0.0:
        keep = (torch.rand((z.shape[0], z.shape[1], 1, 1), generator=generator)
                >= channel_dropout).to(z.dtype)
        z = z * keep / (1.0 - channel_dropout)
    recon = torch.sigmoid(codec.decoder(z))
    rec = F.mse_loss(recon, images)
    kl = 0.5 * (mean * mean + torch.exp(logvar) - 1.0 - logvar).mean()
    return rec + codec.kl_weight * kl, rec, kl


@dataclass(frozen=True)
class CodecTrainConfig:
    steps: int = 4000
    batch_size: int = 16
    lr: float = 1e-3
    seed: int = 0
    latent_channels: int = 4
    widths: tuple[int, int] = (32, 64)
    kl_weight: float = 1e-6
    head_gain: float = 3.0
    channel_dropout: float = 0.1
    channel_dropout_frac: float = 0.6
    val_every: int = 100


def _gather_images(dataset, split: str) -> np.ndarray:
    stack = []
    for sid in dataset.ids(split):
        sample = dataset.load_sample(sid)
        for name in sorted(sample.images):
            stack.append(sample.images[name])
    if not stack:
        raise ValueError(f"split '{split}' holds no images")
    return np.stack(stack).astype(np.float32)


def train_codec(dataset, config: CodecTrainConfig = CodecTrainConfig()) -> LatentCodec:
    """Fit the codec on the train split, keeping the best-validation state.

    Deterministic under a fixed config seed. Aborts on non-finite loss.
    The returned module carries a `train_history` dict with per-step
    training loss and the validation curve.
    """
    train = torch.as_tensor(_gather_images(dataset, "train"))[:, None]
    val = torch.as_tensor(_gather_images(dataset, "val"))[:, None]

    with torch.random.fork_rng():
        torch.manual_seed(config.seed)
        codec = LatentCodec(config.latent_channels, config.widths, config.kl_weight,
                            config.head_gain)
    gen = torch.Generator().manual_seed(config.seed + 1)
    rng = np.random.Generator(np.random.PCG64(config.seed + 2))
    opt = torch.optim.Adam(codec.parameters(), lr=config.lr)
    lr_sched = torch.optim.lr_scheduler.CosineAnnealingLR(
        opt, T_max=config.steps, eta_min=0.1 * config.lr)

    history = {"loss": [], "recon": [], "val_steps": [], "val_mse": []}
    best = {"mse": float("inf"), "state": None}

    def validate(step):
        codec.eval()
        with torch.no_grad():
            mean, _ = codec.posterior(val)
            recon = torch.sigmoid(codec.decoder(mean))
            mse = float(F.mse_loss(recon, val))
        codec.train()
        history["val_steps"].append(step)
        history["val_mse"].append(mse)
        if mse < best["mse"]:
            best["mse"] = mse
            best["state"] = {k: v.detach().clone() for k, v in codec.state_dict().items()}

    # whole-channel dropout runs only through the early part of training:
    # long enough to spread the code over every latent channel, then a
    # clean tail (under the already decayed learning rate) recovers the
    # reconstruction sharpness the noise costs
    dropout_until = int(round(config.steps * config.channel_dropout_frac))

    codec.train()
    for step in range(config.steps):
        idx = rng.integers(0, train.shape[0], size=min(config.batch_size, train.shape[0]))
        batch = train[torch.as_tensor(idx, dtype=torch.long)]
        p_drop = config.channel_dropout if step < dropout_until else 0.0
        total, rec, _ = codec_loss(codec, batch, gen, p_drop)
        if not torch.isfinite(total):
            raise RuntimeError(
                f"codec training diverged at step {step}: loss {float(total.detach())}")
        opt.zero_grad()
        total.backward()
        opt.step()
        lr_sched.step()
        history["loss"].append(float(total.detach()))
        history["recon"].append(float(rec.detach()))
        if (step + 1) % config.val_every == 0 or step + 1 == config.steps:
            validate(step + 1)

    if best["state"] is not None:
        codec.load_state_dict(best["state"])
    codec.eval()
    for p in codec.parameters():
        if not torch.isfinite(p).all():
            raise RuntimeError("non-finite codec parameters after training")
    codec.train_history = history
    return codec


def save_codec(codec: LatentCodec, path, config_hash: str = "") -> None:
    torch.save(
        {
            "kind": "latent-codec",
            "arch": {
                "latent_channels": codec.latent_channels,
                "widths": codec.widths,
                "kl_weight": codec.kl_weight,
            },
            "config_hash": config_hash,
            "state_dict": codec.state_dict(),
        },
        path,
    )


def load_codec(path) -> LatentCodec:
    blob = torch.load(path, weights_only=True)
    if blob.get("kind") != "latent-codec":
        raise ValueError(f"not a codec checkpoint: {path}")
    arch = blob["arch"]
    codec = LatentCodec(arch["latent_channels"], tuple(arch["widths"]), arch["kl_weight"])
    codec.load_state_dict(blob["state_dict"])
    codec.eval()
    codec.config_hash = blob.get("config_hash", "")
    return codec
