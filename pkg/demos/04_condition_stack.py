"""Building the guidance stack and gating its channels by energy.

To synthesize one missing modality the denoiser is shown everything
known about the subject: the latent code of every available source
image plus structural channels (tissue occupancy masks and a density
map) pooled to latent resolution. Channels carry wildly different
energies, so a learned gate rescales each one by a factor that always
stays strictly between 1 and 2; at initialization the factor is exactly
1.5 for every channel, so no channel starts favored.

Run:  python3 demos/04_condition_stack.py
"""

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np
import torch

from mmsynth import (
    GateParams,
    LatentCodec,
    build_structural_condition,
    channel_energy,
    gate_channels,
    generate_phantom,
    normalize_energies,
)

OUT = Path(__file__).parent / "out"
OUT.mkdir(exist_ok=True)


def main():
    torch.manual_seed(0)
    sample = generate_phantom(3, 32)
    codec = LatentCodec()  # untrained is fine for looking at the stack

    cond = build_structural_condition(sample, target_modality="m4",
                                      source_modality="m1", codec=codec)
    print(f"targeting m4 from sources m1, m2, m3 -> "
          f"{cond.channels} channels at {tuple(cond.y.shape[-2:])}")
    for i, role in enumerate(cond.channel_roles):
        print(f"  ch{i:2d}  {role:10s} energy {channel_energy(cond.y[i]):8.3f}")

    energies = np.array([channel_energy(cond.y[i]) for i in range(cond.channels)])
    norm = normalize_energies(energies)
    print(f"normalized energies: mean square {float(np.mean(norm**2)):.4f} "
          f"(equals 1 up to the stabilizer)")

    gate = GateParams(cond.channels)
    with torch.no_grad():
        gated = gate_channels(cond.y, gate)
        ratio = float((gated.sum(dim=(-2, -1)) / cond.y.sum(dim=(-2, -1))).mean())
    print(f"fresh gate multiplies every channel by {ratio:.6f}")
    assert torch.allclose(gated, cond.y * 1.5)

    # push the gate hard in both directions; factors must stay in (1, 2)
    with torch.no_grad():
        gate.slope.uniform_(-6, 6)
        gate.offset.uniform_(-6, 6)
        gated = gate_channels(cond.y, gate)
        per_channel = (gated.sum(dim=(-2, -1)) / cond.y.sum(dim=(-2, -1)))
    lo, hi = float(per_channel.min()), float(per_channel.max())
    print(f"after random slope/offset the factors span [{lo:.4f}, {hi:.6f}]"
          f" (still strictly inside (1, 2))")
    assert 1.0 < lo and hi < 2.0

    n = cond.channels
    cols = 7
    rows = (n + cols - 1) // cols
    fig, axes = plt.subplots(rows, cols, figsize=(2 * cols, 2.1 * rows))
    for i in range(rows * cols):
        ax = axes.flat[i]
        if i < n:
            ax.imshow(cond.y[i].numpy(), cmap="magma", interpolation="nearest")
            ax.set_title(cond.channel_roles[i], fontsize=8)
        ax.axis("off")
    fig.tight_layout()
    fig.savefig(OUT / "condition_stack.png", dpi=130)
    print(f"wrote {OUT / 'condition_stack.png'}")


if __name__ == "__main__":
    main()
