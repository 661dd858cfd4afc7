"""The forward corruption process and its deterministic inverse.

The linear noise schedule fixes how much signal survives at each step.
Corrupting an image with known noise and then walking the reverse
recurrence with that same noise must land back on the original, up to
floating-point residue; a strided plan with far fewer steps lands on
the same point as the dense walk. This demo prints both residues and
plots the schedule and a corruption filmstrip.

Run:  python3 demos/02_diffusion_schedule.py
"""

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from mmsynth import (
    build_linear_schedule,
    forward_diffuse,
    generate_phantom,
    reverse_step,
    strided_plan,
)

OUT = Path(__file__).parent / "out"
OUT.mkdir(exist_ok=True)


def main():
    sched = build_linear_schedule(T=1000, beta_1=1e-4, beta_T=0.02)
    print(f"schedule: T={sched.T}, beta in [{sched.beta[0]:.2e}, {sched.beta[-1]:.2e}]")
    print(f"signal fraction sqrt(abar): t=1 {np.sqrt(sched.alpha_bar[0]):.4f}, "
          f"t=500 {np.sqrt(sched.alpha_bar[499]):.4f}, "
          f"t=1000 {np.sqrt(sched.alpha_bar[999]):.6f}")

    sample = generate_phantom(3, 64)
    x0 = sample.images["m1"].astype(np.float32)
    rng = np.random.default_rng(0)
    eps = rng.standard_normal(x0.shape).astype(np.float32)

    # filmstrip of the forward process
    ts = [1, 100, 300, 600, 1000]
    fig, axes = plt.subplots(1, len(ts) + 1, figsize=(2.2 * (len(ts) + 1), 2.5))
    axes[0].imshow(x0, cmap="gray", vmin=0, vmax=1)
    axes[0].set_title("t=0", fontsize=9)
    for ax, t in zip(axes[1:], ts):
        ax.imshow(forward_diffuse(x0, t, eps, sched), cmap="gray")
        ax.set_title(f"t={t}", fontsize=9)
    for ax in axes:
        ax.axis("off")
    fig.tight_layout()
    fig.savefig(OUT / "forward_filmstrip.png", dpi=130)
    print(f"wrote {OUT / 'forward_filmstrip.png'}")

    # dense reverse walk with the true noise recovers the image
    x = forward_diffuse(x0, 1000, eps, sched)
    plan = strided_plan(1000, 1000)
    for i, t in enumerate(plan):
        t_prev = plan[i + 1] if i + 1 < len(plan) else 0
        x = reverse_step(x, eps, t, sched, t_prev)
    dense_err = float(np.abs(x - x0).max())
    print(f"dense 1000-step inversion error: {dense_err:.2e}")

    # a 50-step strided plan arrives at the same point
    x = forward_diffuse(x0, 1000, eps, sched)
    plan = strided_plan(1000, 50)
    print(f"strided plan: {len(plan)} steps, first {plan[:3]}..., last {plan[-3:]}")
    for i, t in enumerate(plan):
        t_prev = plan[i + 1] if i + 1 < len(plan) else 0
        x = reverse_step(x, eps, t, sched, t_prev)
    strided_err = float(np.abs(x - x0).max())
    print(f"strided 50-step inversion error: {strided_err:.2e}")

    assert dense_err < 1e-4 and strided_err < 1e-4


if __name__ == "__main__":
    main()
