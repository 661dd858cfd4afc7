"""End-to-end: generate data, train both stages, synthesize a modality.

This is the whole pipeline at toy scale. A small dataset of 16x16
phantoms is written to a scratch directory, a latent codec is fitted,
a conditional denoiser is trained in that latent space for a few
hundred steps, and the trained pair synthesizes the held-out test
subjects' m4 from their m1/m2/m3. Scores will be modest at this scale;
the point is that every stage runs, ends deterministically, and wires
into the next. Takes a couple of minutes on one CPU core.

Run:  python3 demos/05_end_to_end.py
"""

import tempfile
import time
from pathlib import Path

import numpy as np

from mmsynth import (
    CodecTrainConfig,
    TrainConfig,
    evaluate,
    generate_dataset,
    psnr,
    synthesize,
    train_codec,
    train_diffusion,
)

OUT = Path(__file__).parent / "out"
OUT.mkdir(exist_ok=True)


def main():
    work = Path(tempfile.mkdtemp(prefix="mmsynth_demo_"))
    print(f"working under {work}")

    t0 = time.time()
    dataset = generate_dataset(work / "data", n_samples=32, size=16, seed=5,
                               split_ratio=(24, 4, 4))
    print(f"[{time.time() - t0:5.1f}s] dataset: "
          f"{len(dataset.ids('train'))} train / {len(dataset.ids('val'))} val / "
          f"{len(dataset.ids('test'))} test samples at {dataset.image_size}x"
          f"{dataset.image_size}")

    codec = train_codec(dataset, CodecTrainConfig(steps=400, batch_size=8,
                                                  seed=0, val_every=100))
    recon = []
    for sid in dataset.ids("test"):
        sample = dataset.load_sample(sid)
        for name in sorted(sample.images):
            import torch

            with torch.no_grad():
                z = codec.encode(torch.as_tensor(sample.images[name]))
                back = codec.decode(z).numpy()
            recon.append(psnr(sample.images[name], back))
    print(f"[{time.time() - t0:5.1f}s] codec reconstruction on test images: "
          f"{float(np.mean(recon)):.2f} dB PSNR")

    cfg = TrainConfig(steps=300, batch_size=8, seed=0, target_modality="m4")
    state, trace = train_diffusion(cfg, codec, dataset, out_dir=work / "run")
    print(f"[{time.time() - t0:5.1f}s] denoiser trained for {cfg.steps} steps, "
          f"eps loss {trace['eps_loss'][0]:.4f} -> {trace['eps_loss'][-1]:.4f}")

    sid = dataset.ids("test")[0]
    sample = dataset.load_sample(sid)
    synth = synthesize(state, codec, sample, "m4", sample_steps=25, seed=0)
    again = synthesize(state, codec, sample, "m4", sample_steps=25, seed=0)
    assert np.array_equal(synth, again), "same seed must give the same image"
    print(f"[{time.time() - t0:5.1f}s] synthesized {sid} m4: "
          f"{psnr(sample.images['m4'], synth):.2f} dB vs ground truth "
          f"(bit-identical on rerun)")

    report = evaluate(state, codec, dataset, "m4", split="test",
                      sample_steps=25, seed=0, out_dir=work / "eval")
    agg = report.aggregate()
    print(f"[{time.time() - t0:5.1f}s] test split ({len(report.psnr_values)} "
          f"subjects): PSNR {agg['psnr']['mean']:.2f} +/- "
          f"{agg['psnr']['std']:.2f} dB, SSIM {agg['ssim']['mean']:.3f}")

    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, axes = plt.subplots(1, 3, figsize=(7.5, 2.8))
    for ax, (title, img) in zip(
        axes,
        [("source m1", sample.images["m1"]), ("synthesized m4", synth),
         ("true m4", sample.images["m4"])],
    ):
        ax.imshow(img, cmap="gray", vmin=0, vmax=1, interpolation="nearest")
        ax.set_title(title, fontsize=9)
        ax.axis("off")
    fig.tight_layout()
    fig.savefig(OUT / "end_to_end.png", dpi=130)
    print(f"wrote {OUT / 'end_to_end.png'}")


if __name__ == "__main__":
    main()
