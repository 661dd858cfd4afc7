"""Training, sampling, evaluation, and the ablation grid.

The training loop draws random steps and noise, corrupts cached target
latents, and fits the denoiser under the combined noise-prediction and
posterior-matching loss, maintaining an averaged shadow copy of the
parameters. Sampling walks a strided reverse plan with the shadow
parameters and decodes the result. Evaluation scores synthesized
images against ground truth and against the copy-best-source baseline,
and the ablation runner retrains the model with individual components
removed and with varying numbers of input modalities.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from .codec import LatentCodec
from .conditions import build_structural_condition
from .dataset import PhantomDataset
from .denoiser import (
    DenoiserSpec,
    DenoiserState,
    build_denoiser,
    ema_model,
    ema_update,
    save_denoiser,
)
from .diffusion import (
    build_linear_schedule,
    forward_diffuse,
    kl_term,
    reverse_step,
    strided_plan,
)
from .metrics import psnr, ssim
from .phantoms import SliceSample

VARIANTS = ("full", "no_coop", "no_struct", "no_autoweight", "no_modified")


@dataclass(frozen=True)
class TrainConfig:
    """Everything one diffusion training run depends on."""

    steps: int = 2000
    batch_size: int = 8
    learning_rate: float = 9.6e-5
    ema_rate: float = 0.9999
    T: int = 1000
    beta1: float = 1e-4
    betaT: float = 0.02
    seed: int = 0
    dataset_root: str | None = None
    target_modality: str = "m1"
    n_inputs: int | None = None  # None = condition on every other modality
    structural_guidance: bool = True
    autoweight: bool = True
    coop_filter: bool = True
    modified_blocks: bool = True
    cond_concat: bool = False
    density_source: str | None = None
    base_width: int = 64
    channel_mult: tuple[int, ...] = (1, 2)
    n_transformer_blocks: int = 1
    n_heads: int = 4
    time_embed_dim: int = 128
    pad_mode: str = "zeros"
    ckpt_every: int = 500

    def __post_init__(self):
        for name in ("steps", "batch_size", "T", "base_width", "ckpt_every"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if not (0.0 <= self.ema_rate < 1.0):
            raise ValueError("ema_rate must lie in [0, 1)")

    @classmethod
    def from_flat(cls, cfg: dict, **overrides) -> "TrainConfig":
        """Build from the flat config-file mapping."""
        kwargs = {
            "steps": cfg["train.steps"],
            "batch_size": cfg["train.batch_size"],
            "learning_rate": cfg["train.lr"],
            "ema_rate": cfg["train.ema_rate"],
            "T": cfg["T"],
            "beta1": cfg["beta1"],
            "betaT": cfg["betaT"],
            "seed": cfg["seed"],
            "target_modality": cfg["target_modality"],
            "n_inputs": cfg["n_inputs"],
            "structural_guidance": cfg["structural_guidance.enabled"],
            "autoweight": cfg["autoweight.enabled"],
            "coop_filter": cfg["coop_filter.enabled"],
            "cond_concat": cfg["cond_concat"],
            "density_source": cfg["density_source"],
            "base_width": cfg["denoiser.base_width"],
            "channel_mult": tuple(cfg["denoiser.channel_mult"]),
            "n_transformer_blocks": cfg["denoiser.n_transformer_blocks"],
            "n_heads": cfg["denoiser.n_heads"],
            "time_embed_dim": cfg["denoiser.time_embed_dim"],
            "pad_mode": cfg["denoiser.pad_mode"],
        }
        kwargs.update(overrides)
        return cls(**kwargs)


def pick_sources(modalities, target: str, n_inputs: int | None) -> list[str]:
    """Alphabetical non-target modalities, optionally truncated."""
    sources = sorted(m for m in modalities if m != target)
    if not sources:
        raise ValueError(f"no source modalities besides target '{target}'")
    if n_inputs is not None:
        if not (1 <= n_inputs <= len(sources)):
            raise ValueError(f"n_inputs {n_inputs} outside [1, {len(sources)}]")
        sources = sources[:n_inputs]
    return sources


def _build_caches(config: TrainConfig, codec: LatentCodec, dataset: PhantomDataset,
                  split: str = "train"):
    """Encode targets and assemble raw condition stacks once, up front."""
    sources = pick_sources(dataset.manifest.modalities, config.target_modality,
                           config.n_inputs)
    latents, conds = [], []
    with torch.no_grad():
        for sid in dataset.ids(split):
            sample = dataset.load_sample(sid)
            target = torch.as_tensor(sample.images[config.target_modality])
            latents.append(codec.encode(target))
            conds.append(
                build_structural_condition(
                    sample,
                    config.target_modality,
                    config.density_source,
                    codec,
                    sources=sources,
                    include_structure=config.structural_guidance,
                ).y
            )
    if not latents:
        raise ValueError(f"split '{split}' is empty")
    return torch.stack(latents), torch.stack(conds), sources


def loss_per_element(model, sched, lat0: torch.Tensor, cond: torch.Tensor,
                     t_vec: torch.Tensor, eps: torch.Tensor):
    """Per-batch-element noise-prediction and posterior-gap losses.

    The posterior term is defined only for steps >= 2; elements drawn at
    step 1 contribute zero there.
    """
    x_t = forward_diffuse(lat0, t_vec, eps, sched)
    eps_hat = model(x_t, t_vec.float(), cond)
    diff = eps_hat - eps
    eps_vec = diff.reshape(diff.shape[0], -1).pow(2).mean(-1)
    kl_vec = torch.zeros_like(eps_vec)
    mask = t_vec >= 2
    if mask.any():
        kl_vec = kl_vec.masked_scatter(
            mask, kl_term(lat0[mask], x_t[mask], t_vec[mask], eps_hat[mask], sched)
        )
    return eps_vec, kl_vec


def train_diffusion(config: TrainConfig, codec: LatentCodec, dataset: PhantomDataset,
                    out_dir=None, config_hash: str = ""):
    """Fit the denoiser; returns (state, trace).

    Deterministic under the config seed: batch indices, step draws, and
    noise all come from explicit generators. A non-finite loss aborts
    with the most recent periodic checkpoint restored into the returned
    error's `state` attribute (and written to disk when out_dir is set).
    """
    lat0, conds, sources = _build_caches(config, codec, dataset)
    n, _, h, w = lat0.shape
    sched = build_linear_schedule(config.T, config.beta1, config.betaT)
    spec = DenoiserSpec(
        latent_channels=lat0.shape[1],
        latent_size=h,
        cond_channels=conds.shape[1],
        base_width=config.base_width,
        channel_mult=config.channel_mult,
        n_transformer_blocks=config.n_transformer_blocks,
        n_heads=config.n_heads,
        time_embed_dim=config.time_embed_dim,
        pad_mode=config.pad_mode,
        cond_concat=config.cond_concat,
        modified_blocks=config.modified_blocks,
        coop_skips=config.coop_filter,
        autoweight=config.autoweight,
    )
    state = build_denoiser(spec, config.seed)
    opt = torch.optim.Adam(state.model.parameters(), lr=config.learning_rate,
                           betas=(0.9, 0.999))
    idx_rng = np.random.Generator(np.random.PCG64(config.seed + 1))
    gen = torch.Generator().manual_seed(config.seed + 2)

    out_path = Path(out_dir) if out_dir is not None else None
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)

    trace = {"step": [], "eps_loss": [], "kl_loss": [], "total": []}
    last_good = _snapshot(state)

    state.model.train()
    for step in range(1, config.steps + 1):
        idx = torch.as_tensor(
            idx_rng.integers(0, n, size=min(config.batch_size, n)), dtype=torch.long
        )
        batch, cond = lat0[idx], conds[idx]
        t_vec = torch.randint(1, config.T + 1, (batch.shape[0],), generator=gen)
        eps = torch.randn(batch.shape, generator=gen)

        eps_vec, kl_vec = loss_per_element(state.model, sched, batch, cond, t_vec, eps)
        loss = (eps_vec + kl_vec).mean()
        if not torch.isfinite(loss):
            _restore(state, last_good)
            if out_path is not None:
                save_denoiser(state, out_path / "denoiser_lastgood.pt", config_hash)
            err = RuntimeError(
                f"training diverged at step {step}; last-good checkpoint "
                f"from step {state.step_count} retained"
            )
            err.state = state
            raise err

        opt.zero_grad()
        loss.backward()
        opt.step()
        ema_update(state, config.ema_rate)
        state.step_count += 1

        trace["step"].append(step)
        trace["eps_loss"].append(float(eps_vec.detach().mean()))
        trace["kl_loss"].append(float(kl_vec.detach().mean()))
        trace["total"].append(float(loss.detach()))

        if step % config.ckpt_every == 0 or step == config.steps:
            last_good = _snapshot(state)
            if out_path is not None:
                save_denoiser(state, out_path / "denoiser_latest.pt", config_hash)

    state.model.eval()
    state.sources = sources
    if out_path is not None:
        save_denoiser(state, out_path / "denoiser.pt", config_hash)
        (out_path / "trace.json").write_text(json.dumps(trace))
    return state, trace


def _snapshot(state: DenoiserState):
    return {
        "model": {k: v.detach().clone() for k, v in state.model.state_dict().items()},
        "ema": {k: v.clone() for k, v in state.ema.items()},
        "step_count": state.step_count,
    }


def _restore(state: DenoiserState, snap) -> None:
    state.model.load_state_dict(snap["model"])
    state.ema = {k: v.clone() for k, v in snap["ema"].items()}
    state.step_count = snap["step_count"]


def synthesize(state: DenoiserState, codec: LatentCodec, sample: SliceSample,
               target_modality: str, sample_steps: int = 50, seed: int = 0,
               sched=None, sources: list[str] | None = None,
               structural_guidance: bool = True, density_source: str | None = None,
               T: int = 1000, beta1: float = 1e-4, betaT: float = 0.02) -> np.ndarray:
    """Generate the target modality for one sample.

    Starts from seeded Gaussian noise in latent space, walks the strided
    reverse plan with the averaged (shadow) parameters and the gated
    conditions, decodes, and clamps to [0, 1]. Bit-identical under a
    fixed (state, sample, seed).
    """
    if sched is None:
        sched = build_linear_schedule(T, beta1, betaT)
    cond = build_structural_condition(
        sample, target_modality, density_source, codec,
        sources=sources, include_structure=structural_guidance,
    ).y[None]
    if cond.shape[1] != state.model.spec.cond_channels:
        raise ValueError(
            f"condition stack has {cond.shape[1]} channels but the model "
            f"expects {state.model.spec.cond_channels}; check sources/switches"
        )
    spec = state.model.spec
    gen = torch.Generator().manual_seed(seed)
    x = torch.randn((1, spec.latent_channels, spec.latent_size, spec.latent_size),
                    generator=gen)
    model = ema_model(state)
    plan = strided_plan(sched.T, sample_steps)
    with torch.no_grad():
        for i, t in enumerate(plan):
            t_prev = plan[i + 1] if i + 1 < len(plan) else 0
            eps_hat = model(x.to(torch.float32), torch.full((1,), float(t)), cond)
            x = reverse_step(x, eps_hat, t, sched, t_prev)
        img = codec.decode(x.to(torch.float32)[0])
    return np.clip(np.asarray(img, dtype=np.float32), 0.0, 1.0)


def copy_best_source(sample: SliceSample, target_modality: str,
                     sources: list[str]) -> dict:
    """Baseline: the source image closest to the target by PSNR."""
    target = sample.images[target_modality]
    best = None
    for name in sources:
        p = psnr(sample.images[name], target)
        if best is None or p > best["psnr"]:
            best = {"source": name, "psnr": p,
                    "ssim": ssim(sample.images[name], target)}
    return best


@dataclass
class EvalReport:
    """Per-sample and aggregate synthesis quality for one split."""

    target_modality: str
    split: str
    sample_steps: int
    seed: int
    config_hash: str = ""
    sample_ids: list[str] = field(default_factory=list)
    psnr_values: list[float] = field(default_factory=list)
    ssim_values: list[float] = field(default_factory=list)
    baseline_psnr: list[float] = field(default_factory=list)
    baseline_ssim: list[float] = field(default_factory=list)
    baseline_source: list[str] = field(default_factory=list)
    runtime_s: float = 0.0

    def aggregate(self) -> dict:
        def stats(vals):
            arr = np.asarray(vals, dtype=np.float64)
            return {"mean": float(arr.mean()), "std": float(arr.std())}

        return {
            "psnr": stats(self.psnr_values),
            "ssim": stats(self.ssim_values),
            "baseline_psnr": stats(self.baseline_psnr),
            "baseline_ssim": stats(self.baseline_ssim),
        }

    def to_dict(self) -> dict:
        return {
            "target_modality": self.target_modality,
            "split": self.split,
            "sample_steps": self.sample_steps,
            "seed": self.seed,
            "config_hash": self.config_hash,
            "runtime_s": self.runtime_s,
            "aggregate": self.aggregate(),
            "per_sample": [
                {
                    "id": sid,
                    "psnr": p,
                    "ssim": s,
                    "baseline_psnr": bp,
                    "baseline_ssim": bs,
                    "baseline_source": src,
                }
                for sid, p, s, bp, bs, src in zip(
                    self.sample_ids, self.psnr_values, self.ssim_values,
                    self.baseline_psnr, self.baseline_ssim, self.baseline_source,
                )
            ],
        }

    def summary(self) -> str:
        agg = self.aggregate()
        return (
            f"{self.split}/{self.target_modality}: "
            f"PSNR {agg['psnr']['mean']:.2f}±{agg['psnr']['std']:.2f} dB "
            f"(baseline {agg['baseline_psnr']['mean']:.2f}), "
            f"SSIM {agg['ssim']['mean']:.4f}±{agg['ssim']['std']:.4f} "
            f"(baseline {agg['baseline_ssim']['mean']:.4f}), "
            f"{len(self.sample_ids)} samples in {self.runtime_s:.1f}s"
        )


def evaluate(state: DenoiserState, codec: LatentCodec, dataset: PhantomDataset,
             target_modality: str, split: str = "test", sample_steps: int = 50,
             seed: int = 0, n_inputs: int | None = None,
             structural_guidance: bool = True, density_source: str | None = None,
             T: int = 1000, beta1: float = 1e-4, betaT: float = 0.02,
             limit: int | None = None, config_hash: str = "",
             out_dir=None, grid_limit: int = 8) -> EvalReport:
    """Synthesize the target for a split and score against ground truth.

    Each sample gets its own derived noise seed so reruns with the same
    arguments reproduce metrics exactly. When out_dir is given, writes
    report.json plus per-sample image grids for the first few samples.
    """
    sched = build_linear_schedule(T, beta1, betaT)
    sources = pick_sources(dataset.manifest.modalities, target_modality, n_inputs)
    report = EvalReport(target_modality=target_modality, split=split,
                        sample_steps=sample_steps, seed=seed, config_hash=config_hash)
    ids = dataset.ids(split)
    if limit is not None:
        ids = ids[:limit]
    start = time.perf_counter()
    out_path = Path(out_dir) if out_dir is not None else None
    for k, sid in enumerate(ids):
        sample = dataset.load_sample(sid)
        synth = synthesize(
            state, codec, sample, target_modality, sample_steps,
            seed=seed * 100003 + k, sched=sched, sources=sources,
            structural_guidance=structural_guidance, density_source=density_source,
        )
        truth = sample.images[target_modality]
        base = copy_best_source(sample, target_modality, sources)
        report.sample_ids.append(sid)
        report.psnr_values.append(psnr(synth, truth))
        report.ssim_values.append(ssim(synth, truth))
        report.baseline_psnr.append(base["psnr"])
        report.baseline_ssim.append(base["ssim"])
        report.baseline_source.append(base["source"])
        if out_path is not None and k < grid_limit:
            write_sample_grid(sample, synth, target_modality, sources,
                              out_path / "grids" / f"{sid}.png")
    report.runtime_s = time.perf_counter() - start
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)
        (out_path / "report.json").write_text(json.dumps(report.to_dict(), indent=2))
    return report


def write_sample_grid(sample: SliceSample, synth: np.ndarray, target_modality: str,
                      sources: list[str], path) -> None:
    """One row: each input modality, ground truth, synthesis, |error| map."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    truth = sample.images[target_modality]
    panels = [(name, sample.images[name], "gray") for name in sources]
    panels += [
        (f"{target_modality} (truth)", truth, "gray"),
        (f"{target_modality} (synth)", synth, "gray"),
        ("|error|", np.abs(synth - truth), "magma"),
    ]
    fig, axes = plt.subplots(1, len(panels), figsize=(2.2 * len(panels), 2.6))
    for ax, (title, img, cmap) in zip(np.atleast_1d(axes), panels):
        vmax = 1.0 if cmap == "gray" else max(float(np.abs(img).max()), 1e-8)
        ax.imshow(img, cmap=cmap, vmin=0.0, vmax=vmax, interpolation="nearest")
        ax.set_title(title, fontsize=8)
        ax.axis("off")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def variant_overrides(variant: str) -> dict:
    """TrainConfig field changes that realize one ablation variant."""
    table = {
        "full": {},
        "no_coop": {"coop_filter": False},
        "no_struct": {"structural_guidance": False},
        "no_autoweight": {"autoweight": False},
        "no_modified": {"modified_blocks": False},
    }
    if variant not in table:
        raise ValueError(f"unknown variant '{variant}' (choose from {VARIANTS})")
    return table[variant]


def plan_ablation(variants=VARIANTS, input_counts=(1, 2, 3)) -> list[dict]:
    """Enumerate the full grid: every variant at every input count."""
    cells = []
    for variant in variants:
        for k in input_counts:
            cells.append({"variant": variant, "n_inputs": k})
    return cells


@dataclass
class AblationReport:
    rows: list[dict] = field(default_factory=list)
    config_hash: str = ""

    def row(self, variant: str, n_inputs: int) -> dict | None:
        for r in self.rows:
            if r["variant"] == variant and r["n_inputs"] == n_inputs:
                return r
        return None

    def deltas_vs_full(self) -> list[dict]:
        """PSNR/SSIM drop of each removed-component variant vs full."""
        out = []
        for r in self.rows:
            base = self.row("full", r["n_inputs"])
            if base is None or r["variant"] == "full":
                continue
            out.append(
                {
                    "variant": r["variant"],
                    "n_inputs": r["n_inputs"],
                    "psnr_delta": base["psnr_mean"] - r["psnr_mean"],
                    "ssim_delta": base["ssim_mean"] - r["ssim_mean"],
                }
            )
        return out

    def to_dict(self) -> dict:
        return {"config_hash": self.config_hash, "rows": self.rows,
                "deltas_vs_full": self.deltas_vs_full()}

    def format_table(self) -> str:
        lines = [f"{'variant':<14} {'inputs':>6} {'PSNR':>8} {'SSIM':>8}"]
        for r in sorted(self.rows, key=lambda r: (-r["psnr_mean"],)):
            lines.append(
                f"{r['variant']:<14} {r['n_inputs']:>6} "
                f"{r['psnr_mean']:>8.3f} {r['ssim_mean']:>8.4f}"
            )
        return "\n".join(lines)


def run_ablation(codec: LatentCodec, dataset: PhantomDataset, base: TrainConfig,
                 cells: list[dict] | None = None, sample_steps: int = 50,
                 split: str = "test", eval_limit: int | None = None,
                 config_hash: str = "", out_dir=None) -> AblationReport:
    """Train and score one model per grid cell under shared seeds."""
    cells = plan_ablation() if cells is None else cells
    report = AblationReport(config_hash=config_hash)
    out_path = Path(out_dir) if out_dir is not None else None
    for cell in cells:
        cfg = replace(base, n_inputs=cell["n_inputs"], **variant_overrides(cell["variant"]))
        state, trace = train_diffusion(cfg, codec, dataset)
        ev = evaluate(
            state, codec, dataset, cfg.target_modality, split=split,
            sample_steps=sample_steps, seed=cfg.seed, n_inputs=cfg.n_inputs,
            structural_guidance=cfg.structural_guidance,
            density_source=cfg.density_source, T=cfg.T, beta1=cfg.beta1,
            betaT=cfg.betaT, limit=eval_limit, config_hash=config_hash,
        )
        agg = ev.aggregate()
        report.rows.append(
            {
                "variant": cell["variant"],
                "n_inputs": cell["n_inputs"],
                "psnr_mean": agg["psnr"]["mean"],
                "psnr_std": agg["psnr"]["std"],
                "ssim_mean": agg["ssim"]["mean"],
                "ssim_std": agg["ssim"]["std"],
                "final_eps_loss": trace["eps_loss"][-1],
            }
        )
        if out_path is not None:
            out_path.mkdir(parents=True, exist_ok=True)
            (out_path / "ablation.json").write_text(json.dumps(report.to_dict(), indent=2))
    return report
