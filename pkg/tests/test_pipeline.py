"""End-to-end training, sampling, evaluation, and the ablation grid."""

import json
from types import SimpleNamespace

import numpy as np
import pytest
import torch

import mmsynth as mm
from mmsynth.codec import LatentCodec
from mmsynth.denoiser import predict_noise
from mmsynth.diffusion import build_linear_schedule
from mmsynth.pipeline import (
    VARIANTS,
    AblationReport,
    EvalReport,
    TrainConfig,
    copy_best_source,
    evaluate,
    loss_per_element,
    pick_sources,
    plan_ablation,
    synthesize,
    train_diffusion,
    variant_overrides,
)

SCHED = build_linear_schedule(1000, 1e-4, 0.02)


def _quick_config(**kw):
    base = dict(steps=10, batch_size=4, seed=0, ckpt_every=5)
    base.update(kw)
    return TrainConfig(**base)


# ---------------------------------------------------------------- config


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(steps=0)
    with pytest.raises(ValueError):
        TrainConfig(learning_rate=0.0)
    with pytest.raises(ValueError):
        TrainConfig(ema_rate=1.0)


def test_train_config_from_flat():
    flat = mm.default_config()
    flat["train.steps"] = 77
    flat["n_inputs"] = 2
    flat["coop_filter.enabled"] = False
    tc = TrainConfig.from_flat(flat, dataset_root="/nowhere")
    assert tc.steps == 77
    assert tc.n_inputs == 2
    assert tc.coop_filter is False
    assert tc.channel_mult == (1, 2)
    assert tc.dataset_root == "/nowhere"
    assert tc.learning_rate == flat["train.lr"]


def test_pick_sources_order_and_truncation():
    mods = ["m3", "m1", "m4", "m2"]
    assert pick_sources(mods, "m1", None) == ["m2", "m3", "m4"]
    assert pick_sources(mods, "m1", 1) == ["m2"]
    assert pick_sources(mods, "m2", 2) == ["m1", "m3"]
    with pytest.raises(ValueError):
        pick_sources(mods, "m1", 4)
    with pytest.raises(ValueError):
        pick_sources(mods, "m1", 0)
    with pytest.raises(ValueError):
        pick_sources(["m1"], "m1", None)


# ------------------------------------------------------------- training


def test_identical_batches_give_identical_losses(tiny_dataset, quick_codec):
    """The per-element loss is a pure function of its inputs."""
    from mmsynth.pipeline import _build_caches

    cfg = _quick_config()
    lat0, conds, _ = _build_caches(cfg, quick_codec, tiny_dataset)
    from mmsynth.denoiser import DenoiserSpec, build_denoiser

    spec = DenoiserSpec(latent_channels=4, latent_size=lat0.shape[-1],
                        cond_channels=conds.shape[1], base_width=16,
                        n_heads=2, time_embed_dim=32)
    state = build_denoiser(spec, seed=0)
    g = torch.Generator().manual_seed(5)
    batch, cond = lat0[:4], conds[:4]
    t_vec = torch.randint(1, 1001, (4,), generator=g)
    eps = torch.randn(batch.shape, generator=g)
    a_eps, a_kl = loss_per_element(state.model, SCHED, batch, cond, t_vec, eps)
    b_eps, b_kl = loss_per_element(state.model, SCHED, batch, cond, t_vec, eps)
    assert torch.equal(a_eps, b_eps)
    assert torch.equal(a_kl, b_kl)


def test_short_training_is_bitwise_reproducible(tiny_dataset, quick_codec):
    cfg = _quick_config(steps=8)
    a_state, a_trace = train_diffusion(cfg, quick_codec, tiny_dataset)
    b_state, b_trace = train_diffusion(cfg, quick_codec, tiny_dataset)
    assert a_trace["total"] == b_trace["total"]
    assert a_trace["eps_loss"] == b_trace["eps_loss"]
    for pa, pb in zip(a_state.model.parameters(), b_state.model.parameters()):
        assert torch.equal(pa, pb)
    for name in a_state.ema:
        assert torch.equal(a_state.ema[name], b_state.ema[name])


def test_trace_has_both_loss_parts(tiny_dataset, quick_codec):
    cfg = _quick_config(steps=6)
    state, trace = train_diffusion(cfg, quick_codec, tiny_dataset)
    assert len(trace["step"]) == 6
    assert all(np.isfinite(v) for v in trace["total"])
    assert state.step_count == 6
    # totals decompose into the two recorded parts
    for e, k, t in zip(trace["eps_loss"], trace["kl_loss"], trace["total"]):
        assert t == pytest.approx(e + k, rel=1e-5)


def test_two_hundred_steps_reduce_noise_prediction_loss(tmp_path_factory, quick_codec):
    """On 32 small phantoms the trailing-20 mean of the noise-prediction
    loss falls below the leading-20 mean within 200 steps."""
    root = tmp_path_factory.mktemp("train32")
    ds = mm.generate_dataset(root, n_samples=32, size=16, seed=3,
                             split_ratio=(28, 2, 2))
    cfg = TrainConfig(steps=200, batch_size=8, seed=0, ckpt_every=100)
    state, trace = train_diffusion(cfg, quick_codec, ds)
    first = float(np.mean(trace["eps_loss"][:20]))
    last = float(np.mean(trace["eps_loss"][-20:]))
    assert last < first, (first, last)


def test_training_aborts_on_divergence_with_checkpoint(tiny_dataset, tmp_path):
    class _NaNCodec(LatentCodec):
        def encode(self, image):
            out = super().encode(image)
            return out * float("nan")

    torch.manual_seed(0)
    codec = _NaNCodec()
    cfg = _quick_config(steps=5)
    with pytest.raises(RuntimeError, match="diverged") as err:
        train_diffusion(cfg, codec, tiny_dataset, out_dir=tmp_path)
    state = err.value.state
    assert state.step_count == 0  # restored to the pre-training snapshot
    assert (tmp_path / "denoiser_lastgood.pt").exists()


def test_training_writes_artifacts(tiny_dataset, quick_codec, tmp_path):
    cfg = _quick_config(steps=6, ckpt_every=3)
    state, trace = train_diffusion(cfg, quick_codec, tiny_dataset,
                                   out_dir=tmp_path, config_hash="h7")
    assert (tmp_path / "denoiser.pt").exists()
    assert (tmp_path / "denoiser_latest.pt").exists()
    saved_trace = json.loads((tmp_path / "trace.json").read_text())
    assert saved_trace["total"] == trace["total"]
    from mmsynth.denoiser import load_denoiser

    loaded = load_denoiser(tmp_path / "denoiser.pt")
    assert loaded.config_hash == "h7"
    assert loaded.step_count == 6


def test_raw_and_averaged_parameters_differ_after_training(tiny_dataset, quick_codec):
    cfg = _quick_config(steps=10, ema_rate=0.9)
    state, _ = train_diffusion(cfg, quick_codec, tiny_dataset)
    g = torch.Generator().manual_seed(2)
    x = torch.randn(1, 4, 4, 4, generator=g)
    cond = torch.randn(1, state.model.spec.cond_channels, 4, 4, generator=g)
    raw = predict_noise(state, x, 500, cond).detach()
    avg = predict_noise(state, x, 500, cond, use_ema=True).detach()
    assert float((raw - avg).abs().max()) > 0.0


# ------------------------------------------------------------- sampling


def test_synthesize_shape_range_and_determinism(tiny_dataset, quick_codec):
    cfg = _quick_config(steps=5)
    state, _ = train_diffusion(cfg, quick_codec, tiny_dataset)
    sample = tiny_dataset.load_sample(tiny_dataset.ids("test")[0])
    a = synthesize(state, quick_codec, sample, "m1", sample_steps=4, seed=3)
    b = synthesize(state, quick_codec, sample, "m1", sample_steps=4, seed=3)
    c = synthesize(state, quick_codec, sample, "m1", sample_steps=4, seed=4)
    assert a.shape == (16, 16) and a.dtype == np.float32
    assert a.min() >= 0.0 and a.max() <= 1.0
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)


def test_synthesize_rejects_condition_mismatch(tiny_dataset, quick_codec):
    cfg = _quick_config(steps=2, n_inputs=1)
    state, _ = train_diffusion(cfg, quick_codec, tiny_dataset)
    sample = tiny_dataset.load_sample(tiny_dataset.ids("test")[0])
    with pytest.raises(ValueError, match="channels"):
        synthesize(state, quick_codec, sample, "m1", sample_steps=2, seed=0,
                   sources=["m2", "m3", "m4"])


def test_copy_best_source_picks_highest_psnr():
    rng = np.random.default_rng(0)
    target = rng.random((16, 16)).astype(np.float32)
    near = np.clip(target + rng.normal(0, 0.01, target.shape), 0, 1).astype(np.float32)
    far = np.clip(target + rng.normal(0, 0.3, target.shape), 0, 1).astype(np.float32)
    sample = SimpleNamespace(images={"m1": target, "m2": far, "m3": near})
    best = copy_best_source(sample, "m1", ["m2", "m3"])
    assert best["source"] == "m3"
    assert best["psnr"] > 20.0


# ------------------------------------------------------------ evaluation


def test_evaluate_report_and_aggregate_oracle(tiny_dataset, quick_codec, tmp_path):
    cfg = _quick_config(steps=5)
    state, _ = train_diffusion(cfg, quick_codec, tiny_dataset)
    report = evaluate(state, quick_codec, tiny_dataset, "m1", split="test",
                      sample_steps=3, seed=1, limit=3, out_dir=tmp_path,
                      grid_limit=1)
    assert len(report.sample_ids) == 3
    agg = report.aggregate()
    assert agg["psnr"]["mean"] == pytest.approx(np.mean(report.psnr_values))
    assert agg["psnr"]["std"] == pytest.approx(np.std(report.psnr_values))
    assert agg["ssim"]["mean"] == pytest.approx(np.mean(report.ssim_values))
    blob = json.loads((tmp_path / "report.json").read_text())
    assert blob["aggregate"]["psnr"]["mean"] == pytest.approx(agg["psnr"]["mean"])
    assert len(blob["per_sample"]) == 3
    assert (tmp_path / "grids").exists()
    assert "test/m1" in report.summary()


def test_evaluate_is_reproducible(tiny_dataset, quick_codec):
    cfg = _quick_config(steps=5)
    state, _ = train_diffusion(cfg, quick_codec, tiny_dataset)
    a = evaluate(state, quick_codec, tiny_dataset, "m1", split="val",
                 sample_steps=3, seed=2, limit=2)
    b = evaluate(state, quick_codec, tiny_dataset, "m1", split="val",
                 sample_steps=3, seed=2, limit=2)
    assert a.psnr_values == b.psnr_values
    assert a.ssim_values == b.ssim_values


# -------------------------------------------------------------- ablation


def test_plan_ablation_covers_grid():
    cells = plan_ablation()
    assert len(cells) == 15
    combos = {(c["variant"], c["n_inputs"]) for c in cells}
    assert len(combos) == 15
    for variant in VARIANTS:
        for k in (1, 2, 3):
            assert (variant, k) in combos


def test_variant_overrides_toggle_single_fields():
    assert variant_overrides("full") == {}
    assert variant_overrides("no_coop") == {"coop_filter": False}
    assert variant_overrides("no_struct") == {"structural_guidance": False}
    assert variant_overrides("no_autoweight") == {"autoweight": False}
    assert variant_overrides("no_modified") == {"modified_blocks": False}
    with pytest.raises(ValueError):
        variant_overrides("no_such")


def test_ablation_report_rows_and_deltas():
    rows = [
        {"variant": "full", "n_inputs": 3, "psnr_mean": 25.0, "psnr_std": 0.5,
         "ssim_mean": 0.9, "ssim_std": 0.01, "final_eps_loss": 0.3},
        {"variant": "no_coop", "n_inputs": 3, "psnr_mean": 24.0, "psnr_std": 0.5,
         "ssim_mean": 0.85, "ssim_std": 0.01, "final_eps_loss": 0.35},
    ]
    report = AblationReport(rows=rows)
    assert report.row("no_coop", 3)["psnr_mean"] == 24.0
    assert report.row("no_coop", 1) is None
    deltas = report.deltas_vs_full()
    assert len(deltas) == 1
    assert deltas[0]["psnr_delta"] == pytest.approx(1.0)
    assert deltas[0]["ssim_delta"] == pytest.approx(0.05)
    table = report.format_table()
    assert "full" in table and "no_coop" in table


def test_eval_report_round_trips_to_dict():
    r = EvalReport(target_modality="m1", split="test", sample_steps=5, seed=0,
                   sample_ids=["a", "b"], psnr_values=[20.0, 22.0],
                   ssim_values=[0.8, 0.9], baseline_psnr=[19.0, 20.0],
                   baseline_ssim=[0.7, 0.8], baseline_source=["m2", "m2"])
    d = r.to_dict()
    assert d["per_sample"][1]["psnr"] == 22.0
    assert d["aggregate"]["baseline_psnr"]["mean"] == pytest.approx(19.5)
