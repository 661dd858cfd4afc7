"""Many-to-one modality synthesis on procedural brain phantoms.

A compact latent-diffusion pipeline: a frozen convolutional codec, a
conditioned UNet denoiser with wavelet-filtered skip connections and
energy-gated condition channels, and the training, sampling, and
evaluation machinery around it, all sized to run on a CPU in minutes.
"""

from .codec import CodecTrainConfig, LatentCodec, load_codec, save_codec, train_codec
from .conditions import (
    ConditionSet,
    GateParams,
    build_structural_condition,
    channel_energy,
    gate_channels,
    normalize_energies,
)
from .config import config_hash, default_config, load_config, save_config
from .coopfilter import (
    FilterPolicy,
    WaveletPyramid,
    block_match_filter,
    cooperative_filter,
    dwt2,
    idwt2,
    soft_threshold,
)
from .dataset import (
    DatasetManifest,
    PhantomDataset,
    allocate_splits,
    generate_dataset,
    read_dataset,
    write_dataset,
)
from .denoiser import (
    DenoiserNet,
    DenoiserSpec,
    DenoiserState,
    build_denoiser,
    ema_model,
    ema_update,
    load_denoiser,
    parameter_count,
    predict_noise,
    save_denoiser,
)
from .diffusion import (
    NoiseSchedule,
    build_linear_schedule,
    combined_loss,
    epsilon_loss,
    forward_diffuse,
    kl_term,
    reverse_step,
    strided_plan,
)
from .metrics import psnr, ssim
from .phantoms import (
    PhantomConfig,
    SliceSample,
    TissueMap,
    check_tissue_invariants,
    density_map,
    generate_phantom,
)
from .pipeline import (
    AblationReport,
    EvalReport,
    TrainConfig,
    copy_best_source,
    evaluate,
    plan_ablation,
    run_ablation,
    synthesize,
    train_diffusion,
)

__version__ = "0.1.0"
