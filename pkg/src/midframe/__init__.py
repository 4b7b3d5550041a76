"""Video frame interpolation via 1D latent tokens and rectified flow.

A transformer tokenizer compresses the middle frame of a triplet into a short
sequence of latent tokens under start/end-frame guidance; a diffusion
transformer generates those tokens from noise with two Euler steps; the
tokenizer decoder turns them back into pixels.
"""

from .data import (
    SpriteSceneConfig,
    SpriteSpec,
    TripletRecord,
    compute_dataset_stats,
    ingest_frame_dir,
    load_frame_png,
    multi_res_crop,
    save_frame_png,
    synth_sequence,
    triplet_sample,
)
from .diffusion import (
    DatasetStats,
    DiTConfig,
    VelocityModel,
    difference_context,
    euler_sample,
    flow_loss,
    forward_sample,
    interpolate_frame,
    sample_latents,
    velocity_target,
)
from .evaluation import MetricReport, psnr, ssim
from .losses import (
    LossWeights,
    PatchDiscriminator,
    adversarial_losses,
    kl_penalty,
    l1_loss,
    perceptual_loss,
    tokenizer_total_loss,
)
from .tokenizer import (
    FrameTokenizer,
    LatentPosterior,
    TokenGrid,
    TokenizerConfig,
    group_context,
    interpolate_pos_embed,
    pool_tokens,
    reparameterize,
    upsample_tokens,
)
from .training import (
    Checkpoint,
    TrainConfig,
    cosine_lr,
    load_checkpoint,
    save_checkpoint,
    train_dit,
    train_tokenizer,
)

__version__ = "0.1.0"
