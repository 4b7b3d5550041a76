"""Command-line entry point wiring configs, data, training, inference, and sweeps.

Runs are reproducible: every command's outputs are fully determined by
(config, root seed, checkpoints). The root seed is split per subsystem via
labelled derivation ("data", "init", "train:stageN", "sampling"), so each
subsystem is independently reproducible.

On failure the process exits nonzero after printing a single line to stderr:
``error:<category>: <message>`` with category one of config, data, checkpoint,
io, internal.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from dataclasses import dataclass, fields as dc_fields
from pathlib import Path

from .data import (
    SHAPES,
    SpriteSceneConfig,
    TripletSampler,
    compute_dataset_stats,
    ingest_frame_dir,
    load_frame_png,
    load_triplet_list,
    save_frame_png,
    synth_sequence,
    triplet_sample,
    write_frame_dir,
    write_triplet_list,
)
from .diffusion import (
    DEFAULT_SAMPLING_STEPS,
    DatasetStats,
    DiTConfig,
    VelocityModel,
    interpolate_frame,
)
from .evaluation import (
    evaluate_triplets,
    report_with_mean,
    sweep_denoising_steps,
    sweep_intervals,
    write_metric_csv,
)
from .figures import plot_loss_log, plot_sample_metrics, plot_sweep
from .losses import LossWeights, PatchDiscriminator
from .seeding import derive_seed, seed_module_init
from .tokenizer import FrameTokenizer, TokenizerConfig
from .training import (
    CheckpointError,
    TrainConfig,
    build_tokenizer,
    build_velocity_model,
    latent_std_pass,
    load_checkpoint,
    load_interpolation_models,
    load_params_into_model,
    stage2_train_config,
    train_dit,
    train_tokenizer,
    write_loss_log,
)

ENV_OUTPUT_DIR = "EDEN_OUTPUT_DIR"


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Run configuration
# ---------------------------------------------------------------------------


@dataclass
class DataConfig:
    height: int = 64
    width: int = 64
    n_sprites: int = 3
    shapes: tuple[str, ...] = SHAPES
    speed_range: tuple[float, float] = (0.5, 2.0)
    size_range: tuple[float, float] = (5.0, 10.0)
    trajectory: str = "mixed"
    n_frames: int = 25
    n_sequences: int = 4
    triplet_stride: int = 1

    def __post_init__(self) -> None:
        if self.n_sequences < 1:
            raise ValueError(f"n_sequences must be >= 1, got {self.n_sequences}")
        if self.triplet_stride < 1:
            raise ValueError(f"triplet_stride must be >= 1, got {self.triplet_stride}")


@dataclass
class EvalConfig:
    steps_list: tuple[int, ...] = (0, 1, 2, 5, 20, 50)
    intervals: tuple[int, ...] = (1, 2, 4)
    steps: int = DEFAULT_SAMPLING_STEPS
    max_per_sequence: int = 4

    def __post_init__(self) -> None:
        if not self.steps_list or min(self.steps_list) < 0:
            raise ValueError(f"bad steps_list {self.steps_list}")
        if not self.intervals or min(self.intervals) < 1:
            raise ValueError(f"bad intervals {self.intervals}")
        if self.steps < 0:
            raise ValueError(f"steps must be >= 0, got {self.steps}")


@dataclass
class RunConfig:
    seed: int
    output_dir: str | None
    data: DataConfig
    tokenizer: TokenizerConfig
    dit: DiTConfig
    train_stage1: TrainConfig
    train_stage2: TrainConfig
    eval: EvalConfig


def _tuplify(value):
    if isinstance(value, list):
        return tuple(_tuplify(v) for v in value)
    return value


def _check_field_type(path: str, key: str, value, default) -> None:
    if default is None or isinstance(default, (tuple, list)) or value is None:
        return
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
    elif isinstance(default, str):
        ok = isinstance(value, str)
    else:
        return
    if not ok:
        raise ConfigError(
            f"{path}.{key}: expected {type(default).__name__}, got {type(value).__name__}"
        )


def _build_section(path: str, cls, raw: dict, factory=None):
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: expected an object")
    known = {f.name: f for f in dc_fields(cls)}
    for key in raw:
        if key not in known:
            raise ConfigError(f"{path}.{key}: unknown key")
        default = known[key].default
        if default is not dataclasses.MISSING:
            _check_field_type(path, key, raw[key], default)
    kwargs = {k: _tuplify(v) for k, v in raw.items()}
    try:
        return factory(**kwargs) if factory else cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def load_run_config(path: str | Path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"config file not found: {path}")
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a JSON object")
    sections = {"seed", "output_dir", "data", "tokenizer", "dit", "train", "eval"}
    for key in raw:
        if key not in sections:
            raise ConfigError(f"{key}: unknown key")
    seed = raw.get("seed", 0)
    if not isinstance(seed, int) or isinstance(seed, bool):
        raise ConfigError("seed: expected int")
    output_dir = raw.get("output_dir")
    if output_dir is not None and not isinstance(output_dir, str):
        raise ConfigError("output_dir: expected string")

    train_raw = raw.get("train", {})
    if not isinstance(train_raw, dict):
        raise ConfigError("train: expected an object")
    for key in train_raw:
        if key not in ("stage1", "stage2"):
            raise ConfigError(f"train.{key}: unknown key")
    stage1_raw = dict(train_raw.get("stage1", {}))
    stage2_raw = dict(train_raw.get("stage2", {}))

    cfg = RunConfig(
        seed=seed,
        output_dir=output_dir,
        data=_build_section("data", DataConfig, raw.get("data", {})),
        tokenizer=_build_section("tokenizer", TokenizerConfig, raw.get("tokenizer", {})),
        dit=_build_section("dit", DiTConfig, raw.get("dit", {})),
        train_stage1=_build_section("train.stage1", TrainConfig, stage1_raw),
        train_stage2=_build_section(
            "train.stage2", TrainConfig, stage2_raw, factory=stage2_train_config
        ),
        eval=_build_section("eval", EvalConfig, raw.get("eval", {})),
    )
    # Training seeds derive from the root seed unless set explicitly.
    if "seed" not in stage1_raw:
        cfg.train_stage1.seed = derive_seed(seed, "train:stage1")
    if "seed" not in stage2_raw:
        cfg.train_stage2.seed = derive_seed(seed, "train:stage2")
    return cfg


# ---------------------------------------------------------------------------
# Shared command plumbing
# ---------------------------------------------------------------------------


def _resolve_out_dir(flag_value: str | None, cfg_output_dir: str | None = None) -> Path:
    value = flag_value or cfg_output_dir or os.environ.get(ENV_OUTPUT_DIR)
    if not value:
        raise ConfigError(
            f"--out required (or set config output_dir / ${ENV_OUTPUT_DIR})"
        )
    out = Path(value)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_sequences(data_dir: str) -> list[list]:
    root = Path(data_dir)
    if not root.is_dir():
        raise FileNotFoundError(f"data directory not found: {root}")
    seq_dirs = sorted(p for p in root.iterdir() if p.is_dir() and p.name.startswith("seq_"))
    if not seq_dirs:
        raise ValueError(f"no seq_* frame directories under {root}")
    return [ingest_frame_dir(d) for d in seq_dirs]


def _load_sidecar_stats(data_dir: str | None) -> DatasetStats | None:
    if data_dir is None:
        return None
    sidecar = Path(data_dir) / "stats.json"
    if not sidecar.is_file():
        return None
    blob = json.loads(sidecar.read_text())
    return DatasetStats(
        sim_mean=blob["sim_mean"],
        sim_std=blob["sim_std"],
        latent_std=blob.get("latent_std"),
    )


def _train_config_for_stage(cfg: RunConfig, stage: int, args) -> TrainConfig:
    tcfg = cfg.train_stage1 if stage == 1 else cfg.train_stage2
    # Flags win over config fields.
    if getattr(args, "total_steps", None) is not None:
        tcfg.total_steps = args.total_steps
    if getattr(args, "batch_size", None) is not None:
        tcfg.batch_size = args.batch_size
    if getattr(args, "checkpoint_every", None) is not None:
        tcfg.checkpoint_every = args.checkpoint_every
    return tcfg


def _parse_int_list(text: str, what: str) -> tuple[int, ...]:
    try:
        return tuple(int(tok) for tok in text.split(",") if tok.strip() != "")
    except ValueError as exc:
        raise ConfigError(f"{what}: expected comma-separated integers, got {text!r}") from exc


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    cfg = load_run_config(args.config)
    out = _resolve_out_dir(args.out, cfg.output_dir)
    d = cfg.data
    needed = (
        set(cfg.train_stage1.intervals)
        | set(cfg.train_stage2.intervals)
        | set(cfg.eval.intervals)
    )
    max_k = max(needed)
    if d.n_frames < 2 * max_k + 1:
        raise ConfigError(
            f"data.n_frames: {d.n_frames} frames cannot host interval {max_k} "
            f"(need >= {2 * max_k + 1})"
        )
    data_seed = derive_seed(cfg.seed, "data")
    sequences = []
    for i in range(d.n_sequences):
        scene = SpriteSceneConfig(
            height=d.height,
            width=d.width,
            n_sprites=d.n_sprites,
            shapes=d.shapes,
            speed_range=d.speed_range,
            size_range=d.size_range,
            trajectory=d.trajectory,
            n_frames=d.n_frames,
            seed=derive_seed(data_seed, f"seq:{i}"),
        )
        frames = synth_sequence(scene)
        write_frame_dir(frames, out / f"seq_{i:03d}")
        sequences.append(frames)

    entries = []
    records = []
    for i, seq in enumerate(sequences):
        for k in cfg.train_stage1.intervals:
            for start in range(0, len(seq) - 2 * k, d.triplet_stride):
                entries.append((f"seq_{i:03d}", start, start + k, start + 2 * k))
                records.append(triplet_sample(seq, start, k, source_id=f"seq_{i:03d}"))
    write_triplet_list(entries, out / "triplets.txt")
    stats = compute_dataset_stats(records)
    (out / "stats.json").write_text(
        json.dumps({"sim_mean": stats.sim_mean, "sim_std": stats.sim_std}, indent=2)
        + "\n"
    )
    print(
        f"wrote {d.n_sequences} sequences, {len(entries)} triplets, stats.json to {out}"
    )
    return 0


def cmd_train_tokenizer(args) -> int:
    cfg = load_run_config(args.config)
    out = _resolve_out_dir(args.out, cfg.output_dir)
    tcfg = _train_config_for_stage(cfg, args.stage, args)
    sequences = _load_sequences(args.data)
    stats = _load_sidecar_stats(args.data)

    start_step = 0
    if args.resume:
        ckpt = load_checkpoint(args.resume)
        tokenizer = build_tokenizer(ckpt)
        start_step = ckpt.step
        stats = ckpt.stats or stats
    elif args.init_from:
        ckpt = load_checkpoint(args.init_from)
        tokenizer = build_tokenizer(ckpt)
        stats = ckpt.stats or stats
    else:
        if args.stage == 2:
            raise ConfigError(
                "--stage 2 requires a stage-1 checkpoint via --init-from or --resume"
            )
        seed_module_init(cfg.seed)
        tokenizer = FrameTokenizer(cfg.tokenizer)

    sampler = TripletSampler(
        sequences,
        intervals=tcfg.intervals,
        resolutions=tcfg.resolutions,
        batch_size=tcfg.batch_size,
        seed=derive_seed(cfg.seed, f"data:stage{args.stage}"),
        multiple_of=2 * tokenizer.cfg.patch_size,
    )

    seed_module_init(cfg.seed, "init:disc")
    disc = PatchDiscriminator()
    if args.resume:
        disc_path = Path(args.resume).parent / "discriminator_latest.ckpt"
        if disc_path.is_file():
            load_params_into_model(disc, load_checkpoint(disc_path))

    history = train_tokenizer(
        tcfg,
        sampler,
        tokenizer,
        disc=disc,
        weights=LossWeights(),
        stats=stats,
        start_step=start_step,
        checkpoint_dir=out,
    )
    log_path = out / f"tokenizer_stage{args.stage}_loss.csv"
    write_loss_log(history, log_path)
    plot_loss_log(history, log_path.with_suffix(".png"), title=f"tokenizer stage {args.stage}")
    print(f"trained tokenizer stage {args.stage} to step {tcfg.total_steps}; logs at {log_path}")
    return 0


def cmd_train_dit(args) -> int:
    cfg = load_run_config(args.config)
    out = _resolve_out_dir(args.out, cfg.output_dir)
    tcfg = _train_config_for_stage(cfg, args.stage, args)
    sequences = _load_sequences(args.data)
    tok_ckpt = load_checkpoint(args.tokenizer_ckpt)
    tokenizer = build_tokenizer(tok_ckpt)

    sampler = TripletSampler(
        sequences,
        intervals=tcfg.intervals,
        resolutions=tcfg.resolutions,
        batch_size=tcfg.batch_size,
        seed=derive_seed(cfg.seed, f"data:dit-stage{args.stage}"),
        multiple_of=2 * tokenizer.cfg.patch_size,
    )

    start_step = 0
    stats = None
    if args.resume:
        ckpt = load_checkpoint(args.resume)
        model = build_velocity_model(ckpt)
        start_step = ckpt.step
        stats = ckpt.stats
    elif args.init_from:
        ckpt = load_checkpoint(args.init_from)
        model = build_velocity_model(ckpt)
        stats = ckpt.stats
    else:
        if args.stage == 2:
            raise ConfigError(
                "--stage 2 requires a stage-1 checkpoint via --init-from or --resume"
            )
        seed_module_init(cfg.seed, "init:dit")
        model = VelocityModel(cfg.dit)

    if stats is None or stats.latent_std is None:
        sim_stats = tok_ckpt.stats or _load_sidecar_stats(args.data)
        if sim_stats is None:
            raise ValueError(
                "no dataset stats available: tokenizer checkpoint carries none and "
                "no stats.json sidecar found in the data directory"
            )
        latent_std = latent_std_pass(
            tokenizer, sampler, n_batches=4, seed=derive_seed(cfg.seed, "latent-stats")
        )
        stats = DatasetStats(
            sim_mean=sim_stats.sim_mean, sim_std=sim_stats.sim_std, latent_std=latent_std
        )

    history = train_dit(
        tcfg,
        sampler,
        tokenizer,
        model,
        stats,
        start_step=start_step,
        checkpoint_dir=out,
    )
    log_path = out / f"dit_stage{args.stage}_loss.csv"
    write_loss_log(history, log_path)
    plot_loss_log(history, log_path.with_suffix(".png"), title=f"dit stage {args.stage}")
    print(f"trained dit stage {args.stage} to step {tcfg.total_steps}; logs at {log_path}")
    return 0


def cmd_interpolate(args) -> int:
    tokenizer, model, stats = load_interpolation_models(args.tokenizer_ckpt, args.dit_ckpt)
    i0 = load_frame_png(args.i0)
    i1 = load_frame_png(args.i1)
    if args.out:
        out_path = Path(args.out)
    else:
        env = os.environ.get(ENV_OUTPUT_DIR)
        if not env:
            raise ConfigError(f"--out required (or set ${ENV_OUTPUT_DIR})")
        out_path = Path(env) / f"interpolated_s{args.steps}_seed{args.seed}.png"
    out_path.parent.mkdir(parents=True, exist_ok=True)
    frame = interpolate_frame(
        tokenizer,
        model,
        stats,
        i0,
        i1,
        steps=args.steps,
        seed=derive_seed(args.seed, "sampling"),
    )
    save_frame_png(frame, out_path)
    print(f"wrote {out_path}")
    return 0


def cmd_eval(args) -> int:
    cfg = load_run_config(args.config)
    out = _resolve_out_dir(args.out, cfg.output_dir)
    tokenizer, model, stats = load_interpolation_models(args.tokenizer_ckpt, args.dit_ckpt)
    triplets = load_triplet_list(args.triplets)
    rows = evaluate_triplets(
        tokenizer,
        model,
        stats,
        triplets,
        steps=cfg.eval.steps,
        seed=derive_seed(cfg.seed, "sampling"),
    )
    report = report_with_mean(rows)
    csv_path = out / "eval_report.csv"
    write_metric_csv(report, csv_path)
    plot_sample_metrics(report, csv_path.with_suffix(".png"), title="midpoint interpolation")
    mean = report.mean_rows()[0]
    print(f"evaluated {len(rows)} samples: PSNR {mean.psnr:.2f} dB, SSIM {mean.ssim:.4f}")
    print(f"report at {csv_path}")
    return 0


def cmd_sweep_steps(args) -> int:
    cfg = load_run_config(args.config)
    out = _resolve_out_dir(args.out, cfg.output_dir)
    tokenizer, model, stats = load_interpolation_models(args.tokenizer_ckpt, args.dit_ckpt)
    triplets = load_triplet_list(args.triplets)
    steps_list = (
        _parse_int_list(args.steps_list, "--steps-list")
        if args.steps_list
        else cfg.eval.steps_list
    )
    report = sweep_denoising_steps(
        tokenizer,
        model,
        stats,
        triplets,
        steps_list=steps_list,
        seed=derive_seed(cfg.seed, "sampling"),
    )
    csv_path = out / "sweep_steps.csv"
    write_metric_csv(report, csv_path)
    plot_sweep(report, "steps", csv_path.with_suffix(".png"), title="denoising-step sweep")
    print(f"report at {csv_path}")
    return 0


def cmd_sweep_intervals(args) -> int:
    cfg = load_run_config(args.config)
    out = _resolve_out_dir(args.out, cfg.output_dir)
    tokenizer, model, stats = load_interpolation_models(args.tokenizer_ckpt, args.dit_ckpt)
    sequences = _load_sequences(args.data)
    intervals = (
        _parse_int_list(args.intervals, "--intervals")
        if args.intervals
        else cfg.eval.intervals
    )
    report = sweep_intervals(
        tokenizer,
        model,
        stats,
        sequences,
        intervals=intervals,
        steps=cfg.eval.steps,
        seed=derive_seed(cfg.seed, "sampling"),
        max_per_sequence=cfg.eval.max_per_sequence,
    )
    csv_path = out / "sweep_intervals.csv"
    write_metric_csv(report, csv_path)
    plot_sweep(report, "interval", csv_path.with_suffix(".png"), title="frame-interval sweep")
    print(f"report at {csv_path}")
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="midframe",
        description="Train and run the frame-interpolation pipeline "
        "(tokenizer + rectified-flow transformer).",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate the synthetic sprite corpus")
    p.add_argument("--config", required=True)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_gen_data)

    for name, fn, needs_tok in (
        ("train-tokenizer", cmd_train_tokenizer, False),
        ("train-dit", cmd_train_dit, True),
    ):
        p = sub.add_parser(name, help=f"run {name.replace('-', ' ')}")
        p.add_argument("--config", required=True)
        p.add_argument("--data", required=True, help="gen-data output directory")
        p.add_argument("--stage", type=int, choices=(1, 2), default=1)
        p.add_argument("--resume", default=None, help="checkpoint to continue from")
        p.add_argument(
            "--init-from", default=None, help="checkpoint to initialize parameters from"
        )
        p.add_argument("--out", default=None)
        p.add_argument("--total-steps", type=int, default=None)
        p.add_argument("--batch-size", type=int, default=None)
        p.add_argument("--checkpoint-every", type=int, default=None)
        if needs_tok:
            p.add_argument("--tokenizer-ckpt", required=True)
        p.set_defaults(func=fn)

    p = sub.add_parser("interpolate", help="synthesize the middle frame of a pair")
    p.add_argument("--tokenizer-ckpt", required=True)
    p.add_argument("--dit-ckpt", required=True)
    p.add_argument("--i0", required=True, help="start frame PNG")
    p.add_argument("--i1", required=True, help="end frame PNG")
    p.add_argument("--steps", type=int, default=DEFAULT_SAMPLING_STEPS)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None, help="output PNG path")
    p.set_defaults(func=cmd_interpolate)

    p = sub.add_parser("eval", help="score midpoint interpolation on a triplet list")
    p.add_argument("--config", required=True)
    p.add_argument("--tokenizer-ckpt", required=True)
    p.add_argument("--dit-ckpt", required=True)
    p.add_argument("--triplets", required=True, help="triplet list file")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep-steps", help="metrics across denoising step counts")
    p.add_argument("--config", required=True)
    p.add_argument("--tokenizer-ckpt", required=True)
    p.add_argument("--dit-ckpt", required=True)
    p.add_argument("--triplets", required=True)
    p.add_argument("--steps-list", default=None, help="comma-separated step counts")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_sweep_steps)

    p = sub.add_parser("sweep-intervals", help="metrics across frame intervals")
    p.add_argument("--config", required=True)
    p.add_argument("--tokenizer-ckpt", required=True)
    p.add_argument("--dit-ckpt", required=True)
    p.add_argument("--data", required=True, help="gen-data output directory")
    p.add_argument("--intervals", default=None, help="comma-separated intervals")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_sweep_intervals)

    return parser


def _fail(category: str, err: Exception) -> int:
    print(f"error:{category}: {err}", file=sys.stderr)
    return 1


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        return _fail("config", exc)
    except CheckpointError as exc:
        return _fail("checkpoint", exc)
    except FileNotFoundError as exc:
        return _fail("io", exc)
    except ValueError as exc:
        return _fail("data", exc)
    except OSError as exc:
        return _fail("io", exc)


if __name__ == "__main__":
    sys.exit(main())
