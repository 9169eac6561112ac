"""Command-line entry points.

Every subcommand reads one JSON config (all fields optional, flags override),
writes its outputs under ``<out>/<run-id>/`` next to a ``run_manifest.json``,
and exits 0 on success, 1 on validation errors, 2 on runtime failures.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import diffusion as dd
from . import report
from .analysis import analyze_pair, tap_matrix_single
from .metrics import HistogramSpec, nmi
from .motion import MotionNets
from .pipeline import (ConfigError, PipelineConfig, ablation_sweep,
                       consistency_ablation, edit_video, load_stack, run_bench)
from .selector import train_dss
from .training import (MtnTrainConfig, build_dss_dataset,
                       reconstruction_trajectories, stepwise_vs_surrogate_gap,
                       train_mtn)
from .video import (VideoClip, default_spec, export_frames_png,
                    generate_clip, load_clip, save_clip)


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


def build_parser() -> _Parser:
    parser = _Parser(prog="stepreuse",
                     description="Motion-reuse video diffusion benchmark harness")
    sub = parser.add_subparsers(dest="command", metavar="command")

    def common(p):
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--out", default="runs", help="output root directory")
        p.add_argument("--run-id", help="run directory name (default: derived)")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--sigma", type=float, help="clip jitter override")
        p.add_argument("--frames", type=int, help="frames per clip override")
        p.add_argument("--shared-noise", action="store_true", default=None)
        p.add_argument("--diffusion-ckpt")
        p.add_argument("--mtn-ckpt")
        p.add_argument("--dss-ckpt")
        return p

    common(sub.add_parser("gen-data", help="generate synthetic clips"))\
        .add_argument("--clips", type=int, help="number of clips")
    common(sub.add_parser("train-diffusion", help="train the toy denoiser"))
    common(sub.add_parser("train-mtn", help="train the motion nets"))
    common(sub.add_parser("train-dss", help="label clips and train the selector"))
    p = common(sub.add_parser("profile", help="step-wise consistency profile"))
    p.add_argument("--clip-seed", type=int, default=0)
    p.add_argument("--source", choices=("taps", "residual"))
    p.add_argument("--per-tap", action="store_true",
                   help="add per-tap NMI columns")
    p = common(sub.add_parser("bench", help="baseline vs reuse benchmark"))
    p.add_argument("--clip-seed", type=int, default=0)
    p.add_argument("--force-t", type=int, help="bypass the selector")
    p = common(sub.add_parser("ablate", help="switch-step or consistency sweep"))
    p.add_argument("--clip-seed", type=int, default=0)
    p.add_argument("--t-values", default="90,60,40,20,1",
                   help="comma-separated forced switch steps")
    p.add_argument("--mode", choices=("steps", "consistency"), default="steps")
    p.add_argument("--pairs", type=int, default=20,
                   help="clip pairs for consistency mode")
    p = common(sub.add_parser("edit", help="restyled first-frame propagation"))
    p.add_argument("--clip-seed", type=int, default=0)
    p.add_argument("--restyle", default="swap",
                   help="identity, swap, or a DRT1 file with the new first frame")
    p.add_argument("--force-t", type=int)
    return parser


def load_config(args) -> PipelineConfig:
    data = {}
    if args.config:
        path = Path(args.config)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        with open(path, encoding="utf-8") as fh:
            try:
                data = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"config file {path} is not valid JSON: {exc}")
    config = PipelineConfig.from_dict(data)
    if args.sigma is not None:
        config.sigma = args.sigma
    if args.frames is not None:
        config.frames = args.frames
    if args.shared_noise is not None:
        config.shared_noise = args.shared_noise
    if getattr(args, "force_t", None) is not None:
        config.force_t = args.force_t
    for attr in ("diffusion_ckpt", "mtn_ckpt", "dss_ckpt"):
        override = getattr(args, attr)
        if override is not None:
            setattr(config, attr, override)
    return config.validate()


def _run_dir(args, config) -> Path:
    run_id = args.run_id or (f"{args.command}-"
                             f"{report.config_hash(config.to_dict())[:8]}-"
                             f"s{args.seed}")
    run_dir = Path(args.out) / run_id
    run_dir.mkdir(parents=True, exist_ok=True)
    return run_dir


def _clip_for(config, seed, frames=None):
    needed = frames or config.frames
    if config.clip_dir:
        path = Path(config.clip_dir)
        if not path.exists():
            raise ConfigError(f"clip directory not found: {path}")
        clip = load_clip(path)
        if clip.n_frames < needed:
            raise ConfigError(f"clip at {path} has {clip.n_frames} frames, "
                              f"config wants {needed}")
        return clip
    spec = default_spec(sigma=config.sigma, seed=seed)
    return generate_clip(spec, frames=needed, seed=seed, canvas=config.canvas)


def _training_latents(config, codec, n_clips, frames, seed):
    latents = []
    for k in range(n_clips):
        sigma = float(k % 4)
        clip = generate_clip(default_spec(sigma=sigma, seed=seed * 1000 + k),
                             frames=frames, seed=seed * 1000 + k,
                             canvas=config.canvas)
        latents.extend(codec.encode_clip(clip))
    return latents


# ---------------------------------------------------------------------------
# Subcommands


def cmd_gen_data(args, config: PipelineConfig, run_dir: Path):
    n = args.clips if args.clips is not None else config.train_clips
    n_frames = args.frames if args.frames is not None else config.train_frames
    rows, outputs = [], []
    for k in range(n):
        sigma = float(k % 4) if args.sigma is None else config.sigma
        clip_seed = args.seed * 1000 + k
        clip = generate_clip(default_spec(sigma=sigma, seed=clip_seed),
                             frames=n_frames, seed=clip_seed,
                             canvas=config.canvas)
        clip_dir = run_dir / "clips" / f"clip_{k:04d}"
        save_clip(clip_dir, clip)
        rows.append({"clip": k, "sigma": sigma, "seed": clip_seed,
                     "frames": n_frames,
                     "path": str(clip_dir.relative_to(run_dir))})
        outputs.append(clip_dir / "frames.drt")
    export_frames_png(load_clip(run_dir / "clips" / "clip_0000"),
                      run_dir / "preview")
    outputs.append(report.write_csv(run_dir / "dataset_index.csv",
                                    ["clip", "sigma", "seed", "frames", "path"],
                                    rows))
    return outputs


def cmd_train_diffusion(args, config: PipelineConfig, run_dir: Path):
    codec = config.make_codec()
    schedule = config.make_schedule()
    latents = _training_latents(config, codec, config.train_clips,
                                config.train_frames, args.seed)
    model, history = dd.train_denoiser(
        latents, schedule, epochs=config.diffusion_epochs, seed=args.seed,
        batch_size=config.diffusion_batch, lr=config.diffusion_lr,
        base=config.unet_base)
    ckpt = run_dir / "checkpoints" / "diffusion"
    dd.save_denoiser(ckpt, model, schedule)
    outputs = [
        report.write_csv(run_dir / "diffusion_training.csv",
                         ["epoch", "train_loss", "holdout_loss"], history),
        report.training_curve_plot(run_dir / "diffusion_training.png", history,
                                   "epoch", ["train_loss", "holdout_loss"],
                                   "Noise-prediction loss"),
        ckpt / "manifest.json",
    ]
    return outputs


def cmd_train_mtn(args, config: PipelineConfig, run_dir: Path):
    model, schedule = dd.load_denoiser(_require(config.diffusion_ckpt,
                                                "diffusion_ckpt"))
    codec = config.make_codec()
    nets = MotionNets(tap_shapes=model.tap_shapes(config.canvas // config.down_factor,
                                                  config.canvas // config.down_factor),
                      fine_tap="fine", tau=config.tau, seed=args.seed)
    clips = []
    for k in range(config.mtn_clips):
        sigma = float(k % 2)
        clip_seed = args.seed * 500 + k
        clip = generate_clip(default_spec(sigma=sigma, seed=clip_seed),
                             frames=config.mtn_frames, seed=clip_seed,
                             canvas=config.canvas)
        clips.append(codec.encode_clip(clip))
    mtn_cfg = MtnTrainConfig(stage1_epochs=config.mtn_stage1_epochs,
                             stage2_epochs=config.mtn_stage2_epochs,
                             stage3_epochs=config.mtn_stage3_epochs)
    nets, history, labels = train_mtn(clips, model, schedule, nets,
                                      config.candidates(),
                                      beta=config.weight_beta(), config=mtn_cfg,
                                      seed=args.seed,
                                      reference_frames=config.reference_frames)
    ckpt = run_dir / "checkpoints" / "mtn"
    nets.save(ckpt)
    trajs = reconstruction_trajectories(
        model, schedule, clips[0][:2], seed=args.seed * 500)
    gap = stepwise_vs_surrogate_gap(trajs[0], trajs[1], nets,
                                    labels[0]["t_star"], schedule.T)
    outputs = [
        report.write_csv(run_dir / "mtn_training.csv",
                         ["stage", "epoch", "loss", "loss_init", "loss_final"],
                         history),
        report.write_csv(run_dir / "mtn_labels.csv",
                         ["clip", "pair", "t_star"],
                         [{"clip": l["clip"], "pair": f"{l['pair'][0]}-{l['pair'][1]}",
                           "t_star": l["t_star"]} for l in labels]),
        report.write_csv(run_dir / "approx_gap.csv",
                         ["t_star", "stepwise_residual_transport",
                          "surrogate_latent_transport", "gap"], [gap]),
        ckpt / "mtn_manifest.json",
    ]
    return outputs


def cmd_train_dss(args, config: PipelineConfig, run_dir: Path):
    model, schedule = dd.load_denoiser(_require(config.diffusion_ckpt,
                                                "diffusion_ckpt"))
    nets = MotionNets.load(_require(config.mtn_ckpt, "mtn_ckpt"))
    codec = config.make_codec()
    samples, rows = build_dss_dataset(
        model, schedule, nets, codec, config.candidates(),
        beta=config.weight_beta(), n_clips=config.dss_clips,
        frames_per_clip=config.dss_frames, seed=args.seed)
    net, history = train_dss(samples, mask_rate=config.mask_rate,
                             epochs=config.dss_epochs, seed=args.seed,
                             hidden=config.dss_hidden, lr=config.dss_lr)
    ckpt = run_dir / "checkpoints" / "dss"
    net.save(ckpt, mask_rate=config.mask_rate)
    outputs = [
        report.write_csv(run_dir / "dss_labels.csv",
                         ["clip", "sigma", "pair", "t_star", "beta", "curve"],
                         rows),
        report.write_csv(run_dir / "dss_training.csv",
                         ["epoch", "train_loss", "holdout_acc_masked",
                          "holdout_acc_full"], history),
        report.training_curve_plot(run_dir / "dss_training.png", history, "epoch",
                                   ["holdout_acc_masked", "holdout_acc_full"],
                                   "Selector held-out accuracy"),
        ckpt / "manifest.json",
    ]
    return outputs


def cmd_profile(args, config: PipelineConfig, run_dir: Path):
    stack = load_stack(config, need_selector=False)
    source = args.source or config.matrix_source
    clip = _clip_for(config, args.clip_seed, frames=2)
    z0s = stack.codec.encode_clip(clip)
    trajs = reconstruction_trajectories(stack.model, stack.schedule, z0s,
                                        seed=args.clip_seed)
    analysis = analyze_pair(trajs[0], trajs[1], stack.nets, tau=config.tau,
                            source=source)
    rows = []
    spec = HistogramSpec()
    per_tap = {}
    if args.per_tap and source == "taps":
        for name in stack.nets.tap_shapes:
            mats = [tap_matrix_single(trajs[0], trajs[1], t, stack.nets, name)
                    for t in range(1, config.T + 1)]
            per_tap[name] = [nmi(mats[k], mats[k + 1], spec)
                             for k in range(config.T - 1)]
    for t in range(1, config.T + 1):
        row = {"t": t,
               "nmi": analysis.nmi[t - 1] if t < config.T else None,
               "e_t": analysis.errors[t - 1]}
        for name, values in per_tap.items():
            row[f"nmi_{name}"] = values[t - 1] if t < config.T else None
        rows.append(row)
    header = ["t", "nmi", "e_t"] + [f"nmi_{name}" for name in sorted(per_tap)]
    outputs = [
        report.write_csv(run_dir / "profile.csv", header, rows),
        report.profile_plot(run_dir / "profile.png", np.arange(1, config.T + 1),
                            analysis.nmi, analysis.errors),
    ]
    return outputs


def cmd_bench(args, config: PipelineConfig, run_dir: Path):
    stack = load_stack(config)
    clip = _clip_for(config, args.clip_seed)
    bench, results = run_bench(stack, clip, config, args.seed,
                               force_t=args.force_t)
    summary = [("baseline_evals", bench.baseline_evals),
               ("reuse_evals", bench.reuse_evals),
               ("eval_speedup", bench.eval_speedup),
               ("t_hat", bench.t_hat),
               ("frames", config.frames),
               ("reference_frames", config.reference_frames),
               ("mean_ssim_propagated",
                float(np.mean([s for s, p in zip(bench.frame_ssim, bench.provenance)
                               if p == "propagated"]) if config.horizon else 1.0)),
               ("mean_ssim_all", float(np.mean(bench.frame_ssim)))]
    frame_rows = [{"frame": k, "provenance": p, "ssim_vs_baseline": s}
                  for k, (p, s) in enumerate(zip(bench.provenance,
                                                 bench.frame_ssim))]
    outputs = [
        report.write_csv(run_dir / "bench_report.csv", ["key", "value"], summary),
        report.write_csv(run_dir / "bench_frames.csv",
                         ["frame", "provenance", "ssim_vs_baseline"], frame_rows),
        report.write_json(run_dir / "bench_timing.json",
                          {"wall_baseline_s": bench.wall_baseline_s,
                           "wall_reuse_s": bench.wall_reuse_s,
                           "wall_speedup": bench.wall_speedup}),
        report.frames_strip_plot(run_dir / "bench_baseline.png",
                                 results["baseline"].frames, "frame-wise baseline"),
        report.frames_strip_plot(run_dir / "bench_reuse.png",
                                 results["reuse"].frames, "motion reuse"),
    ]
    return outputs


def cmd_ablate(args, config: PipelineConfig, run_dir: Path):
    stack = load_stack(config, need_selector=(args.mode == "consistency"))
    if args.mode == "steps":
        try:
            t_values = [int(v) for v in args.t_values.split(",") if v.strip()]
        except ValueError:
            raise ConfigError(f"cannot parse --t-values '{args.t_values}'")
        if not t_values:
            raise ConfigError("empty --t-values")
        clip = _clip_for(config, args.clip_seed)
        rows = ablation_sweep(stack, clip, config, args.seed, t_values)
        outputs = [
            report.write_csv(run_dir / "ablation.csv",
                             ["forced_t", "mean_ssim", "reuse_evals",
                              "eval_speedup"], rows),
            report.ablation_plot(run_dir / "ablation.png",
                                 [r["forced_t"] for r in rows],
                                 [r["mean_ssim"] for r in rows],
                                 [r["reuse_evals"] for r in rows]),
        ]
        return outputs
    rows, profiles, summary = consistency_ablation(stack, config, args.seed,
                                                   n_pairs=args.pairs)
    profile_rows = []
    for item in profiles:
        for t in range(1, config.T):
            profile_rows.append({"pair": item["pair"], "kind": item["kind"],
                                 "t": t, "nmi": item["nmi"][t - 1],
                                 "e_t": item["errors"][t - 1]})
    outputs = [
        report.write_csv(run_dir / "consistency_report.csv",
                         ["pair", "kind", "sigma", "t_hat", "pair_predictions"],
                         rows),
        report.write_csv(run_dir / "nmi_profiles.csv",
                         ["pair", "kind", "t", "nmi", "e_t"], profile_rows),
        report.write_json(run_dir / "consistency_summary.json", summary),
    ]
    return outputs


def _restyle_frame(clip: VideoClip, how: str) -> np.ndarray:
    first = clip.frames[0]
    if how == "identity":
        return first.copy()
    if how == "swap":
        return first[[2, 0, 1]].copy()
    path = Path(how)
    if path.exists():
        from . import drt
        return drt.read_tensor(path)
    raise ConfigError(f"unknown restyle '{how}' (use identity, swap, or a "
                      "DRT1 file path)")


def cmd_edit(args, config: PipelineConfig, run_dir: Path):
    stack = load_stack(config)
    clip = _clip_for(config, args.clip_seed)
    restyled = _restyle_frame(clip, args.restyle)
    result = edit_video(stack, clip, restyled, config, args.seed,
                        force_t=args.force_t)
    rows = []
    for k, frame in enumerate(result.frames):
        rows.append({"frame": k, "provenance": result.provenance[k],
                     "mean_r": float(frame[0].mean()),
                     "mean_g": float(frame[1].mean()),
                     "mean_b": float(frame[2].mean())})
    outputs = [
        report.write_csv(run_dir / "edit_frames.csv",
                         ["frame", "provenance", "mean_r", "mean_g", "mean_b"],
                         rows),
        report.frames_strip_plot(run_dir / "edit_source.png", clip.frames,
                                 "source clip"),
        report.frames_strip_plot(run_dir / "edit_result.png", result.frames,
                                 f"restyled propagation (switch step {result.t_hat})"),
    ]
    return outputs


def _require(path, name):
    if not path:
        raise ConfigError(f"config field '{name}' is required for this command")
    if not Path(path).exists():
        raise ConfigError(f"{name} checkpoint not found: {path}")
    return path


_COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-diffusion": cmd_train_diffusion,
    "train-mtn": cmd_train_mtn,
    "train-dss": cmd_train_dss,
    "profile": cmd_profile,
    "bench": cmd_bench,
    "ablate": cmd_ablate,
    "edit": cmd_edit,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"error: {exc}", file=sys.stderr)
        return 1
    if not args.command:
        parser.print_usage(sys.stderr)
        print("error: a subcommand is required", file=sys.stderr)
        return 1
    try:
        config = load_config(args)
        run_dir = _run_dir(args, config)
        outputs = _COMMANDS[args.command](args, config, run_dir)
        names = []
        for out in outputs:
            try:
                names.append(str(Path(out).relative_to(run_dir)))
            except ValueError:
                names.append(str(out))
        report.write_run_manifest(run_dir, args.command, config.to_dict(),
                                  args.seed, names)
        print(f"{args.command}: wrote {len(outputs) + 1} artefacts under {run_dir}")
        return 0
    except (ConfigError, _UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # runtime failure
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


def entry():
    sys.exit(main())


if __name__ == "__main__":
    entry()
