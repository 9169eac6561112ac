"""End-to-end generation: the frame-wise baseline, the motion-reuse pipeline,
the efficiency benchmark, the switch-point sweep, the consistency ablation and
the first-frame restyling demo."""

from __future__ import annotations

import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import diffusion as dd
from .analysis import analyze_pair, selector_stats, suffix_mean
from .diffusion import (DenoiserUNet, LatentFrame, NoiseSchedule, load_denoiser,
                        make_schedule, reverse_step)
from .metrics import ssim
from .motion import MotionNets, normalize_motion
from .selector import (SelectorNet, default_beta, default_candidates, mask_stats,
                       predict_switch, validate_candidates)
from .video import LatentCodec, VideoClip


class ConfigError(ValueError):
    """Configuration or input validation failure (CLI exit code 1)."""


_CONFIG_FIELDS = None


@dataclass
class PipelineConfig:
    """Everything a run needs; JSON-serialisable, flag-overridable."""

    T: int = 100
    schedule_kind: str = "linear"
    beta_min: float = 1e-4
    beta_max: float = 0.02
    frames: int = 16
    reference_frames: int = 4
    canvas: int = 64
    latent_channels: int = 4
    down_factor: int = 4
    latent_gain: float = 4.0
    unet_base: int = 16
    candidate_step: int = 5
    beta_weight: float | None = None      # default: 2e / min(candidates)
    tau: float = 0.07
    mask_rate: float = 0.5
    sigma: float = 0.0
    shared_noise: bool = False
    force_t: int | None = None
    matrix_source: str = "taps"
    # training knobs
    train_clips: int = 24
    train_frames: int = 6
    diffusion_epochs: int = 60
    diffusion_lr: float = 1e-3
    diffusion_batch: int = 16
    mtn_clips: int = 8
    mtn_frames: int = 16
    mtn_stage1_epochs: int = 6
    mtn_stage2_epochs: int = 25
    mtn_stage3_epochs: int = 30
    dss_clips: int = 200
    dss_frames: int = 4
    dss_epochs: int = 30
    dss_hidden: int = 48
    dss_lr: float = 3e-3
    # artefact paths
    diffusion_ckpt: str | None = None
    mtn_ckpt: str | None = None
    dss_ckpt: str | None = None
    clip_dir: str | None = None

    @property
    def horizon(self) -> int:
        return self.frames - self.reference_frames

    def candidates(self) -> np.ndarray:
        return default_candidates(self.T, self.candidate_step)

    def weight_beta(self) -> float:
        return self.beta_weight if self.beta_weight is not None \
            else default_beta(self.candidates())

    def validate(self):
        if self.reference_frames < 2:
            raise ConfigError(f"need at least 2 reference frames, got "
                              f"{self.reference_frames}")
        if self.frames < self.reference_frames:
            raise ConfigError(f"frames ({self.frames}) below reference count "
                              f"({self.reference_frames})")
        if self.T < 2:
            raise ConfigError(f"T must be >= 2, got {self.T}")
        if not 0.0 <= self.mask_rate < 1.0:
            raise ConfigError(f"mask rate must be in [0, 1), got {self.mask_rate}")
        if self.force_t is not None and not (1 <= self.force_t <= self.T):
            raise ConfigError(f"forced switch step {self.force_t} outside [1, {self.T}]")
        if self.matrix_source not in ("taps", "residual"):
            raise ConfigError(f"unknown matrix source '{self.matrix_source}'")
        validate_candidates(self.candidates())
        if self.weight_beta() * int(self.candidates()[0]) <= 1.0:
            raise ConfigError("beta_weight too small: weights must stay positive")
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @staticmethod
    def from_dict(data: dict) -> "PipelineConfig":
        global _CONFIG_FIELDS
        if _CONFIG_FIELDS is None:
            _CONFIG_FIELDS = {f for f in PipelineConfig.__dataclass_fields__}
        unknown = set(data) - _CONFIG_FIELDS
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return PipelineConfig(**data).validate()

    def make_schedule(self) -> NoiseSchedule:
        return make_schedule(self.T, self.schedule_kind, self.beta_min, self.beta_max)

    def make_codec(self) -> LatentCodec:
        return LatentCodec(factor=self.down_factor, channels=self.latent_channels,
                           gain=self.latent_gain)


@dataclass
class ModelStack:
    model: DenoiserUNet
    schedule: NoiseSchedule
    nets: MotionNets
    selector: SelectorNet | None
    codec: LatentCodec


def load_stack(config: PipelineConfig, need_selector=True) -> ModelStack:
    if not config.diffusion_ckpt or not Path(config.diffusion_ckpt).exists():
        raise ConfigError(f"denoiser checkpoint not found: {config.diffusion_ckpt}")
    if not config.mtn_ckpt or not Path(config.mtn_ckpt).exists():
        raise ConfigError(f"motion-net checkpoint not found: {config.mtn_ckpt}")
    model, schedule = load_denoiser(config.diffusion_ckpt)
    nets = MotionNets.load(config.mtn_ckpt)
    selector = None
    if need_selector:
        if not config.dss_ckpt or not Path(config.dss_ckpt).exists():
            raise ConfigError(f"selector checkpoint not found: {config.dss_ckpt}")
        selector = SelectorNet.load(config.dss_ckpt)
    return ModelStack(model=model, schedule=schedule, nets=nets,
                      selector=selector, codec=config.make_codec())


@dataclass
class GenerationResult:
    frames: np.ndarray                       # (F, 3, H, W)
    provenance: list                         # "reference" | "propagated" per frame
    t_hat: int | None
    switch_latents: dict = field(default_factory=dict)   # frame -> z at t_hat
    denoiser_evals: int = 0


@dataclass
class BenchReport:
    baseline_evals: int
    reuse_evals: int
    eval_speedup: float
    wall_baseline_s: float
    wall_reuse_s: float
    wall_speedup: float
    t_hat: int
    frame_ssim: list
    provenance: list

    def check_accounting(self, config: PipelineConfig):
        expected = (config.reference_frames * config.T
                    + config.horizon * self.t_hat)
        if self.reuse_evals != expected:
            raise RuntimeError(f"evaluation accounting broken: counted "
                               f"{self.reuse_evals}, expected {expected}")
        if self.baseline_evals != config.frames * config.T:
            raise RuntimeError(f"baseline accounting broken: counted "
                               f"{self.baseline_evals}, expected "
                               f"{config.frames * config.T}")


def _keyed_noise(seed: int, frame: int, step: int, shape, shared: bool) -> np.ndarray:
    """Per-(frame, step) keyed sampling noise.

    Keying by step means a reuse run that enters the chain at the switch step
    draws exactly the noise the frame-wise baseline used at that step, so
    quality differences measure the cost of motion propagation rather than
    sampler stochasticity.  ``shared`` collapses the frame key, giving every
    frame one noise stream.
    """
    key = (int(seed), 0 if shared else int(frame), int(step), 0xA0)
    return np.random.default_rng(np.random.SeedSequence(key)).standard_normal(shape)


def _denoise_from(model, schedule, z_start: np.ndarray, frame: int, start_step: int,
                  seed: int, shared: bool, keep_taps=False):
    """Run reverse steps start_step..1 with keyed noise, recording on the way."""
    traj = dd.Trajectory(frame=frame, T=schedule.T)
    z = LatentFrame(frame=frame, step=start_step, data=z_start.copy())
    traj.latents[start_step] = z.data.copy()
    for t in range(start_step, 0, -1):
        noise = _keyed_noise(seed, frame, t, z.data.shape, shared) if t > 1 \
            else np.zeros_like(z.data)
        z, taps = reverse_step(z, t, model, noise, schedule)
        traj.latents[t - 1] = z.data.copy()
        traj.residuals[t] = traj.latents[t - 1] - traj.latents[t]
        if keep_taps:
            traj.taps[t] = taps
    return traj


def _reconstruct_frame(model, schedule, z0, frame, seed, shared, keep_taps):
    """Forward-noise a clean latent to step T, denoise back with recording."""
    eps = _keyed_noise(seed, frame, schedule.T + 1, z0.shape, shared)
    z_t = dd.forward_noise(LatentFrame(frame, 0, z0), schedule.T, eps, schedule)
    return _denoise_from(model, schedule, z_t.data, frame, schedule.T, seed,
                         shared, keep_taps=keep_taps)


def _worker_count() -> int:
    return max(1, min(4, os.cpu_count() or 1))


def generate_baseline(stack: ModelStack, clip: VideoClip, config: PipelineConfig,
                      seed: int) -> GenerationResult:
    """Frame-wise reconstruction: every frame runs all T denoising steps.

    Frames sample on independent threads (keyed noise makes each frame's
    chain self-contained); results assemble in frame order either way.
    """
    config.validate()
    z0s = stack.codec.encode_clip(clip)[:config.frames]
    if len(z0s) < config.frames:
        raise ConfigError(f"clip supplies {len(z0s)} frames, config wants "
                          f"{config.frames}")
    before = dd.get_eval_count()

    def one(i):
        traj = _reconstruct_frame(stack.model, stack.schedule, z0s[i], i, seed,
                                  config.shared_noise, keep_taps=False)
        return stack.codec.decode(traj.latents[0])

    with ThreadPoolExecutor(max_workers=_worker_count()) as pool:
        frames = list(pool.map(one, range(config.frames)))
    return GenerationResult(frames=np.stack(frames),
                            provenance=["reference"] * config.frames,
                            t_hat=None,
                            denoiser_evals=dd.get_eval_count() - before)


def select_switch_step(stack: ModelStack, reference_trajs, config: PipelineConfig,
                       seed: int):
    """Run the selector on masked per-pair statistics; returns
    (switch step, per-pair predictions, per-pair analyses)."""
    if stack.selector is None:
        raise ConfigError("selector checkpoint required to predict the switch step")
    candidates = stack.selector.candidates
    analyses, picks = [], []
    mask_rng = np.random.default_rng(np.random.SeedSequence((int(seed), 0x3A5)))
    for k in range(len(reference_trajs) - 1):
        analysis = analyze_pair(reference_trajs[k], reference_trajs[k + 1],
                                stack.nets, tau=config.tau,
                                source=config.matrix_source)
        stats = selector_stats(analysis)
        if config.mask_rate > 0:
            stats = mask_stats(stats, config.mask_rate, mask_rng)
        pick = predict_switch(stack.selector, stats)
        if pick not in set(int(c) for c in candidates):
            raise RuntimeError(f"selector returned step {pick} outside its "
                               "candidate set")
        picks.append(pick)
        analyses.append(analysis)
    # the most conservative pair decides: enough denoising for the worst pair
    return int(max(picks)), picks, analyses


def generate_reuse(stack: ModelStack, clip: VideoClip, config: PipelineConfig,
                   seed: int, force_t: int | None = None):
    """Motion-reuse generation.

    References are reconstructed with full denoising (taps recorded); the
    selector picks the switch step from masked pair statistics; the
    aggregator builds per-pair surrogate matrices; the predictor rolls out
    future matrices; future-frame latents are transported at the switch step
    and denoised from there down to 1.
    """
    config.validate()
    force_t = force_t if force_t is not None else config.force_t
    if force_t is not None and not (1 <= force_t <= config.T):
        raise ConfigError(f"forced switch step {force_t} outside [1, {config.T}]")
    z0s = stack.codec.encode_clip(clip)[:config.frames]
    if len(z0s) < config.frames:
        raise ConfigError(f"clip supplies {len(z0s)} frames, config wants "
                          f"{config.frames}")
    r = config.reference_frames
    before = dd.get_eval_count()

    ref_trajs = [_reconstruct_frame(stack.model, stack.schedule, z0s[i], i, seed,
                                    config.shared_noise, keep_taps=True)
                 for i in range(r)]
    frames = [stack.codec.decode(tr.latents[0]) for tr in ref_trajs]
    picks = []
    if force_t is None:
        t_hat, picks, _ = select_switch_step(stack, ref_trajs, config, seed)
    else:
        t_hat = int(force_t)

    switch_latents = {}
    if config.horizon > 0:
        history = []
        for k in range(r - 1):
            mean = suffix_mean(ref_trajs[k], ref_trajs[k + 1], stack.nets, t_hat,
                               config.matrix_source)
            surrogate = stack.nets.surrogate_from_mean(mean, t_hat, config.T)
            history.append(normalize_motion(surrogate, config.tau))
        predicted = stack.nets.predict_motion(history, horizon=config.horizon)
        feats = ref_trajs[-1].latents[t_hat]
        c, h, w = feats.shape
        feats = feats.reshape(c, h * w).T
        for j, m_hat in enumerate(predicted):
            feats = m_hat.data.T @ feats
            switch_latents[r + j] = feats.T.reshape(c, h, w).copy()

        def one(frame_idx):
            traj = _denoise_from(stack.model, stack.schedule,
                                 switch_latents[frame_idx], frame_idx, t_hat,
                                 seed, config.shared_noise)
            return stack.codec.decode(traj.latents[0])

        # propagation is a sequential chain; the per-frame denoising is not
        with ThreadPoolExecutor(max_workers=_worker_count()) as pool:
            frames.extend(pool.map(one, range(r, config.frames)))

    result = GenerationResult(
        frames=np.stack(frames),
        provenance=["reference"] * r + ["propagated"] * config.horizon,
        t_hat=t_hat,
        switch_latents=switch_latents,
        denoiser_evals=dd.get_eval_count() - before)
    info = {"t_hat": t_hat, "pair_predictions": picks, "forced": force_t is not None}
    return result, info


def run_bench(stack: ModelStack, clip: VideoClip, config: PipelineConfig,
              seed: int, force_t: int | None = None) -> tuple[BenchReport, dict]:
    """Baseline vs reuse on one clip; returns the report plus both results."""
    dd.reset_eval_count()
    t0 = time.perf_counter()
    baseline = generate_baseline(stack, clip, config, seed)
    wall_base = time.perf_counter() - t0
    t0 = time.perf_counter()
    reuse, info = generate_reuse(stack, clip, config, seed, force_t=force_t)
    wall_reuse = time.perf_counter() - t0
    scores = [ssim(a, b) for a, b in zip(reuse.frames, baseline.frames)]
    report = BenchReport(
        baseline_evals=baseline.denoiser_evals,
        reuse_evals=reuse.denoiser_evals,
        eval_speedup=baseline.denoiser_evals / reuse.denoiser_evals,
        wall_baseline_s=wall_base,
        wall_reuse_s=wall_reuse,
        wall_speedup=wall_base / wall_reuse,
        t_hat=reuse.t_hat,
        frame_ssim=scores,
        provenance=reuse.provenance)
    report.check_accounting(config)
    return report, {"baseline": baseline, "reuse": reuse, "info": info}


def ablation_sweep(stack: ModelStack, clip: VideoClip, config: PipelineConfig,
                   seed: int, t_values) -> list[dict]:
    """Force the switch step through a grid, scoring quality against the
    frame-wise baseline and recording the evaluation budget."""
    for t in t_values:
        if not (1 <= int(t) <= config.T):
            raise ConfigError(f"sweep value {t} outside [1, {config.T}]")
    dd.reset_eval_count()
    baseline = generate_baseline(stack, clip, config, seed)
    rows = []
    for t in t_values:
        dd.reset_eval_count()
        reuse, _ = generate_reuse(stack, clip, config, seed, force_t=int(t))
        prop = [k for k, p in enumerate(reuse.provenance) if p == "propagated"]
        scores = [ssim(reuse.frames[k], baseline.frames[k]) for k in prop]
        rows.append({"forced_t": int(t),
                     "mean_ssim": float(np.mean(scores)),
                     "reuse_evals": reuse.denoiser_evals,
                     "eval_speedup": baseline.denoiser_evals / reuse.denoiser_evals})
    return rows


def consistency_ablation(stack: ModelStack, config: PipelineConfig, seed: int,
                         n_pairs=20, sigma_high=0.0, sigma_low=3.0):
    """Selector decisions on matched high/low-consistency clips.

    Returns rows with the chosen step per clip kind plus the step-wise NMI
    profiles of the first reference pair of each clip.
    """
    from .video import default_spec, generate_clip

    rows, profiles = [], []
    for p in range(n_pairs):
        pair_seed = seed * 100 + p
        for kind, sigma in (("high_consistency", sigma_high),
                            ("low_consistency", sigma_low)):
            clip = generate_clip(default_spec(sigma=sigma, seed=pair_seed),
                                 frames=config.reference_frames, seed=pair_seed)
            z0s = stack.codec.encode_clip(clip)
            trajs = [_reconstruct_frame(stack.model, stack.schedule, z0s[i], i,
                                        pair_seed, config.shared_noise, True)
                     for i in range(config.reference_frames)]
            t_hat, picks, analyses = select_switch_step(stack, trajs, config,
                                                        pair_seed)
            rows.append({"pair": p, "kind": kind, "sigma": sigma, "t_hat": t_hat,
                         "pair_predictions": ";".join(str(v) for v in picks)})
            profiles.append({"pair": p, "kind": kind,
                             "nmi": analyses[0].nmi.copy(),
                             "errors": analyses[0].errors.copy()})
    ordered = sum(
        1 for p in range(n_pairs)
        if _row(rows, p, "low_consistency")["t_hat"]
        >= _row(rows, p, "high_consistency")["t_hat"])
    summary = {"pairs": n_pairs, "ordered": ordered,
               "ordered_fraction": ordered / n_pairs}
    return rows, profiles, summary


def _row(rows, pair, kind):
    for row in rows:
        if row["pair"] == pair and row["kind"] == kind:
            return row
    raise KeyError((pair, kind))


def edit_video(stack: ModelStack, clip: VideoClip, restyled_first: np.ndarray,
               config: PipelineConfig, seed: int, force_t: int | None = None):
    """Re-render a clip, replacing its appearance with a restyled first frame.

    Motion matrices come from the source clip's trajectories; the restyled
    frame's latent is carried along those per-pair surrogates and denoised
    from the switch step down.
    """
    config.validate()
    if restyled_first.shape != clip.frames[0].shape:
        raise ConfigError(f"restyled frame shape {restyled_first.shape} does not "
                          f"match clip frames {clip.frames[0].shape}")
    n = min(config.frames, clip.n_frames)
    z0s = stack.codec.encode_clip(clip)[:n]
    trajs = [_reconstruct_frame(stack.model, stack.schedule, z0s[i], i, seed,
                                config.shared_noise, keep_taps=True)
             for i in range(n)]
    if force_t is not None:
        if not (1 <= force_t <= config.T):
            raise ConfigError(f"forced switch step {force_t} outside [1, {config.T}]")
        t_hat = int(force_t)
    else:
        t_hat, _, _ = select_switch_step(stack, trajs[:config.reference_frames],
                                         config, seed)
    surrogates = []
    for k in range(n - 1):
        mean = suffix_mean(trajs[k], trajs[k + 1], stack.nets, t_hat,
                           config.matrix_source)
        surrogate = stack.nets.surrogate_from_mean(mean, t_hat, config.T)
        surrogates.append(normalize_motion(surrogate, config.tau).data)

    style_z0 = stack.codec.encode(restyled_first)
    eps = _keyed_noise(seed, 0, t_hat + 1001, style_z0.shape, config.shared_noise)
    z_t = dd.forward_noise(LatentFrame(0, 0, style_z0), t_hat, eps,
                           stack.schedule)
    c, h, w = style_z0.shape
    feats = z_t.data.reshape(c, h * w).T
    frames, switch_latents = [], {}
    for j in range(n):
        if j > 0:
            feats = surrogates[j - 1].T @ feats
        z_now = feats.T.reshape(c, h, w)
        switch_latents[j] = z_now.copy()
        traj = _denoise_from(stack.model, stack.schedule, z_now, j, t_hat,
                             seed, config.shared_noise)
        frames.append(stack.codec.decode(traj.latents[0]))
    return GenerationResult(frames=np.stack(frames),
                            provenance=["propagated"] * n,
                            t_hat=t_hat,
                            switch_latents=switch_latents)
