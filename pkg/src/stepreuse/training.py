"""Staged training of the motion nets and the switch-step selector, plus the
batched trajectory generation both rely on."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .analysis import analyze_pair, latent_features, selector_stats, suffix_mean
from .diffusion import DenoiserUNet, NoiseSchedule, Trajectory, TrainingDiverged
from .motion import (MotionNets, loss_motion, loss_visual_latent,
                     loss_visual_residual, normalize_motion)
from .optim import Adam
from .selector import (DssSample, default_beta, error_curve, gt_switch_step,
                       label_index, validate_candidates)
from .tensor import Tape, Tensor, backward


def reconstruction_trajectories(model: DenoiserUNet, schedule: NoiseSchedule,
                                z0s: np.ndarray, seed, keep_taps=True) -> list[Trajectory]:
    """Noise every frame of a clip to step T and denoise all of them together.

    The frames share each reverse step as one batched forward pass, which is
    the fast path for dataset building; per-frame noise streams match the
    single-frame sampler's seeding scheme.
    """
    n = len(z0s)
    rngs = [np.random.default_rng(np.random.SeedSequence((int(seed), f, 0xD1F)))
            for f in range(n)]
    z = np.stack([np.sqrt(schedule.alpha_bars[schedule.T]) * z0
                  + np.sqrt(1.0 - schedule.alpha_bars[schedule.T])
                  * rngs[f].standard_normal(z0.shape)
                  for f, z0 in enumerate(z0s)])
    trajs = [Trajectory(frame=f, T=schedule.T) for f in range(n)]
    for f in range(n):
        trajs[f].latents[schedule.T] = z[f].copy()
    for t in range(schedule.T, 0, -1):
        eps_hat, taps = model.forward(Tensor(z), np.full(n, t))
        b, a, ab = schedule.betas[t], schedule.alphas[t], schedule.alpha_bars[t]
        mu = (z - (b / np.sqrt(1.0 - ab)) * eps_hat.data) / np.sqrt(a)
        sigma = schedule.posterior_sigma(t)
        noise = np.stack([rngs[f].standard_normal(z[0].shape) if t > 1
                          else np.zeros_like(z[0]) for f in range(n)])
        z_prev = mu + sigma * noise
        for f in range(n):
            trajs[f].latents[t - 1] = z_prev[f].copy()
            trajs[f].residuals[t] = z_prev[f] - z[f]
            if keep_taps:
                trajs[f].taps[t] = {k: v.data[f] for k, v in taps.items()}
        z = z_prev
    return trajs


@dataclass
class MtnTrainConfig:
    stage1_epochs: int = 6
    stage2_epochs: int = 25
    stage3_epochs: int = 30
    steps_per_pair: int = 16
    lr: float = 3e-3
    predictor_lr: float = 2e-3
    freeze_phi12: bool = True


def _pair_step_loss(nets, traj_i, traj_j, steps):
    mats, dz_i, dz_j = [], [], []
    for t in steps:
        mats.append(nets.fused_matrix(traj_i.taps[t], traj_j.taps[t]))
        dz_i.append(traj_i.residuals[t].reshape(traj_i.residuals[t].shape[0], -1).T)
        dz_j.append(traj_j.residuals[t].reshape(traj_j.residuals[t].shape[0], -1).T)
    return loss_visual_residual(dz_i, dz_j, mats, tau=nets.tau)


def clip_switch_step(pair_labels) -> int:
    """One switch step for a whole clip: the most conservative pair label."""
    return int(max(pair_labels))


def train_mtn(clips_latents: list[np.ndarray], model: DenoiserUNet,
              schedule: NoiseSchedule, nets: MotionNets, candidates,
              beta: float | None = None, config: MtnTrainConfig | None = None,
              seed=0, reference_frames=4, log=None):
    """Three-stage fit of the motion nets on reconstruction trajectories.

    Stage 1 trains the per-scale projector and fusion on per-step residual
    transport; stage 2 trains the switch-conditioned aggregator at the
    ground-truth switch steps of each pair; stage 3 trains the recurrent
    future-motion predictor against the (frozen) aggregator's outputs.
    With more than one clip, the last clip is held out of all stages and
    scores the before/after transport loss.  Returns (nets, history rows,
    per-pair labels).
    """
    config = config or MtnTrainConfig()
    candidates = validate_candidates(candidates)
    beta = beta if beta is not None else default_beta(candidates)
    rng = np.random.default_rng(np.random.SeedSequence((int(seed), 0x317A)))
    history = []

    clips = []
    for ci, z0s in enumerate(clips_latents):
        trajs = reconstruction_trajectories(model, schedule, z0s,
                                            seed=(seed * 1000 + ci))
        clips.append(trajs)

    n_train = len(clips) - 1 if len(clips) > 1 else len(clips)
    pairs = [(ci, k) for ci, trajs in enumerate(clips[:n_train])
             for k in range(len(trajs) - 1)]
    eval_pairs = [(ci, k) for ci, trajs in enumerate(clips)
                  for k in range(len(trajs) - 1) if ci >= n_train] or pairs

    def eval_stage1():
        rng_eval = np.random.default_rng(np.random.SeedSequence((int(seed), 0xE51)))
        total = 0.0
        for ci, k in eval_pairs:
            steps = np.sort(rng_eval.choice(np.arange(1, schedule.T + 1),
                                            size=config.steps_per_pair, replace=False))
            total += _pair_step_loss(nets, clips[ci][k], clips[ci][k + 1],
                                     steps).item()
        return total / len(eval_pairs)

    # -- stage 1: phi1 + phi2 on per-step residual transport ------------------
    opt = Adam(nets.phi12_params(), lr=config.lr)
    init_loss = eval_stage1()
    for epoch in range(1, config.stage1_epochs + 1):
        order = rng.permutation(len(pairs))
        losses = []
        for idx in order:
            ci, k = pairs[idx]
            steps = np.sort(rng.choice(np.arange(1, schedule.T + 1),
                                       size=config.steps_per_pair, replace=False))
            with Tape():
                loss = _pair_step_loss(nets, clips[ci][k], clips[ci][k + 1], steps)
                if not np.isfinite(loss.data):
                    raise TrainingDiverged(f"stage-1 loss became {loss.data}")
                backward(loss)
            opt.step()
            losses.append(loss.item())
        row = {"stage": 1, "epoch": epoch, "loss": float(np.mean(losses))}
        history.append(row)
        if log:
            log(row)
    final_stage1 = eval_stage1()
    history.append({"stage": 1, "epoch": "eval",
                    "loss_init": init_loss, "loss_final": final_stage1})

    # -- labels from the parameter-free aggregate ------------------------------
    labels = []
    for ci, k in pairs:
        curve = error_curve(clips[ci][k], clips[ci][k + 1], nets, candidates,
                            tau=nets.tau, source="taps")
        t_star = gt_switch_step(curve, candidates, beta)
        labels.append({"clip": ci, "pair": (k, k + 1), "t_star": t_star,
                       "curve": curve})

    # -- stage 2: phi3 at the labelled switch steps ----------------------------
    samples2 = []
    for (ci, k), lab in zip(pairs, labels):
        t_star = lab["t_star"]
        mean = suffix_mean(clips[ci][k], clips[ci][k + 1], nets, t_star, "taps")
        samples2.append((ci, k, t_star, mean))
    opt3 = Adam(nets.phi3_params(), lr=config.lr)
    phi12_before = [p.data.copy() for p in nets.phi12_params()]
    for epoch in range(1, config.stage2_epochs + 1):
        order = rng.permutation(len(samples2))
        losses = []
        for idx in order:
            ci, k, t_star, mean = samples2[idx]
            zi = latent_features(clips[ci][k], t_star)
            zj = latent_features(clips[ci][k + 1], t_star)
            with Tape():
                surr = nets.surrogate_from_mean(mean, t_star, schedule.T)
                loss = loss_visual_latent(zi, zj, surr, tau=nets.tau)
                if not np.isfinite(loss.data):
                    raise TrainingDiverged(f"stage-2 loss became {loss.data}")
                backward(loss)
            opt3.step()
            losses.append(loss.item())
        row = {"stage": 2, "epoch": epoch, "loss": float(np.mean(losses))}
        history.append(row)
        if log:
            log(row)
    if config.freeze_phi12:
        for p, before in zip(nets.phi12_params(), phi12_before):
            if not np.array_equal(p.data, before):
                raise RuntimeError(f"frozen parameter {p.name} moved during stage 2")

    # -- stage 3: phi4 against frozen-phi3 surrogate sequences ------------------
    rollouts = []
    for ci, trajs in enumerate(clips[:n_train]):
        pair_ls = [lab["t_star"] for (cj, _), lab in zip(pairs, labels) if cj == ci]
        t_clip = clip_switch_step(pair_ls)
        mats = []
        for k in range(len(trajs) - 1):
            mean = suffix_mean(trajs[k], trajs[k + 1], nets, t_clip, "taps")
            surr = nets.surrogate_from_mean(mean, t_clip, schedule.T)
            mats.append(normalize_motion(surr, nets.tau).data)
        n_hist = reference_frames - 1
        if len(mats) > n_hist:
            rollouts.append({"clip": ci, "t": t_clip, "history": mats[:n_hist],
                             "targets": mats[n_hist:]})
    opt4 = Adam(nets.phi4_params(), lr=config.predictor_lr)
    for epoch in range(1, config.stage3_epochs + 1):
        order = rng.permutation(len(rollouts))
        losses = []
        for idx in order:
            item = rollouts[idx]
            with Tape():
                preds = nets.predict_motion([Tensor(m) for m in item["history"]],
                                            horizon=len(item["targets"]))
                loss = loss_motion(preds, [Tensor(m) for m in item["targets"]])
                if not np.isfinite(loss.data):
                    raise TrainingDiverged(f"stage-3 loss became {loss.data}")
                backward(loss)
            opt4.step()
            losses.append(loss.item())
        row = {"stage": 3, "epoch": epoch, "loss": float(np.mean(losses))}
        history.append(row)
        if log:
            log(row)

    return nets, history, labels


def stepwise_vs_surrogate_gap(traj_i, traj_j, nets, t_star: int, total_steps: int):
    """Report how far the one-shot surrogate transport sits from the exact
    step-wise transport it approximates (not enforced, informational)."""
    acc_i = None
    acc_j = None
    for t in range(t_star, total_steps + 1):
        m = normalize_motion(nets.fused_matrix(traj_i.taps[t], traj_j.taps[t]).data,
                             nets.tau).data
        dz_i = traj_i.residuals[t].reshape(traj_i.residuals[t].shape[0], -1).T
        dz_j = traj_j.residuals[t].reshape(traj_j.residuals[t].shape[0], -1).T
        moved = m.T @ dz_i
        acc_i = moved if acc_i is None else acc_i + moved
        acc_j = dz_j if acc_j is None else acc_j + dz_j
    stepwise = float(np.abs(acc_i - acc_j).mean())
    mean = suffix_mean(traj_i, traj_j, nets, t_star, "taps")
    surr = nets.surrogate_from_mean(mean, t_star, total_steps)
    m_surr = normalize_motion(surr, nets.tau).data
    zi, zj = latent_features(traj_i, t_star), latent_features(traj_j, t_star)
    one_shot = float(np.abs(m_surr.T @ zi - zj).mean())
    return {"t_star": t_star, "stepwise_residual_transport": stepwise,
            "surrogate_latent_transport": one_shot,
            "gap": abs(stepwise - one_shot)}


def build_dss_dataset(model: DenoiserUNet, schedule: NoiseSchedule, nets: MotionNets,
                      codec, candidates, beta: float | None = None, n_clips=200,
                      frames_per_clip=4, sigmas=(0.0, 1.0, 2.0, 3.0), seed=0,
                      log=None) -> tuple[list[DssSample], list[dict]]:
    """Labelled selector samples from synthetic clips across the consistency
    knob; returns (samples, label rows for the CSV report)."""
    from .video import default_spec, generate_clip

    candidates = validate_candidates(candidates)
    beta = beta if beta is not None else default_beta(candidates)
    samples, rows = [], []
    for ci in range(n_clips):
        sigma = float(sigmas[ci % len(sigmas)])
        clip_seed = seed * 10_000 + ci
        clip = generate_clip(default_spec(sigma=sigma, seed=clip_seed),
                             frames=frames_per_clip, seed=clip_seed)
        z0s = codec.encode_clip(clip)
        trajs = reconstruction_trajectories(model, schedule, z0s, seed=clip_seed)
        for k in range(len(trajs) - 1):
            analysis = analyze_pair(trajs[k], trajs[k + 1], nets, tau=nets.tau,
                                    source="taps", candidates=candidates)
            t_star = gt_switch_step(analysis.curve, candidates, beta)
            samples.append(DssSample(
                stats=selector_stats(analysis),
                label=label_index(candidates, t_star),
                meta={"candidates": candidates.tolist(), "clip": ci,
                      "sigma": sigma, "pair": (k, k + 1)}))
            rows.append({"clip": ci, "sigma": sigma, "pair": f"{k}-{k + 1}",
                         "t_star": t_star, "beta": beta,
                         "curve": ";".join(f"{v:.6g}" for v in analysis.curve)})
        if log and (ci + 1) % 25 == 0:
            log({"clips_done": ci + 1, "samples": len(samples)})
    return samples, rows
