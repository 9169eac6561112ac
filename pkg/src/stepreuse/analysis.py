"""Streaming per-pair motion analysis over denoising trajectories.

For a frame pair this walks the step range once (from T down to 1),
building the raw motion matrix at every step and reducing it to:

  * step-wise NMI between consecutive matrices (consistency signal),
  * per-step residual transformation errors,
  * the candidate error curve: at each candidate switch step, the latent
    transport error through the normalised suffix-mean aggregate matrix,
  * optionally, retained suffix-mean matrices at chosen steps.

Matrices come either from the denoiser's decoder taps fused by the motion
nets (``source="taps"``) or directly from the exact latent residuals
(``source="residual"``).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .diffusion import Trajectory
from .metrics import HistogramSpec, nmi, transformation_error
from .motion import MotionNets, block_upsample_matrix, normalize_motion, raw_motion

MATRIX_SOURCES = ("taps", "residual")


def residual_features(traj: Trajectory, t: int) -> np.ndarray:
    dz = traj.residuals[t]
    return dz.reshape(dz.shape[0], -1).T


def latent_features(traj: Trajectory, t: int) -> np.ndarray:
    z = traj.latents[t]
    return z.reshape(z.shape[0], -1).T


def step_matrix(traj_i: Trajectory, traj_j: Trajectory, t: int,
                nets: MotionNets | None, source="taps") -> np.ndarray:
    """Raw (unnormalised) motion matrix of one step."""
    if source == "taps":
        if nets is None:
            raise ValueError("tap-based matrices need motion nets")
        return nets.fused_matrix(traj_i.taps[t], traj_j.taps[t]).data
    if source == "residual":
        return raw_motion(residual_features(traj_i, t),
                          residual_features(traj_j, t)).data
    raise ValueError(f"unknown matrix source '{source}'")


def tap_matrix_single(traj_i, traj_j, t, nets: MotionNets, name: str) -> np.ndarray:
    """Raw matrix of one tap only, upsampled to the fine grid."""
    m = nets.scale_matrix(traj_i.taps[t][name], traj_j.taps[t][name], name)
    _, h, w = nets.tap_shapes[name]
    factor = nets.fine_grid[0] // h
    return (block_upsample_matrix(m, (h, w), factor) if factor > 1 else m).data


@dataclass
class PairAnalysis:
    frame_i: int
    frame_j: int
    T: int
    nmi: np.ndarray                      # index 0 -> NMI(M_1, M_2), length T-1
    errors: np.ndarray                   # index 0 -> e_1, length T
    candidates: np.ndarray | None = None
    curve: np.ndarray | None = None      # aggregate transport error per candidate
    suffix_means: dict = field(default_factory=dict)

    def nmi_at(self, t: int) -> float:
        return float(self.nmi[t - 1])

    def error_at(self, t: int) -> float:
        return float(self.errors[t - 1])


def analyze_pair(traj_i: Trajectory, traj_j: Trajectory, nets: MotionNets | None,
                 spec: HistogramSpec | None = None, tau=None, source="taps",
                 candidates=None, keep_means_at=()) -> PairAnalysis:
    """One pass over all steps of a trajectory pair.

    When ``candidates`` is given, the aggregate error curve is evaluated
    inline; suffix-mean matrices are retained only for steps listed in
    ``keep_means_at`` to keep memory bounded.
    """
    if traj_i.T != traj_j.T:
        raise ValueError(f"trajectory lengths differ: {traj_i.T} vs {traj_j.T}")
    total = traj_i.T
    spec = spec or HistogramSpec()
    tau = tau if tau is not None else (nets.tau if nets is not None else 0.07)
    cands = np.asarray(sorted(int(c) for c in candidates), dtype=np.int64) \
        if candidates is not None else None
    curve = np.zeros(len(cands)) if cands is not None else None
    cand_set = set(cands.tolist()) if cands is not None else set()
    keep = set(int(t) for t in keep_means_at)
    nmis = np.zeros(total - 1)
    errors = np.zeros(total)
    suffix_means: dict[int, np.ndarray] = {}
    suffix_sum = None
    prev_matrix = None
    for t in range(total, 0, -1):
        m = step_matrix(traj_i, traj_j, t, nets, source)
        errors[t - 1] = transformation_error(residual_features(traj_i, t),
                                             residual_features(traj_j, t),
                                             normalize_motion(m, tau).data)
        if prev_matrix is not None:
            nmis[t - 1] = nmi(m, prev_matrix, spec)
        suffix_sum = m.copy() if suffix_sum is None else suffix_sum + m
        if t in cand_set or t in keep:
            mean = suffix_sum / (total - t + 1)
            if t in keep:
                suffix_means[t] = mean
            if t in cand_set:
                m_bar = normalize_motion(mean, tau).data
                idx = int(np.searchsorted(cands, t))
                curve[idx] = transformation_error(latent_features(traj_i, t),
                                                  latent_features(traj_j, t), m_bar)
        prev_matrix = m
    return PairAnalysis(frame_i=traj_i.frame, frame_j=traj_j.frame, T=total,
                        nmi=nmis, errors=errors, candidates=cands, curve=curve,
                        suffix_means=suffix_means)


def suffix_mean(traj_i: Trajectory, traj_j: Trajectory, nets: MotionNets | None,
                t_star: int, source="taps") -> np.ndarray:
    """Element-wise mean of the raw step matrices from t_star up to T."""
    if not 1 <= t_star <= traj_i.T:
        raise ValueError(f"switch step {t_star} outside [1, {traj_i.T}]")
    acc = None
    for t in range(traj_i.T, t_star - 1, -1):
        m = step_matrix(traj_i, traj_j, t, nets, source)
        acc = m.copy() if acc is None else acc + m
    return acc / (traj_i.T - t_star + 1)


def consistency_profile(traj_i: Trajectory, traj_j: Trajectory,
                        nets: MotionNets | None, spec: HistogramSpec | None = None,
                        tau=None, source="taps", out_dir=None) -> PairAnalysis:
    """Step-wise consistency profile of a frame pair.

    Computes the raw motion matrix at every step, NMI between consecutive
    matrices and the per-step residual transformation error; when ``out_dir``
    is given, writes ``profile.csv`` (columns t, nmi, e_t) and ``profile.png``
    beside it.
    """
    analysis = analyze_pair(traj_i, traj_j, nets, spec=spec, tau=tau,
                            source=source)
    if out_dir is not None:
        from . import report
        from pathlib import Path

        out_dir = Path(out_dir)
        rows = [{"t": t,
                 "nmi": analysis.nmi[t - 1] if t < analysis.T else None,
                 "e_t": analysis.errors[t - 1]}
                for t in range(1, analysis.T + 1)]
        report.write_csv(out_dir / "profile.csv", ["t", "nmi", "e_t"], rows)
        report.profile_plot(out_dir / "profile.png",
                            np.arange(1, analysis.T + 1), analysis.nmi,
                            analysis.errors)
    return analysis


def selector_stats(analysis: PairAnalysis) -> np.ndarray:
    """Per-step statistic vectors in denoising order (t = T-1 .. 1).

    Columns: normalised step index, NMI(M_t, M_{t+1}), e_t, presence bit.
    """
    steps = np.arange(analysis.T - 1, 0, -1)
    rows = np.stack([steps / analysis.T,
                     analysis.nmi[steps - 1],
                     analysis.errors[steps - 1],
                     np.ones_like(steps, dtype=np.float64)], axis=1)
    return rows
