"""Toy latent DDPM: schedules, forward corruption, reverse sampling with
decoder feature taps, residual bookkeeping, and trainer."""

from __future__ import annotations

import json
import threading
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import drt
from . import tensor as T
from .nn import Conv2d, Linear, Module, channel_norm, sinusoidal_embedding
from .optim import Adam
from .tensor import Tape, Tensor, backward

# Shared count of reverse-process denoiser evaluations.  Sampling different
# frames may run on separate threads, so updates take the lock.
_eval_lock = threading.Lock()
_eval_count = [0]


def reset_eval_count():
    with _eval_lock:
        _eval_count[0] = 0


def get_eval_count() -> int:
    with _eval_lock:
        return _eval_count[0]


def _count_eval(n=1):
    with _eval_lock:
        _eval_count[0] += n


class TrainingDiverged(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# Noise schedule


@dataclass
class NoiseSchedule:
    """Arrays are 1-indexed by step; index 0 holds the conventions
    beta_0 = 0 and alpha_bar_0 = 1."""

    T: int
    kind: str
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray

    def posterior_sigma(self, t: int) -> float:
        """Std-dev of the reverse update at step t; exactly 0 at t = 1."""
        b = self.betas[t]
        return float(np.sqrt(b * (1.0 - self.alpha_bars[t - 1]) / (1.0 - self.alpha_bars[t])))

    def to_dict(self) -> dict:
        return {"T": self.T, "kind": self.kind,
                "beta_min": float(self.betas[1]), "beta_max": float(self.betas[self.T])}


def make_schedule(T: int, kind="linear", beta_min=1e-4, beta_max=0.02) -> NoiseSchedule:
    """Build a noise schedule of T steps.

    ``linear`` interpolates the per-step variances between the endpoints;
    ``cosine`` derives them from a squared-cosine signal level, with the
    endpoints acting as clip bounds so every beta stays in (0, 1).
    """
    if T < 2:
        raise ValueError(f"schedule needs T >= 2, got {T}")
    if not (0.0 < beta_min <= beta_max < 1.0):
        raise ValueError(f"invalid beta range ({beta_min}, {beta_max})")
    if kind == "linear":
        betas = np.linspace(beta_min, beta_max, T)
    elif kind == "cosine":
        s = 0.008
        x = np.arange(T + 1) / T
        f = np.cos((x + s) / (1 + s) * np.pi / 2.0) ** 2
        bars = f / f[0]
        betas = np.clip(1.0 - bars[1:] / bars[:-1], beta_min, beta_max)
    else:
        raise ValueError(f"unknown schedule kind '{kind}'")
    betas = np.concatenate([[0.0], betas])
    alphas = 1.0 - betas
    alpha_bars = np.cumprod(alphas)
    alpha_bars[0] = 1.0
    return NoiseSchedule(T=T, kind=kind, betas=betas, alphas=alphas, alpha_bars=alpha_bars)


# ---------------------------------------------------------------------------
# Frame-level value objects


@dataclass
class LatentFrame:
    frame: int
    step: int
    data: np.ndarray


@dataclass
class ResidualLatent:
    frame: int
    step: int
    data: np.ndarray


def forward_noise(z0: LatentFrame, t: int, eps: np.ndarray,
                  schedule: NoiseSchedule) -> LatentFrame:
    """Corrupt a clean latent to step t: sqrt(ab_t) z0 + sqrt(1 - ab_t) eps."""
    if eps.shape != z0.data.shape:
        raise T.ShapeError(f"forward_noise: eps shape {eps.shape} != latent {z0.data.shape}")
    if not (0 <= t <= schedule.T):
        raise ValueError(f"forward_noise: step {t} outside [0, {schedule.T}]")
    ab = schedule.alpha_bars[t]
    data = np.sqrt(ab) * z0.data + np.sqrt(1.0 - ab) * eps
    return LatentFrame(frame=z0.frame, step=t, data=data)


def residual(z_prev: LatentFrame, z_cur: LatentFrame) -> ResidualLatent:
    """The per-step latent change z_{t-1} - z_t for one frame."""
    if z_prev.frame != z_cur.frame:
        raise ValueError(f"residual: frames differ ({z_prev.frame} vs {z_cur.frame})")
    if z_prev.step != z_cur.step - 1:
        raise ValueError(f"residual: steps {z_prev.step},{z_cur.step} are not consecutive")
    if z_prev.data.shape != z_cur.data.shape:
        raise T.ShapeError(f"residual: shapes {z_prev.data.shape} vs {z_cur.data.shape}")
    return ResidualLatent(frame=z_cur.frame, step=z_cur.step, data=z_prev.data - z_cur.data)


def reconstruct(zT: LatentFrame, residuals: dict[int, np.ndarray], t: int) -> LatentFrame:
    """Rebuild z_t by summing residuals of steps t+1..zT.step onto z_T.

    Residuals are added in sampling order (highest step first) so the sum
    telescopes the same way the trajectory was produced.
    """
    if t > zT.step:
        raise ValueError(f"reconstruct: target step {t} above start step {zT.step}")
    out = zT.data.copy()
    for k in range(zT.step, t, -1):
        if k not in residuals:
            raise ValueError(f"reconstruct: missing residual for step {k}")
        out += residuals[k]
    return LatentFrame(frame=zT.frame, step=t, data=out)


# ---------------------------------------------------------------------------
# Denoiser


class DenoiserUNet(Module):
    """Two-level latent U-Net predicting the corrupting noise.

    Decoder exposes two named feature taps: ``coarse`` at half resolution
    (2*base channels) and ``fine`` at full resolution (base channels), both
    taken after per-channel spatial normalisation so downstream cosine
    similarities are well conditioned.
    """

    TAP_NAMES = ("coarse", "fine")

    def __init__(self, channels=4, base=16, time_dim=32, rng=None, seed=0):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(seed)
        self.channels, self.base, self.time_dim = channels, base, time_dim
        tvec = 2 * time_dim
        self.t1 = self.add_child(Linear(time_dim, tvec, rng, "temb.l1"))
        self.t2 = self.add_child(Linear(tvec, tvec, rng, "temb.l2"))
        self.enc1 = self.add_child(Conv2d(channels, base, 3, 1, 1, rng, "enc1"))
        self.enc2 = self.add_child(Conv2d(base, 2 * base, 3, 2, 1, rng, "enc2"))
        self.mid = self.add_child(Conv2d(2 * base, 2 * base, 3, 1, 1, rng, "mid"))
        self.dec_c = self.add_child(Conv2d(4 * base, 2 * base, 3, 1, 1, rng, "dec_c"))
        self.dec_f = self.add_child(Conv2d(3 * base, base, 3, 1, 1, rng, "dec_f"))
        self.head = self.add_child(Conv2d(base, channels, 3, 1, 1, rng, "head"))
        self.tproj = {}
        for tag, width in (("e1", base), ("e2", 2 * base), ("m", 2 * base),
                           ("dc", 2 * base), ("df", base)):
            self.tproj[tag] = self.add_child(Linear(tvec, width, rng, f"tproj.{tag}"))

    def tap_shapes(self, h, w):
        return {"coarse": (2 * self.base, h // 2, w // 2), "fine": (self.base, h, w)}

    def _bias(self, tag, tv):
        b = self.tproj[tag](tv)
        return T.reshape(b, (b.shape[0], b.shape[1], 1, 1))

    def forward(self, z: Tensor, steps: np.ndarray):
        """Returns (predicted noise, {tap name: feature map}) for a batch."""
        tv = Tensor(sinusoidal_embedding(steps, self.time_dim))
        tv = self.t2(T.silu(self.t1(tv)))
        h1 = T.silu(channel_norm(self.enc1(z) + self._bias("e1", tv)))
        h2 = T.silu(channel_norm(self.enc2(h1) + self._bias("e2", tv)))
        m = T.silu(channel_norm(self.mid(h2) + self._bias("m", tv)))
        dc = channel_norm(self.dec_c(T.concat([m, h2], axis=1)) + self._bias("dc", tv))
        up = T.upsample_nearest(T.silu(dc), 2)
        df = channel_norm(self.dec_f(T.concat([up, h1], axis=1)) + self._bias("df", tv))
        eps = self.head(T.silu(df))
        return eps, {"coarse": dc, "fine": df}

    def __call__(self, z, steps):
        return self.forward(z, steps)


def predict_eps(model: DenoiserUNet, z: np.ndarray, t: int):
    """Single-frame noise prediction outside any tape; returns numpy arrays."""
    eps, taps = model.forward(Tensor(z[None]), np.array([t]))
    return eps.data[0], {k: v.data[0] for k, v in taps.items()}


def taps_for_batch(model: DenoiserUNet, zs: np.ndarray, t: int):
    """Decoder features for a batch of latents at one step (analysis path;
    does not touch the reverse-process evaluation counter)."""
    _, taps = model.forward(Tensor(zs), np.full(zs.shape[0], t))
    return {k: v.data for k, v in taps.items()}


def reverse_step(zt: LatentFrame, t: int, model: DenoiserUNet, noise: np.ndarray,
                 schedule: NoiseSchedule):
    """One DDPM posterior-mean update from z_t to z_{t-1}.

    Returns (z_{t-1}, decoder taps) and increments the shared evaluation
    counter by exactly one.  The stochastic term uses the posterior variance,
    which vanishes at t = 1, so the final step is deterministic.
    """
    if not (1 <= t <= schedule.T):
        raise ValueError(f"reverse_step: step {t} outside [1, {schedule.T}]")
    if noise.shape != zt.data.shape:
        raise T.ShapeError(f"reverse_step: noise shape {noise.shape} != latent {zt.data.shape}")
    eps_hat, taps = predict_eps(model, zt.data, t)
    _count_eval()
    b = schedule.betas[t]
    a = schedule.alphas[t]
    ab = schedule.alpha_bars[t]
    mu = (zt.data - (b / np.sqrt(1.0 - ab)) * eps_hat) / np.sqrt(a)
    z_prev = mu + schedule.posterior_sigma(t) * noise
    return LatentFrame(frame=zt.frame, step=t - 1, data=z_prev), taps


# ---------------------------------------------------------------------------
# Trajectories


@dataclass
class Trajectory:
    """Per-frame record of one reverse pass: latents z_T..z_0, residuals
    dz_T..dz_1 and (optionally) decoder taps per step."""

    frame: int
    T: int
    latents: dict[int, np.ndarray] = field(default_factory=dict)
    residuals: dict[int, np.ndarray] = field(default_factory=dict)
    taps: dict[int, dict[str, np.ndarray]] = field(default_factory=dict)

    def latent(self, t: int) -> np.ndarray:
        return self.latents[t]

    def residual(self, t: int) -> np.ndarray:
        return self.residuals[t]


def sample_frame(model: DenoiserUNet, schedule: NoiseSchedule, z_T: np.ndarray,
                 frame: int, rng: np.random.Generator, keep_taps=True) -> Trajectory:
    """Full T-step reverse pass from a given start latent, recording the
    trajectory.  Performs exactly T reverse_step evaluations."""
    traj = Trajectory(frame=frame, T=schedule.T)
    z = LatentFrame(frame=frame, step=schedule.T, data=z_T.copy())
    traj.latents[schedule.T] = z.data.copy()
    for t in range(schedule.T, 0, -1):
        noise = rng.standard_normal(z.data.shape) if t > 1 else np.zeros_like(z.data)
        z_prev, taps = reverse_step(z, t, model, noise, schedule)
        traj.latents[t - 1] = z_prev.data.copy()
        traj.residuals[t] = z_prev.data - z.data
        if keep_taps:
            traj.taps[t] = taps
        z = z_prev
    return traj


def reconstruction_trajectory(model: DenoiserUNet, schedule: NoiseSchedule,
                              z0: np.ndarray, frame: int, seed,
                              keep_taps=True) -> Trajectory:
    """Noise a clean latent to step T, then denoise it back while recording.

    This anchors the reverse pass to a given frame, which is how analysis
    trajectories for real clips are produced.
    """
    rng = np.random.default_rng(np.random.SeedSequence((int(seed), int(frame), 0xD1F)))
    eps = rng.standard_normal(z0.shape)
    start = forward_noise(LatentFrame(frame, 0, z0), schedule.T, eps, schedule)
    return sample_frame(model, schedule, start.data, frame, rng, keep_taps=keep_taps)


def save_trajectories(directory, trajectories: list[Trajectory],
                      schedule: NoiseSchedule, seed: int, shape):
    """Trajectory archive: z_f{frame}_t{step}.drt / dz_f{frame}_t{step}.drt
    plus a manifest.json describing the run."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for traj in trajectories:
        for t, z in traj.latents.items():
            drt.write_tensor(directory / f"z_f{traj.frame}_t{t}.drt", z)
        for t, dz in traj.residuals.items():
            drt.write_tensor(directory / f"dz_f{traj.frame}_t{t}.drt", dz)
    manifest = {
        "T": schedule.T,
        "schedule": schedule.to_dict(),
        "seed": seed,
        "shape": list(shape),
        "frames": sorted(tr.frame for tr in trajectories),
    }
    with open(directory / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_trajectories(directory) -> tuple[list[Trajectory], dict]:
    directory = Path(directory)
    with open(directory / "manifest.json", encoding="utf-8") as fh:
        manifest = json.load(fh)
    out = []
    for frame in manifest["frames"]:
        traj = Trajectory(frame=frame, T=manifest["T"])
        for t in range(manifest["T"] + 1):
            traj.latents[t] = drt.read_tensor(directory / f"z_f{frame}_t{t}.drt")
        for t in range(1, manifest["T"] + 1):
            traj.residuals[t] = drt.read_tensor(directory / f"dz_f{frame}_t{t}.drt")
        out.append(traj)
    return out, manifest


# ---------------------------------------------------------------------------
# Training


def train_denoiser(latents: list[np.ndarray], schedule: NoiseSchedule, epochs: int,
                   seed: int, batch_size=16, lr=1e-3, base=16, holdout=0.125,
                   log=None) -> tuple[DenoiserUNet, list[dict]]:
    """Fit the noise predictor on clean latents with the usual MSE objective.

    Returns the model and per-epoch history rows (epoch, train loss, held-out
    loss).  Raises TrainingDiverged if the loss goes non-finite.
    """
    if not latents:
        raise ValueError("train_denoiser: empty dataset")
    rng = np.random.default_rng(np.random.SeedSequence((int(seed), 0xD1FF)))
    data = np.stack(latents)
    n_hold = max(1, int(round(len(data) * holdout)))
    perm = rng.permutation(len(data))
    hold, train = data[perm[:n_hold]], data[perm[n_hold:]]
    model = DenoiserUNet(channels=data.shape[1], base=base,
                         rng=np.random.default_rng(np.random.SeedSequence((int(seed), 0xA11))))

    def batch_loss(z0s):
        ts = rng.integers(1, schedule.T + 1, size=len(z0s))
        eps = rng.standard_normal(z0s.shape)
        ab = schedule.alpha_bars[ts][:, None, None, None]
        zt = np.sqrt(ab) * z0s + np.sqrt(1.0 - ab) * eps
        pred, _ = model.forward(Tensor(zt), ts)
        diff = pred - Tensor(eps)
        return T.mean(diff * diff)

    def eval_split(z0s):
        rng_eval = np.random.default_rng(np.random.SeedSequence((int(seed), 0xE7A1)))
        ts = rng_eval.integers(1, schedule.T + 1, size=len(z0s))
        eps = rng_eval.standard_normal(z0s.shape)
        ab = schedule.alpha_bars[ts][:, None, None, None]
        zt = np.sqrt(ab) * z0s + np.sqrt(1.0 - ab) * eps
        pred, _ = model.forward(Tensor(zt), ts)
        return float(np.mean((pred.data - eps) ** 2))

    opt = Adam(model.parameters(), lr=lr)
    history = [{"epoch": 0, "train_loss": None, "holdout_loss": eval_split(hold)}]
    for epoch in range(1, epochs + 1):
        order = rng.permutation(len(train))
        losses = []
        for start in range(0, len(train), batch_size):
            idx = order[start:start + batch_size]
            with Tape():
                loss = batch_loss(train[idx])
                if not np.isfinite(loss.data):
                    raise TrainingDiverged(f"denoiser loss became {loss.data} at epoch {epoch}")
                backward(loss)
            opt.step()
            losses.append(loss.item())
        row = {"epoch": epoch, "train_loss": float(np.mean(losses)),
               "holdout_loss": eval_split(hold)}
        history.append(row)
        if log:
            log(row)
    return model, history


def save_denoiser(directory, model: DenoiserUNet, schedule: NoiseSchedule):
    manifest = {"kind": "denoiser", "channels": model.channels, "base": model.base,
                "time_dim": model.time_dim, "schedule": schedule.to_dict()}
    drt.save_state(directory, model.state_dict(), manifest)


def load_denoiser(directory) -> tuple[DenoiserUNet, NoiseSchedule]:
    state, manifest = drt.load_state(directory)
    model = DenoiserUNet(channels=manifest["channels"], base=manifest["base"],
                         time_dim=manifest["time_dim"], rng=np.random.default_rng(0))
    model.load_state_dict(state)
    sched = manifest["schedule"]
    schedule = make_schedule(sched["T"], sched["kind"], sched["beta_min"], sched["beta_max"])
    return model, schedule
