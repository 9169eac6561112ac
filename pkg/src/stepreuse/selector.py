"""Switch-step selection: ground-truth labels from weighted transformation
errors, and a recurrent classifier that predicts the switch step from
(partially masked) per-step motion statistics."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import drt
from . import tensor as T
from .nn import GRUCell, Linear, Module
from .optim import Adam
from .tensor import Tape, Tensor, backward

STAT_DIM = 4  # (t / T, nmi, e_t, presence bit)


def default_candidates(total_steps: int, step=5) -> np.ndarray:
    """The discrete switch-step grid {step, 2*step, ..., T}."""
    if total_steps < step:
        raise ValueError(f"T={total_steps} below candidate spacing {step}")
    return np.arange(step, total_steps + 1, step, dtype=np.int64)


def validate_candidates(candidates) -> np.ndarray:
    cands = np.asarray(candidates, dtype=np.int64)
    if cands.size == 0:
        raise ValueError("candidate set is empty")
    if np.any(np.diff(cands) <= 0):
        raise ValueError("candidate steps must be strictly increasing")
    if cands[0] < 1:
        raise ValueError("candidate steps must be >= 1")
    return cands


def default_beta(candidates) -> float:
    """Chosen so beta * min(candidates) = 2e > 1, keeping every weight positive."""
    cands = validate_candidates(candidates)
    return 2.0 * math.e / float(cands[0])


def gt_switch_step(errors, candidates, beta: float) -> int:
    """argmin over candidates of log(beta * t) * e_t, ties to the smallest t.

    Requires beta * min(candidates) > 1 so every weight is positive;
    otherwise the weighted argmin is meaningless and this raises.
    """
    cands = validate_candidates(candidates)
    e = np.asarray(errors, dtype=np.float64)
    if e.shape != cands.shape:
        raise ValueError(f"error curve length {e.shape} does not match "
                         f"{cands.size} candidates")
    if not np.all(np.isfinite(e)) or np.any(e < 0):
        raise ValueError("error curve must be finite and non-negative")
    if beta * cands[0] <= 1.0:
        raise ValueError(f"beta * min(candidates) = {beta * cands[0]:.4f} must "
                         "exceed 1 (weights must stay positive)")
    weighted = np.log(beta * cands.astype(np.float64)) * e
    return int(cands[np.argmin(weighted)])


def error_curve(traj_i, traj_j, nets, candidates, tau=None, source="taps") -> np.ndarray:
    """e_t over the candidate set: transport z_t^i through the normalised
    mean of the raw step matrices from t to T, scoring the L1 gap to z_t^j."""
    from .analysis import analyze_pair

    cands = validate_candidates(candidates)
    analysis = analyze_pair(traj_i, traj_j, nets, tau=tau, source=source,
                            candidates=cands)
    return analysis.curve


@dataclass
class DssSample:
    """Masked-input training sample: per-step statistics plus the index of
    the ground-truth switch step in the candidate set."""

    stats: np.ndarray
    label: int
    meta: dict = field(default_factory=dict)


def mask_stats(stats: np.ndarray, rho: float, rng: np.random.Generator) -> np.ndarray:
    """Independently hide each step with probability rho; at least one step
    always stays visible (all-masked draws are rejected and resampled)."""
    if not 0.0 <= rho < 1.0:
        raise ValueError(f"mask rate must be in [0, 1), got {rho}")
    out = stats.copy()
    if rho == 0.0:
        return out
    while True:
        keep = rng.random(len(stats)) >= rho
        if keep.any():
            break
    out[~keep, 1:] = 0.0
    return out


class SelectorNet(Module):
    """Gated recurrent classifier over per-step statistic vectors."""

    def __init__(self, candidates, hidden=48, seed=0):
        super().__init__()
        self.candidates = validate_candidates(candidates)
        self.hidden = hidden
        self.seed = seed
        rng = np.random.default_rng(np.random.SeedSequence((int(seed), 0xD55)))
        self.gru = self.add_child(GRUCell(STAT_DIM, hidden, rng, "dss.gru"))
        self.head = self.add_child(Linear(hidden, len(self.candidates), rng, "dss.head"))

    def logits(self, stats_batch: np.ndarray) -> Tensor:
        if stats_batch.ndim == 2:
            stats_batch = stats_batch[None]
        b, length, width = stats_batch.shape
        if width != STAT_DIM:
            raise ValueError(f"expected statistic width {STAT_DIM}, got {width}")
        h = self.gru.init_state(b)
        for k in range(length):
            h = self.gru(Tensor(stats_batch[:, k, :]), h)
        return self.head(h)

    def probabilities(self, stats_batch: np.ndarray) -> Tensor:
        return T.softmax(self.logits(stats_batch), axis=1)

    def save(self, directory, mask_rate=None):
        manifest = {"kind": "selector", "candidates": self.candidates.tolist(),
                    "hidden": self.hidden, "seed": self.seed,
                    "mask_rate": mask_rate}
        drt.save_state(directory, self.state_dict(), manifest)

    @staticmethod
    def load(directory) -> "SelectorNet":
        state, manifest = drt.load_state(directory)
        net = SelectorNet(manifest["candidates"], hidden=manifest["hidden"],
                          seed=manifest["seed"])
        net.load_state_dict(state)
        return net


def predict_switch(net: SelectorNet, stats: np.ndarray) -> int:
    """Argmax class mapped to its candidate step; ties resolve toward the
    smaller step because candidates are stored in increasing order."""
    stats = np.asarray(stats, dtype=np.float64)
    if stats.ndim != 2 or len(stats) == 0:
        raise ValueError("predict_switch: empty statistics")
    if not stats[:, 3].any():
        raise ValueError("predict_switch: every step is masked")
    probs = net.probabilities(stats).data[0]
    return int(net.candidates[int(np.argmax(probs))])


def train_dss(samples: list[DssSample], mask_rate: float, epochs: int, seed: int,
              hidden=48, lr=3e-3, batch_size=32, holdout=0.2,
              log=None) -> tuple[SelectorNet, list[dict]]:
    """Cross-entropy training under per-epoch random input masking.

    Returns the net and history rows (epoch, train loss, held-out accuracy
    under inference-style masking, held-out accuracy on full sequences).
    """
    if not samples:
        raise ValueError("train_dss: no samples")
    candidates = samples[0].meta.get("candidates")
    if candidates is None:
        raise ValueError("samples must carry the candidate set in meta")
    rng = np.random.default_rng(np.random.SeedSequence((int(seed), 0x55D)))
    net = SelectorNet(candidates, hidden=hidden, seed=seed)
    order = rng.permutation(len(samples))
    n_hold = max(1, int(round(len(samples) * holdout)))
    hold = [samples[i] for i in order[:n_hold]]
    train = [samples[i] for i in order[n_hold:]]
    opt = Adam(net.parameters(), lr=lr)
    n_classes = len(net.candidates)
    step_index = {int(c): k for k, c in enumerate(net.candidates)}

    def accuracy(subset, masked: bool) -> float:
        eval_rng = np.random.default_rng(np.random.SeedSequence((int(seed), 0xACC)))
        hits = 0
        for s in subset:
            stats = mask_stats(s.stats, mask_rate, eval_rng) if masked and mask_rate > 0 \
                else s.stats
            if predict_switch(net, stats) == int(net.candidates[s.label]):
                hits += 1
        return hits / len(subset)

    history = []
    for epoch in range(1, epochs + 1):
        perm = rng.permutation(len(train))
        losses = []
        for start in range(0, len(train), batch_size):
            batch = [train[i] for i in perm[start:start + batch_size]]
            stats = np.stack([mask_stats(s.stats, mask_rate, rng) for s in batch])
            onehot = np.zeros((len(batch), n_classes))
            for row, s in enumerate(batch):
                onehot[row, s.label] = 1.0
            with Tape():
                logp = T.log_softmax(net.logits(stats), axis=1)
                loss = T.neg(T.mean(T.tensor_sum(logp * Tensor(onehot), axis=1)))
                backward(loss)
            opt.step()
            losses.append(loss.item())
        row = {"epoch": epoch, "train_loss": float(np.mean(losses)),
               "holdout_acc_masked": accuracy(hold, masked=True),
               "holdout_acc_full": accuracy(hold, masked=False)}
        history.append(row)
        if log:
            log(row)
    return net, history


def label_index(candidates, step: int) -> int:
    cands = validate_candidates(candidates)
    matches = np.nonzero(cands == step)[0]
    if matches.size == 0:
        raise ValueError(f"step {step} is not in the candidate set")
    return int(matches[0])
