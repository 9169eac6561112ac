"""Inter-frame motion matrices and the networks that learn them.

A raw motion matrix scores cosine correspondence between the spatial
locations of two feature maps.  After row-wise softmax normalisation each
source location carries a probability distribution over target locations,
so transporting features through the matrix preserves per-channel totals.

Four trainable pieces:
  phi1  per-scale feature projector (identity-initialised 1x1 conv)
  phi2  multi-scale fusion of per-scale matrices (mean-initialised 1x1 mix)
  phi3  switch-step conditioned aggregator of a step range of matrices
        (masked mean plus a zero-initialised refiner, so it starts as the
        exact arithmetic mean)
  phi4  recurrent predictor of future motion matrices
"""

from __future__ import annotations

import numpy as np

from . import drt
from . import tensor as T
from .nn import Conv2d, GRUCell, Linear, Module
from .tensor import ShapeError, Tensor, as_tensor

DEFAULT_TAU = 0.07


# ---------------------------------------------------------------------------
# Matrix primitives


def features_from_map(fmap) -> Tensor:
    """(C, H, W) feature map -> (H*W, C) location-major features."""
    fmap = as_tensor(fmap)
    c = fmap.shape[0]
    return T.transpose(T.reshape(fmap, (c, -1)), (1, 0))


def raw_motion(da, db) -> Tensor:
    """Cosine-similarity correspondence matrix between two feature sets.

    Inputs are (locations, channels).  Rows with zero norm yield zero rows
    rather than NaNs; residuals do vanish on static regions.
    """
    da, db = as_tensor(da), as_tensor(db)
    if da.shape != db.shape:
        raise ShapeError(f"raw_motion: shapes differ, {da.shape} vs {db.shape}")
    if da.ndim != 2 or da.shape[1] == 0:
        raise ShapeError(f"raw_motion: need (locations, channels), got {da.shape}")

    def unit(x):
        norm = T.sqrt(T.tensor_sum(x * x, axis=1, keepdims=True))
        return x / (norm + 1e-12)

    return T.matmul(unit(da), T.transpose(unit(db), (1, 0)))


def normalize_motion(m, tau=DEFAULT_TAU) -> Tensor:
    """Temperature softmax turning each source row into a distribution over
    target locations (the axis that transport sums over)."""
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    return T.softmax(as_tensor(m) * (1.0 / tau), axis=1)


def apply_motion(x, m) -> Tensor:
    """Transport (locations, channels) features: out_q = sum_p x_p * M[p, q]."""
    x, m = as_tensor(x), as_tensor(m)
    if m.ndim != 2 or m.shape[0] != m.shape[1] or x.shape[0] != m.shape[0]:
        raise ShapeError(f"apply_motion: features {x.shape} do not fit matrix {m.shape}")
    return T.matmul(T.transpose(m, (1, 0)), x)


def block_upsample_matrix(m, grid, factor=2) -> Tensor:
    """Replicate a coarse (N_c, N_c) location matrix onto a finer grid.

    ``grid`` is the coarse spatial (h, w); both matrix axes are expanded by
    block replication so fine locations inherit their coarse cell's scores.
    """
    h, w = grid
    m = as_tensor(m)
    if m.shape != (h * w, h * w):
        raise ShapeError(f"block_upsample_matrix: matrix {m.shape} does not match grid {grid}")
    x = T.reshape(m, (h, w, h, w))
    for axis in range(4):
        x = _repeat_axis(x, axis, factor)
    n = h * w * factor * factor
    return T.reshape(x, (n, n))


def _repeat_axis(x, axis, factor):
    shape = x.shape
    xr = T.reshape(x, shape[:axis + 1] + (1,) + shape[axis + 1:])
    xc = T.concat([xr] * factor, axis=axis + 1)
    return T.reshape(xc, shape[:axis] + (shape[axis] * factor,) + shape[axis + 1:])


def matrix_pool_features(m, grid, factor=2) -> Tensor:
    """Average-pool both location axes of a matrix; returns a flat (1, n) row."""
    h, w = grid
    m = as_tensor(m)
    x = T.reshape(m, (h // factor, factor, w // factor, factor,
                      h // factor, factor, w // factor, factor))
    for axis in (7, 5, 3, 1):
        x = T.mean(x, axis=axis)
    return T.reshape(x, (1, (h // factor) * (w // factor) * (h // factor) * (w // factor)))


# ---------------------------------------------------------------------------
# The networks


class MotionNets(Module):
    """phi1..phi4 bundled with their tap configuration."""

    def __init__(self, tap_shapes: dict, fine_tap="fine", tau=DEFAULT_TAU,
                 refine_hidden=8, predictor_hidden=192, seed=0):
        super().__init__()
        self.tap_shapes = {k: tuple(v) for k, v in tap_shapes.items()}
        self.fine_tap = fine_tap
        self.tau = tau
        self.refine_hidden = refine_hidden
        self.predictor_hidden = predictor_hidden
        self.seed = seed
        rng = np.random.default_rng(np.random.SeedSequence((int(seed), 0x307)))
        fc, fh, fw = self.tap_shapes[fine_tap]
        self.fine_grid = (fh, fw)
        self.n_fine = fh * fw
        for name, (c, h, w) in self.tap_shapes.items():
            if fh % h or fw % w:
                raise ValueError(f"tap '{name}' grid {h}x{w} does not divide fine "
                                 f"grid {fh}x{fw}")
        self.phi1 = {}
        for name, (c, _, _) in sorted(self.tap_shapes.items()):
            conv = Conv2d(c, c, kernel=1, stride=1, padding=0,
                          name=f"phi1.{name}", init="identity")
            self.phi1[name] = self.add_child(conv)
        self.phi2 = self.add_child(Conv2d(len(self.tap_shapes), 1, kernel=1, stride=1,
                                          padding=0, name="phi2", init="constant_mix"))
        self.phi3_in = self.add_child(Conv2d(2, refine_hidden, kernel=1, stride=1,
                                             padding=0, rng=rng, name="phi3.in"))
        self.phi3_out = self.add_child(Conv2d(refine_hidden, 1, kernel=1, stride=1,
                                              padding=0, name="phi3.out", init="zero"))
        pool = (fh // 2) * (fw // 2)
        self.pool_dim = pool * pool
        self.phi4_enc = self.add_child(Linear(self.pool_dim, predictor_hidden,
                                              rng, "phi4.enc"))
        self.phi4_gru = self.add_child(GRUCell(predictor_hidden, predictor_hidden,
                                               rng, "phi4.gru"))
        self.phi4_dec = self.add_child(Linear(predictor_hidden, self.pool_dim,
                                              rng, "phi4.dec"))

    # -- phi1 + cosine per scale, phi2 fusion -------------------------------

    def scale_matrix(self, tap_i, tap_j, name) -> Tensor:
        feats_i = features_from_map(_squeeze_batch(self.phi1[name](_lift_batch(tap_i))))
        feats_j = features_from_map(_squeeze_batch(self.phi1[name](_lift_batch(tap_j))))
        return raw_motion(feats_i, feats_j)

    def fused_matrix(self, taps_i: dict, taps_j: dict) -> Tensor:
        """Multi-scale raw motion matrix on the fine grid (Nf, Nf)."""
        planes = []
        for name in sorted(self.tap_shapes):
            if name not in taps_i or name not in taps_j:
                raise KeyError(f"missing tap '{name}' in features")
            m = self.scale_matrix(taps_i[name], taps_j[name], name)
            _, h, w = self.tap_shapes[name]
            factor = self.fine_grid[0] // h
            if factor > 1:
                m = block_upsample_matrix(m, (h, w), factor)
            planes.append(T.reshape(m, (1, 1, self.n_fine, self.n_fine)))
        stack = T.concat(planes, axis=1)
        fused = self.phi2(stack)
        return T.reshape(fused, (self.n_fine, self.n_fine))

    # -- phi3: switch-conditioned aggregate ----------------------------------

    def surrogate_from_mean(self, mean_matrix, t_star: int, total_steps: int) -> Tensor:
        mean_matrix = as_tensor(mean_matrix)
        n = self.n_fine
        plane = Tensor(np.full((1, 1, n, n), t_star / total_steps))
        mm = T.reshape(mean_matrix, (1, 1, n, n))
        h = T.relu(self.phi3_in(T.concat([mm, plane], axis=1)))
        delta = self.phi3_out(h)
        return T.reshape(mm + delta, (n, n))

    def surrogate(self, matrices, t_star: int, total_steps: int) -> Tensor:
        """Aggregate step matrices t*..T into one matrix.

        At the documented initialisation (zeroed refiner) this is exactly the
        arithmetic mean of the inputs.
        """
        if not matrices:
            raise ValueError("surrogate: empty step range")
        acc = as_tensor(matrices[0])
        for m in matrices[1:]:
            acc = acc + as_tensor(m)
        return self.surrogate_from_mean(acc * (1.0 / len(matrices)), t_star, total_steps)

    # -- phi4: future-motion prediction ---------------------------------------

    def _encode_matrix(self, m) -> Tensor:
        # normalised rows carry ~1/N mass; rescale so encoder inputs are O(1)
        pooled = matrix_pool_features(m, self.fine_grid) * float(self.n_fine)
        return T.tanh(self.phi4_enc(pooled))

    def _decode_matrix(self, hidden) -> Tensor:
        logits = self.phi4_dec(hidden)
        h, w = self.fine_grid
        x = T.reshape(logits, (h // 2, w // 2, h // 2, w // 2))
        for axis in range(4):
            x = _repeat_axis(x, axis, 2)
        return T.softmax(T.reshape(x, (self.n_fine, self.n_fine)), axis=1)

    def predict_motion(self, history, horizon: int):
        """Roll the recurrent predictor over normalised history matrices and
        emit ``horizon`` future matrices, each row-normalised."""
        if len(history) < 1:
            raise ValueError("predict_motion: need at least one observed pair "
                             "(two reference frames)")
        if horizon < 1:
            raise ValueError(f"predict_motion: horizon must be >= 1, got {horizon}")
        h = self.phi4_gru.init_state(1)
        for m in history:
            h = self.phi4_gru(self._encode_matrix(m), h)
        outputs = []
        for _ in range(horizon):
            pred = self._decode_matrix(h)
            outputs.append(pred)
            h = self.phi4_gru(self._encode_matrix(pred), h)
        return outputs

    # -- persistence -----------------------------------------------------------

    def manifest(self) -> dict:
        return {"kind": "motion_nets", "tap_shapes": {k: list(v) for k, v in
                                                      self.tap_shapes.items()},
                "fine_tap": self.fine_tap, "tau": self.tau,
                "refine_hidden": self.refine_hidden,
                "predictor_hidden": self.predictor_hidden, "seed": self.seed,
                "param_counts": {"phi1": sum(p.size for c in self.phi1.values()
                                             for p in c.parameters()),
                                 "phi2": sum(p.size for p in self.phi2.parameters()),
                                 "phi3": sum(p.size for p in self.phi3_in.parameters())
                                          + sum(p.size for p in self.phi3_out.parameters()),
                                 "phi4": sum(p.size for p in self.phi4_enc.parameters())
                                          + sum(p.size for p in self.phi4_gru.parameters())
                                          + sum(p.size for p in self.phi4_dec.parameters())}}

    def save(self, directory):
        drt.save_state(directory, self.state_dict(), self.manifest(),
                       manifest_name="mtn_manifest.json")

    @staticmethod
    def load(directory) -> "MotionNets":
        state, manifest = drt.load_state(directory, manifest_name="mtn_manifest.json")
        nets = MotionNets(tap_shapes={k: tuple(v) for k, v in manifest["tap_shapes"].items()},
                          fine_tap=manifest["fine_tap"], tau=manifest["tau"],
                          refine_hidden=manifest["refine_hidden"],
                          predictor_hidden=manifest["predictor_hidden"],
                          seed=manifest["seed"])
        nets.load_state_dict(state)
        return nets

    def phi12_params(self):
        out = []
        for conv in self.phi1.values():
            out.extend(conv.parameters())
        out.extend(self.phi2.parameters())
        return out

    def phi3_params(self):
        return self.phi3_in.parameters() + self.phi3_out.parameters()

    def phi4_params(self):
        return (self.phi4_enc.parameters() + self.phi4_gru.parameters()
                + self.phi4_dec.parameters())


def _lift_batch(fmap):
    fmap = as_tensor(fmap)
    return T.reshape(fmap, (1,) + tuple(fmap.shape))


def _squeeze_batch(fmap):
    return T.reshape(fmap, tuple(fmap.shape[1:]))


# ---------------------------------------------------------------------------
# Losses


def loss_visual_residual(dz_i_steps, dz_j_steps, matrices, tau=DEFAULT_TAU) -> Tensor:
    """Mean transformation error of per-step residual transport (sampled steps)."""
    if not (len(dz_i_steps) == len(dz_j_steps) == len(matrices)):
        raise ValueError("loss_visual_residual: step lists differ in length")
    total = None
    for dz_i, dz_j, m in zip(dz_i_steps, dz_j_steps, matrices):
        err = T.mean_abs(apply_motion(as_tensor(dz_i), normalize_motion(m, tau))
                         - as_tensor(dz_j))
        total = err if total is None else total + err
    return total * (1.0 / len(matrices))


def loss_visual_latent(z_i, z_j, surrogate_raw, tau=DEFAULT_TAU) -> Tensor:
    """Mean transformation error of the accumulated latent at the switch step,
    transported through the normalised surrogate matrix."""
    m = normalize_motion(surrogate_raw, tau)
    return T.mean_abs(apply_motion(as_tensor(z_i), m) - as_tensor(z_j))


def loss_motion(predicted, truth) -> Tensor:
    """Mean per-element L1 between predicted and reference matrix sequences."""
    if len(predicted) != len(truth):
        raise ValueError(f"loss_motion: {len(predicted)} predictions vs "
                         f"{len(truth)} references")
    total = None
    for p, q in zip(predicted, truth):
        err = T.mean_abs(as_tensor(p) - as_tensor(q))
        total = err if total is None else total + err
    return total * (1.0 / len(predicted))
