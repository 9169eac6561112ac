"""Temporal-consistency and image-similarity metrics.

NMI operates on raw (unnormalised) motion matrices quantised into a shared
histogram; entropies are summed in sorted order so nmi(a, b) == nmi(b, a)
bit-for-bit.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import ShapeError


@dataclass
class HistogramSpec:
    """Quantisation used by the mutual-information estimator."""

    bins: int = 32
    lo: float = -1.0
    hi: float = 1.0

    def __post_init__(self):
        if self.bins < 2:
            raise ValueError(f"need at least 2 bins, got {self.bins}")
        if not self.hi > self.lo:
            raise ValueError(f"empty value range [{self.lo}, {self.hi}]")


def quantize(values: np.ndarray, spec: HistogramSpec) -> np.ndarray:
    scaled = (np.asarray(values, dtype=np.float64) - spec.lo) / (spec.hi - spec.lo)
    idx = np.floor(scaled * spec.bins).astype(np.int64)
    return np.clip(idx, 0, spec.bins - 1)


def _entropy(probs: np.ndarray) -> float:
    terms = probs[probs > 0.0]
    terms = -terms * np.log(terms)
    terms.sort()
    return float(terms.sum())


def nmi(ma: np.ndarray, mb: np.ndarray, spec: HistogramSpec | None = None) -> float:
    """Normalised mutual information I / sqrt(Ha * Hb) of two matrices.

    Entry-aligned joint histogram, natural log, result clamped to [0, 1].
    Degenerate entropies: both constant and equal -> 1, both constant but
    different -> 0, exactly one constant -> 0.
    """
    ma, mb = np.asarray(ma), np.asarray(mb)
    if ma.shape != mb.shape:
        raise ShapeError(f"nmi: shapes differ, {ma.shape} vs {mb.shape}")
    spec = spec or HistogramSpec()
    qa, qb = quantize(ma, spec), quantize(mb, spec)
    b = spec.bins
    joint = np.bincount(qa.ravel() * b + qb.ravel(), minlength=b * b).astype(np.float64)
    joint /= qa.size
    joint = joint.reshape(b, b)
    pa, pb = joint.sum(axis=1), joint.sum(axis=0)
    ha, hb = _entropy(pa), _entropy(pb)
    if ha == 0.0 and hb == 0.0:
        return 1.0 if qa.flat[0] == qb.flat[0] else 0.0
    if ha == 0.0 or hb == 0.0:
        return 0.0
    mi = ha + hb - _entropy(joint.ravel())
    return float(np.clip(mi / np.sqrt(ha * hb), 0.0, 1.0))


def transformation_error(source: np.ndarray, target: np.ndarray,
                         m_norm: np.ndarray) -> float:
    """Mean per-element L1 between the transported source and the target.

    ``source``/``target`` are (locations, channels); ``m_norm`` is a
    normalised motion matrix.
    """
    source, target = np.asarray(source), np.asarray(target)
    if source.shape != target.shape:
        raise ShapeError(f"transformation_error: {source.shape} vs {target.shape}")
    if m_norm.shape != (source.shape[0], source.shape[0]):
        raise ShapeError(f"transformation_error: matrix {m_norm.shape} does not fit "
                         f"{source.shape[0]} locations")
    return float(np.abs(m_norm.T @ source - target).mean())


def psnr(a: np.ndarray, b: np.ndarray, peak=1.0) -> float:
    mse = float(np.mean((np.asarray(a) - np.asarray(b)) ** 2))
    if mse == 0.0:
        return float("inf")
    return 10.0 * np.log10(peak * peak / mse)


def _ssim_channel(a, b, window, c1, c2):
    wa = sliding_window_view(a, (window, window))
    wb = sliding_window_view(b, (window, window))
    mu_a = wa.mean(axis=(2, 3))
    mu_b = wb.mean(axis=(2, 3))
    e_aa = (wa * wa).mean(axis=(2, 3))
    e_bb = (wb * wb).mean(axis=(2, 3))
    e_ab = (wa * wb).mean(axis=(2, 3))
    var_a = e_aa - mu_a * mu_a
    var_b = e_bb - mu_b * mu_b
    cov = e_ab - mu_a * mu_b
    num = (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return (num / den).mean()


def ssim(img_a: np.ndarray, img_b: np.ndarray, window=8,
         c1=0.01 ** 2, c2=0.03 ** 2) -> float:
    """Structural similarity with uniform windows; inputs in [0, 1].

    Accepts (H, W) or (C, H, W); multichannel scores average per-channel SSIM.
    """
    a, b = np.asarray(img_a, dtype=np.float64), np.asarray(img_b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"ssim: shapes differ, {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a, b = a[None], b[None]
    if a.shape[-1] < window or a.shape[-2] < window:
        raise ValueError(f"ssim: image {a.shape} smaller than window {window}")
    scores = [_ssim_channel(ca, cb, window, c1, c2) for ca, cb in zip(a, b)]
    return float(np.mean(scores))


def clip_ssim(frames_a: np.ndarray, frames_b: np.ndarray) -> list[float]:
    return [ssim(fa, fb) for fa, fb in zip(frames_a, frames_b)]


def mean_consecutive_ssim(frames: np.ndarray) -> float:
    vals = [ssim(frames[k], frames[k + 1]) for k in range(len(frames) - 1)]
    return float(np.mean(vals))
