"""Deterministic CSV/JSON reports and the matplotlib figures that accompany
them.  Floats are rendered with repr so identical runs produce byte-identical
files; anything wall-clock goes into a JSON sidecar instead of the CSVs."""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, (np.floating, float)):
        return repr(float(value))
    if isinstance(value, (np.integer, int)):
        return str(int(value))
    return str(value)


def write_csv(path, header, rows):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [",".join(header)]
    for row in rows:
        if isinstance(row, dict):
            lines.append(",".join(_fmt(row.get(col)) for col in header))
        else:
            lines.append(",".join(_fmt(v) for v in row))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def write_json(path, payload):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def config_hash(config_dict) -> str:
    canon = json.dumps(config_dict, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()


def write_run_manifest(run_dir, command, config_dict, seed, outputs):
    from . import __version__

    return write_json(Path(run_dir) / "run_manifest.json", {
        "command": command,
        "config": config_dict,
        "config_hash": config_hash(config_dict),
        "seed": seed,
        "version": __version__,
        "outputs": sorted(str(o) for o in outputs),
    })


def _pyplot():
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    return plt


def profile_plot(path, steps, nmi_values, errors, title="Step-wise motion consistency"):
    plt = _pyplot()
    fig, ax1 = plt.subplots(figsize=(7, 4))
    ax1.plot(steps[:-1], nmi_values, color="tab:blue", label="NMI(M_t, M_t+1)")
    ax1.set_xlabel("denoising step t (T -> 1)")
    ax1.set_ylabel("NMI", color="tab:blue")
    ax1.set_ylim(0, 1)
    ax2 = ax1.twinx()
    ax2.plot(steps, errors, color="tab:red", label="transformation error")
    ax2.set_ylabel("e_t", color="tab:red")
    ax1.invert_xaxis()
    fig.suptitle(title)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def ablation_plot(path, t_values, quality, evals):
    plt = _pyplot()
    fig, ax1 = plt.subplots(figsize=(7, 4))
    ax1.plot(t_values, quality, "o-", color="tab:green")
    ax1.set_xlabel("forced switch step")
    ax1.set_ylabel("mean SSIM vs frame-wise baseline", color="tab:green")
    ax2 = ax1.twinx()
    ax2.plot(t_values, evals, "s--", color="tab:gray")
    ax2.set_ylabel("denoiser evaluations", color="tab:gray")
    fig.suptitle("Switch-step sweep: quality vs compute")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def frames_strip_plot(path, frames, title, max_frames=16):
    plt = _pyplot()
    frames = frames[:max_frames]
    fig, axes = plt.subplots(1, len(frames), figsize=(1.2 * len(frames), 1.6))
    if len(frames) == 1:
        axes = [axes]
    for ax, frame in zip(axes, frames):
        ax.imshow(np.clip(frame.transpose(1, 2, 0), 0, 1))
        ax.axis("off")
    fig.suptitle(title)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def training_curve_plot(path, rows, x_key, y_keys, title):
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(6, 4))
    xs = [r[x_key] for r in rows if isinstance(r.get(x_key), (int, float))]
    for key in y_keys:
        ys = [r.get(key) for r in rows if isinstance(r.get(x_key), (int, float))]
        if any(v is not None for v in ys):
            ax.plot(xs, ys, label=key)
    ax.set_xlabel(x_key)
    ax.legend()
    fig.suptitle(title)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)
