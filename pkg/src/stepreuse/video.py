"""Deterministic synthetic clips with a motion-consistency knob, plus the
analytic image/latent codec."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import drt
from .tensor import ShapeError


@dataclass
class ObjectSpec:
    kind: str                  # "square" or "disc"
    size: int                  # side length, or radius for discs
    color: tuple               # RGB in [0, 1]
    pos: tuple                 # initial (row, col); top-left for squares, centre for discs
    vel: tuple                 # (d_row, d_col) pixels per frame
    textured: bool = True

    def to_dict(self):
        return {"kind": self.kind, "size": self.size, "color": list(self.color),
                "pos": list(self.pos), "vel": list(self.vel), "textured": self.textured}

    @staticmethod
    def from_dict(d):
        return ObjectSpec(d["kind"], d["size"], tuple(d["color"]), tuple(d["pos"]),
                          tuple(d["vel"]), d.get("textured", True))


@dataclass
class MotionSpec:
    """Objects plus the consistency knob: jitter sigma in pixels applied as an
    independent per-frame perturbation of each object's ideal position (and of
    the background pan when a background is enabled).

    The optional background is a seeded smooth periodic field panning at a
    constant wrap-around velocity, giving frames dense, predictable motion.
    """

    objects: list
    jitter: float = 0.0
    bounce: bool = True
    background: bool = True
    bg_vel: tuple = (0.0, 4.0)

    def to_dict(self):
        return {"objects": [o.to_dict() for o in self.objects],
                "jitter": self.jitter, "bounce": self.bounce,
                "background": self.background, "bg_vel": list(self.bg_vel)}

    @staticmethod
    def from_dict(d):
        return MotionSpec([ObjectSpec.from_dict(o) for o in d["objects"]],
                          d["jitter"], d["bounce"], d.get("background", True),
                          tuple(d.get("bg_vel", (0.0, 4.0))))


@dataclass
class VideoClip:
    frames: np.ndarray         # (F, 3, H, W), values in [0, 1]
    meta: dict = field(default_factory=dict)

    @property
    def n_frames(self):
        return self.frames.shape[0]


def _bounds(obj: ObjectSpec, canvas: int):
    if obj.kind == "square":
        lo, hi = 0.0, float(canvas - obj.size)
    elif obj.kind == "disc":
        lo, hi = float(obj.size), float(canvas - obj.size)
    else:
        raise ValueError(f"unknown object kind '{obj.kind}'")
    if hi < lo:
        raise ValueError(f"object {obj.kind}(size={obj.size}) does not fit a "
                         f"{canvas}x{canvas} canvas")
    return lo, hi


def _ideal_path(obj: ObjectSpec, frames: int, canvas: int, bounce: bool):
    lo, hi = _bounds(obj, canvas)
    pos = np.array(obj.pos, dtype=np.float64)
    vel = np.array(obj.vel, dtype=np.float64)
    path = np.empty((frames, 2))
    for k in range(frames):
        path[k] = np.clip(pos, lo, hi)
        pos = pos + vel
        if bounce:
            for axis in range(2):
                if pos[axis] < lo or pos[axis] > hi:
                    vel[axis] = -vel[axis]
                    pos[axis] = np.clip(pos[axis], lo, hi)
    return path


def _draw(frame: np.ndarray, obj: ObjectSpec, pos):
    canvas = frame.shape[1]
    r = int(np.rint(pos[0]))
    c = int(np.rint(pos[1]))
    color = np.asarray(obj.color, dtype=np.float64)
    if obj.kind == "square":
        r0, c0 = max(r, 0), max(c, 0)
        r1, c1 = min(r + obj.size, canvas), min(c + obj.size, canvas)
        if r1 <= r0 or c1 <= c0:
            return
        patch = np.ones((r1 - r0, c1 - c0))
        if obj.textured:
            yy, xx = np.meshgrid(np.arange(r0 - r, r1 - r), np.arange(c0 - c, c1 - c),
                                 indexing="ij")
            patch = np.where(((yy // 4) + (xx // 4)) % 2 == 0, 1.0, 0.55)
        frame[:, r0:r1, c0:c1] = color[:, None, None] * patch[None]
    else:
        yy, xx = np.meshgrid(np.arange(canvas), np.arange(canvas), indexing="ij")
        d2 = (yy - r) ** 2 + (xx - c) ** 2
        mask = d2 <= obj.size ** 2
        patch = np.ones((canvas, canvas))
        if obj.textured:
            rings = (np.sqrt(d2).astype(int) // 4) % 2
            patch = np.where(rings == 0, 1.0, 0.55)
        for ch in range(3):
            frame[ch][mask] = (color[ch] * patch)[mask]


def _background_texture(seed: int, canvas: int) -> np.ndarray:
    """Muted smooth periodic field; panning with wrap-around stays seamless."""
    rng = np.random.default_rng(np.random.SeedSequence((int(seed), 0xB6)))
    yy, xx = np.meshgrid(np.arange(canvas), np.arange(canvas), indexing="ij")
    tex = np.full((3, canvas, canvas), 0.25)
    for ch in range(3):
        for _ in range(2):
            fy, fx = rng.integers(-3, 4, size=2)
            if fy == 0 and fx == 0:
                fx = 1
            phase = rng.uniform(0, 2 * np.pi)
            tex[ch] += 0.08 * np.sin(2 * np.pi * (fy * yy + fx * xx) / canvas + phase)
    return np.clip(tex, 0.05, 0.45)


def generate_clip(spec: MotionSpec, frames: int, seed: int, canvas=64) -> VideoClip:
    """Render a clip; deterministic given (spec, seed).

    With jitter 0 objects follow exact constant-velocity paths (modulo
    boundary bounces) and the background pans uniformly with wrap-around.
    Jitter adds an independent N(0, sigma^2) offset to each object's ideal
    position and to the background pan in every frame.
    """
    if frames < 2:
        raise ValueError(f"a clip needs at least 2 frames, got {frames}")
    if spec.jitter < 0:
        raise ValueError("jitter must be non-negative")
    rng = np.random.default_rng(np.random.SeedSequence((int(seed), 0xC11F)))
    paths = [_ideal_path(obj, frames, canvas, spec.bounce) for obj in spec.objects]
    texture = _background_texture(seed, canvas) if spec.background else None
    out = np.zeros((frames, 3, canvas, canvas))
    for k in range(frames):
        if texture is not None:
            pan = np.array(spec.bg_vel, dtype=np.float64) * k
            if spec.jitter > 0:
                pan = pan + rng.normal(0.0, spec.jitter, size=2)
            shift = np.rint(pan).astype(int)
            out[k] = np.roll(texture, (shift[0], shift[1]), axis=(1, 2))
        for obj, path in zip(spec.objects, paths):
            pos = path[k]
            if spec.jitter > 0:
                lo, hi = _bounds(obj, canvas)
                pos = np.clip(pos + rng.normal(0.0, spec.jitter, size=2), lo, hi)
            _draw(out[k], obj, pos)
    meta = {"seed": int(seed), "canvas": canvas, "spec": spec.to_dict()}
    return VideoClip(frames=out, meta=meta)


def default_spec(sigma=0.0, seed=0, n_objects=2, canvas=64) -> MotionSpec:
    """A randomised but seed-deterministic object layout for dataset building."""
    rng = np.random.default_rng(np.random.SeedSequence((int(seed), 0x0B1)))
    palette = [(0.92, 0.25, 0.15), (0.15, 0.45, 0.92), (0.2, 0.85, 0.3), (0.95, 0.8, 0.2)]
    objects = []
    for i in range(n_objects):
        kind = "square" if i % 2 == 0 else "disc"
        size = int(rng.integers(10, 17)) if kind == "square" else int(rng.integers(6, 10))
        lo, hi = (0, canvas - size) if kind == "square" else (size, canvas - size)
        pos = (float(rng.integers(lo, hi + 1)), float(rng.integers(lo, hi + 1)))
        # speeds locked to the 4 px texture cell so patterns translate cleanly
        while True:
            vel = tuple(float(v) for v in rng.choice([-4.0, 0.0, 4.0], size=2))
            if vel != (0.0, 0.0):
                break
        objects.append(ObjectSpec(kind, size, palette[i % len(palette)], pos, vel))
    return MotionSpec(objects=objects, jitter=float(sigma), bounce=True)


def save_clip(directory, clip: VideoClip):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    drt.write_tensor(directory / "frames.drt", clip.frames)
    with open(directory / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(clip.meta, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_clip(directory) -> VideoClip:
    directory = Path(directory)
    frames = drt.read_tensor(directory / "frames.drt")
    with open(directory / "manifest.json", encoding="utf-8") as fh:
        meta = json.load(fh)
    return VideoClip(frames=frames, meta=meta)


def export_frames_png(clip: VideoClip, directory):
    """Lossless raster dump of every frame for visual inspection."""
    import matplotlib
    matplotlib.use("Agg")
    from matplotlib import image as mpimg

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for k, frame in enumerate(clip.frames):
        mpimg.imsave(directory / f"frame_{k:03d}.png",
                     np.clip(frame.transpose(1, 2, 0), 0.0, 1.0))


class LatentCodec:
    """Analytic stand-in for a learned autoencoder.

    encode: s x s average pooling, a fixed linear channel lift (3 -> latent
    channels), then centring and a power-of-two gain that puts latents on
    the same scale as unit-variance noise; decode inverts the affine part,
    projects channels back and nearest-neighbour upsamples, clamped to
    [0, 1].  The projection is a left inverse of the lift, so block-constant
    images round-trip exactly up to the affine rounding.
    """

    def __init__(self, factor=4, channels=4, gain=4.0, center=0.5):
        if channels < 3:
            raise ValueError("codec needs at least 3 latent channels")
        self.factor = factor
        self.channels = channels
        self.gain = gain
        self.center = center
        lift = np.zeros((channels, 3))
        lift[:3, :3] = np.eye(3)
        for extra in range(3, channels):
            lift[extra] = 1.0 / 3.0
        self.lift = lift
        self.proj = np.zeros((3, channels))
        self.proj[:3, :3] = np.eye(3)

    def encode(self, image: np.ndarray) -> np.ndarray:
        if image.ndim != 3 or image.shape[0] != 3:
            raise ShapeError(f"encode: expected (3, H, W), got {image.shape}")
        _, h, w = image.shape
        s = self.factor
        if h % s or w % s:
            raise ValueError(f"encode: dims {h}x{w} not divisible by factor {s}")
        pooled = image.reshape(3, h // s, s, w // s, s).mean(axis=(2, 4))
        lifted = np.tensordot(self.lift, pooled, axes=1)
        return (lifted - self.center * self.lift.sum(axis=1)[:, None, None]) * self.gain

    def decode(self, z: np.ndarray) -> np.ndarray:
        if z.ndim != 3 or z.shape[0] != self.channels:
            raise ShapeError(f"decode: expected ({self.channels}, h, w), got {z.shape}")
        lifted = z / self.gain + self.center * self.lift.sum(axis=1)[:, None, None]
        rgb = np.tensordot(self.proj, lifted, axes=1)
        up = np.repeat(np.repeat(rgb, self.factor, axis=1), self.factor, axis=2)
        return np.clip(up, 0.0, 1.0)

    def encode_clip(self, clip: VideoClip) -> np.ndarray:
        return np.stack([self.encode(f) for f in clip.frames])

    def decode_frames(self, zs: np.ndarray) -> np.ndarray:
        return np.stack([self.decode(z) for z in zs])
