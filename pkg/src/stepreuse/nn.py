"""Trainable parameters and the small layer zoo used by the models."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import Tensor

_param_counter = [0]


class Parameter(Tensor):
    """A leaf tensor with a persistent gradient buffer and a unique name."""

    __slots__ = ("name", "uid")

    def __init__(self, data, name=None):
        super().__init__(data, requires_grad=True)
        self.grad = np.zeros_like(self.data)
        _param_counter[0] += 1
        self.uid = _param_counter[0]
        self.name = name if name is not None else f"param{self.uid}"

    def reset_grad(self):
        self.grad[...] = 0.0


class Module:
    """Base container: tracks registered parameters and submodules in order."""

    def __init__(self):
        self._params: list[Parameter] = []
        self._children: list[Module] = []

    def register(self, param: Parameter) -> Parameter:
        self._params.append(param)
        return param

    def add_child(self, module: "Module") -> "Module":
        self._children.append(module)
        return module

    def parameters(self) -> list[Parameter]:
        out = list(self._params)
        for child in self._children:
            out.extend(child.parameters())
        return out

    def param_count(self) -> int:
        return sum(p.size for p in self.parameters())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {p.name: p.data for p in self.parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]):
        for p in self.parameters():
            if p.name not in state:
                raise KeyError(f"missing parameter '{p.name}' in state dict")
            arr = np.asarray(state[p.name], dtype=np.float64)
            if arr.shape != p.data.shape:
                raise ValueError(f"parameter '{p.name}': checkpoint shape {arr.shape} "
                                 f"does not match model shape {p.data.shape}")
            p.data[...] = arr


def glorot(rng: np.random.Generator, shape, fan_in, fan_out):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


class Linear(Module):
    def __init__(self, n_in, n_out, rng, name="linear"):
        super().__init__()
        self.w = self.register(Parameter(glorot(rng, (n_in, n_out), n_in, n_out), f"{name}.w"))
        self.b = self.register(Parameter(np.zeros(n_out), f"{name}.b"))

    def __call__(self, x: Tensor) -> Tensor:
        return T.matmul(x, self.w) + self.b


class Conv2d(Module):
    """3x3/1x1 convolution layer; ``init`` may be glorot, identity or zero.

    Identity init requires in/out channel counts to match and gives an exact
    pass-through at kernel centre; zero init gives an exactly-zero map.
    """

    def __init__(self, c_in, c_out, kernel=3, stride=1, padding=1, rng=None,
                 name="conv", init="glorot", bias=True):
        super().__init__()
        self.stride, self.padding = stride, padding
        if init == "glorot":
            fan_in = c_in * kernel * kernel
            w = glorot(rng, (c_out, c_in, kernel, kernel), fan_in, c_out * kernel * kernel)
        elif init == "identity":
            if c_in != c_out:
                raise ValueError(f"identity init requires c_in == c_out, got {c_in}, {c_out}")
            w = np.zeros((c_out, c_in, kernel, kernel))
            centre = kernel // 2
            for c in range(c_out):
                w[c, c, centre, centre] = 1.0
        elif init == "zero":
            w = np.zeros((c_out, c_in, kernel, kernel))
        elif init == "constant_mix":
            # every output channel averages the input channels
            w = np.zeros((c_out, c_in, kernel, kernel))
            centre = kernel // 2
            w[:, :, centre, centre] = 1.0 / c_in
        else:
            raise ValueError(f"unknown init '{init}'")
        self.w = self.register(Parameter(w, f"{name}.w"))
        self.b = self.register(Parameter(np.zeros(c_out), f"{name}.b")) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.w, bias=self.b, stride=self.stride, padding=self.padding)


class GRUCell(Module):
    """Single-layer gated recurrent cell.

    r = sigmoid(x Wxr + h Whr + br)
    u = sigmoid(x Wxu + h Whu + bu)
    n = tanh(x Wxn + r * (h Whn) + bn)
    h' = (1 - u) * n + u * h
    """

    def __init__(self, n_in, n_hidden, rng, name="gru"):
        super().__init__()
        self.n_hidden = n_hidden
        self.wx = self.register(Parameter(
            glorot(rng, (n_in, 3 * n_hidden), n_in, n_hidden), f"{name}.wx"))
        self.wh = self.register(Parameter(
            glorot(rng, (n_hidden, 3 * n_hidden), n_hidden, n_hidden), f"{name}.wh"))
        self.b = self.register(Parameter(np.zeros(3 * n_hidden), f"{name}.b"))

    def init_state(self, batch) -> Tensor:
        return Tensor(np.zeros((batch, self.n_hidden)))

    def __call__(self, x: Tensor, h: Tensor) -> Tensor:
        nh = self.n_hidden
        gx = T.matmul(x, self.wx) + self.b
        gh = T.matmul(h, self.wh)
        r = T.sigmoid(gx[:, :nh] + gh[:, :nh])
        u = T.sigmoid(gx[:, nh:2 * nh] + gh[:, nh:2 * nh])
        n = T.tanh(gx[:, 2 * nh:] + r * gh[:, 2 * nh:])
        return (1.0 - u) * n + u * h


def channel_norm(x: Tensor, eps=1e-6) -> Tensor:
    """Per-channel spatial standardisation of a (B, C, H, W) map.

    No learned affine part; keeps downstream cosine similarities centred.
    """
    mu = T.mean(x, axis=3, keepdims=True)
    mu = T.mean(mu, axis=2, keepdims=True)
    centred = x - mu
    var = T.mean(centred * centred, axis=3, keepdims=True)
    var = T.mean(var, axis=2, keepdims=True)
    return centred / T.sqrt(var + eps)


def sinusoidal_embedding(steps: np.ndarray, dim: int) -> np.ndarray:
    """Sinusoidal position code of integer steps, shape (len(steps), dim)."""
    steps = np.atleast_1d(np.asarray(steps, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / max(half - 1, 1))
    angles = steps[:, None] * freqs[None, :]
    return np.concatenate([np.sin(angles), np.cos(angles)], axis=1)
