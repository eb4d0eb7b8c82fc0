"""Layers built on :mod:`divkd.tensor` plus the temperature softmax."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from . import tensor as tn
from .tensor import ShapeError, Tensor


class Module:
    """Minimal container: parameters are ``Tensor`` attributes with
    ``requires_grad``; child modules are ``Module`` attributes or lists of
    them; non-trainable state lives in ``self.buffers``."""

    training = True

    def __init__(self):
        self.buffers: dict[str, np.ndarray] = {}

    def __call__(self, x):
        return self.forward(x)

    def forward(self, x):  # pragma: no cover - abstract
        raise NotImplementedError

    def _children(self) -> Iterator[tuple[str, object]]:
        for name, value in vars(self).items():
            if name == "buffers" or name.startswith("_"):
                continue
            if isinstance(value, (Tensor, Module)):
                yield name, value
            elif isinstance(value, (list, tuple)) and value and all(isinstance(v, Module) for v in value):
                for i, v in enumerate(value):
                    yield f"{name}.{i}", v

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in self._children():
            full = f"{prefix}{name}"
            if isinstance(value, Tensor):
                if value.requires_grad:
                    yield full, value
            else:
                yield from value.named_parameters(full + ".")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name, buf in self.buffers.items():
            yield f"{prefix}{name}", buf
        for name, value in self._children():
            if isinstance(value, Module):
                yield from value.named_buffers(f"{prefix}{name}.")

    def modules(self) -> Iterator["Module"]:
        yield self
        for _, value in self._children():
            if isinstance(value, Module):
                yield from value.modules()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: p.data.copy() for name, p in self.named_parameters()}
        state.update({name: b.copy() for name, b in self.named_buffers()})
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        targets: dict[str, np.ndarray] = {name: p.data for name, p in self.named_parameters()}
        targets.update(dict(self.named_buffers()))
        missing = sorted(set(targets) - set(state))
        if missing:
            raise KeyError(f"state is missing entries: {missing}")
        for name, dst in targets.items():
            src = np.asarray(state[name])
            if src.shape != dst.shape:
                raise ShapeError(f"{name}: stored shape {src.shape} != model shape {dst.shape}")
        for name, dst in targets.items():
            dst[...] = state[name]

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())


def _he_normal(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    return rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)


class Conv2d(Module):
    def __init__(self, in_ch: int, out_ch: int, kernel: int, *, stride: int = 1, padding: int = 0,
                 bias: bool = False, rng: np.random.Generator | None = None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.in_ch, self.out_ch, self.kernel = in_ch, out_ch, kernel
        self.stride, self.padding = stride, padding
        self.weight = Tensor(_he_normal(rng, (out_ch, in_ch, kernel, kernel), in_ch * kernel * kernel), True)
        self.bias = Tensor(np.zeros(out_ch), True) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim != 4 or x.shape[1] != self.in_ch:
            raise ShapeError(f"Conv2d expects (B, {self.in_ch}, H, W), got {x.shape}")
        return tn.conv2d(x, self.weight, self.bias, self.stride, self.padding)

    def out_hw(self, h: int, w: int) -> tuple[int, int]:
        k, s, p = self.kernel, self.stride, self.padding
        return (h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1


class BatchNorm2d(Module):
    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        super().__init__()
        self.channels, self.momentum, self.eps = channels, momentum, eps
        self.gamma = Tensor(np.ones(channels), True)
        self.beta = Tensor(np.zeros(channels), True)
        self.buffers["running_mean"] = np.zeros(channels)
        self.buffers["running_var"] = np.ones(channels)

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim not in (2, 4) or x.shape[1] != self.channels:
            raise ShapeError(f"BatchNorm2d expects {self.channels} channels on axis 1, got {x.shape}")
        shape = (1, self.channels) + (1,) * (x.ndim - 2)
        if not self.training:
            rm = self.buffers["running_mean"].reshape(shape)
            rv = self.buffers["running_var"].reshape(shape)
            scale = tn.reshape(self.gamma, shape) / np.sqrt(rv + self.eps)
            return (x - rm) * scale + tn.reshape(self.beta, shape)
        if x.shape[0] < 2:
            raise ValueError("BatchNorm2d in train mode needs a batch of at least 2")
        out, mu, var = tn.batchnorm_train(x, self.gamma, self.beta, self.eps)
        n = x.size // self.channels
        m = self.momentum
        self.buffers["running_mean"][...] = (1 - m) * self.buffers["running_mean"] + m * mu
        self.buffers["running_var"][...] = (1 - m) * self.buffers["running_var"] + m * var * n / (n - 1)
        return out


class ReLU(Module):
    def forward(self, x: Tensor) -> Tensor:
        return tn.relu(x)


class MaxPool2(Module):
    def forward(self, x: Tensor) -> Tensor:
        return tn.maxpool2(x)


class GlobalAvgPool(Module):
    def forward(self, x: Tensor) -> Tensor:
        if x.ndim != 4:
            raise ShapeError(f"GlobalAvgPool expects (B, C, H, W), got {x.shape}")
        return tn.mean(x, axis=(2, 3))


class Linear(Module):
    """``y = x @ W + b`` with ``W`` stored as (in_features, out_features)."""

    def __init__(self, in_features: int, out_features: int, *, bias: bool = True,
                 rng: np.random.Generator | None = None, zero_init: bool = False):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.in_features, self.out_features = in_features, out_features
        w = np.zeros((in_features, out_features)) if zero_init else _he_normal(rng, (in_features, out_features), in_features)
        self.weight = Tensor(w, True)
        self.bias = Tensor(np.zeros(out_features), True) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim != 2 or x.shape[1] != self.in_features:
            raise ShapeError(f"Linear expects (B, {self.in_features}), got {x.shape}")
        y = tn.matmul(x, self.weight)
        return y + self.bias if self.bias is not None else y


class Sequential(Module):
    def __init__(self, layers):
        super().__init__()
        self.layers = list(layers)

    def forward(self, x: Tensor) -> Tensor:
        for i, layer in enumerate(self.layers):
            try:
                x = layer(x)
            except ShapeError as exc:
                raise ShapeError(f"layer {i} ({type(layer).__name__}): {exc}") from None
        return x


def conv_bn_relu(in_ch: int, out_ch: int, kernel: int, rng: np.random.Generator) -> list[Module]:
    return [Conv2d(in_ch, out_ch, kernel, padding=kernel // 2, rng=rng), BatchNorm2d(out_ch), ReLU()]


def _check_temperature(logits: Tensor, T: float) -> None:
    if not T > 0:
        raise ValueError(f"temperature must be positive, got {T}")
    if logits.shape[-1] < 2:
        raise ShapeError(f"softmax needs at least 2 classes, got {logits.shape}")


def softmax_t(logits, T: float = 1.0) -> Tensor:
    """Softmax of ``logits / T`` along the last axis."""
    logits = logits if isinstance(logits, Tensor) else Tensor(logits)
    _check_temperature(logits, T)
    return tn.softmax(logits / float(T) if T != 1 else logits, axis=-1)


def log_softmax_t(logits, T: float = 1.0) -> Tensor:
    logits = logits if isinstance(logits, Tensor) else Tensor(logits)
    _check_temperature(logits, T)
    return tn.log_softmax(logits / float(T) if T != 1 else logits, axis=-1)
