"""Branch-importance weighting for the ensemble teacher.

Four interchangeable mechanisms produce per-sample weights over the
auxiliary branches (rows on the probability simplex):

* ``ffm``: Feature Fusion Module.  Concatenates the auxiliary branches'
  last-block feature maps and runs them through a small conv block
  (1x1 fuse conv, BN, ReLU, 3x3 conv, BN, ReLU, global pool, linear).
* ``gate``: single linear head on the pooled shared-trunk features.
* ``self_attention``: scaled dot-product attention between pooled branch
  features, reduced to one weight per branch.
* ``uniform``: fixed ``1/(m-1)``.
"""

from __future__ import annotations

import numpy as np

from . import tensor as tn
from .branch_net import BranchOutput, NetConfig
from .nn import BatchNorm2d, Conv2d, GlobalAvgPool, Linear, Module, ReLU
from .tensor import ShapeError, Tensor

MECHANISMS = ("ffm", "gate", "self_attention", "uniform")


class FeatureFusion(Module):
    def __init__(self, num_aux: int, channels: int, rng: np.random.Generator, *,
                 hidden: int | None = None, zero_init_head: bool = False):
        super().__init__()
        hidden = hidden or channels
        self.num_aux, self.channels = num_aux, channels
        self.fuse = Conv2d(num_aux * channels, hidden, 1, rng=rng)
        self.bn0 = BatchNorm2d(hidden)
        self.conv = Conv2d(hidden, hidden, 3, padding=1, rng=rng)
        self.bn1 = BatchNorm2d(hidden)
        self.relu = ReLU()
        self.gap = GlobalAvgPool()
        self.head = Linear(hidden, num_aux, rng=rng, zero_init=zero_init_head)

    def scores(self, features: list[Tensor]) -> Tensor:
        if len(features) != self.num_aux:
            raise ShapeError(f"FFM expects {self.num_aux} feature maps, got {len(features)}")
        first = features[0].shape
        for s in features[1:]:
            if s.shape != first:
                raise ShapeError(f"FFM feature maps differ in shape: {first} vs {s.shape}")
        if len(first) != 4 or first[1] != self.channels:
            raise ShapeError(f"FFM expects (B, {self.channels}, h, w) features, got {first}")
        x = tn.concat(features, axis=1)
        x = self.relu(self.bn0(self.fuse(x)))
        x = self.relu(self.bn1(self.conv(x)))
        return self.head(self.gap(x))

    def weights(self, out: BranchOutput) -> Tensor:
        return tn.softmax(self.scores(out.features), axis=-1)


def ffm_weights(params: FeatureFusion, features: list[Tensor]) -> Tensor:
    return tn.softmax(params.scores(features), axis=-1)


class GateBaseline(Module):
    def __init__(self, num_aux: int, channels: int, rng: np.random.Generator, *, zero_init_head: bool = False):
        super().__init__()
        self.num_aux = num_aux
        self.gap = GlobalAvgPool()
        self.head = Linear(channels, num_aux, rng=rng, zero_init=zero_init_head)

    def weights_from(self, trunk_features: Tensor) -> Tensor:
        return tn.softmax(self.head(self.gap(trunk_features)), axis=-1)

    def weights(self, out: BranchOutput) -> Tensor:
        return self.weights_from(out.trunk_features)


class SelfAttentionBaseline(Module):
    """Query/key transforms over pooled branch features."""

    def __init__(self, num_aux: int, channels: int, rng: np.random.Generator, *, key_dim: int | None = None):
        super().__init__()
        key_dim = key_dim or channels
        self.num_aux, self.key_dim = num_aux, key_dim
        self.gap = GlobalAvgPool()
        self.query = Linear(channels, key_dim, bias=False, rng=rng)
        self.key = Linear(channels, key_dim, bias=False, rng=rng)

    def attention(self, pooled: list[Tensor]) -> Tensor:
        """Row-stochastic attention ``A[b, i, j]`` over ``len(pooled)`` branches."""
        if len(pooled) != self.num_aux:
            raise ShapeError(f"attention expects {self.num_aux} branch vectors, got {len(pooled)}")
        for v in pooled[1:]:
            if v.shape != pooled[0].shape:
                raise ShapeError(f"branch vectors differ in shape: {pooled[0].shape} vs {v.shape}")
        q = tn.stack([self.query(v) for v in pooled], axis=1)  # (B, n, d)
        k = tn.stack([self.key(v) for v in pooled], axis=1)
        b, n, d = q.shape
        scores = tn.tsum(tn.reshape(q, (b, n, 1, d)) * tn.reshape(k, (b, 1, n, d)), axis=-1)
        return tn.softmax(scores / float(np.sqrt(d)), axis=-1)

    def weights_from(self, pooled: list[Tensor]) -> Tensor:
        # column mean of a row-stochastic matrix stays on the simplex
        return tn.mean(self.attention(pooled), axis=1)

    def weights(self, out: BranchOutput) -> Tensor:
        return self.weights_from([self.gap(s) for s in out.features])


class UniformWeights(Module):
    def __init__(self, num_aux: int):
        super().__init__()
        self.num_aux = num_aux

    def weights(self, out: BranchOutput) -> Tensor:
        b = out.logits[0].shape[0]
        return Tensor(np.full((b, self.num_aux), 1.0 / self.num_aux))


def build_mechanism(kind: str, config: NetConfig, rng: np.random.Generator) -> Module:
    num_aux = config.num_branches - 1
    if kind == "ffm":
        return FeatureFusion(num_aux, config.feature_shape()[0], rng)
    if kind == "gate":
        return GateBaseline(num_aux, config.trunk_shape()[0], rng)
    if kind == "self_attention":
        return SelfAttentionBaseline(num_aux, config.feature_shape()[0], rng)
    if kind == "uniform":
        return UniformWeights(num_aux)
    raise ValueError(f"unknown attention mechanism {kind!r}; choose from {MECHANISMS}")


def ensemble_target(weights: Tensor, logits: list[Tensor], *, detach_logits: bool = True) -> Tensor:
    """Weighted sum of branch logits, ``t_e[b] = sum_i w[b, i] * t_i[b]``.

    Branch logits enter as constants by default so the teacher only trains
    the weighting module.
    """
    if weights.ndim != 2 or weights.shape[1] != len(logits):
        raise ShapeError(f"weights {weights.shape} do not match {len(logits)} branch logits")
    for t in logits:
        if t.shape[0] != weights.shape[0] or t.shape != logits[0].shape:
            raise ShapeError(f"branch logits {t.shape} incompatible with weights {weights.shape}")
    parts = [t.detach() if detach_logits else t for t in logits]
    stacked = tn.stack(parts, axis=1)  # (B, n, C)
    b, n = weights.shape
    return tn.tsum(tn.reshape(weights, (b, n, 1)) * stacked, axis=1)
