"""Shared-trunk multi-branch network.

The trunk runs once per batch; each of the ``m`` branches owns the last
blocks of the backbone plus a global-average-pool and linear classifier.
Branches ``0..m-2`` are auxiliary, branch ``m-1`` is the group leader.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .nn import BatchNorm2d, Conv2d, GlobalAvgPool, Linear, Module, ReLU
from .tensor import ShapeError, Tensor
from . import tensor as tn


@dataclass(frozen=True)
class BlockSpec:
    out_channels: int
    convs: int = 2
    pool: bool = True
    kernel: int = 3

    def validate(self) -> None:
        if self.out_channels < 1 or self.convs < 1 or self.kernel < 1 or self.kernel % 2 == 0:
            raise ValueError(f"invalid block spec {self}")


@dataclass(frozen=True)
class NetConfig:
    num_classes: int
    num_branches: int = 4
    in_channels: int = 3
    image_size: int = 32
    trunk: tuple[BlockSpec, ...] = field(default_factory=tuple)
    branch: tuple[BlockSpec, ...] = field(default_factory=tuple)

    def validate(self) -> None:
        errors = []
        if self.num_branches < 2:
            errors.append(f"num_branches must be >= 2, got {self.num_branches}")
        if self.num_classes < 2:
            errors.append(f"num_classes must be >= 2, got {self.num_classes}")
        if not self.branch:
            errors.append("branch spec must not be empty")
        for b in self.trunk + self.branch:
            try:
                b.validate()
            except ValueError as exc:
                errors.append(str(exc))
        size = self.image_size
        for b in self.trunk + self.branch:
            if b.pool:
                if size % 2:
                    errors.append(f"cannot 2x2-pool odd spatial size {size}")
                    break
                size //= 2
        if errors:
            raise ValueError("; ".join(errors))

    def feature_shape(self) -> tuple[int, int, int]:
        """(channels, h, w) of each branch's last-block feature map."""
        size = self.image_size
        for b in self.trunk + self.branch:
            size = size // 2 if b.pool else size
        return self.branch[-1].out_channels, size, size

    def trunk_shape(self) -> tuple[int, int, int]:
        size = self.image_size
        for b in self.trunk:
            size = size // 2 if b.pool else size
        ch = self.trunk[-1].out_channels if self.trunk else self.in_channels
        return ch, size, size


def small_vgg(num_classes: int, num_branches: int = 4, *, widths=(16, 32, 64, 64), convs: int = 2,
              pools=(True, True, True, False), in_channels: int = 3, image_size: int = 32,
              trunk_blocks: int = 2) -> NetConfig:
    """4-block VGG-style backbone; the last ``len(widths) - trunk_blocks`` blocks are per-branch."""
    blocks = tuple(BlockSpec(w, convs, p) for w, p in zip(widths, pools))
    return NetConfig(num_classes, num_branches, in_channels, image_size, blocks[:trunk_blocks], blocks[trunk_blocks:])


class Block(Module):
    """``convs`` x (conv -> BN -> ReLU), then an optional 2x2 max pool."""

    def __init__(self, in_ch: int, spec: BlockSpec, rng: np.random.Generator):
        super().__init__()
        self.n_convs = spec.convs
        self.pool = spec.pool
        ch = in_ch
        for i in range(spec.convs):
            setattr(self, f"conv{i}", Conv2d(ch, spec.out_channels, spec.kernel, padding=spec.kernel // 2, rng=rng))
            setattr(self, f"bn{i}", BatchNorm2d(spec.out_channels))
            ch = spec.out_channels
        self.relu = ReLU()

    def forward(self, x: Tensor) -> Tensor:
        for i in range(self.n_convs):
            x = self.relu(getattr(self, f"bn{i}")(getattr(self, f"conv{i}")(x)))
        return tn.maxpool2(x) if self.pool else x


def _make_blocks(in_ch: int, specs, rng) -> list[Block]:
    blocks = []
    for spec in specs:
        blocks.append(Block(in_ch, spec, rng))
        in_ch = spec.out_channels
    return blocks


def _run(blocks, x: Tensor, where: str) -> Tensor:
    for i, block in enumerate(blocks):
        try:
            x = block(x)
        except ShapeError as exc:
            raise ShapeError(f"{where} block {i}: {exc}") from None
    return x


class Branch(Module):
    def __init__(self, in_ch: int, specs, num_classes: int, rng: np.random.Generator):
        super().__init__()
        self.blocks = _make_blocks(in_ch, specs, rng)
        self.gap = GlobalAvgPool()
        self.classifier = Linear(specs[-1].out_channels, num_classes, rng=rng)

    def forward(self, h: Tensor) -> tuple[Tensor, Tensor]:
        s = _run(self.blocks, h, "branch")
        return self.classifier(self.gap(s)), s


@dataclass
class BranchOutput:
    logits: list[Tensor]           # t_1..t_m, leader last
    features: list[Tensor]         # s_1..s_{m-1}, auxiliary only
    leader_features: Tensor
    trunk_features: Tensor         # shared mid-level map (gate baseline input)

    @property
    def aux_logits(self) -> list[Tensor]:
        return self.logits[:-1]

    @property
    def leader_logits(self) -> Tensor:
        return self.logits[-1]


def _check_input(config: NetConfig, x: Tensor) -> None:
    want = (config.in_channels, config.image_size, config.image_size)
    if x.ndim != 4 or tuple(x.shape[1:]) != want:
        raise ShapeError(f"expected input (B, {want[0]}, {want[1]}, {want[2]}), got {x.shape}")


class MultiBranchNet(Module):
    def __init__(self, config: NetConfig, rng: np.random.Generator):
        super().__init__()
        config.validate()
        self.config = config
        self.trunk = _make_blocks(config.in_channels, config.trunk, rng)
        ch = config.trunk_shape()[0]
        self.branch = [Branch(ch, config.branch, config.num_classes, rng) for _ in range(config.num_branches)]

    @property
    def num_branches(self) -> int:
        return len(self.branch)

    def classifier_weights(self) -> list[Tensor]:
        return [b.classifier.weight for b in self.branch]

    def forward(self, x) -> BranchOutput:
        x = x if isinstance(x, Tensor) else Tensor(x)
        _check_input(self.config, x)
        h = _run(self.trunk, x, "trunk")
        logits, feats = [], []
        for br in self.branch:
            t, s = br(h)
            logits.append(t)
            feats.append(s)
        return BranchOutput(logits, feats[:-1], feats[-1], h)

    def leader_state(self) -> dict[str, np.ndarray]:
        """Deployable subgraph: trunk + group-leader branch, renamed for :class:`LeaderNet`."""
        lead = f"branch.{self.num_branches - 1}."
        out = {}
        for name, value in self.state_dict().items():
            if name.startswith("trunk."):
                out[name] = value
            elif name.startswith(lead):
                out["leader." + name[len(lead):]] = value
        return out


class LeaderNet(Module):
    """Trunk + a single branch; the model kept for deployment."""

    def __init__(self, config: NetConfig, rng: np.random.Generator | None = None):
        super().__init__()
        config.validate()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.config = config
        self.trunk = _make_blocks(config.in_channels, config.trunk, rng)
        self.leader = Branch(config.trunk_shape()[0], config.branch, config.num_classes, rng)

    def forward(self, x) -> Tensor:
        x = x if isinstance(x, Tensor) else Tensor(x)
        _check_input(self.config, x)
        return self.leader(_run(self.trunk, x, "trunk"))[0]


def build(config: NetConfig, seed: int) -> MultiBranchNet:
    return MultiBranchNet(config, np.random.default_rng(seed))
