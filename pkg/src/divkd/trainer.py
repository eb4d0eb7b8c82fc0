"""SGD with Nesterov momentum, step LR schedule, the per-batch training step
and binary checkpoints."""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from . import data as data_io
from .branch_net import MultiBranchNet
from .ffm import ensemble_target
from .losses import Coefficients, LossBreakdown, cross_entropy_logits, total_loss
from .metrics import EvalResult, evaluate_logits
from .nn import Module
from .tensor import FormatError, Tensor, no_grad, read_tensors, write_tensors, zero_grad

CHECKPOINT_MAGIC = b"DIVKDCKP"
CHECKPOINT_VERSION = 1


class NonFiniteLossError(FloatingPointError):
    def __init__(self, component: str, breakdown: LossBreakdown):
        super().__init__(f"non-finite loss: first bad component is {component!r} ({breakdown})")
        self.component = component
        self.breakdown = breakdown


# ---------------------------------------------------------------------------
# optimizer and schedule
# ---------------------------------------------------------------------------

@dataclass
class OptimState:
    lr: float
    momentum: float = 0.9
    weight_decay: float = 5e-4
    nesterov: bool = True
    buffers: dict[str, np.ndarray] = field(default_factory=dict)


def decays(name: str) -> bool:
    """Weight decay applies to conv/linear weights only (not biases, not BN)."""
    return name.endswith(".weight")


def sgd_step(named_params: Iterable[tuple[str, Tensor]], state: OptimState) -> None:
    """In-place update of every parameter from its ``grad``.

    ``v <- mu v + (g + wd p)``; Nesterov: ``p <- p - lr (g + wd p + mu v)``,
    otherwise ``p <- p - lr v``.
    """
    named_params = list(named_params)
    for name, p in named_params:
        if p.grad is None:
            raise ValueError(f"parameter {name!r} has no gradient")
    for name, p in named_params:
        g = p.grad + state.weight_decay * p.data if decays(name) and state.weight_decay else p.grad
        prev = state.buffers.get(name)
        v = g.copy() if prev is None else state.momentum * prev + g  # absent buffer == zeros
        state.buffers[name] = v
        step = g + state.momentum * v if state.nesterov else v
        p.data -= state.lr * step


@dataclass
class Schedule:
    base_lr: float = 0.1
    milestones: tuple[int, ...] = (150, 225)
    factor: float = 0.1
    total_epochs: int = 300

    def validate(self) -> None:
        ms = list(self.milestones)
        if self.base_lr <= 0:
            raise ValueError("base_lr must be > 0")
        if any(b <= a for a, b in zip(ms, ms[1:])):
            raise ValueError(f"milestones must be strictly increasing: {ms}")
        if ms and ms[-1] >= self.total_epochs:
            raise ValueError(f"milestones must be < total_epochs ({self.total_epochs})")


def lr_at(schedule: Schedule, epoch: int) -> float:
    if not 0 <= epoch < schedule.total_epochs:
        raise ValueError(f"epoch {epoch} outside [0, {schedule.total_epochs})")
    passed = sum(1 for m in schedule.milestones if epoch >= m)
    return schedule.base_lr * schedule.factor ** passed


# ---------------------------------------------------------------------------
# training step
# ---------------------------------------------------------------------------

@dataclass
class LossFlags:
    tavg_include_leader: bool = False
    cd_include_leader: bool = True
    ensemble_ce: bool = False


def named_trainables(net: Module, mechanism: Module | None) -> list[tuple[str, Tensor]]:
    own = [("net." + n, p) for n, p in net.named_parameters()]
    return own if mechanism is None else own + [("mech." + n, p) for n, p in mechanism.named_parameters()]


def single_step(net: Module, x: np.ndarray, y: np.ndarray, optim: OptimState) -> LossBreakdown:
    """Plain cross-entropy step for a stand-alone network (the vanilla baseline)."""
    params = named_trainables(net, None)
    zero_grad(p for _, p in params)
    loss = cross_entropy_logits(net(Tensor(x)), y)
    ce = loss.item()
    bd = LossBreakdown(ce_sum=ce, kl1=0.0, kl2=0.0, cd=0.0, alpha=0.0, beta=0.0, gamma=0.0, T=1.0, total=ce)
    if not np.isfinite(ce):
        raise NonFiniteLossError("ce_sum", bd)
    loss.backward()
    sgd_step(params, optim)
    return bd


def train_step(net: MultiBranchNet, mechanism: Module, x: np.ndarray, y: np.ndarray, optim: OptimState,
               coeffs: Coefficients, flags: LossFlags = LossFlags()) -> LossBreakdown:
    """One batch: forward all branches, weights, ensemble target, objective, backward, update."""
    params = named_trainables(net, mechanism)
    zero_grad(p for _, p in params)
    out = net(Tensor(x))
    weights = mechanism.weights(out)
    t_e = ensemble_target(weights, out.aux_logits)
    total, bd = total_loss(out.logits, y, t_e, net.classifier_weights(), coeffs,
                           tavg_include_leader=flags.tavg_include_leader,
                           cd_include_leader=flags.cd_include_leader,
                           ensemble_ce=flags.ensemble_ce)
    bad = bd.first_nonfinite()
    if bad is not None:
        raise NonFiniteLossError(bad, bd)
    total.backward()
    sgd_step(params, optim)
    return bd


def mean_breakdown(parts: list[LossBreakdown]) -> LossBreakdown:
    keys = ("ce_sum", "kl1", "kl2", "cd", "total", "ens_ce")
    avg = {k: float(np.mean([getattr(p, k) for p in parts])) for k in keys}
    first = parts[0]
    return LossBreakdown(alpha=first.alpha, beta=first.beta, gamma=first.gamma, T=first.T, **avg)


def train_epoch(net: MultiBranchNet, mechanism: Module | None, batches: Iterable[tuple[np.ndarray, np.ndarray]],
                optim: OptimState, coeffs: Coefficients, flags: LossFlags = LossFlags()) -> LossBreakdown:
    """One pass over ``batches``.  ``mechanism=None`` trains ``net`` alone with cross-entropy."""
    net.train()
    if mechanism is None:
        parts = [single_step(net, x, y, optim) for x, y in batches]
    else:
        mechanism.train()
        parts = [train_step(net, mechanism, x, y, optim, coeffs, flags) for x, y in batches]
    if not parts:
        raise ValueError("train_epoch got no batches")
    return mean_breakdown(parts)


def predict(net: MultiBranchNet, images: np.ndarray, batch_size: int = 500) -> list[np.ndarray]:
    """Eval-mode logits of every branch (leader last), concatenated over chunks."""
    net.eval()
    chunks = []
    with no_grad():
        for i in range(0, len(images), batch_size):
            out = net(Tensor(images[i:i + batch_size]))
            chunks.append([out.data] if isinstance(out, Tensor) else [t.data for t in out.logits])
    return [np.concatenate([c[j] for c in chunks]) for j in range(len(chunks[0]))]


class Trainer:
    """Owns the model, weighting mechanism, optimizer state and data-order RNGs."""

    def __init__(self, net: MultiBranchNet, mechanism: Module | None, schedule: Schedule, coeffs: Coefficients, *,
                 momentum: float = 0.9, weight_decay: float = 5e-4, nesterov: bool = True,
                 batch_size: int = 128, shuffle_seed: int = 0, augment: bool = True, pad: int = 4,
                 flags: LossFlags = LossFlags()):
        schedule.validate()
        coeffs.validate()
        self.net, self.mechanism = net, mechanism
        self.schedule, self.coeffs, self.flags = schedule, coeffs, flags
        self.optim = OptimState(schedule.base_lr, momentum, weight_decay, nesterov)
        self.batch_size, self.augment, self.pad = batch_size, augment, pad
        self.shuffle_rng, self.augment_rng = (np.random.default_rng(s) for s in np.random.SeedSequence(shuffle_seed).spawn(2))
        self.epoch = 0

    def batches(self, ds: data_io.Dataset):
        for idx in data_io.batch_indices(len(ds), self.batch_size, self.shuffle_rng):
            x = ds.images[idx]
            if self.augment:
                x = data_io.augment(x, self.augment_rng, self.pad)
            yield x, ds.labels[idx]

    def fit_epoch(self, ds: data_io.Dataset) -> LossBreakdown:
        self.optim.lr = lr_at(self.schedule, self.epoch)
        bd = train_epoch(self.net, self.mechanism, self.batches(ds), self.optim, self.coeffs, self.flags)
        self.epoch += 1
        return bd

    def evaluate(self, ds: data_io.Dataset, *, agreement_over_all: bool = False) -> EvalResult:
        return evaluate_logits(predict(self.net, ds.images), ds.labels, agreement_over_all=agreement_over_all)

    # -- checkpoints ----------------------------------------------------------
    def state_tensors(self) -> dict[str, np.ndarray]:
        out = {"net." + k: v for k, v in self.net.state_dict().items()}
        if self.mechanism is not None:
            out.update({"mech." + k: v for k, v in self.mechanism.state_dict().items()})
        out.update({"optim." + k: v.copy() for k, v in self.optim.buffers.items()})
        return out

    def save_checkpoint(self, path, meta: dict | None = None) -> None:
        info = {
            "epoch": str(self.epoch),
            "lr": repr(self.optim.lr),
            "shuffle_rng": json.dumps(self.shuffle_rng.bit_generator.state),
            "augment_rng": json.dumps(self.augment_rng.bit_generator.state),
        }
        info.update({k: str(v) for k, v in (meta or {}).items()})
        write_checkpoint(path, info, self.state_tensors())

    def load_checkpoint(self, path) -> dict[str, str]:
        meta, tensors = read_checkpoint(path)
        self.restore(meta, tensors)
        return meta

    def restore(self, meta: dict[str, str], tensors: dict[str, np.ndarray]) -> None:
        net_state = {k[4:]: v for k, v in tensors.items() if k.startswith("net.")}
        mech_state = {k[5:]: v for k, v in tensors.items() if k.startswith("mech.")}
        buffers = {k[6:]: v for k, v in tensors.items() if k.startswith("optim.")}
        # validate everything before touching live state
        pairs = [(self.net, net_state, "net")]
        if self.mechanism is not None:
            pairs.append((self.mechanism, mech_state, "mech"))
        for module, state, prefix in pairs:
            own = module.state_dict()
            missing = sorted(set(own) - set(state))
            if missing:
                raise FormatError(f"checkpoint lacks {prefix} entries {missing[:5]}")
            for k, v in own.items():
                if v.shape != state[k].shape:
                    raise FormatError(f"checkpoint {prefix}.{k}: shape {state[k].shape} != {v.shape}")
        for key in ("epoch", "lr", "shuffle_rng", "augment_rng"):
            if key not in meta:
                raise FormatError(f"checkpoint metadata lacks {key!r}")
        self.net.load_state_dict(net_state)
        if self.mechanism is not None:
            self.mechanism.load_state_dict(mech_state)
        self.optim.buffers = {k: v.copy() for k, v in buffers.items()}
        self.optim.lr = float(meta["lr"])
        self.epoch = int(meta["epoch"])
        self.shuffle_rng.bit_generator.state = json.loads(meta["shuffle_rng"])
        self.augment_rng.bit_generator.state = json.loads(meta["augment_rng"])


# ---------------------------------------------------------------------------
# checkpoint file
# ---------------------------------------------------------------------------
# magic (8 bytes) | u32 version | u32 metadata length | metadata | tensor container
# metadata: UTF-8 "key=value" lines; values hold no newlines.

def write_checkpoint(path, meta: dict[str, str], tensors: dict[str, np.ndarray]) -> None:
    for k, v in meta.items():
        if "\n" in k or "\n" in v or "=" in k:
            raise ValueError(f"bad metadata entry {k!r}")
    text = "".join(f"{k}={v}\n" for k, v in meta.items()).encode("utf-8")
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<II", CHECKPOINT_VERSION, len(text)))
    buf.write(text)
    write_tensors(buf, tensors)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(buf.getvalue())
    tmp.replace(path)


def read_checkpoint(path) -> tuple[dict[str, str], dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    if raw[:8] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: not a checkpoint (bad magic bytes)")
    if len(raw) < 16:
        raise FormatError(f"{path}: truncated header")
    version, mlen = struct.unpack("<II", raw[8:16])
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: checkpoint version {version}, expected {CHECKPOINT_VERSION}")
    if len(raw) < 16 + mlen:
        raise FormatError(f"{path}: truncated metadata")
    meta = {}
    for line in raw[16:16 + mlen].decode("utf-8").splitlines():
        key, _, value = line.partition("=")
        meta[key] = value
    body = io.BytesIO(raw[16 + mlen:])
    tensors = read_tensors(body)
    if body.read(1):
        raise FormatError(f"{path}: trailing bytes after tensor container")
    return meta, tensors
