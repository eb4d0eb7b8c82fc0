"""Declarative experiment configs and the run / ablate / export drivers."""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import yaml

from . import data as data_io
from .branch_net import BlockSpec, LeaderNet, NetConfig, build, small_vgg
from .ffm import MECHANISMS, build_mechanism
from .losses import Coefficients
from .metrics import EvalResult, top_k_error
from .tensor import FormatError, Tensor, no_grad
from .trainer import (LossFlags, NonFiniteLossError, Schedule, Trainer, lr_at, read_checkpoint,
                      write_checkpoint)

log = logging.getLogger(__name__)


METHODS = ("multi_branch", "vanilla")


class ConfigError(ValueError):
    def __init__(self, problems: list[str]):
        super().__init__("invalid config:\n  - " + "\n  - ".join(problems))
        self.problems = problems


@dataclass
class DatasetConfig:
    kind: str = "synthetic"
    root: str | None = None
    train_limit: int | None = None
    test_limit: int | None = None
    num_classes: int = 10
    per_class: int = 100
    test_per_class: int = 100
    image_size: int = 16
    channels: int = 3
    margin: float = 0.15
    noise: float = 1.0
    jitter: int = 2
    blobs: int = 3
    label_noise: float = 0.0
    groups: int = 0
    group_share: float = 0.5
    seed: int = 100


@dataclass
class ModelConfig:
    num_branches: int = 4
    widths: list[int] = field(default_factory=lambda: [16, 32, 64, 64])
    convs: int = 2
    pools: list[bool] = field(default_factory=lambda: [True, True, True, False])
    trunk_blocks: int = 2


@dataclass
class LossConfig:
    alpha: float = 1.0
    beta: float = 2.0
    gamma: float = 5e-8
    T: float = 3.0
    cd_include_leader: bool = True
    tavg_include_leader: bool = False
    ensemble_ce: bool = False


@dataclass
class OptimConfig:
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    nesterov: bool = True
    milestones: list[int] = field(default_factory=lambda: [30, 45])
    factor: float = 0.1


@dataclass
class SeedConfig:
    init: int = 0
    shuffle: int = 0


@dataclass
class AblationConfig:
    mechanisms: list[str] = field(default_factory=lambda: ["ffm", "gate", "self_attention"])
    cd: list[bool] = field(default_factory=lambda: [True, False])


@dataclass
class ExperimentConfig:
    name: str = "run"
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    method: str = "multi_branch"
    mechanism: str = "ffm"
    loss: LossConfig = field(default_factory=LossConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    seeds: SeedConfig = field(default_factory=SeedConfig)
    epochs: int = 60
    batch_size: int = 128
    augment: bool = True
    augment_pad: int = 4
    eval_interval: int = 1
    checkpoint_interval: int = 10
    agreement_over_all: bool = False
    out_dir: str = "runs"
    ablation: AblationConfig = field(default_factory=AblationConfig)

    # -- construction --------------------------------------------------------
    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        problems: list[str] = []
        cfg = _build(cls, raw or {}, "", problems)
        if not problems:
            problems.extend(cfg.problems())
        if problems:
            raise ConfigError(problems)
        return cfg

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        with open(path) as fh:
            return cls.from_dict(yaml.safe_load(fh) or {})

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def dump(self, path) -> None:
        with open(path, "w") as fh:
            yaml.safe_dump(self.to_dict(), fh, sort_keys=False)

    def replace(self, **changes) -> "ExperimentConfig":
        d = self.to_dict()
        for dotted, value in changes.items():
            node = d
            *parents, leaf = dotted.split(".")
            for p in parents:
                node = node[p]
            node[leaf] = value
        return ExperimentConfig.from_dict(d)

    def config_hash(self) -> str:
        d = self.to_dict()
        d.pop("out_dir")
        d.pop("ablation")
        blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:12]

    # -- validation ----------------------------------------------------------
    def problems(self) -> list[str]:
        p = []
        ds, m, lo, op = self.dataset, self.model, self.loss, self.optim
        if ds.kind not in ("synthetic", "cifar10", "cifar100"):
            p.append(f"dataset.kind: {ds.kind!r} not in synthetic|cifar10|cifar100")
        if ds.kind in ("cifar10", "cifar100"):
            root = data_io.data_root(ds.root)
            if root is None:
                p.append("dataset.root: required for CIFAR (or set DIVKD_DATA_ROOT)")
            elif not root.is_dir():
                p.append(f"dataset.root: directory {str(root)!r} does not exist")
        if ds.num_classes < 2:
            p.append("dataset.num_classes: must be >= 2")
        for name in ("per_class", "test_per_class", "image_size", "channels"):
            if getattr(ds, name) < 1:
                p.append(f"dataset.{name}: must be >= 1")
        if ds.margin < 0 or ds.noise < 0 or ds.jitter < 0:
            p.append("dataset.margin/noise/jitter: must be >= 0")
        if not 0 <= ds.label_noise < 1:
            p.append("dataset.label_noise: must be in [0, 1)")
        if not 0 <= ds.groups <= ds.num_classes or not 0 <= ds.group_share < 1:
            p.append("dataset.groups/group_share: need 0 <= groups <= num_classes and share in [0, 1)")
        if m.num_branches < 2:
            p.append("model.num_branches: must be >= 2")
        if len(m.widths) != len(m.pools):
            p.append("model.widths/pools: lengths differ")
        if not 0 <= m.trunk_blocks < len(m.widths):
            p.append("model.trunk_blocks: must leave at least one per-branch block")
        if m.convs < 1 or any(w < 1 for w in m.widths):
            p.append("model.convs/widths: must be >= 1")
        if self.method not in METHODS:
            p.append(f"method: {self.method!r} not in {METHODS}")
        if self.mechanism not in MECHANISMS:
            p.append(f"mechanism: {self.mechanism!r} not in {MECHANISMS}")
        for name in ("alpha", "beta", "gamma"):
            if getattr(lo, name) < 0:
                p.append(f"loss.{name}: must be >= 0")
        if lo.T <= 0:
            p.append("loss.T: must be > 0")
        if op.lr <= 0:
            p.append("optim.lr: must be > 0")
        if not 0 <= op.momentum < 1:
            p.append("optim.momentum: must be in [0, 1)")
        if op.weight_decay < 0:
            p.append("optim.weight_decay: must be >= 0")
        if any(b <= a for a, b in zip(op.milestones, op.milestones[1:])):
            p.append("optim.milestones: must be strictly increasing")
        if op.milestones and op.milestones[-1] >= max(self.epochs, 1):
            p.append("optim.milestones: must be < epochs")
        if self.epochs < 0:
            p.append("epochs: must be >= 0")
        if self.batch_size < 2:
            p.append("batch_size: must be >= 2")
        if self.augment_pad < 0:
            p.append("augment_pad: must be >= 0")
        if self.eval_interval < 1 or self.checkpoint_interval < 1:
            p.append("eval_interval/checkpoint_interval: must be >= 1")
        for mech in self.ablation.mechanisms:
            if mech not in MECHANISMS:
                p.append(f"ablation.mechanisms: {mech!r} not in {MECHANISMS}")
        if not p:
            try:
                self.net_config().validate()
            except ValueError as exc:
                p.append(f"model: {exc}")
        return p

    # -- assembly ------------------------------------------------------------
    def num_classes(self) -> int:
        return {"cifar10": 10, "cifar100": 100}.get(self.dataset.kind, self.dataset.num_classes)

    def net_config(self) -> NetConfig:
        size = 32 if self.dataset.kind != "synthetic" else self.dataset.image_size
        ch = 3 if self.dataset.kind != "synthetic" else self.dataset.channels
        m = self.model
        return small_vgg(self.num_classes(), m.num_branches, widths=tuple(m.widths), convs=m.convs,
                         pools=tuple(m.pools), in_channels=ch, image_size=size, trunk_blocks=m.trunk_blocks)

    def coefficients(self) -> Coefficients:
        return Coefficients(self.loss.alpha, self.loss.beta, self.loss.gamma, self.loss.T)

    def flags(self) -> LossFlags:
        return LossFlags(self.loss.tavg_include_leader, self.loss.cd_include_leader, self.loss.ensemble_ce)

    def schedule(self) -> Schedule:
        return Schedule(self.optim.lr, tuple(self.optim.milestones), self.optim.factor, max(self.epochs, 1))

    def datasets(self) -> tuple[data_io.Dataset, data_io.Dataset]:
        ds = self.dataset
        if ds.kind == "synthetic":
            return data_io.synthetic_dataset(
                ds.num_classes, ds.per_class, image_size=ds.image_size, channels=ds.channels, margin=ds.margin,
                noise=ds.noise, jitter=ds.jitter, blobs=ds.blobs, test_per_class=ds.test_per_class,
                label_noise=ds.label_noise, groups=ds.groups, group_share=ds.group_share, seed=ds.seed)
        return data_io.load_cifar(data_io.data_root(ds.root), ds.kind, train_limit=ds.train_limit,
                                  test_limit=ds.test_limit)

    def make_trainer(self) -> Trainer:
        net_cfg = self.net_config()
        net = build(net_cfg, self.seeds.init)
        if self.method == "vanilla":
            # the leader's architecture and initial weights, trained alone with cross-entropy
            mech = None
            lone = LeaderNet(net_cfg)
            lone.load_state_dict(net.leader_state())
            net = lone
        else:
            # mechanism draws from its own stream so the network init is shared across mechanisms
            mech = build_mechanism(self.mechanism, net_cfg, np.random.default_rng([self.seeds.init, 1]))
        return Trainer(net, mech, self.schedule(), self.coefficients(), momentum=self.optim.momentum,
                       weight_decay=self.optim.weight_decay, nesterov=self.optim.nesterov,
                       batch_size=self.batch_size, shuffle_seed=self.seeds.shuffle, augment=self.augment,
                       pad=self.augment_pad, flags=self.flags())


def _build(cls, raw: Any, where: str, problems: list[str]):
    if not isinstance(raw, dict):
        problems.append(f"{where or 'config'}: expected a mapping, got {type(raw).__name__}")
        return cls()
    known = {f.name: f for f in dataclasses.fields(cls)}
    for key in raw:
        if key not in known:
            problems.append(f"{where}{key}: unknown field")
    kwargs = {}
    for name, f in known.items():
        if name not in raw:
            continue
        value = raw[name]
        default = getattr(cls(), name)
        if dataclasses.is_dataclass(default):
            kwargs[name] = _build(type(default), value, f"{where}{name}.", problems)
        else:
            kwargs[name] = _coerce(value, default, f"{where}{name}", problems)
    return cls(**kwargs)


def _coerce(value, default, where, problems):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            problems.append(f"{where}: expected true/false, got {value!r}")
            return default
        return value
    if isinstance(default, int) and not isinstance(default, bool):
        if isinstance(value, bool) or not isinstance(value, int):
            problems.append(f"{where}: expected an integer, got {value!r}")
            return default
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            try:
                return float(value)
            except (TypeError, ValueError):
                problems.append(f"{where}: expected a number, got {value!r}")
                return default
        return float(value)
    if isinstance(default, list):
        if not isinstance(value, list):
            problems.append(f"{where}: expected a list, got {value!r}")
            return default
        return list(value)
    if default is None:
        if value is None:
            return None
        if where.endswith("limit") and not (isinstance(value, int) and not isinstance(value, bool) and value > 0):
            problems.append(f"{where}: expected a positive integer or null, got {value!r}")
            return None
        return value if where.endswith("limit") else str(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            problems.append(f"{where}: expected a string, got {value!r}")
            return default
        return value
    return value


# ---------------------------------------------------------------------------
# running
# ---------------------------------------------------------------------------

METRICS_FILE = "metrics.jsonl"


@dataclass
class RunResult:
    run_dir: Path
    records: list[dict]
    final_eval: EvalResult | None


def run_dir_for(cfg: ExperimentConfig, out_dir=None) -> Path:
    return Path(out_dir or cfg.out_dir) / f"{cfg.name}-{cfg.config_hash()}"


def read_records(run_dir) -> list[dict]:
    path = Path(run_dir) / METRICS_FILE
    if not path.is_file():
        return []
    return [json.loads(line) for line in path.read_text().splitlines() if line.strip()]


def _write_records(run_dir: Path, records: list[dict]) -> None:
    text = "".join(json.dumps(r, sort_keys=True) + "\n" for r in records)
    tmp = run_dir / (METRICS_FILE + ".tmp")
    tmp.write_text(text)
    tmp.replace(run_dir / METRICS_FILE)


def save_leader(path, trainer: Trainer, cfg: ExperimentConfig) -> None:
    meta = {"kind": "leader", "config_hash": cfg.config_hash(),
            "net_config": json.dumps(dataclasses.asdict(cfg.net_config()))}
    net = trainer.net
    write_checkpoint(path, meta, net.state_dict() if isinstance(net, LeaderNet) else net.leader_state())


def load_leader(path) -> LeaderNet:
    meta, tensors = read_checkpoint(path)
    if meta.get("kind") != "leader":
        raise FormatError(f"{path}: not a leader checkpoint")
    raw = json.loads(meta["net_config"])
    raw["trunk"] = tuple(BlockSpec(**b) for b in raw["trunk"])
    raw["branch"] = tuple(BlockSpec(**b) for b in raw["branch"])
    net = LeaderNet(NetConfig(**raw))
    net.load_state_dict(tensors)
    return net.eval()


def run_experiment(cfg: ExperimentConfig, *, out_dir=None, resume=None, datasets=None) -> RunResult:
    """Train per the config, writing metrics and checkpoints into a hash-named run dir."""
    run_dir = run_dir_for(cfg, out_dir)
    ckpt_dir = run_dir / "checkpoints"
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    cfg.dump(run_dir / "config.yaml")
    (run_dir / "config_hash").write_text(cfg.config_hash() + "\n")
    train, test = datasets if datasets is not None else cfg.datasets()
    trainer = cfg.make_trainer()
    meta = {"config_hash": cfg.config_hash(), "init_seed": cfg.seeds.init, "shuffle_seed": cfg.seeds.shuffle}

    records: list[dict] = []
    if resume:
        resume_path = ckpt_dir / "last.ckpt" if str(resume) == "auto" else Path(resume)
        stored, tensors = read_checkpoint(resume_path)
        if stored.get("config_hash") != cfg.config_hash():
            raise FormatError(f"{resume_path}: checkpoint belongs to config {stored.get('config_hash')}, "
                              f"not {cfg.config_hash()}")
        trainer.restore(stored, tensors)
        records = [r for r in read_records(run_dir) if r["epoch"] <= trainer.epoch]
        log.info("resumed %s at epoch %d", run_dir.name, trainer.epoch)
    else:
        _write_records(run_dir, [])

    final_eval = None
    while trainer.epoch < cfg.epochs:
        start = time.perf_counter()
        lr = lr_at(trainer.schedule, trainer.epoch)
        try:
            bd = trainer.fit_epoch(train)
        except NonFiniteLossError:
            log.error("non-finite loss in epoch %d; last good checkpoint kept", trainer.epoch + 1)
            raise
        epoch = trainer.epoch
        ev = None
        if epoch % cfg.eval_interval == 0 or epoch == cfg.epochs:
            ev = trainer.evaluate(test, agreement_over_all=cfg.agreement_over_all)
            final_eval = ev
        records.append({
            "epoch": epoch,
            "lr": lr,
            "loss": bd.as_dict(),
            "eval": ev.as_dict() if ev else None,
            "seconds": time.perf_counter() - start,
            "config_hash": cfg.config_hash(),
        })
        _write_records(run_dir, records)
        trainer.save_checkpoint(ckpt_dir / "last.ckpt", meta)
        if epoch % cfg.checkpoint_interval == 0:
            trainer.save_checkpoint(ckpt_dir / f"epoch_{epoch:04d}.ckpt", meta)
        log.info("%s epoch %d lr %.4g total %.4f leader_top1 %s", cfg.name, epoch, lr, bd.total,
                 f"{ev.leader_top1:.2f}" if ev else "-")

    if final_eval is None and cfg.epochs > 0:
        final_eval = trainer.evaluate(test, agreement_over_all=cfg.agreement_over_all)
    trainer.save_checkpoint(ckpt_dir / "final_full.ckpt", meta)
    save_leader(ckpt_dir / "final_leader.ckpt", trainer, cfg)
    return RunResult(run_dir, records, final_eval)


def evaluate_checkpoint(cfg: ExperimentConfig, path) -> dict:
    meta, tensors = read_checkpoint(path)
    _, test = cfg.datasets()
    if meta.get("kind") == "leader":
        net = load_leader(path)
        with no_grad():
            logits = np.concatenate([net(Tensor(test.images[i:i + 500])).data for i in range(0, len(test), 500)])
        out = {"leader_top1": top_k_error(logits, test.labels, 1), "num_samples": len(test)}
        if logits.shape[1] > 5:
            out["leader_top5"] = top_k_error(logits, test.labels, 5)
        return out
    trainer = cfg.make_trainer()
    trainer.restore(meta, tensors)
    return trainer.evaluate(test, agreement_over_all=cfg.agreement_over_all).as_dict()


# ---------------------------------------------------------------------------
# ablation
# ---------------------------------------------------------------------------

ABLATION_COLUMNS = ("mechanism", "cd", "gamma", "leader_top1", "leader_top5", "ensemble_top1",
                    "mean_aux_top1", "agreement", "status", "run_dir")


def ablation_cells(cfg: ExperimentConfig) -> list[ExperimentConfig]:
    cells = []
    for mech in cfg.ablation.mechanisms:
        for cd in cfg.ablation.cd:
            cells.append(cfg.replace(**{
                "mechanism": mech,
                "loss.gamma": cfg.loss.gamma if cd else 0.0,
                "name": f"{cfg.name}-{mech}-{'cd' if cd else 'nocd'}",
            }))
    return cells


def _run_cell(args) -> dict:
    cell, out_dir = args
    row = {"mechanism": cell.mechanism, "cd": cell.loss.gamma > 0, "gamma": cell.loss.gamma}
    try:
        res = run_experiment(cell, out_dir=out_dir)
        ev = res.final_eval
        row.update(leader_top1=ev.leader_top1, leader_top5=ev.leader_top5, ensemble_top1=ev.ensemble_top1,
                   mean_aux_top1=ev.mean_aux_top1, agreement=ev.agreement, status="ok", run_dir=str(res.run_dir))
    except Exception as exc:  # one failed cell must not sink the table
        log.exception("ablation cell %s failed", cell.name)
        row.update(status=f"failed: {type(exc).__name__}: {exc}")
    return row


def run_ablation(cfg: ExperimentConfig, *, out_dir=None, jobs: int = 1) -> tuple[Path, list[dict]]:
    """Run every mechanism x CD cell with shared seeds; write ablation.csv and ablation.md."""
    base = Path(out_dir or cfg.out_dir) / f"ablation-{cfg.name}-{cfg.config_hash()}"
    base.mkdir(parents=True, exist_ok=True)
    cells = [(c, base) for c in ablation_cells(cfg)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(_run_cell, cells))
    else:
        rows = [_run_cell(c) for c in cells]
    with open(base / "ablation.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=ABLATION_COLUMNS)
        w.writeheader()
        for r in rows:
            w.writerow({k: r.get(k, "") for k in ABLATION_COLUMNS})
    lines = ["| mechanism | CD | top-1 err | top-5 err | ens top-1 | agreement s | status |",
             "|---|---|---|---|---|---|---|"]
    for r in rows:
        def fmt(v):
            return "-" if v is None or v == "" else (f"{v:.2f}" if isinstance(v, float) else str(v))
        lines.append(f"| {r['mechanism']} | {'on' if r['cd'] else 'off'} | {fmt(r.get('leader_top1'))} | "
                     f"{fmt(r.get('leader_top5'))} | {fmt(r.get('ensemble_top1'))} | "
                     f"{fmt(r.get('agreement'))} | {r['status']} |")
    (base / "ablation.md").write_text("\n".join(lines) + "\n")
    return base, rows


# ---------------------------------------------------------------------------
# export
# ---------------------------------------------------------------------------

EXPORT_BASE_COLUMNS = ("epoch", "lr", "ce_sum", "kl1", "kl2", "cd", "ens_ce", "total", "alpha", "beta", "gamma",
                       "T", "leader_top1", "leader_top5", "ensemble_top1", "agreement", "num_samples")


def export_columns(records: list[dict], num_branches: int | None = None) -> list[str]:
    if num_branches is None:
        evals = [r["eval"] for r in records if r.get("eval")]
        num_branches = len(evals[0]["branch_top1"]) if evals else 0
    cols = list(EXPORT_BASE_COLUMNS)
    cols += [f"branch{i}_top1" for i in range(num_branches)]
    cols += [f"branch{i}_top5" for i in range(num_branches)]
    return cols + ["seconds", "config_hash"]


def flatten_record(r: dict, columns: list[str]) -> dict:
    flat = {"epoch": r["epoch"], "lr": r["lr"], "seconds": r["seconds"], "config_hash": r["config_hash"]}
    flat.update({k: r["loss"][k] for k in ("ce_sum", "kl1", "kl2", "cd", "ens_ce", "total", "alpha", "beta",
                                             "gamma", "T")})
    ev = r.get("eval") or {}
    for k in ("leader_top1", "leader_top5", "ensemble_top1", "agreement", "num_samples"):
        flat[k] = ev.get(k)
    for key in ("branch_top1", "branch_top5"):
        vals = ev.get(key) or []
        for i, v in enumerate(vals):
            flat[f"branch{i}_{key[-4:]}"] = v
    return {c: flat.get(c) for c in columns}


def export_metrics(run_dir, fmt: str = "csv", out_path=None) -> Path:
    run_dir = Path(run_dir)
    if not run_dir.is_dir():
        raise FileNotFoundError(f"run directory {run_dir} does not exist")
    records = read_records(run_dir)
    nb = None
    cfg_path = run_dir / "config.yaml"
    if cfg_path.is_file():
        nb = (yaml.safe_load(cfg_path.read_text()).get("model") or {}).get("num_branches")
    columns = export_columns(records, nb)
    rows = [flatten_record(r, columns) for r in records]
    out_path = Path(out_path) if out_path else run_dir / f"metrics.{fmt}"
    if fmt == "csv":
        with open(out_path, "w", newline="") as fh:
            fh.write("# divkd metrics export v1; one row per epoch; columns: " + ",".join(columns) + "\n")
            w = csv.writer(fh)
            w.writerow(columns)
            for row in rows:
                w.writerow(["" if row[c] is None else repr(row[c]) if isinstance(row[c], float) else row[c]
                            for c in columns])
    elif fmt == "json":
        out_path.write_text(json.dumps({"format": "divkd metrics export v1", "columns": columns,
                                        "rows": [[row[c] for c in columns] for row in rows]}, indent=1))
    else:
        raise ValueError(f"unknown export format {fmt!r}; use csv or json")
    return out_path


def read_export(path) -> list[dict]:
    """Parse a CSV or JSON export back into typed row dicts."""
    path = Path(path)
    if path.suffix == ".json":
        blob = json.loads(path.read_text())
        return [dict(zip(blob["columns"], row)) for row in blob["rows"]]
    with open(path, newline="") as fh:
        lines = [line for line in fh if not line.startswith("#")]
    reader = csv.DictReader(lines)
    out = []
    for row in reader:
        parsed = {}
        for k, v in row.items():
            if v == "":
                parsed[k] = None
            elif k == "config_hash":
                parsed[k] = v
            elif k in ("epoch", "num_samples"):
                parsed[k] = int(v)
            else:
                parsed[k] = float(v)
        out.append(parsed)
    return out
