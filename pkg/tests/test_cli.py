import json

import numpy as np
import pytest
import yaml

from divkd import cli
from divkd.experiment import (ConfigError, ExperimentConfig, export_columns, flatten_record, load_leader,
                              read_export, read_records, run_dir_for, run_experiment)
from divkd.tensor import Tensor, no_grad
from divkd.trainer import read_checkpoint

TINY = {
    "name": "tiny",
    "dataset": {"kind": "synthetic", "num_classes": 4, "per_class": 6, "test_per_class": 4, "image_size": 8,
                "margin": 1.0, "jitter": 1, "seed": 3},
    "model": {"widths": [4, 6, 6, 8], "convs": 1, "pools": [True, False, True, False]},
    "optim": {"milestones": [1]},
    "epochs": 2,
    "batch_size": 8,
    "augment_pad": 1,
    "checkpoint_interval": 1,
}


def tiny_cfg(tmp_path, **overrides):
    raw = json.loads(json.dumps(TINY))
    raw["out_dir"] = str(tmp_path / "runs")
    raw.update(overrides)
    return ExperimentConfig.from_dict(raw)


def write_cfg(tmp_path, raw=None, name="cfg.yaml"):
    raw = json.loads(json.dumps(raw or TINY))
    raw.setdefault("out_dir", str(tmp_path / "runs"))
    path = tmp_path / name
    path.write_text(yaml.safe_dump(raw))
    return path


def test_defaults_match_desk_schedule():
    cfg = ExperimentConfig()
    assert cfg.epochs == 60 and cfg.optim.milestones == [30, 45] and cfg.batch_size == 128
    assert (cfg.loss.alpha, cfg.loss.beta, cfg.loss.gamma, cfg.loss.T) == (1.0, 2.0, 5e-8, 3.0)


def test_validation_lists_every_problem():
    with pytest.raises(ConfigError) as info:
        ExperimentConfig.from_dict({"epochs": "ten", "loss": {"T": 0.0, "alpha": -1}, "mechanism": "moe",
                                    "bogus": 1})
    text = "\n".join(info.value.problems)
    assert "epochs" in text and "bogus" in text
    # type errors are reported before semantic checks; fix them and the rest surface together
    with pytest.raises(ConfigError) as info:
        ExperimentConfig.from_dict({"loss": {"T": 0.0, "alpha": -1}, "mechanism": "moe"})
    text = "\n".join(info.value.problems)
    assert "loss.T" in text and "loss.alpha" in text and "mechanism" in text


def test_missing_cifar_root_reported(tmp_path, monkeypatch):
    monkeypatch.delenv("DIVKD_DATA_ROOT", raising=False)
    with pytest.raises(ConfigError, match="dataset.root"):
        ExperimentConfig.from_dict({"dataset": {"kind": "cifar10", "root": str(tmp_path / "nope")}})


def test_hash_ignores_out_dir_and_tracks_content(tmp_path):
    a = tiny_cfg(tmp_path)
    b = a.replace(out_dir="/elsewhere")
    c = a.replace(**{"loss.gamma": 1e-4})
    assert a.config_hash() == b.config_hash() != c.config_hash()


def test_run_writes_artifacts(tmp_path):
    cfg = tiny_cfg(tmp_path)
    res = run_experiment(cfg)
    assert res.run_dir == run_dir_for(cfg) and cfg.config_hash() in res.run_dir.name
    recs = read_records(res.run_dir)
    assert [r["epoch"] for r in recs] == [1, 2]
    assert all(r["config_hash"] == cfg.config_hash() for r in recs)
    assert {"ce_sum", "kl1", "kl2", "cd", "total"} <= recs[0]["loss"].keys()
    ck = res.run_dir / "checkpoints"
    for name in ("last.ckpt", "epoch_0001.ckpt", "final_full.ckpt", "final_leader.ckpt"):
        assert (ck / name).is_file()
    meta, _ = read_checkpoint(ck / "final_full.ckpt")
    assert meta["config_hash"] == cfg.config_hash()


def test_leader_checkpoint_deploys(tmp_path):
    cfg = tiny_cfg(tmp_path)
    res = run_experiment(cfg)
    leader = load_leader(res.run_dir / "checkpoints" / "final_leader.ckpt")
    _, test = cfg.datasets()
    full_cfg = ExperimentConfig.from_dict(cfg.to_dict())
    t = full_cfg.make_trainer()
    t.load_checkpoint(res.run_dir / "checkpoints" / "final_full.ckpt")
    t.net.eval()
    with no_grad():
        a = leader(Tensor(test.images)).data
        b = t.net(Tensor(test.images)).leader_logits.data
    assert np.array_equal(a, b)


def test_resume_continues_bitwise(tmp_path):
    full = tiny_cfg(tmp_path / "a")
    straight = run_experiment(full)
    half = tiny_cfg(tmp_path / "b")
    # hand-train one epoch into the run's last.ckpt, then let the driver finish
    run_dir = run_dir_for(half)
    t = half.make_trainer()
    train, _ = half.datasets()
    t.fit_epoch(train)
    (run_dir / "checkpoints").mkdir(parents=True)
    t.save_checkpoint(run_dir / "checkpoints" / "last.ckpt", {"config_hash": half.config_hash()})
    resumed = run_experiment(half, resume="auto")
    _, ta = read_checkpoint(straight.run_dir / "checkpoints" / "final_full.ckpt")
    _, tb = read_checkpoint(resumed.run_dir / "checkpoints" / "final_full.ckpt")
    assert all(np.array_equal(ta[k], tb[k]) for k in ta)


def test_resume_rejects_foreign_checkpoint(tmp_path):
    cfg = tiny_cfg(tmp_path)
    res = run_experiment(cfg)
    other = cfg.replace(**{"loss.beta": 1.0})
    with pytest.raises(Exception, match="belongs to config"):
        run_experiment(other, resume=res.run_dir / "checkpoints" / "last.ckpt")


def test_seed_override_changes_run(tmp_path, capsys):
    path = write_cfg(tmp_path)
    assert cli.main(["train", str(path), "--format", "json"]) == 0
    a = json.loads(capsys.readouterr().out)
    assert cli.main(["train", str(path), "--seed-override", "5", "--format", "json"]) == 0
    b = json.loads(capsys.readouterr().out)
    assert a["config_hash"] != b["config_hash"]


def test_cli_bad_config_exit_code(tmp_path, capsys):
    path = write_cfg(tmp_path, {"epochs": -1, "mechanism": "moe"})
    assert cli.main(["train", str(path)]) == cli.EXIT_CONFIG
    err = capsys.readouterr().err
    assert "epochs" in err and "mechanism" in err


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_cli_nan_abort_keeps_last_good_checkpoint(tmp_path, capsys):
    raw = json.loads(json.dumps(TINY))
    raw["epochs"] = 3
    raw["optim"] = {"lr": 0.05, "milestones": [1], "factor": 1e200}  # epoch 2 explodes
    path = write_cfg(tmp_path, raw)
    code = cli.main(["train", str(path)])
    assert code == cli.EXIT_NONFINITE
    assert "non-finite" in capsys.readouterr().err
    run_dir = run_dir_for(ExperimentConfig.load(path))
    meta, tensors = read_checkpoint(run_dir / "checkpoints" / "last.ckpt")
    assert meta["epoch"] == "1"
    assert all(np.all(np.isfinite(v)) for v in tensors.values())
    assert not (run_dir / "checkpoints" / "final_full.ckpt").exists()
    assert [r["epoch"] for r in read_records(run_dir)] == [1]


def test_cli_evaluate(tmp_path, capsys):
    path = write_cfg(tmp_path)
    cli.main(["train", str(path), "--format", "json"])
    run_dir = json.loads(capsys.readouterr().out)["run_dir"]
    assert cli.main(["evaluate", str(path), f"{run_dir}/checkpoints/final_full.ckpt", "--format", "json"]) == 0
    full = json.loads(capsys.readouterr().out)
    assert cli.main(["evaluate", str(path), f"{run_dir}/checkpoints/final_leader.ckpt", "--format", "json"]) == 0
    lead = json.loads(capsys.readouterr().out)
    assert full["leader_top1"] == lead["leader_top1"]


@pytest.mark.parametrize("fmt", ["csv", "json"])
def test_export_round_trip(tmp_path, fmt, capsys):
    cfg = tiny_cfg(tmp_path)
    res = run_experiment(cfg)
    assert cli.main(["export", str(res.run_dir), "--format", fmt]) == 0
    out = capsys.readouterr().out.strip()
    rows = read_export(out)
    recs = read_records(res.run_dir)
    cols = export_columns(recs, 4)
    assert len(rows) == 2
    assert rows == [flatten_record(r, cols) for r in recs]


def test_export_empty_run_is_header_only(tmp_path):
    cfg = tiny_cfg(tmp_path, epochs=0, optim={"milestones": []})
    res = run_experiment(cfg)
    assert cli.main(["export", str(res.run_dir)]) == 0
    lines = (res.run_dir / "metrics.csv").read_text().splitlines()
    assert len(lines) == 2 and lines[0].startswith("#") and lines[1].startswith("epoch,lr")
    assert read_export(res.run_dir / "metrics.csv") == []


def test_export_missing_dir(tmp_path, capsys):
    assert cli.main(["export", str(tmp_path / "none")]) == cli.EXIT_IO


def test_ablate_table_shape(tmp_path, capsys):
    raw = json.loads(json.dumps(TINY))
    raw["epochs"] = 1
    raw["optim"] = {"milestones": []}
    path = write_cfg(tmp_path, raw)
    assert cli.main(["ablate", str(path), "--format", "json"]) == 0
    out = json.loads(capsys.readouterr().out)
    cells = [(r["mechanism"], r["cd"]) for r in out["rows"]]
    assert cells == [(m, cd) for m in ("ffm", "gate", "self_attention") for cd in (True, False)]
    md = (tmp_path / "runs").glob("ablation-*/ablation.md")
    assert len(next(md).read_text().splitlines()) == 2 + 6


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_ablate_marks_failed_cell(tmp_path, capsys):
    raw = json.loads(json.dumps(TINY))
    raw.update(epochs=1, optim={"lr": 1e200, "milestones": []}, ablation={"mechanisms": ["uniform"], "cd": [True]})
    path = write_cfg(tmp_path, raw)
    assert cli.main(["ablate", str(path), "--format", "json"]) == 1
    row = json.loads(capsys.readouterr().out)["rows"][0]
    assert row["status"].startswith("failed")


def test_vanilla_method_trains_leader_alone(tmp_path):
    cfg = tiny_cfg(tmp_path, method="vanilla")
    res = run_experiment(cfg)
    rec = read_records(res.run_dir)[-1]
    assert rec["loss"]["kl1"] == 0.0 and rec["loss"]["cd"] == 0.0
    ev = res.final_eval
    assert len(ev.branch_top1) == 1 and ev.agreement is None and ev.ensemble_top1 == ev.leader_top1
    _, tensors = read_checkpoint(res.run_dir / "checkpoints" / "final_full.ckpt")
    assert not any(k.startswith("mech.") for k in tensors)
    leader = load_leader(res.run_dir / "checkpoints" / "final_leader.ckpt")
    assert set(leader.state_dict()) == {k[4:] for k in tensors if k.startswith("net.")}


def test_vanilla_starts_from_leader_init(tmp_path):
    multi = tiny_cfg(tmp_path).make_trainer()
    lone = tiny_cfg(tmp_path, method="vanilla").make_trainer()
    a, b = multi.net.leader_state(), lone.net.state_dict()
    assert a.keys() == b.keys() and all(np.array_equal(a[k], b[k]) for k in a)
