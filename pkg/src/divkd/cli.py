"""Command line entry point: ``divkd train|evaluate|ablate|export``."""

from __future__ import annotations

import argparse
import json
import logging
import sys

from .experiment import (ConfigError, ExperimentConfig, evaluate_checkpoint, export_metrics, run_ablation,
                         run_experiment)
from .tensor import FormatError
from .trainer import NonFiniteLossError

EXIT_CONFIG = 2
EXIT_NONFINITE = 3
EXIT_IO = 4


def _load(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config)
    if getattr(args, "seed_override", None) is not None:
        cfg = cfg.replace(**{"seeds.init": args.seed_override, "seeds.shuffle": args.seed_override})
    return cfg


def cmd_train(args) -> int:
    cfg = _load(args)
    res = run_experiment(cfg, out_dir=args.out_dir, resume=args.resume)
    summary = {"run_dir": str(res.run_dir), "config_hash": cfg.config_hash(),
               "final": res.final_eval.as_dict() if res.final_eval else None}
    print(json.dumps(summary, indent=1) if args.format == "json" else _text(summary))
    return 0


def cmd_evaluate(args) -> int:
    cfg = _load(args)
    out = evaluate_checkpoint(cfg, args.checkpoint)
    print(json.dumps(out, indent=1) if args.format == "json" else _text(out))
    return 0


def cmd_ablate(args) -> int:
    cfg = _load(args)
    base, rows = run_ablation(cfg, out_dir=args.out_dir, jobs=args.jobs)
    if args.format == "json":
        print(json.dumps({"dir": str(base), "rows": rows}, indent=1))
    else:
        print((base / "ablation.md").read_text(), end="")
        print(f"written to {base}")
    return 0 if all(r["status"] == "ok" for r in rows) else 1


def cmd_export(args) -> int:
    path = export_metrics(args.run_dir, args.format, args.output)
    print(path)
    return 0


def _text(d: dict, indent: str = "") -> str:
    lines = []
    for k, v in d.items():
        if isinstance(v, dict):
            lines.append(f"{indent}{k}:")
            lines.append(_text(v, indent + "  "))
        else:
            lines.append(f"{indent}{k}: {v}")
    return "\n".join(lines)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="divkd", description="Multi-branch online distillation at desk scale.")
    p.add_argument("-v", "--verbose", action="store_true", help="log every epoch")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out=True):
        sp.add_argument("config", help="experiment YAML")
        sp.add_argument("--seed-override", type=int, default=None, help="replace both init and shuffle seeds")
        sp.add_argument("--format", choices=("text", "json"), default="text")
        if out:
            sp.add_argument("--out-dir", default=None, help="override out_dir from the config")

    t = sub.add_parser("train", help="train one configuration")
    common(t)
    t.add_argument("--resume", default=None, help="checkpoint path, or 'auto' for the run's last.ckpt")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("evaluate", help="evaluate a full or leader checkpoint on the test split")
    common(e, out=False)
    e.add_argument("checkpoint")
    e.set_defaults(func=cmd_evaluate)

    a = sub.add_parser("ablate", help="run the mechanism x CD matrix")
    common(a)
    a.add_argument("--jobs", type=int, default=1, help="parallel cells")
    a.set_defaults(func=cmd_ablate)

    x = sub.add_parser("export", help="export a run's metrics as csv or json")
    x.add_argument("run_dir")
    x.add_argument("--format", choices=("csv", "json"), default="csv")
    x.add_argument("--output", default=None)
    x.set_defaults(func=cmd_export)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_CONFIG
    except NonFiniteLossError as exc:
        print(f"aborted: {exc}", file=sys.stderr)
        return EXIT_NONFINITE
    except (FormatError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
