"""Command-line entry point: generate, train, evaluate, ablate, report.

Config keys can be overridden with dotted flags, e.g. ``--trainer.seed 3``
or ``--trainer.weights.lambda_fd 0``. Values are parsed as JSON when
possible, otherwise kept as strings.

Exit codes: 0 success, 2 config error, 3 protocol violation, 4 numerical abort.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .data import DatasetManifest, AccessLog
from .errors import ConfigError, NumericalAbort, ProtocolViolation, ValidationError
from .experiment import ablate, desk_run_config, prepare_data, run_config_from_dict, train_run
from .metrics import MetricsReport, format_ablation_table, format_step_table
from .model import FrozenSnapshot
from .trainer import evaluate

EXIT_OK, EXIT_CONFIG, EXIT_PROTOCOL, EXIT_NUMERIC = 0, 2, 3, 4

log = logging.getLogger("contuda")


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(raw: dict, extra: list[str]) -> dict:
    """Apply ``--a.b.c value`` pairs to a nested config mapping."""
    i = 0
    while i < len(extra):
        flag = extra[i]
        if not flag.startswith("--") or "." not in flag:
            raise ConfigError(flag, "unrecognized argument")
        if "=" in flag:
            flag, value = flag.split("=", 1)
            i += 1
        else:
            if i + 1 >= len(extra):
                raise ConfigError(flag[2:], "missing value")
            value = extra[i + 1]
            i += 2
        node = raw
        *parents, leaf = flag[2:].split(".")
        for key in parents:
            node = node.setdefault(key, {})
            if not isinstance(node, dict):
                raise ConfigError(flag[2:], "cannot override inside a non-object")
        node[leaf] = _parse_value(value)
    return raw


def load_config(path, extra):
    raw = desk_run_config().to_dict()
    if path:
        try:
            user = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError("config", f"cannot read {path}: {exc}") from exc
        for key, value in user.items():
            if key == "trainer" and isinstance(value, dict):
                raw["trainer"].update(value)
            else:
                raw[key] = value
    return run_config_from_dict(apply_overrides(raw, extra))


def cmd_generate(args, extra) -> int:
    cfg = load_config(args.config, extra)
    _, written = prepare_data(cfg, force=args.force)
    print(f"data root {cfg.data_root}: rendered {written or 'nothing (up to date)'}")
    return EXIT_OK


def _manifests(cfg):
    manifests, written = prepare_data(cfg, force=False)
    if written:
        log.info("rendered missing domains %s", written)
    return manifests


def cmd_train(args, extra) -> int:
    if args.method:
        extra = extra + ["--trainer.method", json.dumps(args.method)]
    if args.seed is not None:
        extra = extra + ["--trainer.seed", str(args.seed)]
    cfg = load_config(args.config, extra)
    result = train_run(cfg, _manifests(cfg))
    for r in result["reports"]:
        print(format_step_table(r))
    if result["failed"]:
        print(f"audit failed: {result['audit']['violations']}", file=sys.stderr)
        return EXIT_PROTOCOL
    print(f"run directory {result['run_dir']}")
    return EXIT_OK


def cmd_evaluate(args, extra) -> int:
    run = Path(args.run)
    cfg = run_config_from_dict(json.loads((run / "config.json").read_text()))
    steps = sorted(int(p.stem.split("_")[1]) for p in run.glob("manifest_*.json"))
    if not steps:
        raise ConfigError("run", f"no checkpoints in {run}")
    step = args.step or steps[-1]
    snap = FrozenSnapshot.load(run / "checkpoints" / f"step_{step}.bin", run / f"manifest_{step}.json")
    targets = [DatasetManifest.read(cfg.data_root, s.domain_id) for s in cfg.benchmark[1 : step + 1]]
    report = evaluate(snap, targets, step, AccessLog(), cfg.trainer.eval_batch)
    (run / f"evaluation_{step}.json").write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True))
    print(format_step_table(report))
    return EXIT_OK


def _int_list(text):
    return [int(v) for v in text.split(",") if v.strip()]


def _str_list(text):
    return [v.strip() for v in text.split(",") if v.strip()]


def cmd_ablate(args, extra) -> int:
    cfg = load_config(args.config, extra)
    methods = _str_list(args.methods)
    if not methods:
        raise ConfigError("methods", "empty methods list")
    out = ablate(cfg, _manifests(cfg), methods, _int_list(args.seeds))
    print(format_ablation_table(out["rows"]))
    return EXIT_PROTOCOL if out["failed"] else EXIT_OK


def cmd_report(args, extra) -> int:
    path = Path(args.path)
    if (path / "ablation.json").exists():
        print(format_ablation_table(json.loads((path / "ablation.json").read_text())))
        return EXIT_OK
    files = sorted(path.glob("metrics_*.json"), key=lambda p: int(p.stem.split("_")[1]))
    if not files:
        raise ConfigError("path", f"no metrics files in {path}")
    for f in files:
        print(format_step_table(MetricsReport.from_dict(json.loads(f.read_text()))))
        print()
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="contuda", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="render the benchmark datasets")
    p.add_argument("--config")
    p.add_argument("--force", action="store_true", help="overwrite data that does not match the config")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="run the continual protocol once")
    p.add_argument("--config")
    p.add_argument("--method")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="evaluate a run checkpoint on its seen targets")
    p.add_argument("--run", required=True)
    p.add_argument("--step", type=int)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ablate", help="train several methods and seeds, aggregate a table")
    p.add_argument("--config")
    p.add_argument("--methods", default="continual_baseline,dd_only,fd_only,dd_fd,muhdi")
    p.add_argument("--seeds", default="0,1,2")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("report", help="print tables from a run or ablation directory")
    p.add_argument("path")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args, extra)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ProtocolViolation as exc:
        print(f"protocol violation: {exc}", file=sys.stderr)
        return EXIT_PROTOCOL
    except NumericalAbort as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValidationError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
