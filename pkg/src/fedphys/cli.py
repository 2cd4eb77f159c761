"""Command-line entry point: ``generate``, ``run`` and ``report``.

Every subcommand exits 0 on success. On failure it exits nonzero and
writes a one-line JSON error summary to stderr.
"""

from __future__ import annotations

import argparse
import datetime as _dt
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import evaluation as ev
from . import experiment as ex
from . import federation as fed
from . import synth
from .synth import NoiseTarget

log = logging.getLogger("fedphys")

EXIT_USAGE = 2
EXIT_FAILURE = 1


class CliError(Exception):
    def __init__(self, message: str, code: int = EXIT_FAILURE, kind: str = "error"):
        super().__init__(message)
        self.code = code
        self.kind = kind


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="key = value config file")
    p.add_argument("--out", type=Path, required=True, help="output directory")
    p.add_argument("--seed", type=int)
    p.add_argument("--noise-target", choices=[t.value for t in (NoiseTarget.VIDEO, NoiseTarget.LABEL)])
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config key, e.g. federation.rounds=3")
    keys = p.add_argument_group("config keys (same names as in the config file)")
    for key in ex.CONFIG_KEYS:
        keys.add_argument(f"--{key}", dest=_key_dest(key), metavar="VALUE")
    p.add_argument("-v", "--verbose", action="store_true")


def _key_dest(key: str) -> str:
    return "key__" + key.replace(".", "__")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedphys", description="Federated camera-PPG noise sweeps.")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a synthetic dataset to disk")
    _common(g)
    g.add_argument("--level", type=float, default=0.0,
                   help="experiment noise level applied to the training subjects")

    r = sub.add_parser("run", help="run a FedAvg / FedWeight sweep and write results.csv")
    _common(r)
    r.add_argument("--levels", help="comma-separated noise levels")
    r.add_argument("--policies", help="comma-separated: fedavg,fedweight")
    r.add_argument("--repeats", type=int)
    r.add_argument("--quality-map", choices=[q.value for q in fed.QualityMap])
    r.add_argument("--workers", type=int)
    r.add_argument("--history", action="store_true",
                   help="also write per-round aggregation history for each cell")

    rep = sub.add_parser("report", help="summarize results.csv into a table and chart")
    rep.add_argument("csv", type=Path)
    rep.add_argument("--out", type=Path, help="output directory (default: next to the CSV)")
    rep.add_argument("-v", "--verbose", action="store_true")
    return parser


def resolve_config(args: argparse.Namespace) -> ex.ExperimentConfig:
    cfg = ex.load_config(args.config) if args.config else ex.ExperimentConfig()
    settings: dict[str, str] = {}
    for item in args.set:
        if "=" not in item:
            raise ex.ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        settings[key.strip()] = value.strip()
    for key in ex.CONFIG_KEYS:
        value = getattr(args, _key_dest(key), None)
        if value is not None:
            settings[key] = value
    flag_keys = {
        "seed": "dataset.seed", "noise_target": "noise.target", "levels": "noise.levels",
        "policies": "run.policies", "repeats": "run.repeats", "quality_map": "federation.quality_map",
        "workers": "run.workers",
    }
    for attr, key in flag_keys.items():
        value = getattr(args, attr, None)
        if value is not None:
            settings[key] = str(value)
    if "noise.target" in settings and "noise.levels" not in settings:
        target = NoiseTarget(settings["noise.target"])
        default = synth.VIDEO_LEVELS if target == NoiseTarget.VIDEO else synth.LABEL_LEVELS
        settings["noise.levels"] = ",".join(repr(v) for v in default)
    cfg = ex.make_config(settings, cfg)
    cfg = replace(cfg, out=str(args.out))
    cfg.validate()
    return cfg


def _timestamp() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def cmd_generate(args) -> int:
    cfg = resolve_config(args)
    if args.level < 0:
        raise ex.ConfigError("--level must be non-negative")
    out = Path(args.out)
    train_ids, eval_ids = ev.split_subjects(range(cfg.subjects), cfg.eval_fraction)
    records = synth.build_dataset(cfg.dataset_config(cfg.seed, args.level), train_ids)
    synth.write_dataset(records, out)
    ex.write_manifest(cfg, out / "manifest.json", command="generate", created=_timestamp(),
                      level=args.level, seeds={"dataset": cfg.seed, "noise": cfg.seed},
                      train_ids=list(train_ids), eval_ids=list(eval_ids))
    print(f"wrote {len(records)} subject(s) to {out}")
    return 0


def cmd_run(args) -> int:
    cfg = resolve_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    csv_path = out / "results.csv"
    rows = ex.run_sweep(cfg, csv_path)
    if args.history:
        hist_dir = out / "history"
        hist_dir.mkdir(exist_ok=True)
        for level in cfg.levels:
            for seed in cfg.seeds():
                clients, _ = ex.prepare_data(cfg, seed, level)
                for policy in cfg.policies:
                    _, history = fed.run_federation(clients, cfg.round_config(policy, seed))
                    fed.write_history(history, hist_dir / f"{policy.value}_level{level:g}_seed{seed}.jsonl")
    n_failed = sum(r.status != "ok" for r in rows)
    ex.write_manifest(cfg, out / "manifest.json", command="run", created=_timestamp(),
                      cells=len(rows), failed=n_failed)
    print(f"wrote {len(rows)} row(s) to {csv_path} ({n_failed} failed)")
    return 0


def cmd_report(args) -> int:
    if not args.csv.exists():
        raise CliError(f"no such file: {args.csv}", kind="not_found")
    md, svg = ex.write_report(args.csv, args.out)
    print(f"wrote {md} and {svg}")
    return 0


COMMANDS = {"generate": cmd_generate, "run": cmd_run, "report": cmd_report}


def _fail(kind: str, message: str, code: int) -> int:
    sys.stderr.write(json.dumps({"status": "error", "kind": kind, "message": message}) + "\n")
    return code


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        if exc.code in (0, None):
            return 0
        return _fail("usage", "invalid command line", EXIT_USAGE)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except CliError as exc:
        return _fail(exc.kind, str(exc), exc.code)
    except ex.ConfigError as exc:
        return _fail("config", str(exc), EXIT_USAGE)
    except (ex.ReportError, synth.DatasetError) as exc:
        return _fail("input", str(exc), EXIT_FAILURE)
    except OSError as exc:
        return _fail("io", str(exc), EXIT_FAILURE)


if __name__ == "__main__":
    sys.exit(main())
