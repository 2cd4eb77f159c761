"""Noise sweeps: FedAvg vs FedWeight over a grid of noise levels and seeds.

A cell is one (noise level, policy, seed) triple. Cells sharing a level
and seed share the same dataset, so policy comparisons are paired.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import statistics
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Iterable, Sequence

from . import evaluation as ev
from . import federation as fed
from . import synth
from .synth import DatasetConfig, NoiseConfig, NoiseTarget, SubjectRecord

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    # dataset
    subjects: int = 25
    duration_s: float = 60.0
    fps: float = 30.0
    height: int = 8
    width: int = 8
    seed: int = 0
    video_unit: float = synth.VIDEO_NOISE_UNIT
    sensor_floor: float = synth.SENSOR_FLOOR
    eval_fraction: float = 0.2
    # noise grid
    noise_target: NoiseTarget = NoiseTarget.VIDEO
    levels: tuple[float, ...] = synth.VIDEO_LEVELS
    subject_std: float = 0.1
    # federation
    rounds: int = 7
    fraction: float = 1.0
    local_steps: int | None = None
    batch_windows: int = 1
    quality_map: fed.QualityMap = fed.QualityMap.INVERSE
    lr: float = 1e-3
    weight_by_samples: bool = False
    # sweep
    policies: tuple[fed.Policy, ...] = (fed.Policy.FEDAVG, fed.Policy.FEDWEIGHT)
    repeats: int = 1
    out: str = "results"
    workers: int = 1

    def validate(self) -> None:
        if not self.levels:
            raise ConfigError("noise levels must be nonempty")
        if any(v < 0 for v in self.levels):
            raise ConfigError("noise levels must be non-negative")
        if self.repeats < 1:
            raise ConfigError("repeats must be >= 1")
        if not self.policies:
            raise ConfigError("at least one policy is required")
        if self.height < 1 or self.width < 1:
            raise ConfigError(f"invalid frame size {self.height}x{self.width}")
        if self.subjects < 2:
            raise ConfigError("need at least two subjects (train and eval)")
        if not (0 < self.eval_fraction < 1):
            raise ConfigError("eval_fraction must lie in (0, 1)")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        try:
            self.dataset_config(self.seed, self.levels[0]).validate()
            self.round_config(fed.Policy.FEDAVG, self.seed).validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def dataset_config(self, seed: int, level: float) -> DatasetConfig:
        return DatasetConfig(
            n_subjects=self.subjects, duration_s=self.duration_s, fps=self.fps,
            hw=(self.height, self.width), seed=seed, video_unit=self.video_unit,
            sensor_floor=self.sensor_floor,
            noise=NoiseConfig(level, self.noise_target, self.subject_std, seed),
        )

    def round_config(self, policy: fed.Policy, seed: int) -> fed.RoundConfig:
        return fed.RoundConfig(
            n_rounds=self.rounds, client_fraction=self.fraction, local_steps=self.local_steps,
            batch_windows=self.batch_windows,
            policy=policy, quality_map=self.quality_map, quality_target=self.noise_target,
            weight_by_samples=self.weight_by_samples, lr=self.lr, seed=seed,
        )

    def seeds(self) -> list[int]:
        return [self.seed + r for r in range(self.repeats)]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["noise_target"] = self.noise_target.value
        d["quality_map"] = self.quality_map.value
        d["policies"] = [p.value for p in self.policies]
        d["levels"] = list(self.levels)
        return d


# ---------------------------------------------------------------------------
# Config file: ``key = value`` lines, optional ``[section]`` headers that
# prefix keys as ``section.key``, ``#`` comments.
# ---------------------------------------------------------------------------

# dotted config key -> ExperimentConfig field
CONFIG_KEYS = {
    "dataset.subjects": "subjects", "dataset.duration_s": "duration_s", "dataset.fps": "fps",
    "dataset.height": "height", "dataset.width": "width", "dataset.seed": "seed",
    "dataset.video_unit": "video_unit", "dataset.sensor_floor": "sensor_floor",
    "dataset.eval_fraction": "eval_fraction",
    "noise.target": "noise_target", "noise.levels": "levels", "noise.subject_std": "subject_std",
    "federation.rounds": "rounds", "federation.fraction": "fraction",
    "federation.local_steps": "local_steps", "federation.batch_windows": "batch_windows",
    "federation.quality_map": "quality_map",
    "federation.lr": "lr", "federation.weight_by_samples": "weight_by_samples",
    "run.policies": "policies", "run.repeats": "repeats", "run.out": "out", "run.workers": "workers",
}


def parse_config_text(text: str, source: str = "<config>") -> dict[str, str]:
    section = ""
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        if section and "." not in key:
            key = f"{section}.{key}"
        if key not in CONFIG_KEYS:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        out[key] = value
    return out


def _convert(name: str, value: str):
    try:
        if name in ("levels",):
            return tuple(float(v) for v in value.replace(" ", "").split(",") if v)
        if name == "policies":
            return tuple(fed.Policy(v.strip().lower()) for v in value.split(",") if v.strip())
        if name == "noise_target":
            return NoiseTarget(value.strip().lower())
        if name == "quality_map":
            return fed.QualityMap(value.strip().lower())
        if name == "local_steps":
            return None if value.strip().lower() in ("", "none", "pass") else int(value)
        if name == "weight_by_samples":
            if value.strip().lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(value)
            return value.strip().lower() in ("true", "1", "yes")
        if name == "out":
            return value
        kind = {f.name: f.type for f in fields(ExperimentConfig)}[name]
        return int(value) if kind == "int" else float(value)
    except ValueError:
        raise ConfigError(f"invalid value {value!r} for {name}") from None


def make_config(settings: dict[str, str], base: ExperimentConfig | None = None) -> ExperimentConfig:
    """Apply dotted-key string settings on top of ``base``."""
    updates = {}
    for key, value in settings.items():
        if key not in CONFIG_KEYS:
            raise ConfigError(f"unknown key {key!r}")
        name = CONFIG_KEYS[key]
        updates[name] = _convert(name, value)
    return replace(base or ExperimentConfig(), **updates)


def load_config(path: Path | str) -> ExperimentConfig:
    p = Path(path)
    return make_config(parse_config_text(p.read_text(), str(p)))


# ---------------------------------------------------------------------------
# Cells
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Cell:
    level: float
    policy: fed.Policy
    seed: int


def grid(config: ExperimentConfig) -> list[Cell]:
    return [Cell(level, policy, seed)
            for level in config.levels for seed in config.seeds() for policy in config.policies]


def prepare_data(config: ExperimentConfig, seed: int, level: float) -> tuple[list[fed.ClientData], list[SubjectRecord]]:
    ds = config.dataset_config(seed, level)
    train_ids, eval_ids = ev.split_subjects(range(config.subjects), config.eval_fraction)
    records = synth.build_dataset(ds, train_ids)
    clients = [fed.ClientData.from_record(records[i], config.noise_target) for i in train_ids]
    return clients, [records[i] for i in eval_ids]


def failed_row(config: ExperimentConfig, cell: Cell, reason: str) -> ev.MetricsRow:
    return ev.MetricsRow(config.noise_target.value, cell.level, cell.policy.value, cell.seed,
                         math.nan, math.nan, None, 0, f"failed: {reason}")


def score_cell(config: ExperimentConfig, cell: Cell, clients, heldout) -> ev.MetricsRow:
    try:
        params, _ = fed.run_federation(clients, config.round_config(cell.policy, cell.seed))
        score = ev.score_run(params, heldout)
    except Exception as exc:  # one bad cell must not stop the sweep
        log.error("cell %s failed: %s", cell, exc)
        return failed_row(config, cell, type(exc).__name__)
    return ev.MetricsRow(config.noise_target.value, cell.level, cell.policy.value, cell.seed,
                         score.mae_bpm, score.snr_db, score.pearson_r, score.n_windows)


def run_group(config: ExperimentConfig, level: float, seed: int) -> list[ev.MetricsRow]:
    """All policies for one (level, seed), sharing one dataset."""
    cells = [Cell(level, p, seed) for p in config.policies]
    try:
        clients, heldout = prepare_data(config, seed, level)
    except Exception as exc:
        log.error("data generation failed for level=%s seed=%s: %s", level, seed, exc)
        return [failed_row(config, c, type(exc).__name__) for c in cells]
    return [score_cell(config, c, clients, heldout) for c in cells]


def iter_rows(config: ExperimentConfig) -> Iterable[ev.MetricsRow]:
    groups = [(level, seed) for level in config.levels for seed in config.seeds()]
    if config.workers == 1:
        for level, seed in groups:
            yield from run_group(config, level, seed)
        return
    with ProcessPoolExecutor(config.workers) as pool:
        futures = [pool.submit(run_group, config, level, seed) for level, seed in groups]
        for fut in futures:
            yield from fut.result()


def run_sweep(config: ExperimentConfig, csv_path: Path | str) -> list[ev.MetricsRow]:
    """Run every cell, appending each row to ``csv_path`` as it completes."""
    config.validate()
    rows = []
    path = Path(csv_path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(ev.CSV_FIELDS)
        fh.flush()
        for row in iter_rows(config):
            writer.writerow(ev.metrics_csv_row(row))
            fh.flush()
            rows.append(row)
    return rows


# ---------------------------------------------------------------------------
# Reporting
# ---------------------------------------------------------------------------


class ReportError(ValueError):
    pass


@dataclass(frozen=True)
class SummaryRow:
    noise_target: str
    level: float
    policy: str
    n: int
    mae_median: float
    mae_se: float
    snr_mean: float
    pearson_median: float | None


def read_metrics_csv(path: Path | str) -> tuple[list[ev.MetricsRow], list[ev.MetricsRow]]:
    """Parse a results CSV into (ok rows, failed rows)."""
    ok, failed = [], []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(header[:8]) != ev.CSV_FIELDS[:8]:
            raise ReportError(f"{path}:1: unexpected header {header}")
        for lineno, rec in enumerate(reader, 2):
            if not rec:
                continue
            if len(rec) != len(header):
                raise ReportError(f"{path}:{lineno}: expected {len(header)} fields, got {len(rec)}")
            d = dict(zip(header, rec))
            status = d.get("status", "ok") or "ok"
            try:
                row = ev.MetricsRow(
                    d["noise_target"], float(d["noise_level"]), d["policy"], int(d["seed"]),
                    float(d["mae_bpm"]) if d["mae_bpm"] else math.nan,
                    float(d["snr_db"]) if d["snr_db"] else math.nan,
                    float(d["pearson_r"]) if d["pearson_r"] else None,
                    int(d["n_windows"]), status,
                )
            except ValueError as exc:
                raise ReportError(f"{path}:{lineno}: malformed row ({exc})") from None
            (ok if status == "ok" else failed).append(row)
    return ok, failed


def summarize(rows: Sequence[ev.MetricsRow]) -> list[SummaryRow]:
    groups: dict[tuple, list[ev.MetricsRow]] = {}
    for r in rows:
        groups.setdefault((r.noise_target, r.noise_level, r.policy), []).append(r)
    out = []
    for (target, level, policy), rs in sorted(groups.items()):
        maes = [r.mae_bpm for r in rs]
        se = statistics.stdev(maes) / math.sqrt(len(maes)) if len(maes) > 1 else 0.0
        snrs = [r.snr_db for r in rs if math.isfinite(r.snr_db)]
        rhos = [r.pearson_r for r in rs if r.pearson_r is not None]
        out.append(SummaryRow(target, level, policy, len(rs), statistics.median(maes), se,
                              statistics.fmean(snrs) if snrs else math.nan,
                              statistics.median(rhos) if rhos else None))
    return out


def markdown_table(summary: Sequence[SummaryRow], failed: Sequence[ev.MetricsRow] = ()) -> str:
    lines = [
        "| target | noise | policy | n | MAE median (bpm) | MAE SE | SNR mean (dB) | Pearson median |",
        "|---|---|---|---|---|---|---|---|",
    ]
    for s in summary:
        rho = "n/a" if s.pearson_median is None else f"{s.pearson_median:.3f}"
        lines.append(f"| {s.noise_target} | {s.level:g} | {s.policy} | {s.n} | {s.mae_median:.3f} "
                     f"| {s.mae_se:.3f} | {s.snr_mean:.2f} | {rho} |")
    if failed:
        lines.append("")
        lines.append(f"{len(failed)} failed cell(s) omitted from the aggregates:")
        for r in failed:
            lines.append(f"- {r.noise_target} level {r.noise_level:g}, {r.policy}, seed {r.seed}: {r.status}")
    return "\n".join(lines) + "\n"


_COLORS = {"fedavg": "#d62728", "fedweight": "#1f77b4"}


def svg_chart(summary: Sequence[SummaryRow], width: int = 560, height: int = 360) -> str:
    """MAE median vs noise level, one series per policy, standard-error bars."""
    left, right, top, bottom = 60, 130, 20, 50
    pw, ph = width - left - right, height - top - bottom
    levels = sorted({s.level for s in summary}) or [0.0]
    lo_x, hi_x = min(levels), max(levels)
    if hi_x == lo_x:
        lo_x, hi_x = lo_x - 0.5, hi_x + 0.5
    tops = [s.mae_median + s.mae_se for s in summary] or [1.0]
    hi_y = max(max(tops), 1e-9) * 1.1

    def sx(v):
        return left + (v - lo_x) / (hi_x - lo_x) * pw

    def sy(v):
        return top + ph - v / hi_y * ph

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="12">',
        f'<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="#444"/>',
    ]
    for i in range(5):
        v = hi_y * i / 4
        parts.append(f'<text x="{left - 6}" y="{sy(v) + 4:.1f}" text-anchor="end">{v:.2f}</text>')
    for v in levels:
        parts.append(f'<text x="{sx(v):.1f}" y="{top + ph + 16}" text-anchor="middle">{v:g}</text>')
    target = summary[0].noise_target if summary else "noise"
    parts.append(f'<text x="{left + pw / 2}" y="{height - 10}" text-anchor="middle">{target} noise level</text>')
    parts.append(f'<text x="14" y="{top + ph / 2}" text-anchor="middle" '
                 f'transform="rotate(-90 14 {top + ph / 2})">HR MAE (bpm)</text>')

    policies = sorted({s.policy for s in summary})
    for k, policy in enumerate(policies):
        color = _COLORS.get(policy, "#2ca02c")
        pts = sorted((s for s in summary if s.policy == policy), key=lambda s: s.level)
        path = " ".join(f"{sx(s.level):.1f},{sy(s.mae_median):.1f}" for s in pts)
        if len(pts) > 1:
            parts.append(f'<polyline points="{path}" fill="none" stroke="{color}" stroke-width="2"/>')
        for s in pts:
            x = sx(s.level)
            parts.append(f'<line x1="{x:.1f}" y1="{sy(s.mae_median - s.mae_se):.1f}" x2="{x:.1f}" '
                         f'y2="{sy(s.mae_median + s.mae_se):.1f}" stroke="{color}"/>')
            parts.append(f'<circle cx="{x:.1f}" cy="{sy(s.mae_median):.1f}" r="3.5" fill="{color}"/>')
        ly = top + 14 + 18 * k
        parts.append(f'<line x1="{left + pw + 12}" y1="{ly - 4}" x2="{left + pw + 32}" y2="{ly - 4}" '
                     f'stroke="{color}" stroke-width="2"/>')
        parts.append(f'<text x="{left + pw + 38}" y="{ly}">{policy}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def write_report(csv_path: Path | str, out_dir: Path | str | None = None) -> tuple[Path, Path]:
    ok, failed = read_metrics_csv(csv_path)
    summary = summarize(ok)
    out = Path(out_dir) if out_dir is not None else Path(csv_path).parent
    out.mkdir(parents=True, exist_ok=True)
    md = out / "report.md"
    svg = out / "mae_vs_noise.svg"
    md.write_text(markdown_table(summary, failed))
    svg.write_text(svg_chart(summary))
    return md, svg


def write_manifest(config: ExperimentConfig, path: Path | str, **extra) -> None:
    body = {"config": config.to_dict(), **extra}
    Path(path).write_text(json.dumps(body, indent=2, sort_keys=True) + "\n")
