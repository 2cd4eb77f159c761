"""Heart-rate scoring of a trained model on held-out subjects.

Predicted and reference derivative traces go through the same pipeline:
integrate, detrend (lambda=10), cut into 360-frame windows, bandpass
0.75-2.5 Hz, and pick the spectral peak. Per window we keep the predicted
and true heart rate and the SNR of the predicted waveform at the true rate.
"""

from __future__ import annotations

import csv
import enum
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import model as mdl
from . import signal_core as sc
from .model import ModelParams
from .synth import FrameSequence, SubjectRecord

EVAL_WINDOW = 360
DETREND_LAMBDA = 10.0
GLOBAL_DETREND_LIMIT = 2000
HR_RANGE_BPM = (40.0, 150.0)


class EvaluationError(ValueError):
    pass


class TruthMode(str, enum.Enum):
    PROGRAMMED = "programmed"
    ESTIMATED = "estimated"


@dataclass(frozen=True)
class EvalWindow:
    subject_id: int
    window_index: int
    pred_hr_bpm: float
    true_hr_bpm: float
    snr_db: float


@dataclass(frozen=True)
class MetricsRow:
    noise_target: str
    noise_level: float
    policy: str
    seed: int
    mae_bpm: float
    snr_db: float
    pearson_r: float | None
    n_windows: int
    status: str = "ok"


CSV_FIELDS = ("noise_target", "noise_level", "policy", "seed", "mae_bpm", "snr_db",
              "pearson_r", "n_windows", "status")


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        if math.isnan(value):
            return ""
        return repr(round(value, 6))
    return str(value)


def metrics_csv_row(row: MetricsRow) -> list[str]:
    d = asdict(row)
    return [_fmt(d[k]) for k in CSV_FIELDS]


def write_metrics_csv(rows: Sequence[MetricsRow], path: Path | str) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_FIELDS)
        for row in rows:
            w.writerow(metrics_csv_row(row))


def predict_trace(params: ModelParams, frames: FrameSequence) -> sc.PpgTrace:
    """Model output for every difference frame of a video, at the video fps."""
    if frames.shape[0] < 21:
        raise EvaluationError(f"need at least 21 frames, got {frames.shape[0]}")
    x = mdl.make_difference_frames(frames)
    return sc.PpgTrace(mdl.forward(params, x), frames.fps)


def _waveform(trace: sc.PpgTrace, window: int) -> np.ndarray:
    integrated = sc.cumulative_sum(trace)
    n = len(integrated)
    if n <= GLOBAL_DETREND_LIMIT:
        return sc.detrend(integrated, DETREND_LAMBDA).samples
    out = integrated.samples.copy()
    for start in range(0, (n // window) * window, window):
        seg = integrated.with_samples(integrated.samples[start:start + window])
        out[start:start + window] = sc.detrend(seg, DETREND_LAMBDA).samples
    return out


def window_true_hr(true_hr: Sequence[float], n_windows: int, window: int = EVAL_WINDOW) -> np.ndarray:
    hr = np.asarray(true_hr, dtype=np.float64)
    return np.array([hr[i * window:(i + 1) * window].mean() for i in range(n_windows)])


def postprocess_and_score(pred: sc.PpgTrace, truth: sc.PpgTrace, true_hr: Sequence[float] | None = None,
                          subject_id: int = 0, window: int = EVAL_WINDOW) -> list[EvalWindow]:
    """Per-window heart rates and SNR for a predicted and a reference trace.

    ``true_hr`` gives the programmed rate per sample of the traces; when it
    is None the reference rate is estimated from ``truth`` instead. The
    trailing partial window is discarded.
    """
    if len(pred) != len(truth):
        raise EvaluationError(f"pred has {len(pred)} samples, truth has {len(truth)}")
    if len(pred) < window:
        raise EvaluationError(f"trace of {len(pred)} samples is shorter than one {window}-sample window")
    fs = pred.fs
    band = sc.BandpassSpec(fs=fs)
    n_windows = len(pred) // window
    pred_wave = _waveform(pred, window)
    truth_wave = _waveform(truth, window)
    programmed = None if true_hr is None else window_true_hr(true_hr, n_windows, window)

    out = []
    for i in range(n_windows):
        sl = slice(i * window, (i + 1) * window)
        p = sc.butterworth_bandpass(sc.PpgTrace(pred_wave[sl], fs), band)
        if programmed is None:
            t = sc.butterworth_bandpass(sc.PpgTrace(truth_wave[sl], fs), band)
            hr_true = sc.estimate_hr(t, *HR_RANGE_BPM)
        else:
            hr_true = float(programmed[i])
        hr_pred = sc.estimate_hr(p, *HR_RANGE_BPM)
        snr = sc.snr_db(p, hr_true) if np.any(p.samples != 0) else -math.inf
        out.append(EvalWindow(subject_id, i, hr_pred, hr_true, snr))
    return out


def score_subject(params: ModelParams, record: SubjectRecord,
                  truth_mode: TruthMode = TruthMode.PROGRAMMED) -> list[EvalWindow]:
    pred = predict_trace(params, record.frames)
    true_hr = record.true_hr_bpm()[:-1] if truth_mode == TruthMode.PROGRAMMED else None
    return postprocess_and_score(pred, record.label, true_hr, record.subject_id)


@dataclass(frozen=True)
class RunScore:
    mae_bpm: float
    snr_db: float
    pearson_r: float | None
    windows: tuple[EvalWindow, ...]

    @property
    def n_windows(self) -> int:
        return len(self.windows)


def pool_windows(windows: Sequence[EvalWindow]) -> RunScore:
    if not windows:
        raise EvaluationError("no evaluation windows")
    pred = [w.pred_hr_bpm for w in windows]
    true = [w.true_hr_bpm for w in windows]
    snrs = np.array([w.snr_db for w in windows])
    finite = snrs[np.isfinite(snrs)]
    try:
        r = sc.pearson(pred, true)
    except sc.SignalError:
        r = None
    return RunScore(sc.mae(pred, true), float(finite.mean()) if finite.size else math.nan, r, tuple(windows))


def score_run(params: ModelParams, heldout: Sequence[SubjectRecord],
              truth_mode: TruthMode = TruthMode.PROGRAMMED) -> RunScore:
    """Pool per-window results over all held-out subjects."""
    if not heldout:
        raise EvaluationError("no held-out subjects")
    windows = []
    for rec in heldout:
        windows.extend(score_subject(params, rec, truth_mode))
    return pool_windows(windows)


def split_subjects(ids: Sequence[int], eval_fraction: float = 0.2) -> tuple[list[int], list[int]]:
    """Deterministic train/eval partition by id: the top ``eval_fraction`` go to eval."""
    ordered = sorted(ids)
    n_eval = max(1, int(round(eval_fraction * len(ordered))))
    if n_eval >= len(ordered):
        raise EvaluationError("split leaves no training subjects")
    return ordered[:-n_eval], ordered[-n_eval:]
