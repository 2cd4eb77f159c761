"""Synthetic subjects: skin-patch videos with a programmed pulse, plus noise.

Each subject is a tiny RGB video whose pixels carry a sub-LSB pulse on top
of a static skin tone, paired with the standardized first difference of the
pulse as the training label. Camera noise and label noise are injected per
subject at a level drawn around the experiment's noise level.

Randomness comes from numpy's counter-based Philox generator keyed through
``SeedSequence``; normal variates are produced by Box-Muller from uniform
doubles so every call consumes a fixed number of draws.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .signal_core import PpgTrace

# Pulse amplitude on the [0, 1] intensity scale and its per-channel weights (R, G, B).
PULSE_AMPLITUDE = 2.0 / 255.0
CHANNEL_WEIGHTS = (0.6, 1.0, 0.4)
SKIN_BASE = (0.62, 0.45, 0.36)
TEXTURE_STD = 0.03
# Second-harmonic amplitude relative to the fundamental. The lambda=10
# detrend in the scoring pipeline is a ~1.5 Hz highpass at 30 fps, so
# anything much above 0.05 makes slow pulses (< 60 bpm) read at 2x HR.
HARMONIC_AMPLITUDE = 0.05

# Experiment video-noise levels (0.25 ... 1.5) are multiplied by this to get
# a standard deviation on the [0, 1] intensity scale.
VIDEO_NOISE_UNIT = 10.0 / 255.0
# Every recorded video, train or test, carries this much sensor noise.
# Without it clean difference frames are rank one and a model trained on
# them never has to learn to suppress pixel noise.
SENSOR_FLOOR = 0.02

VIDEO_LEVELS = (0.0, 0.25, 0.5, 0.75, 1.0, 1.25, 1.5)
LABEL_LEVELS = (0.0, 1.5, 2.5, 3.5, 4.5)

FORMAT_VERSION = 1

# Stream identifiers mixed into every derived seed.
_STREAM_SUBJECT = 1
_STREAM_VIDEO_NOISE = 2
_STREAM_LABEL_NOISE = 3
_STREAM_SIGMA = 4
_STREAM_HR = 5
_STREAM_FLOOR = 6


class NoiseTarget(str, enum.Enum):
    VIDEO = "video"
    LABEL = "label"
    NONE = "none"


def make_rng(*keys: int) -> np.random.Generator:
    """Philox generator keyed by a tuple of non-negative integers."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(k) for k in keys])))


def standard_normal(rng: np.random.Generator, size) -> np.ndarray:
    """Box-Muller normals; consumes exactly ``2 * ceil(n / 2)`` uniform doubles."""
    shape = (size,) if isinstance(size, int) else tuple(size)
    n = int(np.prod(shape))
    half = (n + 1) // 2
    u = rng.random(2 * half)
    radius = np.sqrt(-2.0 * np.log1p(-u[:half]))
    theta = 2.0 * np.pi * u[half:]
    z = np.concatenate([radius * np.cos(theta), radius * np.sin(theta)])
    return z[:n].reshape(shape)


# ---------------------------------------------------------------------------
# Records
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FrameSequence:
    """``T x H x W x C`` float32 intensities sampled at ``fps``."""

    frames: np.ndarray
    fps: float

    def __post_init__(self):
        f = self.frames
        if f.ndim != 4 or f.shape[0] < 2 or f.shape[1] < 1 or f.shape[2] < 1:
            raise ValueError(f"frames must be T x H x W x C with T >= 2, got {f.shape}")
        if not np.all(np.isfinite(f)):
            raise ValueError("frames contain non-finite values")
        if self.fps <= 0:
            raise ValueError(f"fps must be positive, got {self.fps}")

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return self.frames.shape


@dataclass(frozen=True)
class SubjectRecord:
    subject_id: int
    frames: FrameSequence
    label: PpgTrace
    hr_profile: tuple[float, ...]
    segment_frames: int
    sigma_video: float = 0.0
    sigma_label: float = 0.0

    def __post_init__(self):
        if len(self.label) != self.frames.shape[0] - 1:
            raise ValueError(
                f"label length {len(self.label)} != frames - 1 ({self.frames.shape[0] - 1})"
            )
        if self.label.fs != self.frames.fps:
            raise ValueError("label sampling rate must equal frame rate")
        if self.sigma_video < 0 or self.sigma_label < 0:
            raise ValueError("noise levels must be non-negative")

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    def true_hr_bpm(self) -> np.ndarray:
        """Programmed heart rate at every frame."""
        return hr_per_frame(self.hr_profile, self.segment_frames, self.n_frames)

    def sigma_for(self, target: NoiseTarget) -> float:
        if target == NoiseTarget.VIDEO:
            return self.sigma_video
        if target == NoiseTarget.LABEL:
            return self.sigma_label
        return 0.0


@dataclass(frozen=True)
class NoiseConfig:
    experiment_level: float
    target: NoiseTarget = NoiseTarget.VIDEO
    subject_std: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.experiment_level < 0:
            raise ValueError(f"experiment level must be >= 0, got {self.experiment_level}")
        if self.subject_std < 0:
            raise ValueError(f"subject std must be >= 0, got {self.subject_std}")


def hr_per_frame(profile: Sequence[float], segment_frames: int, n_frames: int) -> np.ndarray:
    idx = np.minimum(np.arange(n_frames) // segment_frames, len(profile) - 1)
    return np.asarray(profile, dtype=np.float64)[idx]


# ---------------------------------------------------------------------------
# Generation and noise
# ---------------------------------------------------------------------------


def sample_subject_noise(config: NoiseConfig, n_subjects: int) -> np.ndarray:
    """Per-subject noise levels drawn around the experiment level, floored at 0."""
    if n_subjects < 1:
        raise ValueError("n_subjects must be >= 1")
    rng = make_rng(config.seed, _STREAM_SIGMA)
    draws = config.experiment_level + config.subject_std * standard_normal(rng, n_subjects)
    return np.maximum(draws, 0.0)


def random_hr_profile(seed: int, subject_id: int, n_segments: int,
                      lo: float = 55.0, hi: float = 110.0, jitter: float = 6.0) -> tuple[float, ...]:
    """Piecewise-constant heart rates: a subject baseline plus per-segment jitter."""
    rng = make_rng(seed, subject_id, _STREAM_HR)
    base = lo + (hi - lo) * rng.random()
    steps = jitter * standard_normal(rng, n_segments)
    return tuple(float(v) for v in np.clip(np.round(base + steps, 2), 45.0, 145.0))


def pulse_waveform(hr_bpm: np.ndarray, fps: float, phase0: float = 0.0,
                   harmonic: float = HARMONIC_AMPLITUDE) -> np.ndarray:
    """Fundamental plus a weak second harmonic, with continuous phase."""
    freq = np.asarray(hr_bpm, dtype=np.float64) / 60.0
    phase = phase0 + 2.0 * np.pi * np.concatenate([[0.0], np.cumsum(freq[:-1])]) / fps
    return np.sin(phase) + harmonic * np.sin(2.0 * phase)


def generate_subject(
    subject_id: int,
    duration_s: float = 60.0,
    fps: float = 30.0,
    hw: tuple[int, int] = (8, 8),
    hr_profile: Sequence[float] = (72.0,),
    rng_seed: int = 0,
    segment_s: float = 12.0,
    pulse_amplitude: float = PULSE_AMPLITUDE,
) -> SubjectRecord:
    """Clean synthetic subject: static textured skin patch carrying the pulse.

    Every pixel is ``skin_base[c] + texture[h, w, c] + a[c] * ppg(t)`` where
    ``ppg`` follows ``hr_profile`` (one value per ``segment_s`` seconds). The
    label is the first difference of ``ppg``, standardized to zero mean and
    unit variance.
    """
    n_frames = int(round(duration_s * fps))
    if n_frames < 400:
        raise ValueError(f"duration {duration_s} s at {fps} fps gives {n_frames} frames; need >= 400")
    h, w = hw
    if h < 1 or w < 1:
        raise ValueError(f"frame size must be positive, got {hw}")
    if len(hr_profile) == 0:
        raise ValueError("hr_profile must be nonempty")
    segment_frames = max(1, int(round(segment_s * fps)))

    rng = make_rng(rng_seed, subject_id, _STREAM_SUBJECT)
    phase0 = 2.0 * np.pi * rng.random()
    tone = np.asarray(SKIN_BASE) + 0.04 * (rng.random(3) - 0.5)
    texture = TEXTURE_STD * standard_normal(rng, (h, w, 3))

    hr = hr_per_frame(hr_profile, segment_frames, n_frames)
    ppg = pulse_waveform(hr, fps, phase0)
    amp = pulse_amplitude * np.asarray(CHANNEL_WEIGHTS)
    frames = (tone + texture)[None] + ppg[:, None, None, None] * amp
    frames = np.clip(frames, 0.0, 1.0).astype(np.float32)

    label = np.diff(ppg)
    label = (label - label.mean()) / label.std()
    label = label.astype(np.float32).astype(np.float64)

    return SubjectRecord(
        subject_id=int(subject_id),
        frames=FrameSequence(frames, float(fps)),
        label=PpgTrace(label, float(fps)),
        hr_profile=tuple(float(v) for v in hr_profile),
        segment_frames=segment_frames,
    )


def add_video_noise(frames: FrameSequence, sigma: float, rng_seed) -> FrameSequence:
    """Add i.i.d. per-pixel, per-frame Gaussian noise, then clamp to [0, 1].

    ``sigma`` is on the normalized intensity scale. ``rng_seed`` is an int or
    a tuple of ints.
    """
    if sigma < 0:
        raise ValueError(f"sigma must be >= 0, got {sigma}")
    if sigma == 0:
        return frames
    keys = rng_seed if isinstance(rng_seed, tuple) else (rng_seed,)
    rng = make_rng(*keys, _STREAM_VIDEO_NOISE)
    noisy = frames.frames.astype(np.float64) + sigma * standard_normal(rng, frames.frames.shape)
    return FrameSequence(np.clip(noisy, 0.0, 1.0).astype(np.float32), frames.fps)


def add_label_noise(label: PpgTrace, sigma: float, rng_seed) -> PpgTrace:
    """Add i.i.d. Gaussian noise to every label sample (no clamping)."""
    if sigma < 0:
        raise ValueError(f"sigma must be >= 0, got {sigma}")
    if sigma == 0:
        return label
    keys = rng_seed if isinstance(rng_seed, tuple) else (rng_seed,)
    rng = make_rng(*keys, _STREAM_LABEL_NOISE)
    noisy = label.samples + sigma * standard_normal(rng, len(label))
    return PpgTrace(noisy.astype(np.float32).astype(np.float64), label.fs)


def apply_noise(record: SubjectRecord, target: NoiseTarget, sigma: float, seed: int,
                video_unit: float = VIDEO_NOISE_UNIT) -> SubjectRecord:
    """Corrupt one subject at level ``sigma`` (video levels in 8-bit units)."""
    key = (seed, record.subject_id)
    if target == NoiseTarget.VIDEO:
        frames = add_video_noise(record.frames, sigma * video_unit, key)
        return replace(record, frames=frames, sigma_video=float(sigma))
    if target == NoiseTarget.LABEL:
        label = add_label_noise(record.label, sigma, key)
        return replace(record, label=label, sigma_label=float(sigma))
    return record


@dataclass(frozen=True)
class DatasetConfig:
    n_subjects: int = 25
    duration_s: float = 60.0
    fps: float = 30.0
    hw: tuple[int, int] = (8, 8)
    seed: int = 0
    segment_s: float = 12.0
    video_unit: float = VIDEO_NOISE_UNIT
    sensor_floor: float = SENSOR_FLOOR
    noise: NoiseConfig = field(default_factory=lambda: NoiseConfig(0.0, NoiseTarget.NONE))

    def validate(self) -> None:
        if self.n_subjects < 1:
            raise ValueError(f"need at least one subject, got {self.n_subjects}")
        if self.hw[0] < 1 or self.hw[1] < 1:
            raise ValueError(f"frame size must be positive, got {self.hw}")
        if self.fps <= 0:
            raise ValueError(f"fps must be positive, got {self.fps}")
        if int(round(self.duration_s * self.fps)) < 400:
            raise ValueError("duration too short: need at least 400 frames")
        if self.sensor_floor < 0 or self.video_unit < 0:
            raise ValueError("noise scales must be non-negative")


def clean_subjects(config: DatasetConfig) -> list[SubjectRecord]:
    config.validate()
    n_frames = int(round(config.duration_s * config.fps))
    seg = max(1, int(round(config.segment_s * config.fps)))
    n_segments = math.ceil(n_frames / seg)
    return [
        generate_subject(
            sid, config.duration_s, config.fps, config.hw,
            random_hr_profile(config.seed, sid, n_segments),
            rng_seed=config.seed, segment_s=config.segment_s,
        )
        for sid in range(config.n_subjects)
    ]


def recorded_subjects(config: DatasetConfig) -> list[SubjectRecord]:
    """Clean subjects as a camera would record them: pulse plus sensor floor."""
    records = clean_subjects(config)
    if config.sensor_floor == 0:
        return records
    return [
        replace(rec, frames=add_video_noise(rec.frames, config.sensor_floor,
                                            (config.seed, rec.subject_id, _STREAM_FLOOR)))
        for rec in records
    ]


def build_dataset(config: DatasetConfig, noisy_ids: Sequence[int] | None = None) -> list[SubjectRecord]:
    """Generate all subjects and corrupt them per the noise protocol.

    ``noisy_ids`` restricts corruption to the given subjects (the training
    clients); the others keep only the sensor floor. Every subject still
    consumes its noise-level draw, so a subject's level does not depend on
    the split. Experiment level 0 is the uncorrupted baseline.
    """
    records = recorded_subjects(config)
    noise = config.noise
    if noise.target == NoiseTarget.NONE or noise.experiment_level == 0:
        return records
    sigmas = sample_subject_noise(replace(noise, seed=config.seed), config.n_subjects)
    keep = set(range(config.n_subjects)) if noisy_ids is None else set(noisy_ids)
    return [
        apply_noise(rec, noise.target, float(sigmas[rec.subject_id]), config.seed, config.video_unit)
        if rec.subject_id in keep else rec
        for rec in records
    ]


# ---------------------------------------------------------------------------
# Dataset directory I/O
# ---------------------------------------------------------------------------


class DatasetError(Exception):
    """Base class for dataset read failures; ``path`` names the offending file."""

    def __init__(self, message: str, path: Path | str | None = None):
        self.path = None if path is None else Path(path)
        super().__init__(f"{message}: {path}" if path is not None else message)


class NoSubjectsError(DatasetError):
    pass


class MalformedHeaderError(DatasetError):
    pass


class ShapeMismatchError(DatasetError):
    pass


class TruncatedPayloadError(DatasetError):
    pass


HEADER_NAME = "header.json"
FRAMES_NAME = "frames.f32"
LABEL_NAME = "label.f32"
_HEADER_KEYS = {
    "format_version": int, "subject_id": int, "T": int, "H": int, "W": int, "C": int,
    "fps": float, "sigma_video": float, "sigma_label": float,
    "hr_profile": list, "segment_frames": int,
}


def subject_dirname(subject_id: int) -> str:
    return f"subject_{subject_id:04d}"


def write_subject(record: SubjectRecord, root: Path | str) -> Path:
    t, h, w, c = record.frames.shape
    out = Path(root) / subject_dirname(record.subject_id)
    out.mkdir(parents=True, exist_ok=True)
    header = {
        "format_version": FORMAT_VERSION,
        "subject_id": record.subject_id,
        "T": t, "H": h, "W": w, "C": c,
        "fps": record.frames.fps,
        "sigma_video": record.sigma_video,
        "sigma_label": record.sigma_label,
        "hr_profile": list(record.hr_profile),
        "segment_frames": record.segment_frames,
    }
    (out / HEADER_NAME).write_text(json.dumps(header, indent=2, sort_keys=True) + "\n")
    (out / FRAMES_NAME).write_bytes(np.ascontiguousarray(record.frames.frames, dtype="<f4").tobytes())
    (out / LABEL_NAME).write_bytes(np.ascontiguousarray(record.label.samples, dtype="<f4").tobytes())
    return out


def write_dataset(records: Sequence[SubjectRecord], dir_path: Path | str) -> Path:
    root = Path(dir_path)
    root.mkdir(parents=True, exist_ok=True)
    for rec in records:
        write_subject(rec, root)
    return root


def _read_header(path: Path) -> dict:
    try:
        header = json.loads(path.read_text())
    except FileNotFoundError:
        raise MalformedHeaderError("missing header", path) from None
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise MalformedHeaderError(f"unparseable header ({exc})", path) from None
    if not isinstance(header, dict):
        raise MalformedHeaderError("header is not a JSON object", path)
    for key, kind in _HEADER_KEYS.items():
        if key not in header:
            raise MalformedHeaderError(f"header missing key {key!r}", path)
        value = header[key]
        ok = isinstance(value, (int, float)) and not isinstance(value, bool) if kind is float \
            else isinstance(value, kind) and not isinstance(value, bool)
        if not ok:
            raise MalformedHeaderError(f"header key {key!r} has wrong type", path)
    if header["format_version"] != FORMAT_VERSION:
        raise MalformedHeaderError(f"unsupported format version {header['format_version']}", path)
    if min(header["T"], header["H"], header["W"], header["C"]) < 1 or header["T"] < 2:
        raise MalformedHeaderError("non-positive dimensions", path)
    if not header["hr_profile"]:
        raise MalformedHeaderError("empty hr_profile", path)
    return header


def _read_payload(path: Path, count: int) -> np.ndarray:
    try:
        raw = path.read_bytes()
    except FileNotFoundError:
        raise TruncatedPayloadError("missing payload", path) from None
    expected = 4 * count
    if len(raw) < expected:
        raise TruncatedPayloadError(f"payload has {len(raw)} bytes, header implies {expected}", path)
    if len(raw) > expected:
        raise ShapeMismatchError(f"payload has {len(raw)} bytes, header implies {expected}", path)
    return np.frombuffer(raw, dtype="<f4").astype(np.float32)


def read_subject(subject_dir: Path | str) -> SubjectRecord:
    d = Path(subject_dir)
    header = _read_header(d / HEADER_NAME)
    t, h, w, c = header["T"], header["H"], header["W"], header["C"]
    frames = _read_payload(d / FRAMES_NAME, t * h * w * c).reshape(t, h, w, c)
    label = _read_payload(d / LABEL_NAME, t - 1).astype(np.float64)
    try:
        return SubjectRecord(
            subject_id=header["subject_id"],
            frames=FrameSequence(frames, float(header["fps"])),
            label=PpgTrace(label, float(header["fps"])),
            hr_profile=tuple(float(v) for v in header["hr_profile"]),
            segment_frames=header["segment_frames"],
            sigma_video=float(header["sigma_video"]),
            sigma_label=float(header["sigma_label"]),
        )
    except ValueError as exc:
        raise ShapeMismatchError(str(exc), d) from None


def read_dataset(dir_path: Path | str) -> list[SubjectRecord]:
    root = Path(dir_path)
    dirs = sorted(p for p in root.glob("subject_*") if p.is_dir()) if root.is_dir() else []
    if not dirs:
        raise NoSubjectsError("no subjects found", root)
    return [read_subject(d) for d in dirs]
