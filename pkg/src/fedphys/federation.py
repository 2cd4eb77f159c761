"""Federated rounds with FedAvg and signal-quality-weighted aggregation.

Each round the server samples clients, every selected client trains a copy
of the global model on its own windows and reports its parameters together
with a raw quality score, and the server replaces the global model by a
convex combination of the returned tensors. FedAvg uses uniform weights;
FedWeight uses each client's quality normalized over the round's
participants.

Messages can be routed through the binary wire format (``transport="bytes"``)
to check that nothing depends on in-memory sharing.
"""

from __future__ import annotations

import enum
import json
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import model as mdl
from .model import Layer, ModelParams
from .synth import NoiseTarget, SubjectRecord, make_rng

log = logging.getLogger(__name__)

QUALITY_EPS = 0.05


class Policy(str, enum.Enum):
    FEDAVG = "fedavg"
    FEDWEIGHT = "fedweight"


class QualityMap(str, enum.Enum):
    INVERSE = "inverse"
    MAXMINUS = "maxminus"
    LITERAL = "literal"


class AggregationError(ValueError):
    pass


def compute_quality(sigma_s: float, quality_map: QualityMap = QualityMap.INVERSE,
                    sigma_max: float | None = None, eps: float = QUALITY_EPS) -> float:
    """Raw quality score for a client with noise level ``sigma_s``.

    ``inverse``: ``1 / (sigma + eps)``; ``maxminus``: ``sigma_max - sigma + eps``
    (``sigma_max`` is the largest level in the population); ``literal``:
    the noise level itself.
    """
    if sigma_s < 0:
        raise ValueError(f"sigma must be >= 0, got {sigma_s}")
    quality_map = QualityMap(quality_map)
    if quality_map == QualityMap.INVERSE:
        return 1.0 / (sigma_s + eps)
    if quality_map == QualityMap.MAXMINUS:
        if sigma_max is None:
            raise ValueError("maxminus quality map needs sigma_max")
        return max(sigma_max - sigma_s, 0.0) + eps
    return float(sigma_s)


def normalize_qualities(raw: Sequence[float]) -> np.ndarray:
    q = np.asarray(raw, dtype=np.float64)
    if q.size == 0:
        raise AggregationError("no participants to weight")
    if np.any(q < 0) or not np.all(np.isfinite(q)):
        raise AggregationError("quality scores must be finite and non-negative")
    total = q.sum()
    if total <= 0 or np.all(q == q[0]):
        # indistinguishable clients get exactly the FedAvg weights
        return np.full(q.size, 1.0 / q.size)
    return q / total


# ---------------------------------------------------------------------------
# Messages and server state
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ClientUpdateMsg:
    round_id: int
    client_id: int
    params: ModelParams
    quality_raw: float
    n_samples: int
    loss: float = math.nan
    failed: bool = False


@dataclass(frozen=True)
class RoundConfig:
    n_rounds: int = 7
    client_fraction: float = 1.0
    local_steps: int | None = None  # None: one pass over the client's windows
    batch_windows: int = 1
    policy: Policy = Policy.FEDWEIGHT
    quality_map: QualityMap = QualityMap.INVERSE
    quality_target: NoiseTarget = NoiseTarget.VIDEO
    weight_by_samples: bool = False
    lr: float = 1e-3
    window: int = mdl.WINDOW
    hidden: int = mdl.HIDDEN
    seed: int = 0
    transport: str = "memory"

    def validate(self) -> None:
        if self.n_rounds < 0:
            raise ValueError(f"n_rounds must be >= 0, got {self.n_rounds}")
        if not (0 < self.client_fraction <= 1):
            raise ValueError(f"client_fraction must lie in (0, 1], got {self.client_fraction}")
        if self.local_steps is not None and self.local_steps < 0:
            raise ValueError("local_steps must be >= 0")
        if self.batch_windows < 1:
            raise ValueError("batch_windows must be >= 1")
        if self.transport not in ("memory", "bytes"):
            raise ValueError(f"unknown transport {self.transport!r}")


@dataclass(frozen=True)
class RoundLog:
    round_id: int
    participants: tuple[int, ...]
    weights: tuple[float, ...]
    mean_client_loss: float
    failed: tuple[int, ...] = ()

    def to_json(self) -> str:
        return json.dumps({
            "round_id": self.round_id,
            "participants": list(self.participants),
            "weights": list(self.weights),
            "mean_client_loss": None if math.isnan(self.mean_client_loss) else self.mean_client_loss,
            "failed": list(self.failed),
        }, sort_keys=True)


@dataclass
class ServerState:
    global_params: ModelParams
    round: int = 0
    history: list[RoundLog] = field(default_factory=list)


def write_history(history: Sequence[RoundLog], path: Path | str) -> None:
    Path(path).write_text("".join(h.to_json() + "\n" for h in history))


# ---------------------------------------------------------------------------
# Round operations
# ---------------------------------------------------------------------------


def select_clients(all_clients: Sequence[int], fraction: float, seed: int, round_id: int) -> list[int]:
    """``ceil(fraction * N)`` clients without replacement, in ascending id order."""
    if len(all_clients) == 0:
        raise ValueError("empty client pool")
    if not (0 < fraction <= 1):
        raise ValueError(f"fraction must lie in (0, 1], got {fraction}")
    pool = sorted(all_clients)
    k = math.ceil(fraction * len(pool) - 1e-12)
    if k >= len(pool):
        return pool
    rng = make_rng(seed, round_id, 11)
    chosen = rng.choice(len(pool), size=k, replace=False)
    return sorted(pool[i] for i in chosen)


@dataclass(frozen=True)
class ClientData:
    """What one client holds locally: its windows and its noise level."""

    client_id: int
    windows: tuple[mdl.TrainingWindow, ...]
    sigma: float

    @classmethod
    def from_record(cls, record: SubjectRecord, target: NoiseTarget, window: int = mdl.WINDOW) -> "ClientData":
        x = mdl.make_difference_frames(record.frames)
        y = record.label.samples
        y = (y - y.mean()) / y.std() if y.std() > 0 else y - y.mean()
        return cls(record.subject_id, tuple(mdl.make_windows(x, y, window)), record.sigma_for(target))


def client_update(client: ClientData, global_params: ModelParams, config: RoundConfig,
                  round_id: int, quality_raw: float) -> ClientUpdateMsg:
    """Local Adam training from the broadcast parameters.

    The optimizer starts fresh every round. Windows are visited in a
    shuffled order determined by ``(seed, round, client)``.
    """
    if not client.windows:
        raise ValueError(f"client {client.client_id} has no training windows")
    n_windows = len(client.windows)
    batch = min(config.batch_windows, n_windows)
    steps = math.ceil(n_windows / batch) if config.local_steps is None else config.local_steps
    trainer = mdl.FlatTrainer(global_params, config.lr)
    rng = make_rng(config.seed, round_id, client.client_id, 13)
    per_pass = n_windows // batch
    order = np.concatenate([rng.permutation(n_windows)[:per_pass * batch]
                            for _ in range(max(1, math.ceil(steps / max(per_pass, 1))))])

    losses = []
    try:
        for i in range(steps):
            idx = order[i * batch:(i + 1) * batch]
            if batch == 1:
                win = client.windows[idx[0]]
                x, y = win.inputs, win.target
            else:
                x = np.concatenate([client.windows[j].inputs for j in idx])
                y = np.concatenate([client.windows[j].target for j in idx])
            losses.append(trainer.train_step(x, y))
    except mdl.NumericalOverflowError:
        log.warning("client %d overflowed in round %d", client.client_id, round_id)
        return ClientUpdateMsg(round_id, client.client_id, global_params, quality_raw,
                               n_windows, math.nan, failed=True)
    params = trainer.params() if steps else global_params.copy()
    mean_loss = float(np.mean(losses)) if losses else math.nan
    return ClientUpdateMsg(round_id, client.client_id, params, quality_raw, n_windows, mean_loss)


def aggregation_weights(updates: Sequence[ClientUpdateMsg], policy: Policy,
                        weight_by_samples: bool = False) -> np.ndarray:
    if len(updates) == 0:
        raise AggregationError("zero participants")
    policy = Policy(policy)
    if policy == Policy.FEDAVG:
        raw = np.ones(len(updates))
    else:
        raw = np.array([u.quality_raw for u in updates], dtype=np.float64)
    if weight_by_samples:
        raw = raw * np.array([u.n_samples for u in updates], dtype=np.float64)
    return normalize_qualities(raw)


def aggregate(updates: Sequence[ClientUpdateMsg], policy: Policy = Policy.FEDWEIGHT,
              weight_by_samples: bool = False) -> tuple[ModelParams, np.ndarray]:
    """Convex combination of every client tensor.

    Returns the aggregated parameters and the weights used, ordered by
    ascending client id (also the summation order).
    """
    live = sorted((u for u in updates if not u.failed), key=lambda u: u.client_id)
    if not live:
        raise AggregationError("zero participants")
    ref = live[0].params
    for u in live[1:]:
        try:
            mdl.check_congruent(ref, u.params)
        except ValueError as exc:
            raise AggregationError(f"client {u.client_id}: {exc}") from None
    lam = aggregation_weights(live, policy, weight_by_samples)

    layers = []
    for k, layer in enumerate(ref.layers):
        w = np.zeros_like(layer.weight)
        b = np.zeros_like(layer.bias)
        for weight, u in zip(lam, live):
            w += weight * u.params.layers[k].weight
            b += weight * u.params.layers[k].bias
        layers.append(Layer(layer.name, w, b))
    return ModelParams(tuple(layers)), lam


def run_federation(clients: Sequence[ClientData], config: RoundConfig,
                   init: ModelParams | None = None) -> tuple[ModelParams, list[RoundLog]]:
    """Run ``config.n_rounds`` rounds of select, local update, aggregate."""
    config.validate()
    if not clients:
        raise ValueError("dataset has no clients")
    by_id = {c.client_id: c for c in clients}
    input_dim = clients[0].windows[0].inputs.shape[1]
    params = init if init is not None else mdl.init_params(input_dim, config.hidden, config.seed)
    sigma_max = max(c.sigma for c in clients)
    state = ServerState(params)

    for round_id in range(1, config.n_rounds + 1):
        chosen = select_clients(list(by_id), config.client_fraction, config.seed, round_id)
        broadcast = state.global_params
        if config.transport == "bytes":
            broadcast = deserialize_checkpoint(serialize_checkpoint(broadcast))
        updates = []
        for cid in chosen:
            client = by_id[cid]
            q = compute_quality(client.sigma, config.quality_map, sigma_max)
            msg = client_update(client, broadcast, config, round_id, q)
            if config.transport == "bytes":
                msg = decode_update(encode_update(msg))
            updates.append(msg)
        failed = tuple(u.client_id for u in updates if u.failed)
        new_params, lam = aggregate(updates, config.policy, config.weight_by_samples)
        live = sorted(u.client_id for u in updates if not u.failed)
        losses = [u.loss for u in updates if not u.failed]
        state.global_params = new_params
        state.round = round_id
        state.history.append(RoundLog(round_id, tuple(live), tuple(float(v) for v in lam),
                                      float(np.mean(losses)) if losses else math.nan, failed))
        log.debug("round %d: %d clients, mean loss %.4f", round_id, len(live), state.history[-1].mean_client_loss)
    return state.global_params, state.history


# ---------------------------------------------------------------------------
# Wire formats
# ---------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"FWCK"
CHECKPOINT_VERSION = 1
UPDATE_MAGIC = b"FWUP"
UPDATE_VERSION = 1


class CheckpointError(ValueError):
    pass


class BadMagicError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass


def _pack_tensor(arr: np.ndarray) -> bytes:
    shape = arr.shape
    return (struct.pack("<I", len(shape)) + struct.pack(f"<{len(shape)}Q", *shape)
            + np.ascontiguousarray(arr, dtype="<f8").tobytes())


def serialize_checkpoint(params: ModelParams) -> bytes:
    """Binary checkpoint; see CHECKPOINT.md for the byte layout."""
    out = [CHECKPOINT_MAGIC, struct.pack("<HI", CHECKPOINT_VERSION, len(params.layers))]
    for layer in params.layers:
        name = layer.name.encode("utf-8")
        out.append(struct.pack("<H", len(name)) + name)
        out.append(_pack_tensor(layer.weight))
        out.append(_pack_tensor(layer.bias))
    return b"".join(out)


class _Reader:
    def __init__(self, data: bytes):
        self.data = memoryview(data)
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedCheckpointError(
                f"truncated payload: need {n} bytes at offset {self.pos}, have {len(self.data) - self.pos}")
        chunk = self.data[self.pos:self.pos + n].tobytes()
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def tensor(self) -> np.ndarray:
        (ndim,) = self.unpack("<I")
        if ndim > 8:
            raise CheckpointError(f"implausible tensor rank {ndim}")
        shape = self.unpack(f"<{ndim}Q") if ndim else ()
        count = int(np.prod(shape)) if ndim else 1
        return np.frombuffer(self.take(8 * count), dtype="<f8").astype(np.float64).reshape(shape)


def _read_checkpoint(reader: _Reader) -> ModelParams:
    magic = reader.take(4)
    if magic != CHECKPOINT_MAGIC:
        raise BadMagicError(f"bad magic {magic!r}")
    version, n_layers = reader.unpack("<HI")
    if version != CHECKPOINT_VERSION:
        raise VersionMismatchError(f"checkpoint version {version}, expected {CHECKPOINT_VERSION}")
    layers = []
    for _ in range(n_layers):
        (n_name,) = reader.unpack("<H")
        name = reader.take(n_name).decode("utf-8")
        layers.append(Layer(name, reader.tensor(), reader.tensor()))
    return ModelParams(tuple(layers))


def deserialize_checkpoint(data: bytes) -> ModelParams:
    reader = _Reader(data)
    params = _read_checkpoint(reader)
    if reader.pos != len(reader.data):
        raise CheckpointError(f"{len(reader.data) - reader.pos} trailing bytes after checkpoint")
    return params


def encode_update(msg: ClientUpdateMsg) -> bytes:
    head = struct.pack("<4sHqqddqB", UPDATE_MAGIC, UPDATE_VERSION, msg.round_id, msg.client_id,
                       msg.quality_raw, msg.loss, msg.n_samples, int(msg.failed))
    return head + serialize_checkpoint(msg.params)


def decode_update(data: bytes) -> ClientUpdateMsg:
    reader = _Reader(data)
    magic, version, round_id, client_id, quality, loss, n_samples, failed = reader.unpack("<4sHqqddqB")
    if magic != UPDATE_MAGIC:
        raise BadMagicError(f"bad magic {magic!r}")
    if version != UPDATE_VERSION:
        raise VersionMismatchError(f"update version {version}, expected {UPDATE_VERSION}")
    params = _read_checkpoint(reader)
    if reader.pos != len(reader.data):
        raise CheckpointError("trailing bytes after update")
    return ClientUpdateMsg(round_id, client_id, params, quality, n_samples, loss, bool(failed))
