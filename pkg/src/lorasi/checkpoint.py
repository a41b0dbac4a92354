"""Versioned binary checkpoints for a training run.

Layout (little-endian)::

    8 bytes   magic  b"LSICKPT\\0"
    u32       format version
    u64       header length in bytes
    header    UTF-8 JSON document; arrays appear as {"__nd__": index, "shape": [...]}
    payload   the referenced arrays, float64 '<f8', concatenated in index order

Python floats go through JSON, whose shortest repr round-trips exactly, and
arrays are stored as raw bytes, so save/load is lossless.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from .importance import ImportanceState, LayerImportance
from .lora import LoraAdapter
from .model import ToyModel
from .regularizer import LayerWeightVector
from .tasks import TaskPair, TaskSpec, gen_task_pair
from .trainer import Adam, EvalRow, Penalty, RunReport, StepRow, Trainer, TrainConfig

__all__ = [
    "FORMAT_VERSION",
    "MAGIC",
    "CheckpointError",
    "CheckpointVersionError",
    "AdapterState",
    "Checkpoint",
    "save_checkpoint",
    "load_checkpoint",
    "checkpoint_from_trainer",
    "restore_trainer",
]

MAGIC = b"LSICKPT\0"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<8sIQ")


class CheckpointError(ValueError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


@dataclass
class AdapterState:
    theta0_digest: str
    B: np.ndarray
    A: np.ndarray
    alpha: float
    rank: int
    scaling_mode: str


@dataclass(eq=False)
class Checkpoint:
    config: TrainConfig
    arch: dict
    adapters: dict[str, AdapterState]
    importance: ImportanceState
    progress: dict
    rng: dict
    task: dict
    report: RunReport = field(default_factory=RunReport)
    optimizer: dict | None = None
    penalty: dict | None = None
    version: int = FORMAT_VERSION

    def __eq__(self, other) -> bool:
        if not isinstance(other, Checkpoint):
            return NotImplemented
        return _same(_document(self), _document(other)) and self.version == other.version


def _same(x: Any, y: Any) -> bool:
    """Structural equality; arrays and floats compare bit for bit."""
    if isinstance(x, np.ndarray) or isinstance(y, np.ndarray):
        return (
            isinstance(x, np.ndarray)
            and isinstance(y, np.ndarray)
            and x.shape == y.shape
            and np.asarray(x, "<f8").tobytes() == np.asarray(y, "<f8").tobytes()
        )
    if isinstance(x, dict):
        return isinstance(y, dict) and x.keys() == y.keys() and all(_same(x[k], y[k]) for k in x)
    if isinstance(x, (list, tuple)):
        return isinstance(y, (list, tuple)) and len(x) == len(y) and all(map(_same, x, y))
    if isinstance(x, float) or isinstance(y, float):
        return struct.pack("<d", x) == struct.pack("<d", y)
    return x == y


# -- flattening -------------------------------------------------------------


def _encode(obj: Any, arrays: list[np.ndarray]) -> Any:
    if isinstance(obj, np.ndarray):
        arrays.append(np.ascontiguousarray(obj, dtype="<f8"))
        return {"__nd__": len(arrays) - 1, "shape": list(obj.shape)}
    if isinstance(obj, dict):
        return {str(k): _encode(v, arrays) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_encode(v, arrays) for v in obj]
    if isinstance(obj, (np.floating, np.integer, np.bool_)):
        return obj.item()
    return obj


def _decode(obj: Any, arrays: list[np.ndarray]) -> Any:
    if isinstance(obj, dict):
        if "__nd__" in obj:
            return arrays[obj["__nd__"]]
        return {k: _decode(v, arrays) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_decode(v, arrays) for v in obj]
    return obj


def _document(ck: Checkpoint) -> dict:
    imp = ck.importance
    return {
        "config": ck.config.to_dict(),
        "arch": ck.arch,
        "adapters": {lid: vars(a) for lid, a in ck.adapters.items()},
        "importance": {
            "tasks_consolidated": imp.tasks_consolidated,
            "layers": {lid: vars(l) for lid, l in imp.layers.items()},
        },
        "progress": ck.progress,
        "rng": ck.rng,
        "task": ck.task,
        "optimizer": ck.optimizer,
        "penalty": ck.penalty,
        "report": {
            "steps": [list(r) for r in ck.report.steps],
            "evals": [list(r) for r in ck.report.evals],
            "summary": ck.report.summary,
        },
    }


def _flatten(ck: Checkpoint) -> tuple[dict, list[np.ndarray]]:
    arrays: list[np.ndarray] = []
    return _encode(_document(ck), arrays), arrays


def _from_document(doc: dict, version: int) -> Checkpoint:
    imp = doc["importance"]
    rep = doc["report"]
    return Checkpoint(
        config=TrainConfig.from_dict(doc["config"]),
        arch=doc["arch"],
        adapters={lid: AdapterState(**a) for lid, a in doc["adapters"].items()},
        importance=ImportanceState(
            {lid: LayerImportance(**l) for lid, l in imp["layers"].items()}, imp["tasks_consolidated"]
        ),
        progress=doc["progress"],
        rng=doc["rng"],
        task=doc["task"],
        report=RunReport(
            [StepRow(*r) for r in rep["steps"]], [EvalRow(*r) for r in rep["evals"]], rep["summary"]
        ),
        optimizer=doc["optimizer"],
        penalty=doc["penalty"],
        version=version,
    )


# -- file io ----------------------------------------------------------------


def save_checkpoint(path: str | Path, ck: Checkpoint) -> int:
    """Write atomically; returns the number of bytes written."""
    header, arrays = _flatten(ck)
    payload = b"".join(a.tobytes() for a in arrays)
    header["payload_sha256"] = hashlib.sha256(payload).hexdigest()
    blob = json.dumps(header).encode()
    data = _PREFIX.pack(MAGIC, ck.version, len(blob)) + blob + payload
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise
    return len(data)


def load_checkpoint(path: str | Path, model: ToyModel | None = None) -> Checkpoint:
    """Read a checkpoint; with ``model`` given, also verify the base-weight digests."""
    data = Path(path).read_bytes()
    if len(data) < _PREFIX.size:
        raise CheckpointError(f"{path}: truncated (no header)")
    magic, version, hlen = _PREFIX.unpack_from(data)
    if magic != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(f"{path}: format version {version}, this build reads {FORMAT_VERSION}")
    start = _PREFIX.size
    if len(data) < start + hlen:
        raise CheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(data[start : start + hlen])
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: corrupt header: {e}") from e

    shapes: list[tuple[int, list[int]]] = []

    def collect(obj):
        if isinstance(obj, dict):
            if "__nd__" in obj:
                shapes.append((obj["__nd__"], obj["shape"]))
            else:
                for v in obj.values():
                    collect(v)
        elif isinstance(obj, list):
            for v in obj:
                collect(v)

    collect(header)
    shapes.sort()
    offset = start + hlen
    expected = offset + sum(8 * int(np.prod(s)) for _, s in shapes)
    if len(data) != expected:
        kind = "truncated" if len(data) < expected else "has trailing bytes"
        raise CheckpointError(f"{path}: payload {kind} ({len(data)} bytes, expected {expected})")
    if hashlib.sha256(data[offset:]).hexdigest() != header.pop("payload_sha256", None):
        raise CheckpointError(f"{path}: payload checksum mismatch")
    arrays = []
    for _, shape in shapes:
        n = int(np.prod(shape))
        arrays.append(np.frombuffer(data, dtype="<f8", count=n, offset=offset).reshape(shape).astype(np.float64))
        offset += 8 * n
    ck = _from_document(_decode(header, arrays), version)
    if model is not None:
        verify_base(ck, model)
    return ck


def verify_base(ck: Checkpoint, model: ToyModel) -> None:
    if set(ck.adapters) != set(model.adapters):
        raise CheckpointError("checkpoint layers do not match the model")
    for lid, a in ck.adapters.items():
        if model.theta0_digest(lid) != a.theta0_digest:
            raise CheckpointError(f"{lid}: base weight digest mismatch")


# -- trainer state ----------------------------------------------------------


def checkpoint_from_trainer(trainer: Trainer) -> Checkpoint:
    m = trainer.model
    adapters = {
        lid: AdapterState(m.theta0_digest(lid), a.B.copy(), a.A.copy(), a.alpha, a.rank, a.scaling_mode.value)
        for lid, a in m.adapters.items()
    }
    pen = trainer.penalty
    penalty = None
    if pen is not None:
        penalty = {
            "anchors": dict(pen.anchors),
            "importance": dict(pen.importance),
            "weights": [list(pen.weights.layer_ids), list(pen.weights.weights)],
            "phi": pen.phi,
        }
    rep = trainer.report
    return Checkpoint(
        config=trainer.config,
        arch=m.arch(),
        adapters=adapters,
        importance=trainer.importance.snapshot(),
        progress={
            "phase_idx": trainer.phase_idx,
            "epoch": trainer.epoch,
            "batch_idx": trainer.batch_idx,
            "step": trainer.step,
            "started": trainer.started,
            "in_phase": trainer.in_phase,
        },
        rng={
            "seed": trainer.config.seed,
            "epoch_seed": "SeedSequence([seed, phase_tag, epoch])",
            "model_seed": m.config.seed,
        },
        task={
            "generator": trainer.pair.spec.generator,
            "params": dict(trainer.pair.spec.params),
            "seed": trainer.pair.spec.seed,
        },
        report=RunReport(list(rep.steps), list(rep.evals), json.loads(json.dumps(rep.summary))),
        optimizer=None if trainer.opt is None else trainer.opt.state(),
        penalty=penalty,
    )


def restore_trainer(ck: Checkpoint, pair: TaskPair | None = None) -> Trainer:
    """Rebuild a trainer that continues exactly where the checkpoint stopped."""
    if pair is None:
        pair = gen_task_pair(TaskSpec(ck.task["generator"], ck.task["params"], ck.task["seed"]))
    trainer = Trainer(ck.config, pair)
    model = trainer.model
    if model.arch() != ck.arch:
        raise CheckpointError("checkpoint architecture does not match its config")
    verify_base(ck, model)
    for lid, st in ck.adapters.items():
        a: LoraAdapter = model.adapters[lid]
        if (st.rank, st.alpha, st.scaling_mode) != (a.rank, a.alpha, a.scaling_mode.value):
            raise CheckpointError(f"{lid}: adapter scaling does not match the config")
        model.adapters[lid] = a.with_factors(st.B.copy(), st.A.copy())
    trainer.importance = ck.importance.snapshot()
    p = ck.progress
    trainer.phase_idx, trainer.epoch, trainer.batch_idx = p["phase_idx"], p["epoch"], p["batch_idx"]
    trainer.step, trainer.started, trainer.in_phase = p["step"], p["started"], p["in_phase"]
    trainer.opt = None if ck.optimizer is None else Adam.from_state(ck.optimizer)
    if ck.penalty is not None:
        ids, w = ck.penalty["weights"]
        trainer.penalty = Penalty(
            dict(ck.penalty["anchors"]),
            dict(ck.penalty["importance"]),
            LayerWeightVector(tuple(ids), tuple(w)),
            ck.penalty["phi"],
        )
    trainer.report = RunReport(list(ck.report.steps), list(ck.report.evals), json.loads(json.dumps(ck.report.summary)))
    return trainer
