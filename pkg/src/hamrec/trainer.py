"""BPR training with beta continuation, checkpoints and code export."""
from __future__ import annotations

import json
import logging
import math
import struct
import time
import zlib
from dataclasses import dataclass, field, asdict, replace
from pathlib import Path

import numpy as np

from .graph import BipartiteGraph, BprSampler, InteractionDataset, SplitSpec, split
from .hamming import CodeMatrix, write_codes
from .metrics import evaluate
from .model import ModelConfig, beta_schedule, bpr_loss, forward_hard, init_embeddings

log = logging.getLogger(__name__)

CKPT_MAGIC = b"HSCK"
CKPT_VERSION = 1
_CKPT_HEAD = struct.Struct("<4sHQQIIdI")
_CKPT_TAIL = struct.Struct("<Id")
_CKPT_EXT = struct.Struct("<QqdI")
FLAG_TRAINER_STATE = 1
FLAG_NORMALIZE = 2
FLAG_MEAN_READOUT = 4


def stream(seed: int, label: str, *extra: int) -> np.random.Generator:
    """Independent generator derived from the run seed and a fixed label."""
    return np.random.default_rng([int(seed), zlib.crc32(label.encode()), *map(int, extra)])


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch, loss):
        self.epoch = epoch
        super().__init__(f"non-finite loss {loss!r} in epoch {epoch}")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 40
    triples_per_epoch: int | None = None  # None: one pass worth of train edges
    batch_size: int = 2048
    lr: float = 1e-2
    reg: float = 1e-5
    seed: int = 0
    eval_every: int = 1
    patience: int = 10
    eval_k: int = 20
    sampling: str = "edge"

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.triples_per_epoch is not None and self.triples_per_epoch < 1:
            raise ValueError("triples_per_epoch must be positive")
        if self.batch_size < 1 or self.eval_every < 1 or self.patience < 1 or self.eval_k < 1:
            raise ValueError("batch_size, eval_every, patience and eval_k must be >= 1")
        if not (math.isfinite(self.lr) and self.lr > 0):
            raise ValueError("lr must be positive")
        if not (math.isfinite(self.reg) and self.reg >= 0):
            raise ValueError("reg must be non-negative")
        if self.sampling not in ("edge", "user"):
            raise ValueError("sampling must be 'edge' or 'user'")


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    beta: float
    seconds: float
    recall: float | None = None
    ndcg: float | None = None


@dataclass
class TrainReport:
    records: list = field(default_factory=list)
    best_epoch: int | None = None
    stopped_early: bool = False

    def to_jsonl(self) -> str:
        return "".join(json.dumps(asdict(r), sort_keys=True) + "\n" for r in self.records)

    def write(self, path) -> None:
        Path(path).write_text(self.to_jsonl())

    @classmethod
    def read(cls, path) -> "TrainReport":
        recs = [EpochRecord(**json.loads(l)) for l in Path(path).read_text().splitlines() if l.strip()]
        return cls(recs)

    def deterministic_view(self):
        """Records without wall-clock times."""
        return [(r.epoch, r.loss, r.beta, r.recall, r.ndcg) for r in self.records]


@dataclass
class TrainState:
    """Everything needed to resume training exactly."""

    embeddings: np.ndarray
    adam_m: np.ndarray
    adam_v: np.ndarray
    adam_t: int = 0
    epoch: int = 0  # completed epochs
    beta: float = 0.0
    best_embeddings: np.ndarray | None = None
    best_epoch: int = -1
    best_score: float = -math.inf
    bad_evals: int = 0

    @classmethod
    def fresh(cls, embeddings):
        E = np.ascontiguousarray(embeddings, dtype=np.float32)
        return cls(E, np.zeros_like(E), np.zeros_like(E))


class Adam:
    def __init__(self, lr=1e-3, b1=0.9, b2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps

    def step(self, state: TrainState, grad: np.ndarray) -> None:
        b1, b2 = self.b1, self.b2
        state.adam_t += 1
        t = state.adam_t
        state.adam_m *= b1
        state.adam_m += (1 - b1) * grad
        state.adam_v *= b2
        state.adam_v += (1 - b2) * grad * grad
        mhat = state.adam_m / (1 - b1 ** t)
        vhat = state.adam_v / (1 - b2 ** t)
        state.embeddings -= (self.lr * mhat / (np.sqrt(vhat) + self.eps)).astype(state.embeddings.dtype)


def validation_split(train: InteractionDataset):
    """Hold out each user's latest training event. Returns ``(inner_train, validation)``."""
    inner, val, _ = split(train, SplitSpec("leave-last-one"))
    return inner, val


def export_codes(embeddings, graph: BipartiteGraph, config: ModelConfig):
    """Hard codes for users and items: ``sign(e)`` then ``L`` hard layers."""
    E = np.asarray(embeddings)
    if E.shape != (graph.n_nodes, config.K):
        raise ValueError(f"embedding table has shape {E.shape}, expected {(graph.n_nodes, config.K)}")
    signs = forward_hard(graph, E, config).output
    N = graph.n_users
    return CodeMatrix.from_signs(signs[:N]), CodeMatrix.from_signs(signs[N:])


def write_exported(directory, user_codes: CodeMatrix, item_codes: CodeMatrix):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    write_codes(directory / "users.hsgc", user_codes)
    write_codes(directory / "items.hsgc", item_codes)


class Trainer:
    """Runs epochs of mini-batch BPR on the relaxed model.

    If ``validation`` is given, hard codes are evaluated every
    ``eval_every`` epochs (Recall@``eval_k``) and training stops after
    ``patience`` evaluations without improvement.
    """

    def __init__(self, graph: BipartiteGraph, model_config: ModelConfig, train_config: TrainConfig,
                 validation: InteractionDataset | None = None, workers: int = 1):
        if graph.n_edges == 0:
            raise ValueError("training graph has no edges")
        self.graph = graph
        self.mc = model_config
        self.tc = train_config
        self.validation = validation
        self.workers = workers
        self.optimizer = Adam(lr=train_config.lr)

    def initial_state(self) -> TrainState:
        rng = stream(self.tc.seed, "init")
        return TrainState.fresh(init_embeddings(self.graph.n_nodes, self.mc.K, rng))

    def validate(self, embeddings):
        users, items = export_codes(embeddings, self.graph, self.mc)
        table = evaluate(users, items, self.validation, self.graph, ks=(self.tc.eval_k,), workers=self.workers)
        return table.mean("recall", self.tc.eval_k), table.mean("ndcg", self.tc.eval_k)

    def run_epoch(self, state: TrainState) -> EpochRecord:
        epoch = state.epoch
        beta = beta_schedule(epoch, self.mc)
        rng = stream(self.tc.seed, "sampler", epoch)
        sampler = BprSampler(self.graph, rng, self.tc.sampling)
        total = self.tc.triples_per_epoch or self.graph.n_edges
        t0 = time.perf_counter()
        losses, weights = [], []
        done = 0
        while done < total:
            b = min(self.tc.batch_size, total - done)
            u, i, j = sampler.sample_batch(b)
            loss, grad = bpr_loss(self.graph, state.embeddings, self.mc, beta, u, i, j, self.tc.reg)
            if not math.isfinite(loss):
                raise TrainingDiverged(epoch, loss)
            self.optimizer.step(state, grad)
            losses.append(loss)
            weights.append(b)
            done += b
        if not np.isfinite(state.embeddings).all():
            raise TrainingDiverged(epoch, float("nan"))
        state.epoch = epoch + 1
        state.beta = beta
        mean_loss = float(np.average(losses, weights=weights))
        return EpochRecord(epoch, mean_loss, beta, time.perf_counter() - t0)

    def run(self, state: TrainState | None = None, report: TrainReport | None = None,
            checkpoint_path=None):
        """Train until ``epochs`` epochs are done or early stopping fires."""
        state = state or self.initial_state()
        report = report or TrainReport()
        while state.epoch < self.tc.epochs:
            rec = self.run_epoch(state)
            last = state.epoch == self.tc.epochs
            if self.validation is not None and (state.epoch % self.tc.eval_every == 0 or last):
                rec.recall, rec.ndcg = self.validate(state.embeddings)
                if rec.recall > state.best_score:
                    state.best_score = rec.recall
                    state.best_epoch = rec.epoch
                    state.best_embeddings = state.embeddings.copy()
                    state.bad_evals = 0
                else:
                    state.bad_evals += 1
            report.records.append(rec)
            log.info("epoch %d loss %.5f beta %g recall %s (%.1fs)", rec.epoch, rec.loss, rec.beta, rec.recall, rec.seconds)
            if checkpoint_path is not None:
                save_checkpoint(checkpoint_path, state, self.mc, self.graph.n_users)
            if self.validation is not None and state.bad_evals >= self.tc.patience:
                report.stopped_early = True
                break
        report.best_epoch = state.best_epoch if state.best_epoch >= 0 else None
        return state, report

    def result(self, state: TrainState) -> np.ndarray:
        if self.validation is not None and state.best_embeddings is not None:
            return state.best_embeddings
        return state.embeddings


def train(graph, model_config: ModelConfig, train_config: TrainConfig, validation=None,
          state: TrainState | None = None, checkpoint_path=None, workers: int = 1):
    """Train and return ``(embeddings, report)``; embeddings are the best validated ones."""
    trainer = Trainer(graph, model_config, train_config, validation, workers)
    state, report = trainer.run(state, checkpoint_path=checkpoint_path)
    return trainer.result(state).copy(), report


# --- checkpoints ----------------------------------------------------------------

def save_checkpoint(path, state: TrainState, config: ModelConfig, n_users: int) -> None:
    """Write the ``HSCK`` v1 layout plus the trainer-state extension block."""
    E = np.ascontiguousarray(state.embeddings, dtype="<f4")
    n_nodes, K = E.shape
    if K != config.K:
        raise ValueError("embedding width does not match config.K")
    if not 0 <= n_users <= n_nodes:
        raise ValueError("n_users out of range")
    flags = FLAG_TRAINER_STATE
    if config.normalize_neighbors:
        flags |= FLAG_NORMALIZE
    if config.readout == "mean_then_sign":
        flags |= FLAG_MEAN_READOUT
    best = state.best_embeddings if state.best_embeddings is not None else state.embeddings
    parts = [
        _CKPT_HEAD.pack(CKPT_MAGIC, CKPT_VERSION, n_users, n_nodes - n_users, K, config.L,
                        float(config.self_weight), flags),
        E.tobytes(),
        np.ascontiguousarray(state.adam_m, dtype="<f4").tobytes(),
        np.ascontiguousarray(state.adam_v, dtype="<f4").tobytes(),
        _CKPT_TAIL.pack(state.epoch, float(state.beta)),
        _CKPT_EXT.pack(state.adam_t, state.best_epoch, float(state.best_score), state.bad_evals),
        np.ascontiguousarray(best, dtype="<f4").tobytes(),
    ]
    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(b"".join(parts))
    tmp.replace(path)


@dataclass
class Checkpoint:
    state: TrainState
    n_users: int
    n_items: int
    K: int
    L: int
    self_weight: float
    normalize_neighbors: bool
    readout: str

    def model_config(self, base: ModelConfig | None = None) -> ModelConfig:
        base = base or ModelConfig(K=self.K)
        return replace(base, K=self.K, L=self.L, self_weight=self.self_weight,
                       normalize_neighbors=self.normalize_neighbors, readout=self.readout)


class CheckpointError(ValueError):
    pass


def load_checkpoint(path) -> Checkpoint:
    data = Path(path).read_bytes()
    if len(data) < _CKPT_HEAD.size:
        raise CheckpointError(f"{path}: truncated checkpoint header")
    magic, version, N, M, K, L, s, flags = _CKPT_HEAD.unpack_from(data)
    if magic != CKPT_MAGIC:
        raise CheckpointError(f"{path}: bad magic {magic!r}, expected {CKPT_MAGIC.decode()!r}")
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    n = (N + M) * K
    need = _CKPT_HEAD.size + 3 * 4 * n + _CKPT_TAIL.size
    if flags & FLAG_TRAINER_STATE:
        need += _CKPT_EXT.size + 4 * n
    if len(data) < need:
        raise CheckpointError(f"{path}: truncated checkpoint ({len(data)} of {need} bytes)")
    off = _CKPT_HEAD.size

    def table():
        nonlocal off
        arr = np.frombuffer(data, dtype="<f4", count=n, offset=off).reshape(N + M, K).astype(np.float32)
        off += 4 * n
        return arr

    E, m, v = table(), table(), table()
    epoch, beta = _CKPT_TAIL.unpack_from(data, off)
    off += _CKPT_TAIL.size
    state = TrainState(E, m, v, epoch=epoch, beta=beta)
    if flags & FLAG_TRAINER_STATE:
        state.adam_t, state.best_epoch, state.best_score, state.bad_evals = _CKPT_EXT.unpack_from(data, off)
        off += _CKPT_EXT.size
        best = table()
        state.best_embeddings = best if state.best_epoch >= 0 else None
    readout = "mean_then_sign" if flags & FLAG_MEAN_READOUT else "last_layer"
    return Checkpoint(state, N, M, K, L, s, bool(flags & FLAG_NORMALIZE), readout)
