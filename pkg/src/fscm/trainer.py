"""Mini-batch Adam training with L2 regularisation and early stopping."""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Sequence

import numpy as np

from . import numkit as nk
from .baselines import MODES, BaselineConfig, GRUListBaseline
from .data import EncodedData, Session, field_vocab
from .metrics import evaluate
from .model import FSCM, ModelConfig

log = logging.getLogger(__name__)

ABLATIONS = ("no-comparison", "no-skip-edges", "share-hv", "share-tm")


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.001
    batch_size: int = 1024
    l2: float = 1e-6
    max_epochs: int = 20
    patience: int = 2
    seed: int = 0
    comparison: str = "kernel"
    no_comparison: bool = False
    no_skip_edges: bool = False
    share_hv: bool = False
    share_tm: bool = False
    baseline: str | None = None
    hidden_size: int = 128
    embed_size: int = 4
    clip_norm: float = 5.0
    val_fraction: float = 0.1

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if self.patience < 1:
            raise ValueError("patience must be at least 1")
        if self.l2 < 0:
            raise ValueError("l2 must be non-negative")
        if self.baseline is not None and self.baseline not in MODES:
            raise ValueError(f"baseline must be one of {MODES}")

    @classmethod
    def desk(cls, **overrides) -> "TrainConfig":
        """Reduced sizes for laptop-scale runs; ten epochs keep a run near two minutes."""
        return cls(**{"hidden_size": 32, "batch_size": 64, "max_epochs": 10, **overrides})

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown training config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


def apply_ablation(config: TrainConfig, flags: Sequence[str]) -> TrainConfig:
    """Turn ablation names (``no-comparison``, ``share-hv``, ...) into config flags."""
    updates = {}
    for flag in flags:
        if flag not in ABLATIONS:
            raise ValueError(f"unknown ablation {flag!r}; choose from {ABLATIONS}")
        updates[flag.replace("-", "_")] = True
    return replace(config, **updates)


def build_model(config: TrainConfig, query_vocab, item_vocab):
    if config.baseline is not None:
        return GRUListBaseline(
            BaselineConfig(
                query_vocab=query_vocab,
                item_vocab=item_vocab,
                mode=config.baseline,
                embed_size=config.embed_size,
                hidden_size=config.hidden_size,
                init_seed=config.seed,
            )
        )
    return FSCM(
        ModelConfig(
            query_vocab=query_vocab,
            item_vocab=item_vocab,
            embed_size=config.embed_size,
            hidden_size=config.hidden_size,
            comparison=config.comparison,
            no_comparison=config.no_comparison,
            no_skip_edges=config.no_skip_edges,
            share_hv=config.share_hv,
            share_tm=config.share_tm,
            init_seed=config.seed,
        )
    )


class Adam:
    def __init__(self, params: Sequence[nk.Tensor], lr: float = 0.001, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = [np.zeros_like(p.value) for p in self.params]
        self.v = [np.zeros_like(p.value) for p in self.params]
        self.t = 0

    def step(self) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                g = np.zeros_like(p.value)
            else:
                g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.value = p.value - (self.lr / bc1) * m / (np.sqrt(v / bc2) + self.eps)


def clip_gradients(params: Sequence[nk.Tensor], max_norm: float) -> float:
    grads = [p.grad for p in params if p.grad is not None]
    norm = nk.global_norm(grads)
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        for g in grads:
            g *= scale
    return norm


@dataclass
class TrainResult:
    model: object
    log: list[dict] = field(default_factory=list)
    best_epoch: int = 0
    best_val_ll: float = float("-inf")

    def log_lines(self) -> str:
        return "".join(json.dumps(rec) + "\n" for rec in self.log)


def split_sessions(sessions: Sequence[Session], val_fraction: float) -> tuple[list[Session], list[Session]]:
    """Split by session index: the last ``val_fraction`` become validation data."""
    n_val = max(1, int(round(len(sessions) * val_fraction)))
    if n_val >= len(sessions):
        raise TrainingError("not enough sessions to hold out a validation split")
    return list(sessions[:-n_val]), list(sessions[-n_val:])


def train_step(model, optimizer: Adam, batch, config: TrainConfig) -> float:
    model.zero_grad()
    with nk.Tape() as tape:
        loss = model.loss(batch, config.l2)
    if not np.isfinite(loss.value):
        raise TrainingError(f"non-finite loss {loss.item()} on a batch of {batch.size} sessions, layout {batch.layout}")
    tape.backward(loss)
    clip_gradients(optimizer.params, config.clip_norm)
    optimizer.step()
    return loss.item()


def train(
    train_sessions: Sequence[Session] | EncodedData,
    val_sessions: Sequence[Session] | EncodedData,
    config: TrainConfig,
    model=None,
    vocab: tuple | None = None,
) -> TrainResult:
    """Fit a model; returns the parameters of the best validation-LL epoch."""
    train_data = train_sessions if isinstance(train_sessions, EncodedData) else EncodedData(train_sessions)
    val_data = val_sessions if isinstance(val_sessions, EncodedData) else EncodedData(val_sessions)
    if model is None:
        if vocab is None:
            if isinstance(train_sessions, EncodedData):
                raise TrainingError("vocabulary sizes are required with pre-encoded data")
            vocab = field_vocab(list(train_sessions))
        model = build_model(config, *vocab)
    optimizer = Adam(model.params.values(), lr=config.learning_rate)
    result = TrainResult(model)
    best_state = None
    stale = 0
    for epoch in range(1, config.max_epochs + 1):
        rng = np.random.default_rng([config.seed, epoch])
        total, count = 0.0, 0
        for batch in train_data.batches(config.batch_size, rng):
            total += train_step(model, optimizer, batch, config) * batch.size
            count += batch.size
        report = evaluate(model, val_data)
        rec = {
            "epoch": epoch,
            "train_loss": total / count,
            "val_ll": report.ll_overall,
            "val_auc": report.auc_overall,
        }
        result.log.append(rec)
        log.info("epoch %d train_loss=%.5f val_ll=%.5f val_auc=%s", epoch, rec["train_loss"], rec["val_ll"], rec["val_auc"])
        if report.ll_overall > result.best_val_ll:
            result.best_val_ll = report.ll_overall
            result.best_epoch = epoch
            best_state = {k: t.value.copy() for k, t in model.params.items()}
            stale = 0
        else:
            stale += 1
            if stale >= config.patience:
                break
    if best_state is not None:
        model.load_arrays(best_state)
    return result
