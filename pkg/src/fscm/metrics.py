"""Log-likelihood and AUC, overall and split by block orientation.

Perplexity is deliberately absent: blocks have unequal lengths, so
per-position averaging would over-weight the rare deep positions.
"""
from __future__ import annotations

import csv
import json
import warnings
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np
from scipy.stats import rankdata

from .data import EncodedData, Session

CLAMP = 1e-12


def log_likelihood(predictions, labels) -> float | None:
    """Mean per-item log-likelihood; ``None`` for an empty split."""
    p = np.clip(np.asarray(predictions, dtype=np.float64), CLAMP, 1.0 - CLAMP)
    y = np.asarray(labels, dtype=np.float64)
    if p.size == 0:
        return None
    return float(np.mean(y * np.log(p) + (1.0 - y) * np.log1p(-p)))


def auc(predictions, labels) -> float | None:
    """Rank-sum AUC with ties counted as one half; ``None`` if a class is missing."""
    p = np.asarray(predictions, dtype=np.float64)
    y = np.asarray(labels).astype(bool)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        warnings.warn("AUC undefined: split contains a single class", RuntimeWarning, stacklevel=2)
        return None
    ranks = rankdata(p)
    return float((ranks[y].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


@dataclass
class EvalReport:
    ll_overall: float | None
    ll_vertical: float | None
    ll_horizontal: float | None
    auc_overall: float | None
    auc_vertical: float | None
    auc_horizontal: float | None
    n_overall: int
    n_vertical: int
    n_horizontal: int
    auc_pooling: str = "global"

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    def to_table(self) -> str:
        def fmt(v):
            return f"{v:>10.4f}" if v is not None else f"{'n/a':>10}"

        head = f"# AUC pooled {self.auc_pooling}ly over items\n"
        cols = f"{'':<8}{'Vertical':>10}{'Horizontal':>12}{'Overall':>10}\n"
        ll = f"{'LL':<8}{fmt(self.ll_vertical)}  {fmt(self.ll_horizontal)}{fmt(self.ll_overall)}\n"
        au = f"{'AUC':<8}{fmt(self.auc_vertical)}  {fmt(self.auc_horizontal)}{fmt(self.auc_overall)}\n"
        n = f"{'items':<8}{self.n_vertical:>10}  {self.n_horizontal:>10}{self.n_overall:>10}\n"
        return head + cols + ll + au + n


@dataclass
class Predictions:
    """Flat per-item predictions in canonical (layout group, session, node) order."""

    prob: np.ndarray
    label: np.ndarray
    orientation: np.ndarray  # "v" / "h"
    position: np.ndarray  # within-block position, 1-based
    session_index: np.ndarray


def predict_items(model, data: EncodedData | Sequence[Session], batch_size: int = 1024) -> Predictions:
    if not isinstance(data, EncodedData):
        data = EncodedData(data)
    probs, labels, orient, pos, sidx = [], [], [], [], []
    for batch in data.batches(batch_size):
        p = model.predict(batch)
        o = np.array([b.orientation.value for b in batch.layout.blocks for _ in range(b.item_count)])
        j = np.array([k for b in batch.layout.blocks for k in range(1, b.item_count + 1)])
        probs.append(p.reshape(-1))
        labels.append(batch.clicks.reshape(-1))
        orient.append(np.tile(o, batch.size))
        pos.append(np.tile(j, batch.size))
        sidx.append(np.repeat(batch.session_index, len(o)))
    return Predictions(
        np.concatenate(probs), np.concatenate(labels), np.concatenate(orient), np.concatenate(pos), np.concatenate(sidx)
    )


def report_from(pred: Predictions) -> EvalReport:
    v = pred.orientation == "v"
    h = ~v
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        return EvalReport(
            ll_overall=log_likelihood(pred.prob, pred.label),
            ll_vertical=log_likelihood(pred.prob[v], pred.label[v]),
            ll_horizontal=log_likelihood(pred.prob[h], pred.label[h]),
            auc_overall=auc(pred.prob, pred.label),
            auc_vertical=auc(pred.prob[v], pred.label[v]),
            auc_horizontal=auc(pred.prob[h], pred.label[h]),
            n_overall=int(pred.prob.size),
            n_vertical=int(v.sum()),
            n_horizontal=int(h.sum()),
        )


def evaluate(model, data: EncodedData | Sequence[Session], batch_size: int = 1024) -> EvalReport:
    return report_from(predict_items(model, data, batch_size))


def plot_rows(pred: Predictions) -> list[dict]:
    """Per (orientation, position) observed and predicted click rates."""
    rows = []
    for o in ("v", "h"):
        for j in sorted(set(pred.position[pred.orientation == o].tolist())):
            sel = (pred.orientation == o) & (pred.position == j)
            rows.append(
                {
                    "orientation": o,
                    "position": int(j),
                    "items": int(sel.sum()),
                    "observed_ctr": float(pred.label[sel].mean()),
                    "predicted_ctr": float(pred.prob[sel].mean()),
                }
            )
    return rows


def write_plot_data(path, pred: Predictions) -> None:
    rows = plot_rows(pred)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["orientation", "position", "items", "observed_ctr", "predicted_ctr"])
        w.writeheader()
        for r in rows:
            w.writerow({**r, "observed_ctr": repr(r["observed_ctr"]), "predicted_ctr": repr(r["predicted_ctr"])})
