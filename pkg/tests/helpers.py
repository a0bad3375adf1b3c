"""Shared builders for tests."""
from __future__ import annotations

import numpy as np

from fscm import numkit as nk
from fscm.data import Session
from fscm.model import FSCM, ModelConfig, session_batch
from fscm.page_dag import PageLayout

QUERY_VOCAB = (7, 3)
ITEM_VOCAB = (11, 4)


def random_session(rng: np.random.Generator, layout: str = "v3,h3,v2", sid=0, click_rate: float = 0.3) -> Session:
    lay = PageLayout.parse(layout)
    n = lay.n_items
    items = [int(i) for i in rng.integers(ITEM_VOCAB[0], size=n)]
    return Session(
        session_id=sid,
        query_id=int(rng.integers(QUERY_VOCAB[0])),
        query_fields=(int(rng.integers(QUERY_VOCAB[0])), int(rng.integers(QUERY_VOCAB[1]))),
        layout=lay,
        item_ids=items,
        item_fields=[(i, int(rng.integers(ITEM_VOCAB[1]))) for i in items],
        clicks=[int(c) for c in rng.random(n) < click_rate],
    )


def small_model(**overrides) -> FSCM:
    cfg = dict(query_vocab=QUERY_VOCAB, item_vocab=ITEM_VOCAB, hidden_size=6, init_seed=3)
    cfg.update(overrides)
    model = FSCM(ModelConfig(**cfg))
    # move embeddings off the near-zero init so every path carries signal
    rng = np.random.default_rng(11)
    for name, t in model.params.items():
        if name.startswith("emb."):
            t.value = rng.normal(0.0, 0.5, size=t.shape)
    return model


def gradient_check(model, session: Session, n_params: int = 60, seed: int = 0, h: float = 1e-5):
    """Max relative error of analytic vs central-difference gradients over sampled coordinates."""
    batch = session_batch(session)
    model.zero_grad()
    with nk.Tape() as tape:
        loss = model.loss(batch, l2=1e-3)
    tape.backward(loss)
    rng = np.random.default_rng(seed)
    names = sorted(model.params)
    worst, checked = 0.0, 0
    attempts = 0
    while checked < n_params and attempts < 50 * n_params:
        attempts += 1
        name = names[rng.integers(len(names))]
        t = model.params[name]
        idx = tuple(int(rng.integers(s)) for s in t.shape)
        g = 0.0 if t.grad is None else float(t.grad[idx])
        old = t.value[idx]
        t.value[idx] = old + h
        up = model.loss(batch, l2=1e-3).item()
        t.value[idx] = old - h
        down = model.loss(batch, l2=1e-3).item()
        t.value[idx] = old
        num = (up - down) / (2 * h)
        if abs(g) < 1e-8 and abs(num) < 1e-8:
            continue
        worst = max(worst, abs(g - num) / max(abs(g), abs(num)))
        checked += 1
    return worst, checked
