"""Single-list GRU click model adapted to multi-block pages.

Two independent parameter sets serve vertical and horizontal lists.

* ``block-wise``: every block is its own list.
* ``list-wise``: all vertical blocks are chained, in page order, into one list;
  horizontal blocks stay isolated.

Inside a list each item sees ``[v_q ; v_item ; v_click(previous item in the
list)]`` and the recurrent state of the previous list item.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from functools import lru_cache

import numpy as np

from . import numkit as nk
from .data import START_TOKEN, Batch
from .model import N_CLICK_TOKENS, ConfigMismatch, batch_objective, init_embedding, lookup_ids, xavier
from .page_dag import Orientation, PageLayout

MODES = ("block-wise", "list-wise")


@dataclass(frozen=True)
class BaselineConfig:
    query_vocab: tuple[int, ...]
    item_vocab: tuple[int, ...]
    mode: str = "list-wise"
    embed_size: int = 4
    click_embed_size: int = 4
    hidden_size: int = 128
    init_seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "query_vocab", tuple(int(v) for v in self.query_vocab))
        object.__setattr__(self, "item_vocab", tuple(int(v) for v in self.item_vocab))
        if self.mode not in MODES:
            raise ValueError(f"baseline mode must be one of {MODES}, got {self.mode!r}")

    @property
    def input_dim(self) -> int:
        return self.embed_size * (len(self.query_vocab) + len(self.item_vocab)) + self.click_embed_size

    def to_dict(self) -> dict:
        d = asdict(self)
        d["query_vocab"] = list(self.query_vocab)
        d["item_vocab"] = list(self.item_vocab)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "BaselineConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown baseline config keys: {sorted(unknown)}")
        return cls(**d)


@lru_cache(maxsize=256)
def page_lists(layout_key: str, mode: str) -> tuple[tuple[str, tuple[int, ...]], ...]:
    """(orientation, row-major node indices) for every list the mode reads."""
    layout = PageLayout.parse(layout_key)
    lists: list[tuple[str, list[int]]] = []
    vertical: list[int] = []
    k = 0
    for b in layout.blocks:
        idx = list(range(k, k + b.item_count))
        k += b.item_count
        if b.orientation == Orientation.VERTICAL and mode == "list-wise":
            vertical.extend(idx)
        else:
            lists.append((b.orientation.value, idx))
    if vertical:
        lists.insert(0, ("v", vertical))
    return tuple((o, tuple(ix)) for o, ix in lists)


class GRUListBaseline:
    kind = "gru-list"

    def __init__(self, config: BaselineConfig, params: dict[str, np.ndarray] | None = None):
        self.config = config
        self.params: dict[str, nk.Tensor] = {}
        rng = np.random.default_rng(config.init_seed)
        c = config
        H = c.hidden_size
        for o in "vh":
            for f, v in enumerate(c.query_vocab):
                self._add(f"{o}.emb.q{f}", init_embedding(rng, v, c.embed_size))
            for f, v in enumerate(c.item_vocab):
                self._add(f"{o}.emb.i{f}", init_embedding(rng, v, c.embed_size))
            self._add(f"{o}.emb.c", rng.normal(0.0, 0.01, size=(N_CLICK_TOKENS, c.click_embed_size)))
            self._add(f"{o}.gru.W", xavier(rng, 3 * H, c.input_dim))
            self._add(f"{o}.gru.U", xavier(rng, 3 * H, H))
            self._add(f"{o}.gru.b", np.zeros(3 * H))
            self._add(f"{o}.out.W1", xavier(rng, H, H))
            self._add(f"{o}.out.b1", np.zeros(H))
            self._add(f"{o}.out.w2", xavier(rng, 1, H))
            self._add(f"{o}.out.b2", np.zeros(1))
        if params is not None:
            self.load_arrays(params)

    def _add(self, name: str, value: np.ndarray) -> None:
        self.params[name] = nk.parameter(value, name=name)

    def regularized(self) -> list[nk.Tensor]:
        return [t for name, t in self.params.items() if ".emb." not in name and t.value.ndim == 2]

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        if set(arrays) != set(self.params):
            raise ConfigMismatch("baseline checkpoint parameter names differ from the configuration")
        for name, value in arrays.items():
            if value.shape != self.params[name].shape:
                raise ConfigMismatch(f"{name}: shape {value.shape} != expected {self.params[name].shape}")
            self.params[name].value = np.array(value, dtype=nk.DTYPE)

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    def _run_list(self, o: str, idx: tuple[int, ...], batch: Batch) -> nk.Tensor:
        c, p = self.config, self.params
        B = batch.size
        sub_items = batch.items[:, list(idx)]
        prev = np.empty((B, len(idx)), dtype=np.int64)
        prev[:, 0] = START_TOKEN
        prev[:, 1:] = batch.clicks[:, list(idx[:-1])]
        vq = nk.concat(
            [nk.embedding(p[f"{o}.emb.q{f}"], lookup_ids(batch.queries[:, f], v)) for f, v in enumerate(c.query_vocab)],
            axis=-1,
        )
        vi = nk.concat(
            [nk.embedding(p[f"{o}.emb.i{f}"], lookup_ids(sub_items[..., f], v)) for f, v in enumerate(c.item_vocab)],
            axis=-1,
        )
        vc = nk.embedding(p[f"{o}.emb.c"], prev)
        L = len(idx)
        vq_n = nk.broadcast_to(nk.reshape(vq, (B, 1, vq.shape[-1])), (B, L, vq.shape[-1]))
        x = nk.concat([vq_n, vi, vc], axis=-1)
        h = nk.Tensor(np.zeros((B, c.hidden_size)))
        states = []
        for k in range(L):
            h = nk.gru_cell(nk.index(x, (slice(None), k)), h, p[f"{o}.gru.W"], p[f"{o}.gru.U"], p[f"{o}.gru.b"])
            states.append(h)
        hs = nk.stack(states, axis=1)
        logit = nk.linear(nk.tanh(nk.linear(hs, p[f"{o}.out.W1"], p[f"{o}.out.b1"])), p[f"{o}.out.w2"], p[f"{o}.out.b2"])
        return nk.sigmoid(nk.reshape(logit, (B, L)))

    def forward(self, batch: Batch) -> nk.Tensor:
        lists = page_lists(str(batch.layout), self.config.mode)
        parts = []
        order = []
        for o, idx in lists:
            parts.append(self._run_list(o, idx, batch))
            order.extend(idx)
        p = nk.concat(parts, axis=1)
        inverse = np.argsort(np.array(order))
        if np.array_equal(inverse, np.arange(len(order))):
            return p
        return nk.gather_rows(p, inverse, axis=1)

    def predict(self, batch: Batch) -> np.ndarray:
        return self.forward(batch).value

    def loss(self, batch: Batch, l2: float = 0.0) -> nk.Tensor:
        return batch_objective(self.forward(batch), batch.clicks, self.regularized(), l2)

    def state(self) -> dict[str, nk.Tensor]:
        return self.params

    def meta(self) -> dict:
        return {"model": self.kind, "config": self.config.to_dict()}
