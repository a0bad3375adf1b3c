"""The F-shape click model.

Per node ``(t, j)`` in row-major (topological) order::

    x   = [v_q ; v_item ; v_click(previous row-major label)]
    h   = attention-weighted sum of predecessor states   (merge nodes)
          the single predecessor state                   (tandem nodes)
          zeros                                          (no predecessors)
    h'  = GRU_class(x, h)            one GRU unit per (orientation, tandem/merge)
    cp  = sum_k softmax_k(g(v_item, v_k)) v_k   over undirected DAG neighbours
    cp' = cp * v_item * Linear(v_q)
    p   = sigmoid(MLP([h' ; cp']))

All forward passes are batched over sessions that share a layout.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields, replace
from functools import lru_cache

import numpy as np

from . import numkit as nk
from .data import START_TOKEN, Batch, Session
from .page_dag import MergeStatus, NodeClass, NodeId, Orientation, PageDag, cached_dag

COMPARISON_KINDS = ("inner", "neural", "kernel")
CLASS_KEYS = ("v_tandem", "v_merge", "h_tandem", "h_merge")
N_CLICK_TOKENS = 3


class ConfigMismatch(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    query_vocab: tuple[int, ...]
    item_vocab: tuple[int, ...]
    embed_size: int = 4
    click_embed_size: int = 4
    hidden_size: int = 128
    comparison: str = "kernel"
    no_comparison: bool = False
    no_skip_edges: bool = False
    share_hv: bool = False
    share_tm: bool = False
    init_seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "query_vocab", tuple(int(v) for v in self.query_vocab))
        object.__setattr__(self, "item_vocab", tuple(int(v) for v in self.item_vocab))
        if self.comparison not in COMPARISON_KINDS:
            raise ValueError(f"comparison must be one of {COMPARISON_KINDS}, got {self.comparison!r}")
        if min(self.embed_size, self.click_embed_size, self.hidden_size) < 1:
            raise ValueError("embedding and hidden sizes must be positive")

    @property
    def query_dim(self) -> int:
        return self.embed_size * len(self.query_vocab)

    @property
    def item_dim(self) -> int:
        return self.embed_size * len(self.item_vocab)

    @property
    def input_dim(self) -> int:
        return self.query_dim + self.item_dim + self.click_embed_size

    def to_dict(self) -> dict:
        d = asdict(self)
        d["query_vocab"] = list(self.query_vocab)
        d["item_vocab"] = list(self.item_vocab)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


def unit_key(cls: NodeClass, share_hv: bool, share_tm: bool) -> str:
    """Name of the GRU unit serving a node class after ablation aliasing."""
    o = "vh" if share_hv else cls.orientation.value
    m = "any" if share_tm else cls.merge_status.value
    return f"{o}_{m}"


def _class_of(key: str) -> NodeClass:
    o, m = key.split("_")
    return NodeClass(Orientation(o), MergeStatus(m))


def xavier(rng: np.random.Generator, rows: int, cols: int) -> np.ndarray:
    a = np.sqrt(6.0 / (rows + cols))
    return rng.uniform(-a, a, size=(rows, cols))


def init_embedding(rng: np.random.Generator, vocab: int, dim: int) -> np.ndarray:
    # last row is reserved for unknown ids
    return rng.normal(0.0, 0.01, size=(vocab + 1, dim))


def lookup_ids(ids: np.ndarray, vocab: int) -> np.ndarray:
    ids = np.asarray(ids, dtype=np.int64)
    return np.where((ids >= 0) & (ids < vocab), ids, vocab)


@dataclass
class LayoutPlan:
    """Per-layout structure precomputed for batched forward passes."""

    dag: PageDag
    unit: list[str]
    preds: list[tuple[int, ...]]
    neighbors: np.ndarray  # (N, D) int, padded with 0
    neighbor_mask: np.ndarray  # (N, D) bool
    orientation: np.ndarray  # (N,) "v"/"h"


@lru_cache(maxsize=256)
def layout_plan(layout_key: str, skip_edges: bool, share_hv: bool, share_tm: bool) -> LayoutPlan:
    dag = cached_dag(layout_key, skip_edges)
    idx = dag.index
    order = dag.topo_order
    units = [unit_key(dag.node_class[n], share_hv, share_tm) for n in order]
    preds = [tuple(idx[p] for p in dag.predecessors(n)) for n in order]
    nbrs = [[idx[m] for m in dag.neighbors(n)] for n in order]
    width = max(1, max(len(x) for x in nbrs))
    table = np.zeros((len(order), width), dtype=np.int64)
    mask = np.zeros((len(order), width), dtype=bool)
    for k, row in enumerate(nbrs):
        table[k, : len(row)] = row
        mask[k, : len(row)] = True
    orient = np.array([dag.node_class[n].orientation.value for n in order])
    return LayoutPlan(dag, units, preds, table, mask, orient)


class FSCM:
    kind = "fscm"

    def __init__(self, config: ModelConfig, params: dict[str, np.ndarray] | None = None):
        self.config = config
        self.params: dict[str, nk.Tensor] = {}
        rng = np.random.default_rng(config.init_seed)
        c = config
        H, dq, di = c.hidden_size, c.query_dim, c.item_dim

        for f, v in enumerate(c.query_vocab):
            self._add(f"emb.q{f}", init_embedding(rng, v, c.embed_size))
        for f, v in enumerate(c.item_vocab):
            self._add(f"emb.i{f}", init_embedding(rng, v, c.embed_size))
        self._add("emb.c", rng.normal(0.0, 0.01, size=(N_CLICK_TOKENS, c.click_embed_size)))

        for key in self.unit_names:
            self._add(f"gru.{key}.W", xavier(rng, 3 * H, c.input_dim))
            self._add(f"gru.{key}.U", xavier(rng, 3 * H, H))
            self._add(f"gru.{key}.b", np.zeros(3 * H))

        self._add("att.W1", xavier(rng, H, H))
        self._add("att.b1", np.zeros(H))
        self._add("att.w2", xavier(rng, 1, H))
        self._add("att.b2", np.zeros(1))

        if not c.no_comparison:
            if c.comparison == "kernel":
                self._add("cmp.W", xavier(rng, di, di))
            elif c.comparison == "neural":
                self._add("cmp.W1", xavier(rng, H, 2 * di))
                self._add("cmp.b1", np.zeros(H))
                self._add("cmp.w2", xavier(rng, 1, H))
                self._add("cmp.b2", np.zeros(1))
            self._add("comb.W", xavier(rng, di, dq))
            self._add("comb.b", np.zeros(di))

        self._add("out.W1", xavier(rng, H, H + di))
        self._add("out.b1", np.zeros(H))
        self._add("out.w2", xavier(rng, 1, H))
        self._add("out.b2", np.zeros(1))

        if params is not None:
            self.load_arrays(params)

    # ------------------------------------------------------------ parameters

    def _add(self, name: str, value: np.ndarray) -> None:
        self.params[name] = nk.parameter(value, name=name)

    @property
    def unit_names(self) -> list[str]:
        seen = []
        for key in CLASS_KEYS:
            u = unit_key(_class_of(key), self.config.share_hv, self.config.share_tm)
            if u not in seen:
                seen.append(u)
        return seen

    @property
    def gru_units(self) -> dict[str, tuple[nk.Tensor, nk.Tensor, nk.Tensor]]:
        """All four node classes mapped to their (possibly aliased) GRU weights."""
        out = {}
        for key in CLASS_KEYS:
            u = unit_key(_class_of(key), self.config.share_hv, self.config.share_tm)
            out[key] = tuple(self.params[f"gru.{u}.{p}"] for p in "WUb")
        return out

    def regularized(self) -> list[nk.Tensor]:
        """Weight matrices; embeddings and biases are excluded from the L2 term."""
        return [t for name, t in self.params.items() if not name.startswith("emb.") and t.value.ndim == 2]

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        if set(arrays) != set(self.params):
            missing = sorted(set(self.params) - set(arrays))
            extra = sorted(set(arrays) - set(self.params))
            raise ConfigMismatch(f"parameter names differ (missing={missing}, unexpected={extra})")
        for name, value in arrays.items():
            if value.shape != self.params[name].shape:
                raise ConfigMismatch(f"{name}: shape {value.shape} != expected {self.params[name].shape}")
            self.params[name].value = np.array(value, dtype=nk.DTYPE)

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    # ---------------------------------------------------------------- pieces

    def query_embedding(self, queries: np.ndarray) -> nk.Tensor:
        c = self.config
        parts = [
            nk.embedding(self.params[f"emb.q{f}"], lookup_ids(queries[..., f], v))
            for f, v in enumerate(c.query_vocab)
        ]
        return nk.concat(parts, axis=-1)

    def item_embedding(self, items: np.ndarray) -> nk.Tensor:
        c = self.config
        parts = [
            nk.embedding(self.params[f"emb.i{f}"], lookup_ids(items[..., f], v))
            for f, v in enumerate(c.item_vocab)
        ]
        return nk.concat(parts, axis=-1)

    def click_embedding(self, tokens: np.ndarray) -> nk.Tensor:
        return nk.embedding(self.params["emb.c"], np.asarray(tokens, dtype=np.int64))

    def inputs(self, batch: Batch) -> tuple[nk.Tensor, nk.Tensor, nk.Tensor]:
        """(v_q (B, dq), v_items (B, N, di), x (B, N, input_dim))."""
        B, N = batch.clicks.shape
        vq = self.query_embedding(batch.queries)
        vi = self.item_embedding(batch.items)
        vc = self.click_embedding(batch.prev_clicks())
        vq_n = nk.broadcast_to(nk.reshape(vq, (B, 1, vq.shape[-1])), (B, N, vq.shape[-1]))
        return vq, vi, nk.concat([vq_n, vi, vc], axis=-1)

    def attention_weights(self, S: nk.Tensor) -> nk.Tensor:
        """Softmax weights (B, K) scored from stacked predecessor states (B, K, H) alone."""
        p = self.params
        score = nk.linear(nk.tanh(nk.linear(S, p["att.W1"], p["att.b1"])), p["att.w2"], p["att.b2"])
        return nk.softmax(nk.reshape(score, score.shape[:-1]))

    def aggregate(self, pred_states: list[nk.Tensor], batch_size: int) -> nk.Tensor:
        if not pred_states:
            return nk.Tensor(np.zeros((batch_size, self.config.hidden_size)))
        if len(pred_states) == 1:
            return pred_states[0]
        S = nk.stack(pred_states, axis=1)
        alpha = self.attention_weights(S)
        return nk.reduce_sum(nk.mul(nk.reshape(alpha, alpha.shape + (1,)), S), axis=1)

    def dag_states(self, plan: LayoutPlan, x: nk.Tensor) -> list[nk.Tensor]:
        B = x.shape[0]
        units = {u: tuple(self.params[f"gru.{u}.{p}"] for p in "WUb") for u in set(plan.unit)}
        states: list[nk.Tensor] = []
        for k in range(len(plan.unit)):
            h = self.aggregate([states[p] for p in plan.preds[k]], B)
            W, U, b = units[plan.unit[k]]
            states.append(nk.gru_cell(nk.index(x, (slice(None), k)), h, W, U, b))
        return states

    def comparison_scores(self, vi: nk.Tensor, vn: nk.Tensor) -> nk.Tensor:
        """g(v_item, v_neighbour) for every (node, candidate) pair -> (B, N, D)."""
        B, N, D, di = vn.shape
        kind = self.config.comparison
        p = self.params
        if kind == "inner":
            return nk.reduce_sum(nk.mul(nk.reshape(vi, (B, N, 1, di)), vn), axis=-1)
        if kind == "kernel":
            wv = nk.linear(vn, p["cmp.W"])  # W v_k
            return nk.reduce_sum(nk.mul(nk.reshape(vi, (B, N, 1, di)), wv), axis=-1)
        pair = nk.concat([nk.broadcast_to(nk.reshape(vi, (B, N, 1, di)), (B, N, D, di)), vn], axis=-1)
        s = nk.linear(nk.tanh(nk.linear(pair, p["cmp.W1"], p["cmp.b1"])), p["cmp.w2"], p["cmp.b2"])
        return nk.reshape(s, (B, N, D))

    def comparison(self, plan: LayoutPlan, vq: nk.Tensor, vi: nk.Tensor) -> tuple[nk.Tensor, nk.Tensor]:
        """(cp', gamma): comparison pattern (B, N, di) and candidate weights (B, N, D)."""
        B, N, di = vi.shape
        vn = nk.gather_rows(vi, plan.neighbors, axis=1)  # (B, N, D, di)
        gamma = nk.softmax(self.comparison_scores(vi, vn), mask=plan.neighbor_mask)
        cp = nk.reduce_sum(nk.mul(nk.reshape(gamma, gamma.shape + (1,)), vn), axis=2)
        q = nk.linear(vq, self.params["comb.W"], self.params["comb.b"])
        return nk.mul(nk.mul(cp, vi), nk.reshape(q, (B, 1, di))), gamma

    def predict_from(self, hs: nk.Tensor, cp: nk.Tensor) -> nk.Tensor:
        p = self.params
        z = nk.concat([hs, cp], axis=-1)
        logit = nk.linear(nk.tanh(nk.linear(z, p["out.W1"], p["out.b1"])), p["out.w2"], p["out.b2"])
        return nk.sigmoid(nk.reshape(logit, logit.shape[:-1]))

    def plan(self, batch: Batch) -> LayoutPlan:
        c = self.config
        return layout_plan(str(batch.layout), not c.no_skip_edges, c.share_hv, c.share_tm)

    # --------------------------------------------------------------- forward

    def forward(self, batch: Batch) -> nk.Tensor:
        """Teacher-forced click probabilities, shape (B, N) in row-major order."""
        plan = self.plan(batch)
        B, N = batch.clicks.shape
        vq, vi, x = self.inputs(batch)
        hs = nk.stack(self.dag_states(plan, x), axis=1)
        if self.config.no_comparison:
            cp = nk.Tensor(np.zeros((B, N, self.config.item_dim)))
        else:
            cp, _ = self.comparison(plan, vq, vi)
        return self.predict_from(hs, cp)

    def predict(self, batch: Batch) -> np.ndarray:
        return self.forward(batch).value

    def loss(self, batch: Batch, l2: float = 0.0) -> nk.Tensor:
        return batch_objective(self.forward(batch), batch.clicks, self.regularized(), l2)

    # -------------------------------------------------------------- persist

    def state(self) -> dict[str, nk.Tensor]:
        return self.params

    def meta(self) -> dict:
        return {"model": self.kind, "config": self.config.to_dict()}


def batch_objective(p: nk.Tensor, clicks: np.ndarray, weights: list[nk.Tensor], l2: float) -> nk.Tensor:
    """Mean over sessions of the summed per-item BCE, plus ``l2 * sum ||W||^2``."""
    B = clicks.shape[0]
    loss = nk.scale(nk.binary_cross_entropy(p, clicks), 1.0 / B)
    if l2 > 0 and weights:
        reg = nk.square_sum(weights[0])
        for w in weights[1:]:
            reg = nk.add(reg, nk.square_sum(w))
        loss = nk.add(loss, nk.scale(reg, l2))
    return loss


# ---------------------------------------------------------- single-session API


def session_batch(session: Session) -> Batch:
    return Batch(
        layout=session.layout,
        queries=np.array([session.query_fields], dtype=np.int64),
        items=np.array([session.item_fields], dtype=np.int64),
        clicks=np.array([session.clicks], dtype=np.float64),
        session_index=np.array([0]),
    )


def node_input(model: FSCM, session: Session, node: NodeId, prev_click: int | None = None) -> nk.Tensor:
    """x for one node; ``prev_click`` defaults to the row-major predecessor's label."""
    k = session.position(node)
    if prev_click is None:
        prev_click = START_TOKEN if k == 0 else session.clicks[k - 1]
    if prev_click not in (0, 1, START_TOKEN):
        raise ValueError(f"prev_click must be 0, 1 or the start token, got {prev_click}")
    vq = model.query_embedding(np.array(session.query_fields))
    vi = model.item_embedding(np.array(session.item_fields[k]))
    vc = model.click_embedding(np.array(prev_click))
    return nk.concat([vq, vi, vc], axis=-1)


def aggregate_predecessors(model: FSCM, pred_states: list[nk.Tensor]) -> nk.Tensor:
    """Input state of a node from its predecessors' output states (1-D tensors)."""
    if not pred_states:
        return nk.Tensor(np.zeros(model.config.hidden_size))
    batched = [nk.reshape(s, (1,) + s.shape) for s in pred_states]
    h = model.aggregate(batched, 1)
    return nk.reshape(h, h.shape[1:])


def dag_gru_forward(model: FSCM, session: Session) -> dict[NodeId, np.ndarray]:
    batch = session_batch(session)
    _, _, x = model.inputs(batch)
    states = model.dag_states(model.plan(batch), x)
    return {n: s.value[0] for n, s in zip(session.nodes, states)}


def comparison_context(model: FSCM, session: Session, node: NodeId) -> np.ndarray:
    batch = session_batch(session)
    vq, vi, _ = model.inputs(batch)
    cp, _ = model.comparison(model.plan(batch), vq, vi)
    return cp.value[0, session.position(node)]


def predict_click(model: FSCM, h: np.ndarray, cp: np.ndarray) -> float:
    p = model.predict_from(nk.Tensor(np.asarray(h)[None, None]), nk.Tensor(np.asarray(cp)[None, None]))
    return float(p.value[0, 0])


def session_loss(model, session: Session, predictions: dict[NodeId, float], l2: float = 0.0) -> float:
    p = nk.Tensor(np.array([[predictions[n] for n in session.nodes]]))
    clicks = np.array([session.clicks], dtype=np.float64)
    return batch_objective(p, clicks, model.regularized(), l2).item()


# ---------------------------------------------------------------- checkpoint


def save_model(path, model) -> None:
    nk.save_tensors(path, model.state(), meta=model.meta())


def load_model(path, expected: dict | None = None):
    """Load a checkpoint; ``expected`` (a meta dict) must match the stored one when given."""
    from .baselines import BaselineConfig, GRUListBaseline

    arrays, meta = nk.load_tensors(path)
    if expected is not None and json.dumps(expected, sort_keys=True) != json.dumps(meta, sort_keys=True):
        raise ConfigMismatch(f"checkpoint config {meta} does not match expected {expected}")
    kind = meta.get("model")
    if kind == FSCM.kind:
        return FSCM(ModelConfig.from_dict(meta["config"]), params=arrays)
    if kind == GRUListBaseline.kind:
        return GRUListBaseline(BaselineConfig.from_dict(meta["config"]), params=arrays)
    raise ConfigMismatch(f"unknown model kind {kind!r}")


def with_ablations(config: ModelConfig, **flags) -> ModelConfig:
    return replace(config, **flags)
