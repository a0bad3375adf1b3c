"""Sessions, the line-delimited JSON session format, and batch encoding.

One session per line, keys in this order::

    {"session_id": ..., "query": {"id": ..., "fields": [int, ...]},
     "blocks": [{"orientation": "v"|"h",
                 "items": [{"id": ..., "fields": [int, ...], "click": 0|1}, ...]}, ...],
     "trace": [[t, j], ...]}            # optional, simulator output only

Items inside a session are stored in row-major node order.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Sequence

import numpy as np

from .page_dag import BlockSpec, NodeId, Orientation, PageLayout

START_TOKEN = 2


class SchemaError(ValueError):
    """A session document does not follow the session format."""


@dataclass
class Session:
    session_id: int | str
    query_id: int
    query_fields: tuple[int, ...]
    layout: PageLayout
    item_ids: list[int]
    item_fields: list[tuple[int, ...]]
    clicks: list[int]
    trace: list[NodeId] | None = None
    _index: dict[NodeId, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        n = self.layout.n_items
        if not (len(self.item_ids) == len(self.item_fields) == len(self.clicks) == n):
            raise SchemaError(
                f"session {self.session_id}: items/clicks must cover the {n} layout nodes"
            )
        if any(c not in (0, 1) for c in self.clicks):
            raise SchemaError(f"session {self.session_id}: clicks must be 0 or 1")
        self._index = {node: k for k, node in enumerate(self.layout.nodes())}

    @property
    def nodes(self) -> list[NodeId]:
        return self.layout.nodes()

    def position(self, node: NodeId) -> int:
        try:
            return self._index[NodeId(*node)]
        except KeyError:
            raise KeyError(f"node {node} is not on layout {self.layout}") from None

    def item(self, node: NodeId) -> tuple[int, ...]:
        return self.item_fields[self.position(node)]

    def click(self, node: NodeId) -> int:
        return self.clicks[self.position(node)]

    def to_dict(self) -> dict:
        blocks = []
        k = 0
        for b in self.layout.blocks:
            items = []
            for _ in range(b.item_count):
                items.append(
                    {"id": self.item_ids[k], "fields": list(self.item_fields[k]), "click": self.clicks[k]}
                )
                k += 1
            blocks.append({"orientation": b.orientation.value, "items": items})
        doc = {
            "session_id": self.session_id,
            "query": {"id": self.query_id, "fields": list(self.query_fields)},
            "blocks": blocks,
        }
        if self.trace is not None:
            doc["trace"] = [[t, j] for t, j in self.trace]
        return doc

    @classmethod
    def from_dict(cls, doc: dict) -> "Session":
        try:
            blocks, ids, fields, clicks = [], [], [], []
            for b in doc["blocks"]:
                items = b["items"]
                blocks.append(BlockSpec(Orientation(b["orientation"]), len(items)))
                for it in items:
                    ids.append(it["id"])
                    fields.append(tuple(int(f) for f in it["fields"]))
                    clicks.append(int(it["click"]))
            trace = doc.get("trace")
            return cls(
                session_id=doc["session_id"],
                query_id=doc["query"]["id"],
                query_fields=tuple(int(f) for f in doc["query"]["fields"]),
                layout=PageLayout(tuple(blocks)),
                item_ids=ids,
                item_fields=fields,
                clicks=clicks,
                trace=None if trace is None else [NodeId(int(t), int(j)) for t, j in trace],
            )
        except SchemaError:
            raise
        except (KeyError, TypeError, ValueError) as err:
            raise SchemaError(f"malformed session document: {err!r}") from None


def dumps_session(session: Session) -> str:
    return json.dumps(session.to_dict(), separators=(",", ":"))


def write_sessions(path, sessions: Iterable[Session]) -> int:
    n = 0
    with open(path, "w") as fh:
        for s in sessions:
            fh.write(dumps_session(s))
            fh.write("\n")
            n += 1
    return n


def read_sessions(path) -> list[Session]:
    out = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                doc = json.loads(line)
            except json.JSONDecodeError as err:
                raise SchemaError(f"{path}:{lineno}: invalid JSON ({err.msg})") from None
            try:
                out.append(Session.from_dict(doc))
            except SchemaError as err:
                raise SchemaError(f"{path}:{lineno}: {err}") from None
    return out


def field_vocab(sessions: Sequence[Session]) -> tuple[tuple[int, ...], tuple[int, ...]]:
    """Per-field vocabulary sizes (max id + 1) for queries and items."""
    if not sessions:
        raise SchemaError("no sessions")
    nq = len(sessions[0].query_fields)
    ni = len(sessions[0].item_fields[0])
    qmax = [0] * nq
    imax = [0] * ni
    for s in sessions:
        if len(s.query_fields) != nq or any(len(f) != ni for f in s.item_fields):
            raise SchemaError(f"session {s.session_id}: inconsistent number of feature fields")
        for f, v in enumerate(s.query_fields):
            qmax[f] = max(qmax[f], v)
        for fields in s.item_fields:
            for f, v in enumerate(fields):
                imax[f] = max(imax[f], v)
    return tuple(m + 1 for m in qmax), tuple(m + 1 for m in imax)


@dataclass
class Batch:
    """Sessions sharing one layout, as dense arrays."""

    layout: PageLayout
    queries: np.ndarray  # (B, query fields) int
    items: np.ndarray  # (B, N, item fields) int
    clicks: np.ndarray  # (B, N) float 0/1
    session_index: np.ndarray  # (B,) position in the source list

    @property
    def size(self) -> int:
        return self.queries.shape[0]

    def prev_clicks(self) -> np.ndarray:
        """Label of each node's row-major predecessor; START_TOKEN for the first node."""
        prev = np.empty(self.clicks.shape, dtype=np.int64)
        prev[:, 0] = START_TOKEN
        prev[:, 1:] = self.clicks[:, :-1]
        return prev

    def take(self, rows) -> "Batch":
        return Batch(self.layout, self.queries[rows], self.items[rows], self.clicks[rows], self.session_index[rows])


class EncodedData:
    """Sessions grouped by layout and encoded once for repeated batching."""

    def __init__(self, sessions: Sequence[Session]):
        if not sessions:
            raise SchemaError("no sessions")
        self.n_sessions = len(sessions)
        groups: dict[str, list[int]] = {}
        for k, s in enumerate(sessions):
            groups.setdefault(str(s.layout), []).append(k)
        self.groups: dict[str, Batch] = {}
        for key in sorted(groups):
            idx = groups[key]
            ss = [sessions[k] for k in idx]
            self.groups[key] = Batch(
                layout=ss[0].layout,
                queries=np.array([s.query_fields for s in ss], dtype=np.int64),
                items=np.array([s.item_fields for s in ss], dtype=np.int64),
                clicks=np.array([s.clicks for s in ss], dtype=np.float64),
                session_index=np.array(idx, dtype=np.int64),
            )

    @property
    def n_items(self) -> int:
        return int(sum(b.clicks.size for b in self.groups.values()))

    def batches(self, batch_size: int, rng: np.random.Generator | None = None) -> Iterator[Batch]:
        """Fixed-layout batches; shuffled within layouts and across batches when ``rng`` is given."""
        chunks = []
        for key, group in self.groups.items():
            order = np.arange(group.size) if rng is None else rng.permutation(group.size)
            for lo in range(0, group.size, batch_size):
                chunks.append((key, order[lo : lo + batch_size]))
        if rng is not None:
            chunks = [chunks[k] for k in rng.permutation(len(chunks))]
        for key, rows in chunks:
            yield self.groups[key].take(rows)
