"""Synthetic users browsing F-shape pages.

Each simulated user walks the page top to bottom:

* inside a block, after position ``j`` the user moves on with probability
  ``gamma ** (kappa * j)``; ``kappa`` is a per-session patience factor;
* a user who completes a vertical block skips the next horizontal block with
  ``p_skip``; a user who leaves a vertical block early enters the next
  horizontal block with ``p_enter_h`` and otherwise skips it;
* leaving any block early ends the session with ``p_abandon``;
* after examining an item the user may look back at the most attractive
  already-examined neighbour and return (an A-B-A-B comparison); the more
  attractive of the pair gets its click odds scaled by ``cmp_boost``,
  the other by ``cmp_penalty``;
* every examined item is clicked with its attractiveness (times the
  horizontal presentation factor, the user's click odds and any comparison
  multipliers), so clicks only ever land on examined items.

Attractiveness is a fixed function of (query, item) derived from
``attractiveness_seed``; every session draws its own random stream from
``(seed, session index)``.
"""
from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import asdict, dataclass, field, fields
from functools import cached_property
from multiprocessing import Pool
from typing import Iterable, Sequence

import numpy as np

from .data import Session
from .page_dag import NodeId, Orientation, PageLayout, cached_dag

TRIPLET_KINDS = ("ABC", "BAB", "ABA", "CBA", "BAC", "ACB", "BCA", "CAB")
NON_SEQUENTIAL = TRIPLET_KINDS[1:]


@dataclass(frozen=True)
class SimConfig:
    version: str = "2"
    layouts: tuple[str, ...] = ("v6,h8,v6,h8,v6",)
    layout_weights: tuple[float, ...] = (1.0,)
    n_queries: int = 200
    n_query_categories: int = 8
    n_items: int = 400
    n_item_categories: int = 8
    on_topic_share: float = 0.5
    attractiveness_seed: int = 17
    base_logit: float = -1.0
    quality_sd: float = 1.0
    affinity_sd: float = 1.0
    on_topic_bonus: float = 1.0
    pair_noise_sd: float = 0.3
    horizontal_factor: float = 0.6
    user_click_sd: float = 0.5
    gamma_v: float = 0.93
    gamma_h: float = 0.9
    patience_sd: float = 0.6
    p_abandon: float = 0.6
    p_skip: float = 0.3
    p_enter_h: float = 0.5
    p_skip_v: float = 0.05
    p_chain: float = 0.12
    p_entry_first: float = 0.93
    entry_decay: float = 0.6
    p_cmp: float = 0.8
    cmp_boost: float = 8.0
    cmp_penalty: float = 0.1

    def __post_init__(self):
        object.__setattr__(self, "layouts", tuple(self.layouts))
        object.__setattr__(self, "layout_weights", tuple(float(w) for w in self.layout_weights))
        for name in ("on_topic_share", "horizontal_factor", "p_abandon", "p_skip", "p_enter_h",
                     "p_skip_v", "p_chain", "p_entry_first", "entry_decay", "p_cmp"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        for name in ("gamma_v", "gamma_h"):
            v = getattr(self, name)
            if not 0.0 < v <= 1.0:
                raise ValueError(f"{name} must lie in (0, 1], got {v}")
        if len(self.layouts) != len(self.layout_weights) or not self.layouts:
            raise ValueError("layouts and layout_weights must be non-empty and of equal length")
        if any(w < 0 for w in self.layout_weights) or sum(self.layout_weights) <= 0:
            raise ValueError("layout weights must be non-negative with a positive sum")
        for spec in self.layouts:
            PageLayout.parse(spec)
        if self.n_items < max(PageLayout.parse(s).n_items for s in self.layouts):
            raise ValueError("item universe is smaller than a page")
        if min(self.n_queries, self.n_items, self.n_query_categories, self.n_item_categories) < 1:
            raise ValueError("universe sizes must be positive")
        if self.cmp_boost < 0 or self.cmp_penalty < 0:
            raise ValueError("comparison multipliers must be non-negative")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["layouts"] = list(self.layouts)
        d["layout_weights"] = list(self.layout_weights)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SimConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown simulator config keys: {sorted(unknown)}")
        return cls(**d)

    @cached_property
    def world(self) -> "World":
        return World(self)


def calibrate_defaults() -> SimConfig:
    """The shipped, version-pinned simulator configuration."""
    return SimConfig()


class World:
    """Deterministic query/item universe and attractiveness table."""

    def __init__(self, cfg: SimConfig):
        rng = np.random.default_rng(np.random.SeedSequence([cfg.attractiveness_seed, 0xA77]))
        self.query_category = rng.integers(cfg.n_query_categories, size=cfg.n_queries)
        self.item_category = rng.integers(cfg.n_item_categories, size=cfg.n_items)
        quality = rng.normal(0.0, cfg.quality_sd, size=cfg.n_items)
        affinity = rng.normal(0.0, cfg.affinity_sd, size=(cfg.n_query_categories, cfg.n_item_categories))
        self.preferred = rng.integers(cfg.n_item_categories, size=cfg.n_query_categories)
        affinity[np.arange(cfg.n_query_categories), self.preferred] += cfg.on_topic_bonus
        noise = rng.normal(0.0, cfg.pair_noise_sd, size=(cfg.n_queries, cfg.n_items))
        logit = (
            cfg.base_logit
            + quality[None, :]
            + affinity[self.query_category[:, None], self.item_category[None, :]]
            + noise
        )
        self.logit = logit
        self.attractiveness = 1.0 / (1.0 + np.exp(-logit))
        self.items_by_category = [
            np.flatnonzero(self.item_category == c) for c in range(cfg.n_item_categories)
        ]

    def query_fields(self, q: int) -> tuple[int, int]:
        return (int(q), int(self.query_category[q]))

    def item_fields(self, i: int) -> tuple[int, int]:
        return (int(i), int(self.item_category[i]))


@dataclass
class ExamTrace:
    session_id: int | str
    sequence: list[NodeId]
    clicks: list[NodeId] = field(default_factory=list)

    def __post_init__(self):
        for a, b in zip(self.sequence, self.sequence[1:]):
            if a == b:
                raise ValueError(f"consecutive duplicate examination {a}")


def _continue_prob(gamma: float, kappa: float, j: int) -> float:
    return gamma ** (kappa * j)


def _draw_page(cfg: SimConfig, world: World, rng: np.random.Generator, q: int, n_slots: int) -> list[int]:
    pref = world.items_by_category[world.preferred[world.query_category[q]]]
    chosen: list[int] = []
    seen: set[int] = set()
    while len(chosen) < n_slots:
        if len(pref) and rng.random() < cfg.on_topic_share:
            i = int(pref[rng.integers(len(pref))])
        else:
            i = int(rng.integers(cfg.n_items))
        if i not in seen:
            seen.add(i)
            chosen.append(i)
    return chosen


def simulate_session(cfg: SimConfig, rng: np.random.Generator, session_id: int | str = 0) -> tuple[Session, ExamTrace]:
    world = cfg.world
    w = np.asarray(cfg.layout_weights)
    layout = PageLayout.parse(cfg.layouts[int(rng.choice(len(w), p=w / w.sum()))])
    dag = cached_dag(layout, True)
    index = dag.index
    q = int(rng.integers(cfg.n_queries))
    items = _draw_page(cfg, world, rng, q, layout.n_items)
    attr = world.attractiveness[q, items]
    kappa = math.exp(rng.normal(0.0, cfg.patience_sd)) if cfg.patience_sd > 0 else 1.0
    user_odds = math.exp(rng.normal(0.0, cfg.user_click_sd)) if cfg.user_click_sd > 0 else 1.0

    clicks = [0] * layout.n_items
    examined: set[NodeId] = set()
    seq: list[NodeId] = []
    n = layout.n_blocks

    odds_scale = np.ones(layout.n_items)

    def click_prob(k: int, node: NodeId) -> float:
        a = attr[k]
        if layout.block(node.block).orientation == Orientation.HORIZONTAL:
            a *= cfg.horizontal_factor
        odds = user_odds * odds_scale[k] * a / max(1.0 - a, 1e-12)
        return odds / (1.0 + odds)

    def examine(node: NodeId) -> None:
        first = node not in examined
        seq.append(node)
        examined.add(node)
        if not first or cfg.p_cmp == 0 or rng.random() >= cfg.p_cmp:
            return
        cands = [m for m in dag.neighbors(node) if m in examined and m != node]
        if not cands:
            return
        other = max(cands, key=lambda m: (attr[index[m]], -index[m]))
        seq.append(other)
        seq.append(node)
        k, o = index[node], index[other]
        win, lose = (k, o) if attr[k] > attr[o] else (o, k)
        odds_scale[win] *= cfg.cmp_boost
        odds_scale[lose] *= cfg.cmp_penalty

    t, entry = 1, 1
    while t <= n:
        block = layout.block(t)
        vertical = block.orientation == Orientation.VERTICAL
        gamma = cfg.gamma_v if vertical else cfg.gamma_h
        j = entry
        while True:
            examine(NodeId(t, j))
            if j == block.item_count:
                completed = True
                break
            if rng.random() < _continue_prob(gamma, kappa, j):
                j += 1
            else:
                completed = False
                break
        if not completed and rng.random() < cfg.p_abandon:
            break
        nxt = t + 1
        if nxt > n:
            break
        nxt_vertical = layout.block(nxt).orientation == Orientation.VERTICAL
        if vertical and not nxt_vertical:
            p_jump = cfg.p_skip if completed else 1.0 - cfg.p_enter_h
        else:
            p_jump = cfg.p_skip_v
        if rng.random() < p_jump:
            nxt += 1
            while nxt <= n and rng.random() < cfg.p_chain:
                nxt += 1
        if nxt > n:
            break
        t = nxt
        entry = 1
        nb = layout.block(t)
        if nb.orientation == Orientation.VERTICAL and nb.item_count > 1 and rng.random() >= cfg.p_entry_first:
            entry = 2
            while entry < nb.item_count and rng.random() < cfg.entry_decay:
                entry += 1

    # click decisions are taken once the walk is over, so a comparison
    # with a later item can still change an earlier item's outcome
    for nd in layout.nodes():
        if nd in examined:
            k = index[nd]
            clicks[k] = int(rng.random() < click_prob(k, nd))

    session = Session(
        session_id=session_id,
        query_id=q,
        query_fields=world.query_fields(q),
        layout=layout,
        item_ids=items,
        item_fields=[world.item_fields(i) for i in items],
        clicks=clicks,
        trace=list(seq),
    )
    clicked = [nd for nd in layout.nodes() if clicks[index[nd]]]
    return session, ExamTrace(session_id, seq, clicked)


def session_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(index)]))


def _simulate_range(args) -> list[tuple[Session, ExamTrace]]:
    cfg, seed, lo, hi = args
    return [simulate_session(cfg, session_rng(seed, k), session_id=k) for k in range(lo, hi)]


def simulate(cfg: SimConfig, n_sessions: int, seed: int, workers: int = 1, start: int = 0) -> list[tuple[Session, ExamTrace]]:
    """Sessions ``start .. start + n_sessions - 1``; output does not depend on ``workers``."""
    if n_sessions < 1:
        raise ValueError("n_sessions must be at least 1")
    if workers <= 1:
        return _simulate_range((cfg, seed, start, start + n_sessions))
    step = max(1, math.ceil(n_sessions / (workers * 4)))
    chunks = [(cfg, seed, lo, min(lo + step, start + n_sessions)) for lo in range(start, start + n_sessions, step)]
    with Pool(workers) as pool:
        parts = pool.map(_simulate_range, chunks)
    return [x for part in parts for x in part]


def oracle_probabilities(cfg: SimConfig, session: Session) -> np.ndarray:
    """Examination indicator times attractiveness (with the horizontal factor)."""
    world = cfg.world
    a = world.attractiveness[session.query_id, session.item_ids].copy()
    nodes = session.layout.nodes()
    horiz = np.array([session.layout.block(n.block).orientation == Orientation.HORIZONTAL for n in nodes])
    a[horiz] *= cfg.horizontal_factor
    exam = np.zeros(len(nodes))
    for nd in session.trace or []:
        exam[session.position(nd)] = 1.0
    return a * exam


# ------------------------------------------------------------------ detectors


@dataclass
class SkipHistogram:
    events: list[tuple[NodeId, NodeId]] = field(default_factory=list)
    by_length: Counter = field(default_factory=Counter)
    by_source: Counter = field(default_factory=Counter)
    by_destination: Counter = field(default_factory=Counter)

    def update(self, other: "SkipHistogram") -> None:
        self.events.extend(other.events)
        self.by_length.update(other.by_length)
        self.by_source.update(other.by_source)
        self.by_destination.update(other.by_destination)

    def __len__(self) -> int:
        return len(self.events)


def detect_block_skips(trace: ExamTrace | Sequence[NodeId]) -> SkipHistogram:
    """Consecutive examinations that jump forward by two or more blocks."""
    seq = trace.sequence if isinstance(trace, ExamTrace) else list(trace)
    hist = SkipHistogram()
    for (t1, j1), (t2, j2) in zip(seq, seq[1:]):
        if t2 - t1 >= 2:
            hist.events.append((NodeId(t1, j1), NodeId(t2, j2)))
            hist.by_length[t2 - t1] += 1
            hist.by_source[j1] += 1
            hist.by_destination[j2] += 1
    return hist


def classify_triplet(a: NodeId, b: NodeId, c: NodeId) -> str:
    if a == c:
        return "ABA" if tuple(a) < tuple(b) else "BAB"
    ranks = sorted([tuple(a), tuple(b), tuple(c)])
    return "".join("ABC"[ranks.index(tuple(x))] for x in (a, b, c))


def detect_triplets(trace: ExamTrace | Sequence[NodeId]) -> Counter:
    """Counts of the eight triplet kinds over all windows of three examinations."""
    seq = trace.sequence if isinstance(trace, ExamTrace) else list(trace)
    counts: Counter = Counter()
    for a, b, c in zip(seq, seq[1:], seq[2:]):
        counts[classify_triplet(a, b, c)] += 1
    return counts


def triplet_frequencies(counts: Counter) -> dict[str, float]:
    total = sum(counts.values())
    if total == 0:
        return {}
    return {k: counts.get(k, 0) / total for k in TRIPLET_KINDS}


# ----------------------------------------------------------------- statistics


@dataclass
class BehaviorStats:
    sessions: int
    skip_length: dict[int, int]
    skip_length2_share: float
    vv_share_of_length2: float
    vv_source: dict[int, int]
    vv_destination: dict[int, int]
    triplets: dict[str, int]
    examined_fraction: dict[str, list[float]]
    clicks_per_session: dict[str, float]
    click_rate: float

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def behavior_stats(pairs: Iterable[tuple[Session, ExamTrace]]) -> BehaviorStats:
    skips = SkipHistogram()
    vv_src: Counter = Counter()
    vv_dst: Counter = Counter()
    len2 = vv2 = 0
    triplets: Counter = Counter()
    exam_count = {"v": Counter(), "h": Counter()}
    slot_count = {"v": Counter(), "h": Counter()}
    clicks = {"v": 0, "h": 0}
    n = n_items = n_clicks = 0
    for session, trace in pairs:
        n += 1
        layout = session.layout
        h = detect_block_skips(trace)
        skips.update(h)
        for src, dst in h.events:
            if dst.block - src.block == 2:
                len2 += 1
                if (
                    layout.block(src.block).orientation == Orientation.VERTICAL
                    and layout.block(dst.block).orientation == Orientation.VERTICAL
                ):
                    vv2 += 1
                    vv_src[src.position] += 1
                    vv_dst[dst.position] += 1
        triplets.update(detect_triplets(trace))
        seen = set(trace.sequence)
        for nd in layout.nodes():
            o = layout.block(nd.block).orientation.value
            slot_count[o][nd.position] += 1
            if nd in seen:
                exam_count[o][nd.position] += 1
            c = session.click(nd)
            clicks[o] += c
            n_clicks += c
            n_items += 1
    total_skips = sum(skips.by_length.values())
    frac = {
        o: [exam_count[o][j] / slot_count[o][j] for j in sorted(slot_count[o])] for o in ("v", "h")
    }
    return BehaviorStats(
        sessions=n,
        skip_length=dict(sorted(skips.by_length.items())),
        skip_length2_share=skips.by_length.get(2, 0) / total_skips if total_skips else 0.0,
        vv_share_of_length2=vv2 / len2 if len2 else 0.0,
        vv_source=dict(sorted(vv_src.items())),
        vv_destination=dict(sorted(vv_dst.items())),
        triplets={k: triplets.get(k, 0) for k in TRIPLET_KINDS},
        examined_fraction=frac,
        clicks_per_session={o: clicks[o] / n for o in ("v", "h")},
        click_rate=n_clicks / n_items if n_items else 0.0,
    )
