import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fscm import numkit as nk
from fscm.data import START_TOKEN, EncodedData
from fscm.model import (
    CLASS_KEYS,
    FSCM,
    ConfigMismatch,
    ModelConfig,
    aggregate_predecessors,
    comparison_context,
    dag_gru_forward,
    layout_plan,
    load_model,
    node_input,
    predict_click,
    save_model,
    session_batch,
    session_loss,
)
from fscm.page_dag import NodeId, build_dag
from helpers import ITEM_VOCAB, QUERY_VOCAB, gradient_check, random_session, small_model


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def test_first_node_gets_start_token(rng):
    s = random_session(rng)
    batch = session_batch(s)
    prev = batch.prev_clicks()
    assert prev[0, 0] == START_TOKEN
    assert list(prev[0, 1:]) == s.clicks[:-1]


def test_node_input_matches_batched(rng):
    model = small_model()
    s = random_session(rng)
    _, _, x = model.inputs(session_batch(s))
    for k, node in enumerate(s.nodes):
        assert np.allclose(node_input(model, s, node).value, x.value[0, k])
    with pytest.raises(ValueError):
        node_input(model, s, s.nodes[1], prev_click=5)


def test_unknown_ids_use_reserved_row(rng):
    model = small_model()
    table = model.params["emb.i0"].value
    out = model.item_embedding(np.array([[ITEM_VOCAB[0] + 50, 1]])).value
    assert np.array_equal(out[0, :4], table[ITEM_VOCAB[0]])
    assert table.shape[0] == ITEM_VOCAB[0] + 1


def test_indegree_zero_gets_zero_state(rng):
    model = small_model()
    assert np.array_equal(aggregate_predecessors(model, []).value, np.zeros(6))


def test_tandem_identity(rng):
    model = small_model()
    h = nk.Tensor(rng.normal(size=6))
    assert np.array_equal(aggregate_predecessors(model, [h]).value, h.value)


def test_attention_ignores_current_item(rng):
    """Merge-node aggregation reads predecessor states only."""
    model = small_model()
    s = random_session(rng, "v2,h3,v2")
    merge = NodeId(3, 1)
    before = dag_gru_forward(model, s)
    preds = build_dag(s.layout).predecessors(merge)
    agg = aggregate_predecessors(model, [nk.Tensor(before[p]) for p in preds]).value
    k = s.position(merge)
    s.item_fields[k] = ((s.item_fields[k][0] + 1) % ITEM_VOCAB[0], s.item_fields[k][1])
    after = dag_gru_forward(model, s)
    for p in preds:
        assert np.array_equal(before[p], after[p])
    agg2 = aggregate_predecessors(model, [nk.Tensor(after[p]) for p in preds]).value
    assert np.array_equal(agg, agg2)
    assert not np.allclose(before[merge], after[merge])


def test_kernel_identity_equals_inner(rng):
    inner = small_model(comparison="inner")
    kernel = small_model(comparison="kernel")
    for name, t in inner.params.items():
        kernel.params[name].value = t.value.copy()
    kernel.params["cmp.W"].value = np.eye(kernel.config.item_dim)
    for k in range(100):
        s = random_session(np.random.default_rng(k), "v3,h4,v2,h2,v3")
        a = inner.comparison(inner.plan(session_batch(s)), *inner.inputs(session_batch(s))[:2])[0].value
        b = kernel.comparison(kernel.plan(session_batch(s)), *kernel.inputs(session_batch(s))[:2])[0].value
        assert np.max(np.abs(a - b)) <= 1e-12


def test_single_node_has_zero_context(rng):
    model = small_model()
    s = random_session(rng, "v1")
    assert np.array_equal(comparison_context(model, s, NodeId(1, 1)), np.zeros(model.config.item_dim))


def test_one_neighbour_context(rng):
    model = small_model()
    s = random_session(rng, "v2")
    batch = session_batch(s)
    vq, vi, _ = model.inputs(batch)
    cp, gamma = model.comparison(model.plan(batch), vq, vi)
    q = vq.value @ model.params["comb.W"].value.T + model.params["comb.b"].value
    assert gamma.value[0, 0, 0] == 1.0
    assert np.allclose(cp.value[0, 0], vi.value[0, 1] * vi.value[0, 0] * q[0])


@pytest.mark.parametrize("kind", ["inner", "neural", "kernel"])
def test_gamma_is_distribution_over_neighbours(rng, kind):
    model = small_model(comparison=kind)
    s = random_session(rng, "v3,h4,v2")
    batch = session_batch(s)
    plan = model.plan(batch)
    _, gamma = model.comparison(plan, *model.inputs(batch)[:2])
    g = gamma.value[0]
    assert np.all(g[~plan.neighbor_mask] == 0.0)
    assert np.allclose(g.sum(axis=-1), 1.0, atol=1e-12)


@settings(max_examples=25, deadline=None)
@given(st.lists(st.tuples(st.sampled_from("vh"), st.integers(1, 4)), min_size=1, max_size=5), st.booleans())
def test_plan_neighbours_symmetric(blocks, skips):
    key = ",".join(f"{o}{m}" for o, m in blocks)
    plan = layout_plan(key, skips, False, False)
    dag = build_dag(key, skip_edges_enabled=skips)
    edges = {(dag.index[e.source], dag.index[e.target]) for e in dag.edges}
    n = len(dag.nodes)
    for u in range(n):
        cands = set(plan.neighbors[u][plan.neighbor_mask[u]].tolist())
        assert cands == {v for v in range(n) if (u, v) in edges or (v, u) in edges}


def test_unit_aliasing():
    assert small_model().unit_names == ["v_tandem", "v_merge", "h_tandem", "h_merge"]
    assert small_model(share_hv=True).unit_names == ["vh_tandem", "vh_merge"]
    assert small_model(share_tm=True).unit_names == ["v_any", "h_any"]
    assert small_model(share_hv=True, share_tm=True).unit_names == ["vh_any"]
    units = small_model(share_hv=True).gru_units
    assert units["v_merge"][0] is units["h_merge"][0]


@pytest.mark.parametrize("cls", CLASS_KEYS)
def test_each_unit_drives_only_its_class(rng, cls):
    model = small_model()
    s = random_session(rng, "v3,h3,v2,h2,v2")
    plan = model.plan(session_batch(s))
    before = dag_gru_forward(model, s)
    model.params[f"gru.{cls}.W"].value += 0.3
    after = dag_gru_forward(model, s)
    first = next(k for k, u in enumerate(plan.unit) if u == cls)
    for k, node in enumerate(s.nodes):
        if k < first:
            assert np.array_equal(before[node], after[node])
    assert not np.allclose(before[s.nodes[first]], after[s.nodes[first]])


def test_no_comparison_ignores_neighbour_features(rng):
    s = random_session(rng, "v3,h3,v2")
    for flag, changes in ((True, False), (False, True)):
        model = small_model(no_comparison=flag)
        p0 = model.predict(session_batch(s))[0, 0]
        t = s.item_fields[1]
        s.item_fields[1] = ((t[0] + 3) % ITEM_VOCAB[0], (t[1] + 1) % ITEM_VOCAB[1])
        p1 = model.predict(session_batch(s))[0, 0]
        s.item_fields[1] = t
        assert (p0 != p1) == changes


def test_no_skip_edges_changes_plan():
    on = layout_plan("v2,h2,v2", True, False, False)
    off = layout_plan("v2,h2,v2", False, False, False)
    assert on.preds[4] == (1, 2, 3)
    assert off.preds[4] == (2, 3)


@pytest.mark.parametrize("kind", ["inner", "neural", "kernel"])
def test_probabilities_in_open_interval(rng, kind):
    model = small_model(comparison=kind)
    p = model.predict(next(iter(EncodedData([random_session(rng, "v6,h8,v6", sid=k) for k in range(4)]).groups.values())))
    assert np.all((p > 0) & (p < 1))


def test_predict_click_matches_forward(rng):
    model = small_model()
    s = random_session(rng)
    states = dag_gru_forward(model, s)
    p = model.predict(session_batch(s))[0]
    for k, node in enumerate(s.nodes):
        assert predict_click(model, states[node], comparison_context(model, s, node)) == pytest.approx(p[k], abs=1e-14)


def test_session_loss_matches_hand_sum(rng):
    model = small_model()
    s = random_session(rng, "v2")
    s.clicks = [1, 0]
    preds = {NodeId(1, 1): 0.5, NodeId(1, 2): 0.25}
    assert session_loss(model, s, preds) == pytest.approx(np.log(2) - np.log(0.75), abs=1e-12)


def test_l2_excludes_embeddings_and_biases():
    model = small_model()
    names = {t.name for t in model.regularized()}
    assert names and all(not n.startswith("emb.") and not n.endswith(("b", "b1", "b2")) for n in names)
    assert "gru.v_tandem.W" in names and "cmp.W" in names


@pytest.mark.parametrize(
    "overrides",
    [
        {"comparison": "inner"},
        {"comparison": "neural"},
        {"comparison": "kernel"},
        {"no_comparison": True},
        {"no_skip_edges": True},
        {"share_hv": True},
        {"share_tm": True},
    ],
)
def test_end_to_end_gradients(overrides):
    s = random_session(np.random.default_rng(1), "v3,h3,v2", click_rate=0.5)
    worst, checked = gradient_check(small_model(**overrides), s)
    assert checked >= 50
    assert worst < 1e-4


def test_checkpoint_roundtrip_and_mismatch(tmp_path, rng):
    model = small_model()
    path = tmp_path / "m.json"
    save_model(path, model)
    loaded = load_model(path)
    s = random_session(rng)
    assert np.array_equal(loaded.predict(session_batch(s)), model.predict(session_batch(s)))
    with pytest.raises(ConfigMismatch):
        load_model(path, expected={"model": "fscm", "config": {**model.config.to_dict(), "share_hv": True}})
    other = FSCM(ModelConfig(QUERY_VOCAB, ITEM_VOCAB, hidden_size=6, share_tm=True))
    arrays, _ = nk.load_tensors(path)
    with pytest.raises(ConfigMismatch):
        other.load_arrays(arrays)
    doc = json.loads(path.read_text())
    doc["meta"]["config"]["hidden_size"] = 7
    path.write_text(json.dumps(doc))
    with pytest.raises(ConfigMismatch):
        load_model(path)


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(QUERY_VOCAB, ITEM_VOCAB, comparison="cosine")
    with pytest.raises(ValueError):
        ModelConfig.from_dict({"query_vocab": [1], "item_vocab": [1], "bogus": 1})
