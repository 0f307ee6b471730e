import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from helpers import stale_gradient_errors
from glasu.errors import ConfigError, ProtocolError
from glasu.federation import (Average, ClientWorker, Concat, ModelConfig, RoundConfig, Server,
                              aggregate, evaluate, extract, init_models, joint_inference,
                              local_compose, server_backward_route, train)
from glasu.graph import Dataset, Graph, normalize_adjacency, partition_dataset
from glasu.harness.fixtures import make_sbm_fixture
from glasu.linalg import RngState
from glasu.model import Gcn, Gcnii, classify, loss_and_grad
from glasu.sampling import LabelMode, LayerPlan, SamplerConfig, full_schedule
from glasu import transport as tp

ALL, SINGLE = LabelMode.ALL_CLIENTS, LabelMode.SINGLE_HOLDER


def test_aggregate_examples():
    a = np.arange(6.0).reshape(2, 3)
    np.testing.assert_array_equal(aggregate([a], Average()), a)
    np.testing.assert_array_equal(aggregate([a, a, a], Average()), a)
    np.testing.assert_array_equal(aggregate([np.array([[2.0]]), np.array([[4.0]])], Average()), [[3.0]])
    np.testing.assert_array_equal(aggregate([a, a[:, :1]], Concat((3, 1))), np.hstack([a, a[:, :1]]))
    with pytest.raises(ConfigError):
        aggregate([a, a[:1]], Average())
    with pytest.raises(ConfigError):
        aggregate([a, a[:, :2]], Average())
    with pytest.raises(ConfigError):
        aggregate([a, a], Concat((3, 2)))
    with pytest.raises(ConfigError):
        Concat((2, 0))


def test_extract_and_compose_examples():
    one = np.array([[4.0]])
    assert np.asarray(extract(one, one, Average(), 1, 0)).tolist() == [[0.0]]
    assert np.asarray(extract(np.array([[3.0]]), one, Average(), 2, 0)).tolist() == [[1.0]]
    assert local_compose(np.array([[1.0]]), np.array([[6.0]]), Average(), 2, 0).tolist() == [[4.0]]
    h = np.arange(12.0).reshape(2, 6)
    minus = extract(h, h[:, 2:4], Concat((2, 2, 2)), 3, 1)
    np.testing.assert_array_equal(minus, h[:, [0, 1, 4, 5]])
    np.testing.assert_array_equal(local_compose(minus, h[:, 2:4], Concat((2, 2, 2)), 3, 1), h)
    with pytest.raises(ConfigError):
        extract(h, h[:, :3], Average(), 2, 0)
    with pytest.raises(ConfigError):
        local_compose(minus, h[:, :3], Concat((2, 2, 2)), 3, 1)


def test_server_backward_route():
    g = np.array([[8.0]])
    assert [x.tolist() for x in server_backward_route(g, Average(), 4)] == [[[2.0]]] * 4
    np.testing.assert_array_equal(server_backward_route(g, Average(), 1)[0], g)
    blocks = server_backward_route(np.arange(6.0).reshape(2, 3), Concat((1, 2)), 2)
    assert [b.shape for b in blocks] == [(2, 1), (2, 2)]


finite = st.floats(-1e6, 1e6, allow_nan=False, allow_infinity=False)


@given(st.integers(1, 8), st.integers(0, 7), st.integers(1, 5), st.integers(1, 4), st.data())
@settings(max_examples=100, deadline=None)
def test_roundtrip_property(M, m, rows, cols, data):
    m = m % M
    parts = [data.draw(hnp.arrays(np.float64, (rows, cols), elements=finite)) for _ in range(M)]
    h = aggregate(parts, Average())
    assert np.array_equal(local_compose(extract(h, parts[m], Average(), M, m), parts[m], Average(), M, m), h)
    cat = Concat((cols,) * M)
    h = aggregate(parts, cat)
    assert np.array_equal(local_compose(extract(h, parts[m], cat, M, m), parts[m], cat, M, m), h)


@pytest.mark.parametrize("kind,agg", [(Gcn(), "average"), (Gcn(), "concat"), (Gcnii(), "average")])
@pytest.mark.parametrize("mode", [ALL, SINGLE])
@pytest.mark.parametrize("agg_layers", [(0, 1), (1,)])
def test_local_gradients_match_finite_differences(kind, agg, mode, agg_layers):
    errs = stale_gradient_errors(kind, agg, mode, agg_layers)
    assert max(errs) < 1e-5, errs


def _sbm_part(M=2, d=2, seed=0):
    ds = make_sbm_fixture(2, 20, 0.5, 0.05, d, seed=0)
    return ds, partition_dataset(ds, M, 0.8, seed)


def test_freshness_and_null_step():
    ds, part = _sbm_part()
    plan = LayerPlan(2, (0, 1))
    _, hist = train(part, plan, RoundConfig(3, 3, 0.0), SamplerConfig(8, 3), Average(), 1, trace=True)
    for tr in hist.traces:
        by = {(t, q): top for t, q, top in tr}
        for t in range(3):
            for q in range(3):
                assert by[(t, q)].tobytes() == by[(t, -1)].tobytes()
    # eta = 0: every local iteration sees the same loss
    for t in range(3):
        for c in range(2):
            ls = {loss for tt, q, cc, loss in hist.losses if tt == t and cc == c}
            assert len(ls) == 1


def test_null_step_keeps_weights():
    ds, part = _sbm_part()
    plan = LayerPlan(2, (1,))
    init = init_models(part, plan, Average(), ModelConfig(), 2, ALL)
    models, _ = train(part, plan, RoundConfig(2, 2, 0.0), SamplerConfig(8, 3), Average(), 2,
                      models=[m.copy() for m in init])
    for a, b in zip(models, init):
        for x, y in zip(a.params(), b.params()):
            assert x.tobytes() == y.tobytes()


def test_training_is_deterministic():
    ds, part = _sbm_part()
    args = (part, LayerPlan(2, (1,)), RoundConfig(5, 2, 0.3), SamplerConfig(8, 3), Average(), 9)
    m1, h1 = train(*args)
    m2, h2 = train(*args)
    assert h1 == h2 and h1.ledger.summary() == h2.ledger.summary()
    for a, b in zip(m1, m2):
        assert all(x.tobytes() == y.tobytes() for x, y in zip(a.params(), b.params()))


def test_single_holder_matches_all_clients_at_first_inference():
    ds, part = _sbm_part()
    plan = LayerPlan(2, (0, 1))
    runs = {}
    for mode in (ALL, SINGLE):
        _, runs[mode] = train(part, plan, RoundConfig(1, 1, 0.1, mode), SamplerConfig(8, 3),
                              Average(), 3, trace=True)
    top = {mode: [dict(((t, q), x) for t, q, x in tr)[(0, -1)] for tr in runs[mode].traces]
           for mode in runs}
    for m in range(2):
        assert top[ALL][m].tobytes() == top[SINGLE][m].tobytes()
    first = {mode: [l for t, q, c, l in runs[mode].losses if (t, q, c) == (0, 0, 0)][0] for mode in runs}
    assert first[ALL] == first[SINGLE]
    assert {c for _, _, c, _ in runs[SINGLE].losses} == {0}


def _dense_joint_forward(models, part, nodes):
    """Every client holds the full graph and aggregation happens at every layer."""
    a = normalize_adjacency(part.shards[0].graph).toarray()
    h = None
    for l in range(models[0].num_layers):
        outs = []
        for m, model in enumerate(models):
            inp = part.shards[m].features if h is None else h
            outs.append(np.maximum(a @ inp @ model.weights[l], 0.0))
        h = sum(outs) / len(outs)
    return h[nodes]


def test_every_layer_aggregation_on_full_graph_matches_dense_forward(sbm6):
    part = partition_dataset(sbm6, 3, 1.0, 0)
    plan = LayerPlan(3, (0, 1, 2))
    models = init_models(part, plan, Average(), ModelConfig(Gcn(), 5), 4, ALL)
    workers = [ClientWorker(m, part, plan, Average(), models[m]) for m in range(3)]
    nodes = np.arange(part.num_nodes)
    res = joint_inference(workers, full_schedule([w.neighbors for w in workers], plan, nodes))
    want = _dense_joint_forward(models, part, nodes)
    for top in res.tops:
        np.testing.assert_allclose(top, want, rtol=1e-12, atol=1e-14)


def test_joint_inference_sum_of_compositions(sbm6):
    part = partition_dataset(sbm6, 3, 0.7, 1)
    plan = LayerPlan(2, (0, 1))
    models = init_models(part, plan, Average(), ModelConfig(Gcn(), 4), 1, ALL)
    workers = [ClientWorker(m, part, plan, Average(), models[m]) for m in range(3)]
    sched = full_schedule([w.neighbors for w in workers], plan, np.arange(10))
    seen = {}

    def capture(w, m):
        gen = w.forward(sched.client(m), w.blocks(sched.client(m)))
        return gen

    res = joint_inference(workers, sched)
    # recompose each client's value at the last layer from its own cache
    for m, w in enumerate(workers):
        gen = capture(w, m)
        l, h_plus = next(gen)
        seen[m] = local_compose(res.caches[m][l], h_plus, Average(), 3, m)
    for m in range(1, 3):
        assert seen[m].tobytes() == seen[0].tobytes()


def test_missing_cache_is_fatal(sbm):
    part = partition_dataset(sbm, 2, 0.8, 0)
    plan = LayerPlan(2, (1,))
    models = init_models(part, plan, Average(), ModelConfig(), 0, ALL)
    w = ClientWorker(0, part, plan, Average(), models[0])
    sets = full_schedule([w.neighbors, w.neighbors], plan, np.arange(4)).client(0)
    with pytest.raises(ConfigError, match="cached aggregate"):
        w.local_update(sets, w.blocks(sets), {}, None, 0.1)


def test_misaligned_rows_are_a_protocol_error():
    link, clients = tp.inproc_pair(2)
    server = Server(link, LayerPlan(1, (0,)), Average(), RngState(0), np.arange(4),
                    SamplerConfig(2, 1), ALL)
    clients[0].send(tp.ReprUpload(0, np.ones((2, 3))))
    clients[1].send(tp.ReprUpload(0, np.ones((3, 3))))
    import threading
    th = threading.Thread(target=lambda: [c.recv() for c in clients])
    th.start()
    with pytest.raises(ProtocolError, match="rows"):
        server.run_round(0)
    th.join()


def test_wrong_message_is_a_protocol_error():
    link, clients = tp.inproc_pair(1)
    server = Server(link, LayerPlan(1, (0,)), Average(), RngState(0), np.arange(4),
                    SamplerConfig(2, 1), ALL)
    clients[0].send(tp.CotangentUpload(np.ones((1, 1))))
    with pytest.raises(ProtocolError, match="expected ReprUpload"):
        server.run_round(0)


def test_config_errors(sbm):
    part = partition_dataset(sbm, 2, 0.8, 0)
    with pytest.raises(ConfigError, match="GCNII"):
        train(part, LayerPlan(2, (1,)), RoundConfig(1, 1, 0.1), SamplerConfig(4, 2), Concat((4, 4)), 0,
              model=ModelConfig(Gcnii(), 4))
    with pytest.raises(ConfigError, match="single-holder"):
        train(part, LayerPlan(2, (0,)), RoundConfig(1, 1, 0.1, SINGLE), SamplerConfig(4, 2), Average(), 0)
    with pytest.raises(ConfigError):
        RoundConfig(1, 0, 0.1)
    with pytest.raises(ConfigError):
        train(part, LayerPlan(2, (1,)), RoundConfig(1, 1, 0.1), SamplerConfig(4, 2), Average(), 0,
              transport="carrier-pigeon")


def test_evaluate_edge_cases(sbm):
    part = partition_dataset(sbm, 2, 0.8, 0)
    plan = LayerPlan(2, (1,))
    models = init_models(part, plan, Average(), ModelConfig(), 0, ALL)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        assert evaluate(models, part, plan, Average(), np.array([], dtype=np.int64)) == 1.0
    assert caught


def test_evaluate_separable_toy_is_perfect():
    # two disconnected pairs; features equal the one-hot label, identity-like weights
    g = Graph.from_pairs(4, [(0, 1), (2, 3)])
    x = np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0], [0.0, 1.0]])
    ds = Dataset(g, x, np.array([0, 0, 1, 1]), np.arange(4), np.array([], dtype=np.int64),
                 np.array([], dtype=np.int64), 2)
    part = partition_dataset(ds, 1, 1.0, 0)
    plan = LayerPlan(1, (0,))
    models = init_models(part, plan, Average(), ModelConfig(Gcn(), 2), 0, ALL)
    models[0].weights[0] = np.eye(2)
    models[0].classifier = np.eye(2)
    assert evaluate(models, part, plan, Average(), np.arange(4)) == 1.0


def test_untrained_accuracy_is_chance_on_random_labels():
    rng = np.random.default_rng(0)
    n, C = 400, 4
    pairs = [(i, j) for i in range(n) for j in rng.choice(n, 3) if i != j]
    ds = Dataset(Graph.from_pairs(n, pairs), rng.normal(size=(n, 6)), rng.integers(0, C, n),
                 np.arange(n), np.array([], dtype=np.int64), np.array([], dtype=np.int64), C)
    part = partition_dataset(ds, 2, 0.8, 0)
    plan = LayerPlan(2, (1,))
    models = init_models(part, plan, Average(), ModelConfig(), 5, ALL)
    acc = evaluate(models, part, plan, Average(), np.arange(n), chunk=64)
    sd = np.sqrt((1 / C) * (1 - 1 / C) / n)
    assert abs(acc - 1 / C) < 3 * sd


def test_sbm_training_fits_and_loss_trends_down(sbm):
    part = partition_dataset(sbm, 2, 0.8, 0)
    plan = LayerPlan(2, (1,))
    # a gentle step keeps the run in its descending phase; near zero loss, batch noise dominates
    models, hist = train(part, plan, RoundConfig(200, 2, 0.05), SamplerConfig(16, 3), Average(), 0)
    assert evaluate(models, part, plan, Average(), sbm.train) >= 0.95
    per_round = hist.mean_round_loss()
    window = np.convolve(per_round, np.ones(20) / 20, mode="valid")
    rises = np.diff(window)
    bad = rises[rises > 0]
    assert len(bad) <= 0.05 * len(rises) and (bad < 1e-3).all()


def test_history_csv_roundtrip(tmp_path, sbm):
    part = partition_dataset(sbm, 2, 0.8, 0)
    plan = LayerPlan(2, (1,))
    _, hist = train(part, plan, RoundConfig(3, 2, 0.3), SamplerConfig(8, 3), Average(), 0,
                    eval_nodes=sbm.val, eval_every=1)
    hist.write_csv(tmp_path / "l.csv", tmp_path / "a.csv")
    lines = (tmp_path / "l.csv").read_text().splitlines()
    assert lines[0] == "t,q,client,loss" and len(lines) == 1 + 3 * 2 * 2
    back = [(int(t), int(q), int(c), float(x)) for t, q, c, x in (ln.split(",") for ln in lines[1:])]
    assert back == hist.losses
    acc = (tmp_path / "a.csv").read_text().splitlines()
    assert acc[0] == "t,accuracy" and [float(r.split(",")[1]) for r in acc[1:]] == [a for _, a in hist.accuracy]
    assert hist.loss_matrix(0).shape == (3, 2)
