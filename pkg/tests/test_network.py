import numpy as np
import pytest

from fedghn.archgraph import (Activation, ArchGraph, LayerKind, LayerType,
                              LayerVocabulary, preset, shared_vocab)
from fedghn.autodiff import Tensor
from fedghn.errors import NonFiniteError, ShapeError
from fedghn.network import client_forward, kaiming_client_weights, loss


def _linear_only_graph(in_features=4, classes=3):
    pool = LayerType(0, LayerKind.GLOBAL_AVG_POOL)
    lin = LayerType(1, LayerKind.LINEAR, in_features, classes)
    vocab = LayerVocabulary((pool, lin))
    nodes = ((0, 0), (1, 1))
    return ArchGraph("lin", (in_features, 2, 2), vocab, nodes, ((0, 1),))


def test_forward_shapes_on_presets():
    rng = np.random.default_rng(0)
    batch = rng.uniform(0, 1, (4, 3, 16, 16))
    for name in ("small4", "arch0", "plain4"):
        g = preset(name, 0.125, 10, (16, 16), 3)
        weights = kaiming_client_weights(g, seed=1)
        logits = client_forward(g, weights, batch.astype(np.float32))
        assert logits.shape == (4, 10)
        assert np.all(np.isfinite(logits.data))


def test_forward_rejects_wrong_batch_shape(small_graph):
    weights = kaiming_client_weights(small_graph, seed=0)
    with pytest.raises(ShapeError):
        client_forward(small_graph, weights, np.zeros((2, 1, 16, 16), dtype=np.float32))
    with pytest.raises(ShapeError):
        client_forward(small_graph, weights, np.zeros((2, 3, 8, 8), dtype=np.float32))


def test_forward_is_additive_for_bias_free_linear():
    g = _linear_only_graph()
    w = np.arange(12, dtype=np.float64).reshape(4, 3) * 0.1
    weights = {1: (Tensor(w), Tensor(np.zeros(3)))}
    rng = np.random.default_rng(1)
    a = rng.normal(size=(2, 4, 2, 2))
    b = rng.normal(size=(2, 4, 2, 2))
    fa = client_forward(g, weights, a).data
    fb = client_forward(g, weights, b).data
    fab = client_forward(g, weights, a + b).data
    assert np.allclose(fab, fa + fb, atol=1e-12)


def test_add_node_equals_sum_of_branches():
    vocab = shared_vocab(0.125, 10, 3)
    nodes = ((0, 0), (1, 1), (2, 1), (3, 9), (4, 11), (5, 12))
    edges = ((0, 1), (0, 2), (1, 3), (2, 3), (3, 4), (4, 5))
    g = ArchGraph("twohead", (3, 16, 16), vocab, nodes, edges)
    weights = kaiming_client_weights(g, seed=3, dtype=np.float64)
    batch = np.random.default_rng(2).uniform(0, 1, (2, 3, 16, 16))
    _, stats = client_forward(g, weights, batch, collect_stats=True)
    assert set(stats) == {0, 1, 2, 3, 4, 5}

    # single-branch graphs reusing the same weights, summed by hand
    single = ArchGraph("one", (3, 16, 16), vocab,
                       ((0, 0), (1, 1), (2, 11), (3, 12)),
                       ((0, 1), (1, 2), (2, 3)))
    w_lin = weights.tensors[5]
    out_a = client_forward(
        single, {0: weights.tensors[0], 1: weights.tensors[1], 3: w_lin}, batch).data
    out_b = client_forward(
        single, {0: weights.tensors[0], 1: weights.tensors[2], 3: w_lin}, batch).data
    bias = w_lin[1].data
    combined = client_forward(g, weights, batch).data
    assert np.allclose(combined, out_a + out_b - bias, atol=1e-10)


@pytest.mark.filterwarnings("ignore:invalid value encountered")
def test_forward_flags_non_finite_logits(small_graph):
    weights = kaiming_client_weights(small_graph, seed=0, dtype=np.float64)
    w, b = weights.tensors[5]
    w.data[:] = np.inf
    batch = np.random.default_rng(0).uniform(0, 1, (2, 3, 16, 16))
    with pytest.raises(NonFiniteError):
        client_forward(small_graph, weights, batch)


def test_collect_stats_reports_every_node(small_graph):
    weights = kaiming_client_weights(small_graph, seed=5, dtype=np.float64)
    batch = np.random.default_rng(4).uniform(0, 1, (8, 3, 16, 16))
    logits, stats = client_forward(small_graph, weights, batch, collect_stats=True)
    assert set(stats) == set(range(len(small_graph.nodes)))
    assert all(np.isfinite(v) and v >= 0 for v in stats.values())
    assert stats[5] == pytest.approx(float(np.std(logits.data)))


def test_kaiming_weights_have_documented_stats(small_graph):
    weights = kaiming_client_weights(small_graph, seed=11, dtype=np.float64)
    for nid, (w, b) in weights.tensors.items():
        lt = small_graph.layer(nid)
        assert np.array_equal(b.data, np.zeros(lt.out_channels))
        expected = np.sqrt(2.0 / lt.fan_in)
        got = float(np.std(w.data))
        assert expected / 2 <= got <= expected * 2


def test_loss_dispatch():
    logits = Tensor(np.array([[2.0, 0.0], [0.0, 2.0]]))
    sl = loss(logits, np.array([0, 1]), "single_label")
    ml = loss(logits, np.array([[1.0, 0.0], [0.0, 1.0]]), "multi_label")
    assert sl.data.shape == ()
    assert ml.data.shape == ()
    with pytest.raises(ValueError):
        loss(logits, np.array([0, 1]), "regression")


def test_softmax_loss_shift_invariance_through_forward(small_graph):
    # end to end: adding a constant to the linear bias shifts all logits
    weights = kaiming_client_weights(small_graph, seed=2, dtype=np.float64)
    batch = np.random.default_rng(9).uniform(0, 1, (4, 3, 16, 16))
    labels = np.array([0, 3, 5, 9])
    base = loss(client_forward(small_graph, weights, batch), labels, "single_label").data
    w, b = weights.tensors[5]
    b.data += 7.5
    shifted = loss(client_forward(small_graph, weights, batch), labels, "single_label").data
    assert abs(base - shifted) < 1e-12
