import math

import numpy as np
import pytest

from fedghn.archgraph import (Activation, ArchGraph, LayerKind, LayerType,
                              LayerVocabulary, one_hot_features, preset,
                              shared_vocab)
from fedghn.autodiff import Tensor
from fedghn.errors import (BadDims, BadParams, DimMismatch, MissingHead,
                           VocabMismatch)
from fedghn.ghn import (GhnDims, average_params, generate, gnn_forward,
                        head_input_norm, heads_forward, in_adjacency, init_ghn,
                        load_checkpoint, save_checkpoint)


def _conv_type(tid, cin, cout):
    return LayerType(tid, LayerKind.CONV, cin, cout, kernel=3, stride=1,
                     activation=Activation.RELU)


def _zero_gnn(params):
    for layer in params.gnn:
        layer.a.data[:] = 0.0
        layer.b.data[:] = 0.0
    return params


# ---------------------------------------------------------------- init


def test_init_contract_values(small_graph):
    params = init_ghn(small_graph.vocab, GhnDims(), seed=0, dtype=np.float64)
    assert len(params.gnn) == 6
    assert params.gnn[0].a.shape == (13, 51)
    assert params.gnn[1].a.shape == (51, 51)
    for layer in params.gnn:
        assert np.array_equal(layer.bias.data, np.zeros(51))
    for tid, head in params.heads.items():
        lt = small_graph.vocab[tid]
        assert head.w1.shape == (51, 16)
        assert np.array_equal(head.b1.data, np.zeros(16))
        assert head.w2.shape == (16, lt.param_count)
        assert np.array_equal(head.b2.data, np.zeros(lt.param_count))
        assert np.array_equal(head.ws.data, np.zeros((16, 1)))
        assert head.bs.data.ravel()[0] == 1.0


def test_init_heads_cover_exactly_parametric_types(small_graph):
    params = init_ghn(small_graph.vocab, GhnDims(), seed=0)
    assert set(params.heads) == set(small_graph.vocab.parametric_ids)


def test_init_is_deterministic_in_seed(small_graph):
    a = init_ghn(small_graph.vocab, GhnDims(), seed=7)
    b = init_ghn(small_graph.vocab, GhnDims(), seed=7)
    for x, y in zip(a.leaves(), b.leaves()):
        assert np.array_equal(x.data, y.data)
    c = init_ghn(small_graph.vocab, GhnDims(), seed=8)
    assert any(not np.array_equal(x.data, y.data)
               for x, y in zip(a.leaves(), c.leaves()))


def test_init_rejects_bad_dims(small_graph):
    with pytest.raises(BadDims):
        init_ghn(small_graph.vocab, GhnDims(d_node=0), seed=0)
    with pytest.raises(BadDims):
        init_ghn(small_graph.vocab, GhnDims(mode="nope"), seed=0)


def test_generated_conv_std_near_kaiming_target(small_graph):
    # conv 8->8 k3: target sqrt(2 / 72), pooled over 10 seeds
    vocab = small_graph.vocab
    graph = preset("arch1", 0.125, 10, (16, 16), 3)
    target = math.sqrt(2.0 / 72.0)
    samples = []
    for seed in range(10):
        params = init_ghn(vocab, GhnDims(), seed=seed, dtype=np.float64)
        weights = generate(params, graph)
        for nid in graph.parametric_nodes:
            if graph.type_of[nid] == 1:
                samples.extend(weights.tensors[nid][0].data.ravel().tolist())
    std = float(np.std(np.asarray(samples)))
    assert target / 2.0 <= std <= target * 2.0


# ---------------------------------------------------------------- gnn_forward


def test_zero_weight_gnn_collapses_rows_to_sigma_b(small_graph):
    dims = GhnDims(gnn_rounds=1)
    params = _zero_gnn(init_ghn(small_graph.vocab, dims, seed=0, dtype=np.float64))
    bias = np.linspace(-1.0, 1.0, 51)
    params.gnn[0].bias.data[:] = bias
    feats = one_hot_features(small_graph)
    h = gnn_forward(params, small_graph, feats)
    expected = np.maximum(bias, 0.0)
    for row in h.data:
        assert np.array_equal(row, expected)


def test_isolated_node_single_round_is_exact(small_graph):
    vocab = small_graph.vocab
    g = ArchGraph("lone", (3, 16, 16), vocab, ((0, 0),), ())
    dims = GhnDims(gnn_rounds=1)
    params = init_ghn(vocab, dims, seed=3, dtype=np.float64)
    feats = one_hot_features(g)
    h = gnn_forward(params, g, feats)
    expected = np.maximum(feats @ params.gnn[0].a.data + params.gnn[0].bias.data, 0.0)
    assert np.array_equal(h.data, expected)


def test_two_round_chain_matches_dense_oracle(small_graph):
    vocab = small_graph.vocab
    g = ArchGraph("chain3", (3, 16, 16), vocab,
                  ((0, 0), (1, 2), (2, 4)), ((0, 1), (1, 2)))
    dims = GhnDims(gnn_rounds=2)
    params = init_ghn(vocab, dims, seed=5, dtype=np.float64)
    x = np.random.default_rng(0).normal(size=(3, vocab.k))
    m = np.zeros((3, 3))
    m[1, 0] = 1.0
    m[2, 1] = 1.0
    a0, b0, c0 = (params.gnn[0].a.data, params.gnn[0].b.data, params.gnn[0].bias.data)
    a1, b1, c1 = (params.gnn[1].a.data, params.gnn[1].b.data, params.gnn[1].bias.data)
    h1 = np.maximum(x @ a0 + (m @ x) @ b0 + c0, 0.0)
    h2 = np.maximum(h1 @ a1 + (m @ h1) @ b1 + c1, 0.0)
    out = gnn_forward(params, g, x)
    assert np.allclose(out.data, h2, atol=1e-14)
    assert np.array_equal(in_adjacency(g, np.float64), m)


def test_no_gnn_mode_pads_features(small_graph):
    dims = GhnDims(mode="no_gnn")
    params = init_ghn(small_graph.vocab, dims, seed=0, dtype=np.float64)
    feats = one_hot_features(small_graph)
    h = gnn_forward(params, small_graph, feats)
    assert h.shape == (len(small_graph.nodes), 51)
    assert np.array_equal(h.data[:, :13], feats)
    assert np.array_equal(h.data[:, 13:], np.zeros((len(small_graph.nodes), 38)))


def test_identity_mode_passes_features_through(small_graph):
    dims = GhnDims(mode="identity", d_node=13)
    params = init_ghn(small_graph.vocab, dims, seed=0, dtype=np.float64)
    feats = one_hot_features(small_graph)
    h = gnn_forward(params, small_graph, feats)
    assert np.array_equal(h.data, feats)


# ---------------------------------------------------------------- heads_forward


def test_heads_rescale_embeddings_to_fixed_norm():
    assert head_input_norm(GhnDims()) == pytest.approx(math.sqrt(2 * 51 / 16))


def test_zero_w2_generates_zero_weights(small_graph):
    params = init_ghn(small_graph.vocab, GhnDims(), seed=1, dtype=np.float64)
    for head in params.heads.values():
        head.w2.data[:] = 0.0
        head.b2.data[:] = 0.0
    weights = generate(params, small_graph)
    for w, b in weights.tensors.values():
        assert np.array_equal(w.data, np.zeros_like(w.data))
        assert np.array_equal(b.data, np.zeros_like(b.data))


def test_zero_scale_branch_kills_output(small_graph):
    params = init_ghn(small_graph.vocab, GhnDims(), seed=1, dtype=np.float64)
    for head in params.heads.values():
        head.ws.data[:] = 0.0
        head.bs.data[:] = 0.0
    weights = generate(params, small_graph)
    for w, b in weights.tensors.values():
        assert np.array_equal(w.data, np.zeros_like(w.data))
        assert np.array_equal(b.data, np.zeros_like(b.data))


def test_total_params_matches_hand_count():
    g = preset("arch1", 1.0, 10, (32, 32), 3)
    params = init_ghn(g.vocab, GhnDims(), seed=0)
    weights = generate(params, g)
    assert weights.total_params == 7197898


def test_missing_head_raises(small_graph):
    params = init_ghn(small_graph.vocab, GhnDims(), seed=0)
    del params.heads[0]
    feats = one_hot_features(small_graph, dtype=np.float32)
    h = gnn_forward(params, small_graph, feats)
    with pytest.raises(MissingHead):
        heads_forward(params, small_graph, h)


def test_generate_rejects_foreign_vocab(small_graph):
    params = init_ghn(small_graph.vocab, GhnDims(), seed=0)
    other = shared_vocab(0.25, 10, 3)
    with pytest.raises(VocabMismatch):
        generate(params, small_graph, other)


def test_symmetric_branches_get_identical_weights():
    vocab = shared_vocab(0.125, 10, 3)
    # stem feeds two C64 branches with identical in-neighborhoods
    nodes = ((0, 0), (1, 1), (2, 1), (3, 10))
    edges = ((0, 1), (0, 2), (1, 3), (2, 3))
    g = ArchGraph("twin", (3, 16, 16), vocab, nodes, edges)
    params = init_ghn(vocab, GhnDims(), seed=9, dtype=np.float64)
    weights = generate(params, g)
    w1, b1 = weights.tensors[1]
    w2, b2 = weights.tensors[2]
    assert np.array_equal(w1.data, w2.data)
    assert np.array_equal(b1.data, b2.data)


# ---------------------------------------------------------------- structure properties


def _permute_graph(g, perm):
    inv = {old: new for new, old in enumerate(perm)}
    nodes = tuple(sorted((inv[nid], tid) for nid, tid in g.nodes))
    edges = tuple(sorted((inv[s], inv[d]) for s, d in g.edges))
    return ArchGraph(g.name, g.input_shape, g.vocab, nodes, edges)


def test_permutation_equivariance(small_graph):
    params = init_ghn(small_graph.vocab, GhnDims(), seed=2, dtype=np.float64)
    perm = [3, 0, 5, 1, 4, 2]  # new id i holds old node perm[i]
    permuted = _permute_graph(small_graph, perm)
    base = generate(params, small_graph)
    moved = generate(params, permuted)
    inv = {old: new for new, old in enumerate(perm)}
    for nid in small_graph.parametric_nodes:
        w_a, b_a = base.tensors[nid]
        w_b, b_b = moved.tensors[inv[nid]]
        assert np.allclose(w_a.data, w_b.data, rtol=0, atol=1e-12)
        assert np.allclose(b_a.data, b_b.data, rtol=0, atol=1e-12)


def _clone_vocab():
    # six interchangeable 4->4 conv types plus pool and a 4->3 linear head
    convs = [_conv_type(i, 4, 4) for i in range(6)]
    pool = LayerType(6, LayerKind.GLOBAL_AVG_POOL)
    linear = LayerType(7, LayerKind.LINEAR, 4, 3)
    return LayerVocabulary(tuple(convs + [pool, linear]))


def _long_chain(vocab, mutated_type):
    # conv nodes 0..21; node 13 carries the mutated type
    assign = {13: mutated_type, 19: 4, 20: 5}
    type_ids = [assign.get(i, 2 if i <= 12 else 3) for i in range(22)]
    type_ids += [6, 7]
    nodes = tuple(enumerate(type_ids))
    edges = tuple((i, i + 1) for i in range(23))
    return ArchGraph("long", (4, 8, 8), vocab, nodes, edges)


def test_locality_mutation_beyond_horizon_is_invisible():
    vocab = _clone_vocab()
    params = init_ghn(vocab, GhnDims(), seed=4, dtype=np.float64)
    base = generate(params, _long_chain(vocab, 0))
    mutated = generate(params, _long_chain(vocab, 1))
    # upstream nodes never see downstream mutations
    for nid in range(13):
        for a, b in zip(base.tensors[nid], mutated.tensors[nid]):
            assert np.array_equal(a.data, b.data)
    # node 20 sits 7 hops downstream, one past the 6-round horizon
    for a, b in zip(base.tensors[20], mutated.tensors[20]):
        assert np.array_equal(a.data, b.data)
    # node 19 is exactly 6 hops downstream and must differ
    assert not np.array_equal(base.tensors[19][0].data, mutated.tensors[19][0].data)


# ---------------------------------------------------------------- average_params


def test_average_params_uniform_matches_numpy_mean(small_graph):
    sets = [init_ghn(small_graph.vocab, GhnDims(), seed=s, dtype=np.float64)
            for s in range(3)]
    avg = average_params(sets)
    for i, leaf in enumerate(avg.leaves()):
        stack = np.stack([p.leaves()[i].data for p in sets])
        ref = (stack[0] / 3 + stack[1] / 3 + stack[2] / 3)
        assert np.allclose(leaf.data, ref, rtol=0, atol=1e-15)


def test_average_params_of_identical_sets_is_identity(small_graph):
    p = init_ghn(small_graph.vocab, GhnDims(), seed=1, dtype=np.float64)
    avg = average_params([p, p.clone(), p.clone()])
    for a, b in zip(avg.leaves(), p.leaves()):
        assert np.allclose(a.data, b.data, rtol=0, atol=1e-15)


def test_average_params_weighted():
    vocab = shared_vocab(0.125, 10, 3)
    a = init_ghn(vocab, GhnDims(), seed=0, dtype=np.float64)
    b = init_ghn(vocab, GhnDims(), seed=1, dtype=np.float64)
    avg = average_params([a, b], weights=[0.25, 0.75])
    la, lb, lo = a.leaves(), b.leaves(), avg.leaves()
    for x, y, z in zip(la, lb, lo):
        assert np.allclose(z.data, 0.25 * x.data + 0.75 * y.data, atol=1e-15)


def test_average_params_validates_inputs(small_graph):
    p = init_ghn(small_graph.vocab, GhnDims(), seed=0)
    with pytest.raises(DimMismatch):
        average_params([])
    with pytest.raises(DimMismatch):
        average_params([p, p], weights=[1.0])
    with pytest.raises(ValueError):
        average_params([p, p], weights=[0.7, 0.7])
    q = init_ghn(small_graph.vocab, GhnDims(d_node=32), seed=0)
    with pytest.raises(DimMismatch):
        average_params([p, q])


# ---------------------------------------------------------------- checkpoints


def test_checkpoint_round_trip_is_bitwise(tmp_path, small_graph):
    for dtype in (np.float32, np.float64):
        params = init_ghn(small_graph.vocab, GhnDims(), seed=6, dtype=dtype)
        path = tmp_path / f"ghn_{np.dtype(dtype).name}.bin"
        save_checkpoint(params, path)
        back = load_checkpoint(path)
        assert back.dims == params.dims
        assert back.vocab == params.vocab
        for a, b in zip(params.leaves(), back.leaves()):
            assert a.data.dtype == b.data.dtype
            assert np.array_equal(a.data, b.data)


def test_checkpoint_rejects_malformed_files(tmp_path, small_graph):
    params = init_ghn(small_graph.vocab, GhnDims(), seed=0)
    path = tmp_path / "good.bin"
    save_checkpoint(params, path)
    blob = path.read_bytes()

    cases = {
        "bad_magic": b"XXXX" + blob[4:],
        "truncated_header": blob[:10],
        "truncated_payload": blob[:-8],
        "trailing_garbage": blob + b"\x00" * 4,
    }
    for name, data in cases.items():
        bad = tmp_path / f"{name}.bin"
        bad.write_bytes(data)
        with pytest.raises(BadParams):
            load_checkpoint(bad)

    import json
    header_len = int.from_bytes(blob[4:12], "little")
    header = json.loads(blob[12:12 + header_len])
    header["version"] = 99
    raw = json.dumps(header).encode()
    bad = tmp_path / "bad_version.bin"
    bad.write_bytes(b"FGHN" + len(raw).to_bytes(8, "little") + raw + blob[12 + header_len:])
    with pytest.raises(BadParams):
        load_checkpoint(bad)
