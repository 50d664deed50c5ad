"""Finite-difference verification of every differentiable component.

Each check builds a deterministic scalar function of a few leaf tensors
and compares tape gradients against central differences.  Inputs to
kinked nonlinearities are pushed away from zero so the probe width never
straddles a kink on the primitive checks.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .archgraph import preset
from .autodiff import Tensor, finite_diff_check
from .ghn import GhnDims, generate, gnn_forward, heads_forward, init_ghn
from .network import client_forward, loss

TOLERANCE = 1e-4
_EPS = 1e-6


def _leaf(rng: np.random.Generator, shape, margin: float = 0.0) -> Tensor:
    data = rng.normal(0.0, 1.0, shape)
    if margin:
        data = data + margin * np.where(data >= 0, 1.0, -1.0)
    return Tensor(data, requires_grad=True)


def _proj(rng: np.random.Generator, shape) -> Tensor:
    return Tensor(rng.normal(0.0, 1.0, shape))


def _dot(x: Tensor, proj: Tensor) -> Tensor:
    return ad.sum_all(ad.mul(x, proj))


def primitive_checks(seed: int) -> dict[str, float]:
    """Max relative gradient error for each autodiff primitive."""
    rng = np.random.default_rng(seed)
    report: dict[str, float] = {}

    def run(name, fn, params, coords=64):
        report[name] = finite_diff_check(fn, params, eps=_EPS,
                                         max_coords_per_param=coords, seed=seed)

    a, b = _leaf(rng, (6, 11)), _leaf(rng, (6, 11))
    p = _proj(rng, (6, 11))
    run("add", lambda: _dot(ad.add(a, b), p), [a, b])
    run("mul", lambda: _dot(ad.mul(a, b), p), [a, b])

    m1, m2 = _leaf(rng, (7, 9)), _leaf(rng, (9, 8))
    pm = _proj(rng, (7, 8))
    run("matmul", lambda: _dot(ad.matmul(m1, m2), pm), [m1, m2])

    r = _leaf(rng, (8, 10), margin=0.05)
    pr = _proj(rng, (8, 10))
    run("relu", lambda: _dot(ad.relu(r), pr), [r])
    run("leaky_relu", lambda: _dot(ad.leaky_relu(r, slope=0.01), pr), [r])

    s = _leaf(rng, (4, 18))
    ps = _proj(rng, (8, 9))
    run("reshape", lambda: _dot(ad.reshape(s, (8, 9)), ps), [s])

    c1, c2 = _leaf(rng, (5, 3)), _leaf(rng, (5, 4))
    pc = _proj(rng, (5, 7))
    run("concat", lambda: _dot(ad.concat([c1, c2], axis=1), pc), [c1, c2])

    g = _leaf(rng, (9, 8))
    idx = [0, 3, 3, 7, 1]
    pg = _proj(rng, (5, 8))
    run("gather_rows", lambda: _dot(ad.gather_rows(g, idx), pg), [g])

    sc = _leaf(rng, (6, 12))
    psc = _proj(rng, (6, 5))
    run("slice_cols", lambda: _dot(ad.slice_cols(sc, 3, 8), psc), [sc])

    gp = _leaf(rng, (3, 4, 5, 5))
    pgp = _proj(rng, (3, 4, 1, 1))
    run("global_avg_pool", lambda: _dot(ad.global_avg_pool(gp), pgp), [gp])

    t = _leaf(rng, (7, 11))
    run("sum_all", lambda: ad.sum_all(t), [t])
    run("mean_all", lambda: ad.mean_all(t), [t])

    # rows kept away from zero norm so the eps floor never activates
    rr = Tensor(rng.normal(0.0, 1.0, (5, 9)) + np.sign(rng.normal(size=(5, 9))) * 0.3,
                requires_grad=True)
    prr = _proj(rng, (5, 9))
    run("rescale_rows", lambda: _dot(ad.rescale_rows(rr, 2.5), prr), [rr])

    x1 = _leaf(rng, (2, 3, 6, 6))
    w1 = _leaf(rng, (4, 3, 3, 3))
    bias1 = _leaf(rng, (4,))
    pcv = _proj(rng, (2, 4, 6, 6))
    run("conv2d_s1", lambda: _dot(ad.conv2d(x1, w1, bias1, stride=1, padding=1), pcv),
        [x1, w1, bias1])

    x2 = _leaf(rng, (2, 3, 7, 7))
    w2 = _leaf(rng, (5, 3, 3, 3))
    bias2 = _leaf(rng, (5,))
    pcv2 = _proj(rng, (2, 5, 4, 4))
    run("conv2d_s2", lambda: _dot(ad.conv2d(x2, w2, bias2, stride=2, padding=1), pcv2),
        [x2, w2, bias2])

    lg = _leaf(rng, (6, 10))
    labels = rng.integers(0, 10, size=6)
    run("softmax_cross_entropy",
        lambda: ad.softmax_cross_entropy(lg, labels), [lg])

    ml = _leaf(rng, (6, 14))
    targets = (rng.random((6, 14)) < 0.3).astype(float)
    run("sigmoid_bce", lambda: ad.sigmoid_bce(ml, targets), [ml])

    return report


def hypernetwork_checks(seed: int) -> dict[str, float]:
    """Gradients through message passing, the decoder heads, and the full
    generate -> client forward -> loss pipeline on a small preset."""
    rng = np.random.default_rng(seed)
    report: dict[str, float] = {}
    graph = preset("small4", width_scale=0.125, num_classes=10, input_hw=(8, 8))
    dims = GhnDims()
    params = init_ghn(graph.vocab, dims, seed=seed, dtype=np.float64)

    n = len(graph.nodes)
    feats = Tensor(rng.normal(0.0, 1.0, (n, graph.vocab.k)))
    pg = _proj(rng, (n, dims.d_node))
    gnn_leaves = [t for name, t in params.named_leaves() if name.startswith("gnn")]
    report["gnn_forward"] = finite_diff_check(
        lambda: _dot(gnn_forward(params, graph, feats), pg),
        gnn_leaves, eps=_EPS, max_coords_per_param=16, seed=seed)

    emb = Tensor(rng.normal(0.0, 1.0, (n, dims.d_node)), requires_grad=True)
    projections = {
        nid: (_proj(rng, graph.layer(nid).weight_shape),
              _proj(rng, (graph.layer(nid).out_channels,)))
        for nid in graph.parametric_nodes
    }

    def heads_scalar():
        weights = heads_forward(params, graph, emb)
        total = None
        for nid in graph.parametric_nodes:
            w, bias = weights.tensors[nid]
            pw, pb = projections[nid]
            term = ad.add(_dot(w, pw), _dot(bias, pb))
            total = term if total is None else ad.add(total, term)
        return total

    head_leaves = [t for name, t in params.named_leaves() if name.startswith("head")]
    report["heads_forward"] = finite_diff_check(
        heads_scalar, [emb] + head_leaves, eps=_EPS,
        max_coords_per_param=8, seed=seed)

    pipeline_graph = preset("plain4", width_scale=0.125, num_classes=10,
                            input_hw=(8, 8))
    pipe = init_ghn(pipeline_graph.vocab, dims, seed=seed + 1, dtype=np.float64)
    images = rng.random((2, 3, 8, 8))
    labels = rng.integers(0, 10, size=2)

    def pipeline_scalar():
        weights = generate(pipe, pipeline_graph)
        logits = client_forward(pipeline_graph, weights, images)
        return loss(logits, labels, "single_label")

    report["pipeline_plain4"] = finite_diff_check(
        pipeline_scalar, pipe.leaves(), eps=_EPS,
        max_coords_per_param=4, seed=seed)
    return report


def run_gradcheck(seeds=(0, 1, 2), tol: float = TOLERANCE
                  ) -> tuple[dict[str, float], bool]:
    """Worst error per component across seeds, plus the overall verdict."""
    report: dict[str, float] = {}
    for seed in seeds:
        for name, err in {**primitive_checks(seed),
                          **hypernetwork_checks(seed)}.items():
            report[name] = max(err, report.get(name, 0.0))
    return report, all(err < tol for err in report.values())
