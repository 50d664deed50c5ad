"""Client network execution: run an ArchGraph on a batch, compute losses,
and draw Kaiming-initialized raw weights for non-hypernetwork baselines."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .archgraph import ArchGraph, LayerKind, Activation, topo_order
from .autodiff import Tensor
from .errors import NonFiniteError, ShapeError
from .ghn import ClientWeights

TASKS = ("single_label", "multi_label")


def _weight_map(weights) -> dict:
    return weights.tensors if isinstance(weights, ClientWeights) else weights


def client_forward(graph: ArchGraph, weights, batch,
                   collect_stats: bool = False):
    """Execute the graph on a batch, returning logits of shape (B, classes).

    ``weights`` maps parametric node_id to a (weight, bias) tensor pair.
    With ``collect_stats`` the per-node activation std is returned too.
    """
    wmap = _weight_map(weights)
    x = batch if isinstance(batch, Tensor) else Tensor(batch)
    expected = tuple(graph.input_shape)
    if x.data.ndim != 4 or x.shape[1:] != expected:
        raise ShapeError(f"batch shape {x.shape} does not end in {expected}")
    outputs: dict[int, Tensor] = {}
    order = topo_order(graph)
    for nid in order:
        layer = graph.layer(nid)
        preds = graph.in_edges[nid]
        inputs = [outputs[p] for p in preds] if preds else [x]
        if layer.kind is LayerKind.CONV:
            w, b = wmap[nid]
            y = ad.conv2d(inputs[0], w, b, stride=layer.stride, padding=layer.padding)
            if layer.activation is Activation.RELU:
                y = ad.relu(y)
        elif layer.kind is LayerKind.LINEAR:
            w, b = wmap[nid]
            y = ad.add(ad.matmul(ad.flatten(inputs[0]), w), b)
            if layer.activation is Activation.RELU:
                y = ad.relu(y)
        elif layer.kind is LayerKind.ADD:
            y = inputs[0]
            for branch in inputs[1:]:
                y = ad.add(y, branch)
        elif layer.kind is LayerKind.CONCAT:
            y = ad.concat(inputs, axis=1)  # in_edges are pre-sorted by src id
        elif layer.kind is LayerKind.GLOBAL_AVG_POOL:
            y = ad.global_avg_pool(inputs[0])
        else:  # pragma: no cover - enum is closed
            raise ShapeError(f"node {nid}: unknown kind {layer.kind}")
        outputs[nid] = y
    logits = outputs[order[-1]]
    if not np.isfinite(logits.data).all():
        raise NonFiniteError("client forward produced NaN or Inf logits")
    if collect_stats:
        stats = {nid: float(outputs[nid].data.std()) for nid in order}
        return logits, stats
    return logits


def loss(logits: Tensor, labels, task: str) -> Tensor:
    """Mean cross-entropy (single_label) or sigmoid BCE (multi_label)."""
    if task == "single_label":
        return ad.softmax_cross_entropy(logits, labels)
    if task == "multi_label":
        return ad.sigmoid_bce(logits, labels)
    raise ValueError(f"unknown task {task!r}, expected one of {TASKS}")


def kaiming_client_weights(graph: ArchGraph, seed: int,
                           dtype=np.float32) -> ClientWeights:
    """Raw weights with std sqrt(2 / fan_in) per layer and zero biases."""
    rng = np.random.default_rng(seed)
    tensors: dict[int, tuple[Tensor, Tensor]] = {}
    total = 0
    for nid in graph.parametric_nodes:
        lt = graph.layer(nid)
        std = np.sqrt(2.0 / lt.fan_in)
        w = rng.normal(0.0, std, lt.weight_shape).astype(dtype)
        b = np.zeros(lt.out_channels, dtype=dtype)
        tensors[nid] = (Tensor(w, requires_grad=True), Tensor(b, requires_grad=True))
        total += lt.param_count
    return ClientWeights(tensors, total)
