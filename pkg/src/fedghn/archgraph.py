"""Architecture graphs: typed DAGs describing client networks.

A network is a DAG whose nodes carry layer-type ids from a shared
vocabulary.  The graph is the only description of a client model that
crosses the wire; weight generation, validation, and execution all key
off the node types and edges defined here.
"""

from __future__ import annotations

import hashlib
import json
import math
import re
from dataclasses import dataclass, field
from enum import Enum
from functools import cached_property

import numpy as np

from .errors import CycleError, ParseError, ShapeError, UnknownPreset, UnknownType


class LayerKind(str, Enum):
    CONV = "conv2d"
    LINEAR = "linear"
    ADD = "add"
    CONCAT = "concat"
    GLOBAL_AVG_POOL = "global_avg_pool"


class Activation(str, Enum):
    RELU = "relu"
    NONE = "none"


PARAMETRIC_KINDS = (LayerKind.CONV, LayerKind.LINEAR)


@dataclass(frozen=True)
class LayerType:
    """One entry of the shared layer vocabulary.

    Convolutions use odd square kernels with floor(kernel / 2) zero
    padding, so stride-1 convs preserve spatial size.
    """

    type_id: int
    kind: LayerKind
    in_channels: int = 0
    out_channels: int = 0
    kernel: int = 0
    stride: int = 1
    activation: Activation = Activation.NONE

    def __post_init__(self):
        if self.type_id < 0:
            raise ValueError(f"type_id must be >= 0, got {self.type_id}")
        if self.kind is LayerKind.CONV:
            if self.in_channels < 1 or self.out_channels < 1:
                raise ValueError(f"conv type {self.type_id} needs positive channels")
            if self.kernel < 1 or self.kernel % 2 == 0:
                raise ValueError(f"conv type {self.type_id} needs an odd kernel >= 1")
            if self.stride < 1:
                raise ValueError(f"conv type {self.type_id} needs stride >= 1")
        elif self.kind is LayerKind.LINEAR:
            if self.in_channels < 1 or self.out_channels < 1:
                raise ValueError(f"linear type {self.type_id} needs positive channels")
            if self.kernel != 0:
                raise ValueError(f"linear type {self.type_id} must not set a kernel")
        else:
            if self.in_channels or self.out_channels or self.kernel:
                raise ValueError(f"{self.kind.value} type {self.type_id} takes no channel fields")
            if self.activation is not Activation.NONE:
                raise ValueError(f"{self.kind.value} type {self.type_id} takes no activation")

    @property
    def parametric(self) -> bool:
        return self.kind in PARAMETRIC_KINDS

    @property
    def padding(self) -> int:
        return self.kernel // 2 if self.kind is LayerKind.CONV else 0

    @property
    def weight_shape(self) -> tuple[int, ...]:
        if self.kind is LayerKind.CONV:
            return (self.out_channels, self.in_channels, self.kernel, self.kernel)
        if self.kind is LayerKind.LINEAR:
            return (self.in_channels, self.out_channels)
        return ()

    @property
    def param_count(self) -> int:
        """Weight entries plus one bias per output channel; 0 if non-parametric."""
        if not self.parametric:
            return 0
        return int(np.prod(self.weight_shape)) + self.out_channels

    @property
    def fan_in(self) -> int:
        if self.kind is LayerKind.CONV:
            return self.kernel * self.kernel * self.in_channels
        if self.kind is LayerKind.LINEAR:
            return self.in_channels
        return 0


@dataclass(frozen=True)
class LayerVocabulary:
    """Ordered collection of layer types; type_id equals list position."""

    types: tuple[LayerType, ...]

    def __post_init__(self):
        for i, t in enumerate(self.types):
            if t.type_id != i:
                raise ValueError(f"vocabulary position {i} holds type_id {t.type_id}")

    @property
    def k(self) -> int:
        return len(self.types)

    def __getitem__(self, type_id: int) -> LayerType:
        if not (0 <= type_id < len(self.types)):
            raise UnknownType(f"type_id {type_id} not in vocabulary of size {len(self.types)}")
        return self.types[type_id]

    @property
    def parametric_ids(self) -> tuple[int, ...]:
        return tuple(t.type_id for t in self.types if t.parametric)


@dataclass(frozen=True)
class ArchGraph:
    """A named DAG over vocabulary types, plus the input image shape."""

    name: str
    input_shape: tuple[int, int, int]
    vocab: LayerVocabulary
    nodes: tuple[tuple[int, int], ...]  # (node_id, type_id), ids dense in [0, n)
    edges: tuple[tuple[int, int], ...]  # (src, dst)

    @cached_property
    def type_of(self) -> dict[int, int]:
        return {nid: tid for nid, tid in self.nodes}

    @cached_property
    def in_edges(self) -> dict[int, tuple[int, ...]]:
        incoming: dict[int, list[int]] = {nid: [] for nid, _ in self.nodes}
        for src, dst in self.edges:
            incoming[dst].append(src)
        return {nid: tuple(sorted(srcs)) for nid, srcs in incoming.items()}

    @cached_property
    def parametric_nodes(self) -> tuple[int, ...]:
        """Node ids with trainable weights, ascending."""
        return tuple(sorted(nid for nid, tid in self.nodes if self.vocab[tid].parametric))

    def layer(self, node_id: int) -> LayerType:
        return self.vocab[self.type_of[node_id]]


@dataclass
class ValidationReport:
    violations: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations


def topo_order(graph: ArchGraph) -> list[int]:
    """Topological order with ties broken by ascending node id."""
    import heapq

    indeg = {nid: 0 for nid, _ in graph.nodes}
    out: dict[int, list[int]] = {nid: [] for nid, _ in graph.nodes}
    for src, dst in graph.edges:
        indeg[dst] += 1
        out[src].append(dst)
    ready = [nid for nid, d in indeg.items() if d == 0]
    heapq.heapify(ready)
    order = []
    while ready:
        nid = heapq.heappop(ready)
        order.append(nid)
        for nxt in out[nid]:
            indeg[nxt] -= 1
            if indeg[nxt] == 0:
                heapq.heappush(ready, nxt)
    if len(order) != len(graph.nodes):
        raise CycleError(f"graph {graph.name!r} contains a cycle")
    return order


def infer_shapes(graph: ArchGraph) -> dict[int, tuple[int, ...]]:
    """Propagate activation shapes (without the batch axis) through the DAG."""
    shapes: dict[int, tuple[int, ...]] = {}
    for nid in topo_order(graph):
        layer = graph.layer(nid)
        preds = graph.in_edges[nid]
        inputs = [shapes[p] for p in preds]
        if not inputs:
            inputs = [tuple(graph.input_shape)]
        if layer.kind is LayerKind.CONV:
            if len(inputs) != 1:
                raise ShapeError(f"node {nid}: conv expects one input, got {len(inputs)}")
            c, h, w = _expect_chw(nid, inputs[0])
            if c != layer.in_channels:
                raise ShapeError(f"node {nid}: conv expects {layer.in_channels} channels, got {c}")
            oh = (h + 2 * layer.padding - layer.kernel) // layer.stride + 1
            ow = (w + 2 * layer.padding - layer.kernel) // layer.stride + 1
            if oh < 1 or ow < 1:
                raise ShapeError(f"node {nid}: conv output collapses below 1x1 from {inputs[0]}")
            shapes[nid] = (layer.out_channels, oh, ow)
        elif layer.kind is LayerKind.LINEAR:
            if len(inputs) != 1:
                raise ShapeError(f"node {nid}: linear expects one input, got {len(inputs)}")
            flat = int(np.prod(inputs[0]))
            if flat != layer.in_channels:
                raise ShapeError(
                    f"node {nid}: linear expects {layer.in_channels} features, got {flat}")
            shapes[nid] = (layer.out_channels,)
        elif layer.kind is LayerKind.ADD:
            if len(set(inputs)) != 1:
                raise ShapeError(f"node {nid}: add inputs differ: {inputs}")
            shapes[nid] = inputs[0]
        elif layer.kind is LayerKind.CONCAT:
            dims = [_expect_chw(nid, s) for s in inputs]
            if len({(h, w) for _, h, w in dims}) != 1:
                raise ShapeError(f"node {nid}: concat inputs disagree spatially: {inputs}")
            shapes[nid] = (sum(c for c, _, _ in dims), dims[0][1], dims[0][2])
        elif layer.kind is LayerKind.GLOBAL_AVG_POOL:
            if len(inputs) != 1:
                raise ShapeError(f"node {nid}: pool expects one input, got {len(inputs)}")
            c, _, _ = _expect_chw(nid, inputs[0])
            shapes[nid] = (c, 1, 1)
        else:  # pragma: no cover - enum is closed
            raise ShapeError(f"node {nid}: unknown kind {layer.kind}")
    return shapes


def _expect_chw(nid: int, shape: tuple[int, ...]) -> tuple[int, int, int]:
    if len(shape) != 3:
        raise ShapeError(f"node {nid}: expected a (C, H, W) input, got {shape}")
    return shape


def validate(graph: ArchGraph, vocab: LayerVocabulary | None = None) -> ValidationReport:
    """Collect every structural violation instead of stopping at the first.

    When ``vocab`` is given the graph's own vocabulary must equal it; this
    is how a server checks a submitted graph against the shared vocabulary.
    """
    report = ValidationReport()
    if vocab is not None and graph.vocab != vocab:
        report.violations.append("graph vocabulary differs from the expected one")
        return report
    n = len(graph.nodes)
    ids = [nid for nid, _ in graph.nodes]
    if n == 0:
        report.violations.append("graph has no nodes")
        return report
    if sorted(ids) != list(range(n)):
        report.violations.append(f"node ids must be dense in [0, {n}), got {sorted(ids)}")
        return report
    for nid, tid in graph.nodes:
        if not (0 <= tid < graph.vocab.k):
            report.violations.append(f"node {nid} references unknown type {tid}")
    if report.violations:
        return report
    seen = set()
    for src, dst in graph.edges:
        if src not in graph.type_of or dst not in graph.type_of:
            report.violations.append(f"edge ({src}, {dst}) references a missing node")
        elif src == dst:
            report.violations.append(f"edge ({src}, {dst}) is a self loop")
        elif (src, dst) in seen:
            report.violations.append(f"edge ({src}, {dst}) is duplicated")
        seen.add((src, dst))
    if report.violations:
        return report
    try:
        topo_order(graph)
    except CycleError as exc:
        report.violations.append(str(exc))
        return report
    indeg = {nid: len(graph.in_edges[nid]) for nid, _ in graph.nodes}
    outdeg = {nid: 0 for nid, _ in graph.nodes}
    for src, _ in graph.edges:
        outdeg[src] += 1
    sources = [nid for nid, d in indeg.items() if d == 0]
    sinks = [nid for nid, d in outdeg.items() if d == 0]
    if len(sources) != 1:
        report.violations.append(f"graph must have exactly one source, found {sources}")
    if len(sinks) != 1:
        report.violations.append(f"graph must have exactly one sink, found {sinks}")
    for nid, _ in sorted(graph.nodes):
        layer = graph.layer(nid)
        d = indeg[nid]
        if layer.kind in (LayerKind.CONV, LayerKind.LINEAR, LayerKind.GLOBAL_AVG_POOL):
            if d > 1 or (d == 0 and nid not in sources):
                report.violations.append(f"node {nid} ({layer.kind.value}) has in-degree {d}")
        else:
            if d < 2:
                report.violations.append(f"node {nid} ({layer.kind.value}) needs >= 2 inputs, has {d}")
    if len(sinks) == 1 and graph.layer(sinks[0]).kind is not LayerKind.LINEAR:
        report.violations.append(f"sink node {sinks[0]} must be linear")
    if report.violations:
        return report
    try:
        infer_shapes(graph)
    except ShapeError as exc:
        report.violations.append(str(exc))
    return report


def one_hot_features(graph: ArchGraph, dtype=np.float64) -> np.ndarray:
    """Per-node one-hot type rows, ordered by ascending node id."""
    n, k = len(graph.nodes), graph.vocab.k
    feats = np.zeros((n, k), dtype=dtype)
    for nid, tid in graph.nodes:
        if not (0 <= tid < k):
            raise UnknownType(f"node {nid} references unknown type {tid}")
        feats[nid, tid] = 1.0
    return feats


def vocab_hash(vocab: LayerVocabulary) -> str:
    """Stable digest of a vocabulary, used to match graphs to checkpoints."""
    payload = json.dumps([_type_record(t) for t in vocab.types], sort_keys=True)
    return hashlib.sha256(payload.encode()).hexdigest()


# -- presets ----------------------------------------------------------------

STEM_ID, C64_ID, DOWN128_ID, C128_ID, DOWN256_ID, C256_ID, DOWN512_ID, C512_ID = range(8)
LINEAR_ID, ADD_ID, CONCAT_ID, GAP_ID, LINEAR_PLAIN_ID = 8, 9, 10, 11, 12

PRESET_NAMES = ("arch0", "arch1", "arch2", "arch3", "small4")
_PLAIN_RE = re.compile(r"^plain(\d+)$")


def _scaled(channels: int, width_scale: float) -> int:
    return max(1, math.ceil(channels * width_scale))


def shared_vocab(width_scale: float = 1.0, num_classes: int = 10,
                 in_channels: int = 3) -> LayerVocabulary:
    """The layer vocabulary every preset draws from, at one width scale."""
    if width_scale <= 0:
        raise ValueError(f"width_scale must be positive, got {width_scale}")
    c64 = _scaled(64, width_scale)
    c128 = _scaled(128, width_scale)
    c256 = _scaled(256, width_scale)
    c512 = _scaled(512, width_scale)

    def conv(tid, cin, cout, stride):
        return LayerType(tid, LayerKind.CONV, cin, cout, kernel=3, stride=stride,
                         activation=Activation.RELU)

    return LayerVocabulary((
        conv(STEM_ID, in_channels, c64, 1),
        conv(C64_ID, c64, c64, 1),
        conv(DOWN128_ID, c64, c128, 2),
        conv(C128_ID, c128, c128, 1),
        conv(DOWN256_ID, c128, c256, 2),
        conv(C256_ID, c256, c256, 1),
        conv(DOWN512_ID, c256, c512, 2),
        conv(C512_ID, c512, c512, 1),
        LayerType(LINEAR_ID, LayerKind.LINEAR, c512, num_classes),
        LayerType(ADD_ID, LayerKind.ADD),
        LayerType(CONCAT_ID, LayerKind.CONCAT),
        LayerType(GAP_ID, LayerKind.GLOBAL_AVG_POOL),
        # plain stacks never leave 64 channels, so they get their own head type
        LayerType(LINEAR_PLAIN_ID, LayerKind.LINEAR, c64, num_classes),
    ))


class _Builder:
    def __init__(self, vocab: LayerVocabulary):
        self.vocab = vocab
        self.nodes: list[tuple[int, int]] = []
        self.edges: list[tuple[int, int]] = []

    def node(self, type_id: int, inputs: list[int]) -> int:
        nid = len(self.nodes)
        self.nodes.append((nid, type_id))
        for src in inputs:
            self.edges.append((src, nid))
        return nid

    def chain(self, type_ids: list[int], x: int | None = None) -> int:
        for tid in type_ids:
            x = self.node(tid, [] if x is None else [x])
        return x

    def residual(self, type_id: int, x: int) -> int:
        # identity skip: two convs of one type, then add with the block input
        a = self.node(type_id, [x])
        b = self.node(type_id, [a])
        return self.node(ADD_ID, [x, b])

    def finish(self, name: str, input_shape: tuple[int, int, int], x: int) -> ArchGraph:
        x = self.node(GAP_ID, [x])
        self.node(LINEAR_ID, [x])
        return ArchGraph(name=name, input_shape=input_shape, vocab=self.vocab,
                         nodes=tuple(self.nodes), edges=tuple(self.edges))


def preset(name: str, width_scale: float = 1.0, num_classes: int = 10,
           input_hw: tuple[int, int] = (32, 32), in_channels: int = 3) -> ArchGraph:
    """Build one of the built-in client architectures.

    arch0 is a residual 18-layer-style network; arch1-3 are plain or
    partially residual stacks of 10-12 convs; small4 keeps only four
    convs; plainN stacks one stem plus N-1 identical 3x3 convs.
    """
    vocab = shared_vocab(width_scale, num_classes, in_channels)
    shape = (in_channels, input_hw[0], input_hw[1])
    b = _Builder(vocab)
    if name == "arch0":
        x = b.chain([STEM_ID])
        x = b.residual(C64_ID, x)
        x = b.residual(C64_ID, x)
        x = b.chain([DOWN128_ID], x)
        x = b.residual(C128_ID, x)
        x = b.residual(C128_ID, x)
        x = b.chain([DOWN256_ID], x)
        x = b.residual(C256_ID, x)
        x = b.residual(C256_ID, x)
        x = b.chain([DOWN512_ID], x)
        x = b.residual(C512_ID, x)
        x = b.residual(C512_ID, x)
    elif name == "arch1":
        x = b.chain([STEM_ID, C64_ID, DOWN128_ID, C128_ID, C128_ID,
                     DOWN256_ID, C256_ID, DOWN512_ID, C512_ID, C512_ID])
    elif name == "arch2":
        x = b.chain([STEM_ID])
        x = b.residual(C64_ID, x)
        x = b.residual(C64_ID, x)
        x = b.chain([DOWN128_ID], x)
        x = b.residual(C128_ID, x)
        x = b.chain([DOWN256_ID, C256_ID, DOWN512_ID, C512_ID], x)
    elif name == "arch3":
        x = b.chain([STEM_ID, C64_ID, DOWN128_ID, C128_ID])
        x = b.chain([DOWN256_ID], x)
        x = b.residual(C256_ID, x)
        x = b.chain([DOWN512_ID], x)
        x = b.residual(C512_ID, x)
        x = b.residual(C512_ID, x)
    elif name == "small4":
        x = b.chain([STEM_ID, DOWN128_ID, DOWN256_ID, DOWN512_ID])
    else:
        m = _PLAIN_RE.match(name)
        if not m:
            raise UnknownPreset(f"no preset named {name!r}")
        depth = int(m.group(1))
        if depth < 2:
            raise UnknownPreset(f"plainN needs N >= 2, got {name!r}")
        x = b.chain([STEM_ID] + [C64_ID] * (depth - 1))
        x = b.node(GAP_ID, [x])
        b.node(LINEAR_PLAIN_ID, [x])
        return ArchGraph(name=name, input_shape=shape, vocab=vocab,
                         nodes=tuple(b.nodes), edges=tuple(b.edges))
    return b.finish(name, shape, x)


# -- serialization ----------------------------------------------------------

def _type_record(t: LayerType) -> dict:
    if t.parametric:
        return {"kind": t.kind.value, "in": t.in_channels, "out": t.out_channels,
                "kernel": t.kernel if t.kind is LayerKind.CONV else None,
                "stride": t.stride if t.kind is LayerKind.CONV else None,
                "activation": t.activation.value}
    return {"kind": t.kind.value, "in": None, "out": None, "kernel": None,
            "stride": None, "activation": t.activation.value}


def _type_from_record(type_id: int, rec: dict) -> LayerType:
    try:
        kind = LayerKind(rec["kind"])
        activation = Activation(rec["activation"])
    except (KeyError, ValueError) as exc:
        raise ParseError(f"vocab entry {type_id}: {exc}") from exc
    try:
        if kind is LayerKind.CONV:
            return LayerType(type_id, kind, rec["in"], rec["out"], kernel=rec["kernel"],
                             stride=rec["stride"], activation=activation)
        if kind is LayerKind.LINEAR:
            return LayerType(type_id, kind, rec["in"], rec["out"], activation=activation)
        return LayerType(type_id, kind)
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"vocab entry {type_id}: {exc}") from exc


def serialize(graph: ArchGraph) -> str:
    """Render a graph as a JSON document; deterministic for fixed input."""
    doc = {
        "name": graph.name,
        "input_shape": list(graph.input_shape),
        "vocab": [_type_record(t) for t in graph.vocab.types],
        "nodes": [{"id": nid, "type": tid} for nid, tid in graph.nodes],
        "edges": [[src, dst] for src, dst in graph.edges],
    }
    return json.dumps(doc, indent=2)


def deserialize(text: str) -> ArchGraph:
    """Parse a serialized graph, raising ParseError with field context."""
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"line {exc.lineno}, column {exc.colno}: {exc.msg}") from exc
    if not isinstance(doc, dict):
        raise ParseError("top-level document must be an object")
    for key in ("name", "input_shape", "vocab", "nodes", "edges"):
        if key not in doc:
            raise ParseError(f"missing field {key!r}")
    shape = doc["input_shape"]
    if not (isinstance(shape, list) and len(shape) == 3
            and all(isinstance(v, int) and v > 0 for v in shape)):
        raise ParseError(f"input_shape must be three positive ints, got {shape!r}")
    vocab = LayerVocabulary(tuple(
        _type_from_record(i, rec) for i, rec in enumerate(doc["vocab"])))
    nodes = []
    for rec in doc["nodes"]:
        try:
            nodes.append((int(rec["id"]), int(rec["type"])))
        except (KeyError, TypeError, ValueError) as exc:
            raise ParseError(f"bad node record {rec!r}") from exc
    edges = []
    for rec in doc["edges"]:
        try:
            src, dst = rec
            edges.append((int(src), int(dst)))
        except (TypeError, ValueError) as exc:
            raise ParseError(f"bad edge record {rec!r}") from exc
    return ArchGraph(name=str(doc["name"]), input_shape=tuple(shape), vocab=vocab,
                     nodes=tuple(nodes), edges=tuple(edges))
