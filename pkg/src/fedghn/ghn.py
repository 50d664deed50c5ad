"""Graph hypernetwork: node embeddings by message passing, per-type decoder
heads, weight generation, parameter averaging, and checkpoint IO.

The hypernetwork is the only trained object in the system.  Given an
architecture graph it produces every parametric layer's weights, so
clients with different architectures can share one parameter space.

Three modes exist:

* ``full``: message passing over the graph, then per-type MLP heads with
  a scale/weight decomposition.
* ``no_gnn``: message passing skipped; heads consume the one-hot type
  rows zero-padded to the node latent width, so weights depend only on
  the layer type.
* ``identity``: no message passing and a single linear map per type with
  the scale fixed at 1.  Training this mode reduces the protocol to
  classic FedAvg on the generated weights when node types are unique.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .archgraph import (ArchGraph, LayerVocabulary, _type_from_record, _type_record,
                        one_hot_features, vocab_hash)
from .autodiff import Tensor
from .errors import (BadDims, BadParams, DimMismatch, MissingHead, ShapeError,
                     VocabMismatch)

MODES = ("full", "no_gnn", "identity")


@dataclass(frozen=True)
class GhnDims:
    """Width/depth settings of the hypernetwork."""

    gnn_rounds: int = 6
    d_node: int = 51
    d_hid: int = 16
    mode: str = "full"

    def __post_init__(self):
        if self.mode not in MODES:
            raise BadDims(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.d_node < 1 or self.d_hid < 1:
            raise BadDims(f"latent widths must be positive, got {self}")
        if self.mode == "full" and self.gnn_rounds < 1:
            raise BadDims("full mode needs at least one message-passing round")
        if self.gnn_rounds < 0:
            raise BadDims(f"gnn_rounds must be >= 0, got {self.gnn_rounds}")


@dataclass
class GnnLayer:
    a: Tensor  # self map, (d_in, d_node)
    b: Tensor  # neighbor-sum map, same shape
    bias: Tensor  # (d_node,)


@dataclass
class MlpHead:
    """Two-layer decoder for one layer type, plus the scalar scale branch."""

    w1: Tensor  # (d_in, d_hid)
    b1: Tensor  # (d_hid,)
    w2: Tensor  # (d_hid, param_count)
    b2: Tensor  # (param_count,)
    ws: Tensor  # (d_hid, 1)
    bs: Tensor  # (1,)

    def tensors(self) -> list[tuple[str, Tensor]]:
        return [("w1", self.w1), ("b1", self.b1), ("w2", self.w2),
                ("b2", self.b2), ("ws", self.ws), ("bs", self.bs)]


@dataclass
class TableHead:
    """Identity-mode head: one row of generated parameters per type."""

    w: Tensor  # (k, param_count)

    def tensors(self) -> list[tuple[str, Tensor]]:
        return [("w", self.w)]


@dataclass
class ClientWeights:
    """Generated (or raw) weights for every parametric node of one graph."""

    tensors: dict[int, tuple[Tensor, Tensor]]  # node_id -> (weight, bias)
    total_params: int

    def detached(self, requires_grad: bool = True) -> "ClientWeights":
        """Copy values into fresh leaf tensors, cutting any tape history."""
        out = {nid: (Tensor(w.data.copy(), requires_grad=requires_grad),
                     Tensor(b.data.copy(), requires_grad=requires_grad))
               for nid, (w, b) in self.tensors.items()}
        return ClientWeights(out, self.total_params)

    def leaves(self) -> list[Tensor]:
        flat = []
        for nid in sorted(self.tensors):
            flat.extend(self.tensors[nid])
        return flat


@dataclass
class GHNParams:
    dims: GhnDims
    vocab: LayerVocabulary
    gnn: list[GnnLayer]
    heads: dict[int, MlpHead | TableHead] = field(default_factory=dict)

    def named_leaves(self) -> list[tuple[str, Tensor]]:
        """Canonical flat view: GNN layers ascending, then heads by type_id."""
        out = []
        for t, layer in enumerate(self.gnn):
            out.extend([(f"gnn{t}.a", layer.a), (f"gnn{t}.b", layer.b),
                        (f"gnn{t}.bias", layer.bias)])
        for tid in sorted(self.heads):
            for name, tensor in self.heads[tid].tensors():
                out.append((f"head{tid}.{name}", tensor))
        return out

    def leaves(self) -> list[Tensor]:
        return [t for _, t in self.named_leaves()]

    @property
    def dtype(self):
        return self.leaves()[0].dtype

    def clone(self) -> "GHNParams":
        gnn = [GnnLayer(*(Tensor(t.data.copy(), requires_grad=True)
                          for t in (l.a, l.b, l.bias))) for l in self.gnn]
        heads: dict[int, MlpHead | TableHead] = {}
        for tid, head in self.heads.items():
            copies = [Tensor(t.data.copy(), requires_grad=True)
                      for _, t in head.tensors()]
            heads[tid] = type(head)(*copies)
        return GHNParams(self.dims, self.vocab, gnn, heads)


def _xavier(rng: np.random.Generator, shape: tuple[int, int], dtype,
            gain: float = 1.0) -> np.ndarray:
    std = np.sqrt(2.0 / (shape[0] + shape[1]))
    return (rng.normal(0.0, std, shape) * gain).astype(dtype)


def init_ghn(vocab: LayerVocabulary, dims: GhnDims, seed: int,
             dtype=np.float32) -> GHNParams:
    """Draw fresh hypernetwork parameters.

    The decoder's output layer is drawn at std sqrt(2 / (fan_in * d_hid)):
    with the hidden activations held at norm sqrt(d_hid) by heads_forward,
    every generated element is then marginally N(0, 2/fan_in) — the Kaiming
    operating point of the layer it parameterizes.  The scale branch starts
    at exactly 1.
    """
    rng = np.random.default_rng(seed)
    k = vocab.k
    if dims.mode == "no_gnn" and k > dims.d_node:
        raise BadDims(f"no_gnn mode needs vocabulary size {k} <= d_node {dims.d_node}")
    gnn: list[GnnLayer] = []
    if dims.mode == "full":
        for t in range(dims.gnn_rounds):
            d_in = k if t == 0 else dims.d_node
            gnn.append(GnnLayer(
                a=Tensor(_xavier(rng, (d_in, dims.d_node), dtype), requires_grad=True),
                b=Tensor(_xavier(rng, (d_in, dims.d_node), dtype), requires_grad=True),
                bias=Tensor(np.zeros(dims.d_node, dtype=dtype), requires_grad=True)))
    heads: dict[int, MlpHead | TableHead] = {}
    for tid in vocab.parametric_ids:
        lt = vocab[tid]
        count = lt.param_count
        if dims.mode == "identity":
            w = rng.normal(0.0, np.sqrt(2.0 / lt.fan_in), (k, count)).astype(dtype)
            w[:, count - lt.out_channels:] = 0.0  # bias portion starts at zero
            heads[tid] = TableHead(w=Tensor(w, requires_grad=True))
            continue
        std2 = float(np.sqrt(2.0 / (lt.fan_in * dims.d_hid)))
        heads[tid] = MlpHead(
            w1=Tensor(_xavier(rng, (dims.d_node, dims.d_hid), dtype), requires_grad=True),
            b1=Tensor(np.zeros(dims.d_hid, dtype=dtype), requires_grad=True),
            w2=Tensor(rng.normal(0.0, std2, (dims.d_hid, count)).astype(dtype),
                      requires_grad=True),
            b2=Tensor(np.zeros(count, dtype=dtype), requires_grad=True),
            ws=Tensor(np.zeros((dims.d_hid, 1), dtype=dtype), requires_grad=True),
            bs=Tensor(np.ones(1, dtype=dtype), requires_grad=True))
    return GHNParams(dims, vocab, gnn, heads)


def in_adjacency(graph: ArchGraph, dtype) -> np.ndarray:
    """Dense matrix M with M[v, u] = 1 iff edge (u, v) exists."""
    n = len(graph.nodes)
    m = np.zeros((n, n), dtype=dtype)
    for src, dst in graph.edges:
        m[dst, src] = 1.0
    return m


def gnn_forward(params: GHNParams, graph: ArchGraph, features) -> Tensor:
    """Run the message-passing stack; returns per-node embeddings.

    Each round updates every node from its own state and the sum of its
    in-neighbors' states, through learned maps and a ReLU.
    """
    feats = features if isinstance(features, Tensor) else Tensor(features)
    n = len(graph.nodes)
    if feats.shape[0] != n:
        raise ShapeError(f"feature rows {feats.shape[0]} != node count {n}")
    if params.dims.mode == "identity":
        return feats
    if params.dims.mode == "no_gnn":
        padded = np.zeros((n, params.dims.d_node), dtype=feats.dtype)
        padded[:, :feats.shape[1]] = feats.data
        return Tensor(padded)
    adjacency = Tensor(in_adjacency(graph, feats.dtype))
    h = feats
    for layer in params.gnn:
        pooled = ad.matmul(adjacency, h)
        h = ad.relu(ad.add(ad.add(ad.matmul(h, layer.a), ad.matmul(pooled, layer.b)),
                           layer.bias))
    return h


def head_input_norm(dims: GhnDims) -> float:
    """Fixed per-node norm embeddings are scaled to before decoding.

    Keeps the hidden layer's pre-activations inside the active range of its
    nonlinearity no matter how large or small message passing left the raw
    embeddings, so decoding behaves the same across architectures.
    """
    return float(np.sqrt(2.0 * dims.d_node / dims.d_hid))


def heads_forward(params: GHNParams, graph: ArchGraph, embeddings: Tensor) -> ClientWeights:
    """Decode node embeddings into per-node weight and bias tensors.

    Embeddings are first rescaled per node to head_input_norm(dims), except
    in identity mode where they pass through untouched.  Nodes of one type
    then go through their shared head as a batch, with the hidden activations
    rescaled per node to norm sqrt(d_hid) so the emitted parameter scale is
    set by the head weights alone; the output row is scale times the flat
    parameter vector, split weight-first with the trailing out_channels
    entries as the bias.
    """
    if params.dims.mode != "identity":
        embeddings = ad.rescale_rows(embeddings, head_input_norm(params.dims))
    by_type: dict[int, list[int]] = {}
    for nid in graph.parametric_nodes:
        by_type.setdefault(graph.type_of[nid], []).append(nid)
    tensors: dict[int, tuple[Tensor, Tensor]] = {}
    total = 0
    for tid in sorted(by_type):
        head = params.heads.get(tid)
        if head is None:
            raise MissingHead(f"no head for parametric type {tid}")
        node_ids = by_type[tid]
        rows = ad.gather_rows(embeddings, node_ids)
        if isinstance(head, TableHead):
            out = ad.matmul(rows, head.w)
        else:
            z = ad.leaky_relu(ad.add(ad.matmul(rows, head.w1), head.b1), slope=0.01)
            z = ad.rescale_rows(z, float(np.sqrt(params.dims.d_hid)))
            flat = ad.add(ad.matmul(z, head.w2), head.b2)
            scale = ad.add(ad.matmul(z, head.ws), head.bs)
            out = ad.mul(scale, flat)
        lt = params.vocab[tid]
        w_count = lt.param_count - lt.out_channels
        for j, nid in enumerate(node_ids):
            row = ad.gather_rows(out, [j])
            w = ad.reshape(ad.slice_cols(row, 0, w_count), lt.weight_shape)
            bias = ad.reshape(ad.slice_cols(row, w_count, lt.param_count),
                              (lt.out_channels,))
            tensors[nid] = (w, bias)
            total += lt.param_count
    return ClientWeights(tensors, total)


def generate(params: GHNParams, graph: ArchGraph,
             vocab: LayerVocabulary | None = None) -> ClientWeights:
    """one_hot_features -> gnn_forward -> heads_forward, as one pure function."""
    vocab = vocab if vocab is not None else graph.vocab
    if vocab != params.vocab:
        raise VocabMismatch("graph vocabulary differs from the hypernetwork's")
    feats = one_hot_features(graph, dtype=params.dtype)
    embeddings = gnn_forward(params, graph, feats)
    return heads_forward(params, graph, embeddings)


def average_params(params_list: list[GHNParams],
                   weights: list[float] | None = None) -> GHNParams:
    """Elementwise convex combination of parameter sets (default uniform)."""
    if not params_list:
        raise DimMismatch("nothing to average")
    count = len(params_list)
    if weights is None:
        weights = [1.0 / count] * count
    if len(weights) != count:
        raise DimMismatch(f"{len(weights)} coefficients for {count} parameter sets")
    if abs(sum(weights) - 1.0) > 1e-9:
        raise ValueError(f"coefficients must sum to 1, got {sum(weights)!r}")
    first = params_list[0]
    for other in params_list[1:]:
        if other.dims != first.dims or other.vocab != first.vocab:
            raise DimMismatch("parameter sets differ in dims or vocabulary")
    out = first.clone()
    views = [p.leaves() for p in params_list]
    for i, target in enumerate(out.leaves()):
        stack = [view[i] for view in views]
        for tensor in stack:
            if tensor.shape != target.shape:
                raise DimMismatch(f"leaf {i} shape mismatch: {tensor.shape} vs {target.shape}")
        acc = np.zeros_like(target.data)
        for coef, tensor in zip(weights, stack):
            acc += coef * tensor.data
        target.data = acc
    return out


# -- checkpoint IO ----------------------------------------------------------

_MAGIC = b"FGHN"
_VERSION = 1


def save_checkpoint(params: GHNParams, path) -> None:
    """Binary dump: JSON header, then raw tensor bytes in canonical order."""
    named = params.named_leaves()
    mixed = {name: str(t.dtype) for name, t in named if t.dtype != params.dtype}
    if mixed:
        raise DimMismatch(f"mixed leaf dtypes, expected {np.dtype(params.dtype)}: "
                          f"{sorted(mixed.items())[:3]}")
    header = {
        "version": _VERSION,
        "dims": {"gnn_rounds": params.dims.gnn_rounds, "d_node": params.dims.d_node,
                 "d_hid": params.dims.d_hid, "mode": params.dims.mode},
        "dtype": str(np.dtype(params.dtype)),
        "vocab_hash": vocab_hash(params.vocab),
        "vocab": [_type_record(t) for t in params.vocab.types],
        "tensors": [{"name": name, "shape": list(t.shape)} for name, t in named],
    }
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(len(blob).to_bytes(8, "little"))
        fh.write(blob)
        # payload is raw native-endian bytes; all supported hosts are little-endian
        for _, tensor in named:
            fh.write(np.ascontiguousarray(tensor.data).tobytes())


def load_checkpoint(path) -> GHNParams:
    raw = Path(path).read_bytes()
    if raw[:4] != _MAGIC:
        raise BadParams(f"{path}: not a checkpoint file")
    header_len = int.from_bytes(raw[4:12], "little")
    try:
        header = json.loads(raw[12:12 + header_len].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise BadParams(f"{path}: corrupt header: {exc}") from exc
    if header.get("version") != _VERSION:
        raise BadParams(f"{path}: unsupported version {header.get('version')}")
    dims = GhnDims(**header["dims"])
    vocab = LayerVocabulary(tuple(
        _type_from_record(i, rec) for i, rec in enumerate(header["vocab"])))
    if vocab_hash(vocab) != header["vocab_hash"]:
        raise BadParams(f"{path}: vocabulary hash mismatch")
    dtype = np.dtype(header["dtype"])
    params = _empty_like(dims, vocab, dtype)
    named = params.named_leaves()
    specs = header["tensors"]
    if [n for n, _ in named] != [s["name"] for s in specs]:
        raise BadParams(f"{path}: tensor list does not match dims/vocabulary")
    offset = 12 + header_len
    for (name, tensor), spec in zip(named, specs):
        shape = tuple(spec["shape"])
        if shape != tensor.shape:
            raise BadParams(f"{path}: tensor {name} shape {shape} != expected {tensor.shape}")
        nbytes = int(np.prod(shape)) * dtype.itemsize
        if offset + nbytes > len(raw):
            raise BadParams(f"{path}: truncated payload at tensor {name}")
        tensor.data = np.frombuffer(raw, dtype=dtype, count=int(np.prod(shape)),
                                    offset=offset).reshape(shape).copy()
        offset += nbytes
    if offset != len(raw):
        raise BadParams(f"{path}: {len(raw) - offset} trailing bytes")
    return params


def _empty_like(dims: GhnDims, vocab: LayerVocabulary, dtype) -> GHNParams:
    """Zero-valued parameter skeleton with the canonical tensor layout."""
    params = init_ghn(vocab, dims, seed=0, dtype=dtype)
    for leaf in params.leaves():
        leaf.data = np.zeros_like(leaf.data)
    return params
