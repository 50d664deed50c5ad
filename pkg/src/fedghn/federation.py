"""Federated hypernetwork training and its baselines.

The protocol: each round the server broadcasts the hypernetwork, every
client runs a fixed number of SGD steps on its own clone (losses flow
through weight generation into hypernetwork parameters), and the server
averages the clones uniformly.  Evaluation always uses weights generated
from the post-aggregation snapshot.

One master seed drives all randomness through `derive_seed`, so every
arm of an experiment (federated, purely local, classic weight averaging)
can be replayed bit-for-bit and sees identical batch sequences wherever
the schedules line up.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .archgraph import ArchGraph, LayerKind, topo_order
from .autodiff import backward
from .data import Shard, accuracy, mean_auc
from .errors import (ArchMismatch, DimMismatch, EmptyShard, FedGhnError,
                     NonDivisible, ParseError, ShapeError, VocabMismatch)
from .ghn import (ClientWeights, GHNParams, GhnDims, average_params, generate,
                  init_ghn, save_checkpoint)
from .network import client_forward, kaiming_client_weights, loss
from .optim import SGDConfig, clip_gradients, cosine_lr, sgd_step

_DTYPES = {"f32": np.float32, "f64": np.float64}
_MASK = (1 << 64) - 1

CSV_HEADER = "round,client_id,arch_name,train_loss,test_metric,wall_ms"


def _splitmix(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & _MASK
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK
    return x ^ (x >> 31)


def derive_seed(master: int, *parts) -> int:
    """Stable 64-bit child seed for a labeled point in the experiment tree.

    Parts may be ints or strings; the same (master, parts) path always
    yields the same seed, and different paths decorrelate.  All batch
    sampling and initialization in this module goes through here.
    """
    h = _splitmix(master & _MASK)
    for part in parts:
        if isinstance(part, str):
            for byte in part.encode():
                h = _splitmix(h ^ byte)
        else:
            h = _splitmix(h ^ (int(part) & _MASK))
    return h


@dataclass
class ClientState:
    """One participant: an architecture plus its private train/test shards."""

    client_id: int
    graph: ArchGraph
    train: Shard
    test: Shard
    seed: int = 0

    def __post_init__(self):
        if self.client_id < 0:
            raise ValueError(f"client_id must be >= 0, got {self.client_id}")
        if self.train.dataset is self.test.dataset and np.intersect1d(
                self.train.indices, self.test.indices).size:
            raise ValueError(f"client {self.client_id}: train/test shards overlap")

    @property
    def task(self) -> str:
        return self.train.dataset.task


@dataclass(frozen=True)
class RoundConfig:
    """Protocol settings: R rounds of L local steps across C clients."""

    rounds: int
    local_steps: int
    clients: int
    lr0: float = 0.009
    batch_size: int = 32
    weight_decay: float = 0.0
    dtype: str = "f32"
    eval_batch: int = 250
    clip_norm: float | None = None

    def __post_init__(self):
        if self.rounds < 1:
            raise ValueError(f"rounds must be >= 1, got {self.rounds}")
        if self.local_steps < 0:
            raise ValueError(f"local_steps must be >= 0, got {self.local_steps}")
        if self.clients < 1:
            raise ValueError(f"clients must be >= 1, got {self.clients}")
        if self.batch_size < 1 or self.eval_batch < 1:
            raise ValueError("batch sizes must be >= 1")
        if self.lr0 <= 0 or self.weight_decay < 0:
            raise ValueError(f"bad lr0/weight_decay: {self.lr0}, {self.weight_decay}")
        if self.clip_norm is not None and self.clip_norm <= 0:
            raise ValueError(f"clip_norm must be positive, got {self.clip_norm}")
        if self.dtype not in _DTYPES:
            raise ValueError(f"dtype must be one of {sorted(_DTYPES)}, got {self.dtype!r}")


@dataclass(frozen=True)
class MetricsRecord:
    """One (round, client) result row; round 0 marks a pre-training record."""

    round: int
    client_id: int
    arch_name: str
    train_loss: float
    test_metric: float
    wall_ms: int = 0

    def __post_init__(self):
        if self.round < 0 or self.wall_ms < 0:
            raise ValueError(f"negative round or wall_ms in {self}")
        if not (0.0 <= self.test_metric <= 1.0):
            raise ValueError(f"test_metric must be in [0, 1], got {self.test_metric}")


def steps_per_epoch(n: int, batch_size: int) -> int:
    """Steps that make one local epoch: ceil(n / batch_size)."""
    if n < 1:
        raise EmptyShard("cannot form an epoch from an empty shard")
    return math.ceil(n / batch_size)


def _batch_positions(n: int, batch_size: int, seed: int) -> np.ndarray:
    """Mini-batch positions: without replacement, unless the shard is smaller
    than one batch, in which case sampling falls back to with-replacement."""
    rng = np.random.default_rng(seed)
    if n >= batch_size:
        return rng.choice(n, size=batch_size, replace=False)
    return rng.integers(0, n, size=batch_size)


# -- evaluation ---------------------------------------------------------------

def evaluate(weights: ClientWeights, graph: ArchGraph, test: Shard,
             eval_batch: int = 250) -> float:
    """Test metric of a weight set: accuracy (single-label) or mean AUC."""
    if test.n == 0:
        raise EmptyShard("cannot evaluate on an empty shard")
    dtype = weights.leaves()[0].dtype
    images = test.dataset.images[test.indices]
    chunks = []
    for start in range(0, len(images), eval_batch):
        batch = images[start:start + eval_batch].astype(dtype, copy=False)
        chunks.append(client_forward(graph, weights, batch).data)
    logits = np.concatenate(chunks)
    if test.dataset.task == "single_label":
        return accuracy(logits, test.labels)
    return mean_auc(logits, test.labels)


# -- the protocol -------------------------------------------------------------

def local_update(params: GHNParams, client: ClientState, steps: int,
                 schedule: SGDConfig, master_seed: int = 0, round_idx: int = 1,
                 batch_size: int = 32, start_step: int | None = None
                 ) -> tuple[GHNParams, float]:
    """Clone the hypernetwork and take `steps` SGD steps on one client.

    Each step samples a mini-batch, generates the client's weights, runs
    the client network, and backpropagates the task loss into the clone.
    Returns the clone and the mean step loss (NaN when steps == 0).  The
    caller's parameters are never touched.
    """
    if steps < 0:
        raise ValueError(f"steps must be >= 0, got {steps}")
    clone = params.clone()
    if steps == 0:
        return clone, float("nan")
    if client.train.n == 0:
        raise EmptyShard(f"client {client.client_id} has no training samples")
    if start_step is None:
        start_step = (round_idx - 1) * steps
    dtype = clone.dtype
    leaves = clone.leaves()
    losses = []
    for j in range(steps):
        seed = derive_seed(master_seed, "batch", client.client_id, round_idx, j)
        images, labels = client.train.batch(
            _batch_positions(client.train.n, batch_size, seed))
        with ad.Tape() as tape:
            for leaf in leaves:
                tape.watch(leaf)
            weights = generate(clone, client.graph)
            logits = client_forward(client.graph, weights,
                                    images.astype(dtype, copy=False))
            step_loss = loss(logits, labels, client.task)
        grads = backward(tape, step_loss)
        clipped = clip_gradients([grads[leaf].data for leaf in leaves],
                                 schedule.clip_norm)
        lr = cosine_lr(start_step + j, schedule)
        for leaf, grad in zip(leaves, clipped):
            leaf.data = sgd_step(leaf.data, grad, lr, schedule.weight_decay)
        losses.append(float(step_loss.data))
    return clone, float(np.mean(losses))


def run_federation(clients: list[ClientState], cfg: RoundConfig, seed: int,
                   dims: GhnDims = GhnDims(), initial_params: GHNParams | None = None,
                   preagg_sink: list | None = None, checkpoint_every: int = 0,
                   checkpoint_dir=None, record_timing: bool = False
                   ) -> tuple[GHNParams, list[MetricsRecord]]:
    """Train one hypernetwork across heterogeneous clients.

    Clients are processed in ascending client_id order, so permuting the
    input list cannot change any result.  All clients participate every
    round and are averaged uniformly.  `preagg_sink`, if given, receives
    per-client records evaluated before aggregation (diagnostics only).
    """
    clients = sorted(clients, key=lambda c: c.client_id)
    if len(clients) != cfg.clients:
        raise ValueError(f"config says {cfg.clients} clients, got {len(clients)}")
    if len({c.client_id for c in clients}) != len(clients):
        raise ValueError("client ids must be unique")
    vocab = clients[0].graph.vocab
    for c in clients[1:]:
        if c.graph.vocab != vocab:
            raise VocabMismatch(f"client {c.client_id} uses a different vocabulary")
    dtype = _DTYPES[cfg.dtype]
    if initial_params is None:
        params = init_ghn(vocab, dims, derive_seed(seed, "ghn-init"), dtype=dtype)
    else:
        if initial_params.vocab != vocab:
            raise VocabMismatch("initial parameters use a different vocabulary")
        params = initial_params.clone()
    schedule = SGDConfig(lr0=cfg.lr0,
                         total_steps=max(1, cfg.rounds * cfg.local_steps),
                         weight_decay=cfg.weight_decay, clip_norm=cfg.clip_norm)
    records: list[MetricsRecord] = []
    for rnd in range(1, cfg.rounds + 1):
        updated, losses, timings = [], [], []
        for c in clients:
            t0 = time.perf_counter()
            try:
                upd, mean_loss = local_update(
                    params, c, cfg.local_steps, schedule, master_seed=seed,
                    round_idx=rnd, batch_size=cfg.batch_size,
                    start_step=(rnd - 1) * cfg.local_steps)
            except FedGhnError as exc:
                raise type(exc)(f"round {rnd}, client {c.client_id}: {exc}") from exc
            wall = int(round((time.perf_counter() - t0) * 1000)) if record_timing else 0
            updated.append(upd)
            losses.append(mean_loss)
            timings.append(wall)
            if preagg_sink is not None:
                metric = evaluate(generate(upd, c.graph), c.graph, c.test,
                                  eval_batch=cfg.eval_batch)
                preagg_sink.append(MetricsRecord(rnd, c.client_id, c.graph.name,
                                                 mean_loss, metric, wall))
        params = average_params(updated)
        for c, mean_loss, wall in zip(clients, losses, timings):
            metric = evaluate(generate(params, c.graph), c.graph, c.test,
                              eval_batch=cfg.eval_batch)
            records.append(MetricsRecord(round=rnd, client_id=c.client_id,
                                         arch_name=c.graph.name,
                                         train_loss=mean_loss,
                                         test_metric=metric, wall_ms=wall))
        if checkpoint_every and checkpoint_dir is not None and rnd % checkpoint_every == 0:
            save_checkpoint(params, Path(checkpoint_dir) / f"round{rnd:04d}.bin")
    return params, records


# -- baselines ----------------------------------------------------------------

def _raw_steps(weights: ClientWeights, client: ClientState, steps: int,
               schedule: SGDConfig, master_seed: int, round_idx: int,
               batch_size: int, start_step: int) -> float:
    """SGD directly on raw client weights, in place; returns mean step loss.

    Uses the same seed derivation as `local_update`, so hypernetwork and
    raw-weight arms see identical batches when their schedules line up.
    """
    if steps == 0:
        return float("nan")
    if client.train.n == 0:
        raise EmptyShard(f"client {client.client_id} has no training samples")
    leaves = weights.leaves()
    dtype = leaves[0].dtype
    losses = []
    for j in range(steps):
        seed = derive_seed(master_seed, "batch", client.client_id, round_idx, j)
        images, labels = client.train.batch(
            _batch_positions(client.train.n, batch_size, seed))
        with ad.Tape() as tape:
            for leaf in leaves:
                tape.watch(leaf)
            logits = client_forward(client.graph, weights,
                                    images.astype(dtype, copy=False))
            step_loss = loss(logits, labels, client.task)
        grads = backward(tape, step_loss)
        clipped = clip_gradients([grads[leaf].data for leaf in leaves],
                                 schedule.clip_norm)
        lr = cosine_lr(start_step + j, schedule)
        for leaf, grad in zip(leaves, clipped):
            leaf.data = sgd_step(leaf.data, grad, lr, schedule.weight_decay)
        losses.append(float(step_loss.data))
    return float(np.mean(losses))


def _average_weights(weights_list: list[ClientWeights]) -> ClientWeights:
    """Uniform elementwise average with the same accumulation order as
    `average_params`, so the two averaging paths agree bit-for-bit."""
    if not weights_list:
        raise DimMismatch("nothing to average")
    coef = 1.0 / len(weights_list)
    out = weights_list[0].detached()
    for nid, pair in out.tensors.items():
        for slot, tensor in enumerate(pair):
            acc = np.zeros_like(tensor.data)
            for cw in weights_list:
                other = cw.tensors[nid][slot]
                if other.shape != tensor.shape:
                    raise DimMismatch(f"node {nid} weight shapes differ")
                acc += coef * other.data
            tensor.data = acc
    return out


def fedavg_baseline(clients: list[ClientState], cfg: RoundConfig, seed: int,
                    initial_weights: ClientWeights | None = None
                    ) -> tuple[ClientWeights, list[MetricsRecord]]:
    """Classic federated averaging of raw weights (no hypernetwork).

    Requires structurally identical architectures.  With one client this
    traces `local_baseline` exactly, step for step, when the round count
    and step count match the epoch schedule.
    """
    clients = sorted(clients, key=lambda c: c.client_id)
    if len(clients) != cfg.clients:
        raise ValueError(f"config says {cfg.clients} clients, got {len(clients)}")
    ref = clients[0].graph
    for c in clients[1:]:
        same = (c.graph.nodes == ref.nodes and c.graph.edges == ref.edges
                and c.graph.input_shape == ref.input_shape
                and c.graph.vocab == ref.vocab)
        if not same:
            raise ArchMismatch(f"client {c.client_id} differs structurally from client "
                               f"{clients[0].client_id}")
    dtype = _DTYPES[cfg.dtype]
    if initial_weights is None:
        weights = kaiming_client_weights(ref, derive_seed(seed, "weights-init"),
                                         dtype=dtype)
    else:
        weights = initial_weights.detached()
        for leaf in weights.leaves():
            leaf.data = leaf.data.astype(dtype, copy=False)
    schedule = SGDConfig(lr0=cfg.lr0,
                         total_steps=max(1, cfg.rounds * cfg.local_steps),
                         weight_decay=cfg.weight_decay, clip_norm=cfg.clip_norm)
    records: list[MetricsRecord] = []
    for rnd in range(1, cfg.rounds + 1):
        locals_: list[tuple[ClientWeights, float]] = []
        for c in clients:
            w_c = weights.detached()
            mean_loss = _raw_steps(w_c, c, cfg.local_steps, schedule, seed, rnd,
                                   cfg.batch_size,
                                   start_step=(rnd - 1) * cfg.local_steps)
            locals_.append((w_c, mean_loss))
        weights = _average_weights([w for w, _ in locals_])
        for c, (_, mean_loss) in zip(clients, locals_):
            metric = evaluate(weights, c.graph, c.test, eval_batch=cfg.eval_batch)
            records.append(MetricsRecord(rnd, c.client_id, c.graph.name,
                                         mean_loss, metric))
    return weights, records


def local_baseline(client: ClientState, epochs: int, lr0: float,
                   batch_size: int = 32, weight_decay: float = 0.0,
                   master_seed: int = 0, dtype: str = "f32",
                   initial_weights: ClientWeights | None = None,
                   eval_batch: int = 250, clip_norm: float | None = None
                   ) -> tuple[ClientWeights, list[MetricsRecord]]:
    """Standalone training of one client's raw weights, no communication.

    An epoch is ceil(n / batch_size) sampled mini-batch steps.  The
    record stream starts with a round-0 row holding the untrained
    metric, then one row per epoch.
    """
    if client.train.n == 0:
        raise EmptyShard(f"client {client.client_id} has no training samples")
    np_dtype = _DTYPES[dtype]
    spe = steps_per_epoch(client.train.n, batch_size)
    if initial_weights is None:
        weights = kaiming_client_weights(client.graph,
                                         derive_seed(master_seed, "weights-init"),
                                         dtype=np_dtype)
    else:
        weights = initial_weights.detached()
        for leaf in weights.leaves():
            leaf.data = leaf.data.astype(np_dtype, copy=False)
    schedule = SGDConfig(lr0=lr0, total_steps=max(1, epochs * spe),
                         weight_decay=weight_decay, clip_norm=clip_norm)
    name = client.graph.name
    records = [MetricsRecord(0, client.client_id, name, float("nan"),
                             evaluate(weights, client.graph, client.test,
                                      eval_batch=eval_batch))]
    for epoch in range(1, epochs + 1):
        mean_loss = _raw_steps(weights, client, spe, schedule, master_seed,
                               epoch, batch_size, start_step=(epoch - 1) * spe)
        metric = evaluate(weights, client.graph, client.test, eval_batch=eval_batch)
        records.append(MetricsRecord(epoch, client.client_id, name, mean_loss, metric))
    return weights, records


@dataclass
class RefineResult:
    weights: ClientWeights
    metric_before: float
    metric_after: float
    epoch_losses: list[float]


def local_refine_head(params: GHNParams, client: ClientState, epochs: int = 1,
                      lr: float = 0.009, batch_size: int = 32,
                      master_seed: int = 0, eval_batch: int = 250) -> RefineResult:
    """Materialize generated weights, then fine-tune only the output head.

    Every tensor except the final linear node's weight and bias stays
    frozen; the head is updated directly (not through the hypernetwork)
    at a constant rate.
    """
    graph = client.graph
    sink = topo_order(graph)[-1]
    if graph.layer(sink).kind is not LayerKind.LINEAR:
        raise ShapeError("head refinement needs a linear output node")
    weights = generate(params, graph).detached()
    before = evaluate(weights, graph, client.test, eval_batch=eval_batch)
    if epochs > 0 and client.train.n == 0:
        raise EmptyShard(f"client {client.client_id} has no training samples")
    head = weights.tensors[sink]
    epoch_losses = []
    for epoch in range(1, epochs + 1):
        spe = steps_per_epoch(client.train.n, batch_size)
        step_losses = []
        for j in range(spe):
            seed = derive_seed(master_seed, "refine", client.client_id, epoch, j)
            images, labels = client.train.batch(
                _batch_positions(client.train.n, batch_size, seed))
            with ad.Tape() as tape:
                for leaf in head:
                    tape.watch(leaf)
                logits = client_forward(graph, weights,
                                        images.astype(weights.leaves()[0].dtype,
                                                      copy=False))
                step_loss = loss(logits, labels, client.task)
            grads = backward(tape, step_loss)
            for leaf in head:
                leaf.data = sgd_step(leaf.data, grads[leaf].data, lr)
            step_losses.append(float(step_loss.data))
        epoch_losses.append(float(np.mean(step_losses)))
    after = evaluate(weights, graph, client.test, eval_batch=eval_batch)
    return RefineResult(weights, before, after, epoch_losses)


# -- experiment loops ---------------------------------------------------------

@dataclass
class LeaveOneOutResult:
    params: GHNParams
    fed_records: list[MetricsRecord]
    ghn_curve: list[float]  # test metric per fine-tune epoch, index 0 untrained
    scratch_curve: list[float]


def leave_one_out(clients: list[ClientState], held_out: int, cfg: RoundConfig,
                  refine_epochs: int, dims: GhnDims = GhnDims(),
                  master_seed: int = 0, finetune_lr0: float | None = None
                  ) -> LeaveOneOutResult:
    """Train a federation without one client, then fine-tune that client.

    Arm one starts the held-out architecture from generated weights, arm
    two from a fresh Kaiming draw; both fine-tune every weight with the
    same schedule and identical batch sequences.
    """
    if not (0 <= held_out < len(clients)):
        raise ValueError(f"held_out must be in [0, {len(clients)}), got {held_out}")
    rest = [c for i, c in enumerate(clients) if i != held_out]
    if not rest:
        raise ValueError("leave-one-out needs at least two clients")
    fed_cfg = replace(cfg, clients=len(rest))
    params, fed_records = run_federation(rest, fed_cfg, master_seed, dims=dims)
    held = clients[held_out]
    lr0 = cfg.lr0 if finetune_lr0 is None else finetune_lr0
    ghn_init = generate(params, held.graph).detached()
    common = dict(batch_size=cfg.batch_size, weight_decay=cfg.weight_decay,
                  master_seed=master_seed, dtype=cfg.dtype,
                  eval_batch=cfg.eval_batch, clip_norm=cfg.clip_norm)
    _, ghn_records = local_baseline(held, refine_epochs, lr0,
                                    initial_weights=ghn_init, **common)
    _, scratch_records = local_baseline(held, refine_epochs, lr0, **common)
    return LeaveOneOutResult(params, fed_records,
                             [r.test_metric for r in ghn_records],
                             [r.test_metric for r in scratch_records])


@dataclass
class SweepResult:
    mean_metric: dict[int, float]  # R -> final-round mean test metric
    records: dict[int, list[MetricsRecord]]


def comm_sweep(clients: list[ClientState], total_steps: int, r_values: list[int],
               lr0: float = 0.009, batch_size: int = 32, weight_decay: float = 0.0,
               dtype: str = "f32", dims: GhnDims = GhnDims(), master_seed: int = 0,
               eval_batch: int = 250, clip_norm: float | None = None) -> SweepResult:
    """Trade communication for local work at a fixed step budget.

    Each R in r_values must divide total_steps; every sweep point trains
    a fresh federation with L = total_steps / R and the same seed, so
    initializations match across points.
    """
    if total_steps < 1:
        raise ValueError(f"total_steps must be >= 1, got {total_steps}")
    if not r_values:
        raise ValueError("r_values must not be empty")
    mean_metric: dict[int, float] = {}
    records: dict[int, list[MetricsRecord]] = {}
    for r in r_values:
        r = int(r)
        if r < 1 or total_steps % r:
            raise NonDivisible(f"{total_steps} steps do not split into {r} rounds")
        cfg = RoundConfig(rounds=r, local_steps=total_steps // r,
                          clients=len(clients), lr0=lr0, batch_size=batch_size,
                          weight_decay=weight_decay, dtype=dtype,
                          eval_batch=eval_batch, clip_norm=clip_norm)
        params, recs = run_federation(clients, cfg, master_seed, dims=dims)
        del params
        finals = [rec.test_metric for rec in recs if rec.round == r]
        mean_metric[r] = float(np.mean(finals))
        records[r] = recs
    return SweepResult(mean_metric, records)


# -- metrics IO ---------------------------------------------------------------

def write_metrics_csv(records: list[MetricsRecord], path) -> None:
    """One row per record under the fixed header; float fields use repr so
    identical runs produce byte-identical files."""
    lines = [CSV_HEADER]
    for r in records:
        lines.append(f"{r.round},{r.client_id},{r.arch_name},"
                     f"{float(r.train_loss)!r},{float(r.test_metric)!r},{r.wall_ms}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_metrics_csv(path) -> list[MetricsRecord]:
    text = Path(path).read_text()
    lines = text.splitlines()
    if not lines or lines[0] != CSV_HEADER:
        raise ParseError(f"{path}: missing metrics header")
    out = []
    for i, line in enumerate(lines[1:], start=2):
        fields = line.split(",")
        if len(fields) != 6:
            raise ParseError(f"{path}:{i}: expected 6 fields, got {len(fields)}")
        rnd, cid, arch, train_loss, test_metric, wall = fields
        try:
            out.append(MetricsRecord(int(rnd), int(cid), arch, float(train_loss),
                                     float(test_metric), int(wall)))
        except ValueError as exc:
            raise ParseError(f"{path}:{i}: {exc}") from exc
    return out
