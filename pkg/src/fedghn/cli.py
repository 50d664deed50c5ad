"""Command-line entry point: experiment configs, orchestration, artifacts.

Every command resolves a JSON config against documented defaults (each
applied default is logged, so the effective config is reconstructible
from the log alone), runs deterministically under its seed, and writes
artifacts under ``<out>/<experiment>/<seed>/``.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .archgraph import (PRESET_NAMES, ArchGraph, infer_shapes, preset,
                        validate, vocab_hash)
from .data import (Dataset, Shard, SplitSpec, load_cifar10, split,
                   synth_classify, synth_multilabel, train_test_split)
from .errors import (DegenerateSplit, EmptyRecords, FedGhnError, ParseError,
                     SchemaError)
from .federation import (ClientState, MetricsRecord, RoundConfig, comm_sweep,
                         derive_seed, evaluate, fedavg_baseline, leave_one_out,
                         local_baseline, local_refine_head, run_federation,
                         write_metrics_csv)
from .ghn import GhnDims, generate, init_ghn, load_checkpoint, save_checkpoint
from .gradcheck import TOLERANCE, run_gradcheck

_LOG = logging.getLogger("fedghn")

EXPERIMENTS = ("train", "comm_sweep", "leave_one_out", "unbalanced",
               "ablate_gnn", "gradcheck", "inspect")
DATASETS = ("cifar10", "synth_classify", "synth_multilabel")
MODES = ("hafl", "local", "fedavg")

DEFAULTS = {
    "dataset": "synth_classify",
    "dataset_params": {},
    "archs": ["arch0", "arch1", "arch2", "arch3"],
    "clients": 4,
    "rounds": 10,
    "local_steps": 20,
    "lr0": 0.009,
    "batch_size": 32,
    "weight_decay": 0.0,
    "clip_norm": None,
    "dtype": "f32",
    "eval_batch": 250,
    "gnn_rounds": 6,
    "d_node": 51,
    "d_hid": 16,
    "no_gnn": False,
    "identity_mode": False,
    "mode": "hafl",
    "refine": False,
    "stress": False,
    "width_scale": 1.0,
    "split": "uniform",
    "data_fraction": 1.0,
    "alpha": None,
    "r_values": [1, 5, 10, 20],
    "total_steps": 1000,
    "refine_epochs": 10,
    "seed": 0,
    "output_dir": "runs",
}

DATASET_DEFAULTS = {
    "synth_classify": {"n": 2000, "test_n": 2000, "classes": 10,
                       "shape": [3, 16, 16], "margin": 1.0},
    "synth_multilabel": {"n": 2000, "test_n": 1000, "labels_k": 14,
                         "shape": [3, 16, 16]},
    "cifar10": {},
}


@dataclass
class ExperimentSpec:
    """A fully-resolved experiment: no optional fields remain."""

    experiment: str
    dataset: str
    dataset_params: dict
    archs: list[str]
    split: SplitSpec
    round: RoundConfig
    dims: GhnDims
    mode: str
    refine: bool
    stress: bool
    width_scale: float
    r_values: list[int]
    total_steps: int
    refine_epochs: int
    seed: int
    output_dir: str


def parse_config(path, experiment: str = "train", seed: int | None = None,
                 out: str | None = None) -> ExperimentSpec:
    """Resolve a JSON config file (or nothing) into an ExperimentSpec.

    Absent fields take package defaults; every applied default is logged.
    Unknown fields, wrong types, and inconsistent combinations raise
    SchemaError naming the offending field.
    """
    if experiment not in EXPERIMENTS:
        raise SchemaError(f"unknown experiment {experiment!r}")
    raw = {}
    if path is not None:
        text = Path(path).read_text()
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ParseError(f"{path}: line {exc.lineno}, column {exc.colno}: "
                             f"{exc.msg}") from exc
        if not isinstance(raw, dict):
            raise SchemaError(f"{path}: top-level config must be an object")
    unknown = set(raw) - set(DEFAULTS)
    if unknown:
        raise SchemaError(f"unknown config field(s): {sorted(unknown)}")

    def field(key):
        if key in raw:
            return raw[key]
        value = DEFAULTS[key]
        if experiment == "ablate_gnn" and key == "archs":
            value = ["plain4", "plain7", "plain10", "plain13"]
        _LOG.info("config default applied: %s=%r", key, value)
        return value

    dataset = field("dataset")
    if dataset not in DATASETS:
        raise SchemaError(f"dataset must be one of {DATASETS}, got {dataset!r}")
    dparams = dict(field("dataset_params"))
    if not isinstance(dparams, dict):
        raise SchemaError("dataset_params must be an object")
    for key, value in DATASET_DEFAULTS[dataset].items():
        if key not in dparams:
            dparams[key] = value
            _LOG.info("dataset default applied: %s=%r", key, value)
    if dataset == "cifar10":
        for key in ("train_path", "test_path"):
            if key not in dparams:
                raise SchemaError(f"cifar10 needs dataset_params.{key}")

    archs = list(field("archs"))
    if not archs or not all(isinstance(a, str) for a in archs):
        raise SchemaError("archs must be a non-empty list of names")
    clients = int(field("clients"))
    if clients % len(archs) != 0:
        raise SchemaError(f"clients={clients} does not divide evenly over "
                          f"{len(archs)} archs")

    seed_value = int(field("seed")) if seed is None else seed
    if seed is not None:
        _LOG.info("seed overridden on the command line: %d", seed)
    out_value = str(field("output_dir")) if out is None else out

    split_mode = field("split")
    alpha = field("alpha")
    try:
        split_spec = SplitSpec(mode=split_mode, clients=clients,
                               data_fraction=float(field("data_fraction")),
                               alpha=None if alpha is None else float(alpha),
                               seed=derive_seed(seed_value, "split"))
    except ValueError as exc:
        raise SchemaError(str(exc)) from exc

    clip = field("clip_norm")
    try:
        round_cfg = RoundConfig(rounds=int(field("rounds")),
                                local_steps=int(field("local_steps")),
                                clients=clients, lr0=float(field("lr0")),
                                batch_size=int(field("batch_size")),
                                weight_decay=float(field("weight_decay")),
                                dtype=str(field("dtype")),
                                eval_batch=int(field("eval_batch")),
                                clip_norm=None if clip is None else float(clip))
    except ValueError as exc:
        raise SchemaError(str(exc)) from exc

    no_gnn = bool(field("no_gnn"))
    identity = bool(field("identity_mode"))
    if no_gnn and identity:
        raise SchemaError("no_gnn and identity_mode are mutually exclusive")
    ghn_mode = "identity" if identity else ("no_gnn" if no_gnn else "full")
    try:
        dims = GhnDims(gnn_rounds=int(field("gnn_rounds")),
                       d_node=int(field("d_node")), d_hid=int(field("d_hid")),
                       mode=ghn_mode)
    except FedGhnError as exc:
        raise SchemaError(str(exc)) from exc

    mode = field("mode")
    if mode not in MODES:
        raise SchemaError(f"mode must be one of {MODES}, got {mode!r}")
    r_values = [int(v) for v in field("r_values")]
    width_scale = float(field("width_scale"))
    if width_scale <= 0:
        raise SchemaError(f"width_scale must be positive, got {width_scale}")

    return ExperimentSpec(
        experiment=experiment, dataset=dataset, dataset_params=dparams,
        archs=archs, split=split_spec, round=round_cfg, dims=dims, mode=mode,
        refine=bool(field("refine")), stress=bool(field("stress")),
        width_scale=width_scale, r_values=r_values,
        total_steps=int(field("total_steps")),
        refine_epochs=int(field("refine_epochs")), seed=seed_value,
        output_dir=out_value)


# -- data and client construction ---------------------------------------------

def _load_datasets(spec: ExperimentSpec) -> tuple[Dataset, Dataset]:
    p = spec.dataset_params
    data_seed = derive_seed(spec.seed, "data")
    if spec.dataset == "synth_classify":
        full = synth_classify(int(p["n"]) + int(p["test_n"]), int(p["classes"]),
                              tuple(p["shape"]), float(p["margin"]),
                              seed=data_seed)
        return train_test_split(full, int(p["test_n"]),
                                seed=derive_seed(spec.seed, "holdout"))
    if spec.dataset == "synth_multilabel":
        full = synth_multilabel(int(p["n"]) + int(p["test_n"]),
                                int(p["labels_k"]), tuple(p["shape"]),
                                seed=data_seed)
        return train_test_split(full, int(p["test_n"]),
                                seed=derive_seed(spec.seed, "holdout"))
    return load_cifar10(p["train_path"]), load_cifar10(p["test_path"])


def build_clients(spec: ExperimentSpec
                  ) -> tuple[list[ClientState], Dataset, list[Shard] | None]:
    """Materialize datasets, shards, graphs, and ClientStates.

    Returns (clients, test_dataset, skewed_test_shards).  Client test
    shards are balanced; the skew-matched per-client test shards are
    returned separately (dirichlet mode only, None otherwise).
    """
    train_ds, test_ds = _load_datasets(spec)
    classes = train_ds.class_count
    in_ch, height, width = train_ds.images.shape[1:]
    graphs = {name: preset(name, spec.width_scale, classes, (height, width), in_ch)
              for name in set(spec.archs)}
    for name, graph in graphs.items():
        report = validate(graph)
        if not report.ok:
            raise SchemaError(f"preset {name} failed validation: {report.violations}")
    shards, test_shards = split(train_ds, spec.split, test_dataset=test_ds)
    skewed = None
    if spec.split.mode == "dirichlet":
        skewed = test_shards
        for i, shard in enumerate(skewed):
            if shard.n == 0:
                raise DegenerateSplit(f"client {i}: empty skew-matched test shard")
        balanced = Shard(test_ds, np.arange(test_ds.n))
        test_shards = [balanced] * spec.split.clients
    clients = [ClientState(i, graphs[spec.archs[i % len(spec.archs)]],
                           shards[i], test_shards[i])
               for i in range(spec.split.clients)]
    return clients, test_ds, skewed


# -- artifacts ----------------------------------------------------------------

def emit_plot_data(records, kind: str = "rounds") -> str:
    """Render records as a JSON array of {x, y, series} points.

    Accepts MetricsRecords (x is the round/epoch, series names the
    client) or pre-built point dicts, which pass through validated.
    Emission is deterministic: re-emitting parsed output is an identity.
    """
    if not records:
        raise EmptyRecords("no records to plot")
    points = []
    for rec in records:
        if isinstance(rec, dict):
            if not {"x", "y", "series"} <= set(rec):
                raise EmptyRecords(f"plot point missing x/y/series: {rec!r}")
            points.append({"x": rec["x"], "y": rec["y"],
                           "series": str(rec["series"])})
        elif isinstance(rec, MetricsRecord):
            points.append({"x": rec.round, "y": rec.test_metric,
                           "series": f"client{rec.client_id}/{rec.arch_name}"})
        else:
            raise EmptyRecords(f"cannot plot record of type {type(rec).__name__}")
    del kind  # reserved for future x-axis variants; both forms self-describe
    return json.dumps(points, indent=2) + "\n"


def _out_dir(spec: ExperimentSpec) -> Path:
    out = Path(spec.output_dir) / spec.experiment / str(spec.seed)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_effective_config(spec: ExperimentSpec, out: Path) -> None:
    doc = {
        "experiment": spec.experiment,
        "dataset": spec.dataset,
        "dataset_params": spec.dataset_params,
        "archs": spec.archs,
        "split": {"mode": spec.split.mode, "clients": spec.split.clients,
                  "data_fraction": spec.split.data_fraction,
                  "alpha": spec.split.alpha, "seed": spec.split.seed},
        "round": {"rounds": spec.round.rounds, "local_steps": spec.round.local_steps,
                  "clients": spec.round.clients, "lr0": spec.round.lr0,
                  "batch_size": spec.round.batch_size,
                  "weight_decay": spec.round.weight_decay,
                  "dtype": spec.round.dtype, "eval_batch": spec.round.eval_batch,
                  "clip_norm": spec.round.clip_norm},
        "dims": {"gnn_rounds": spec.dims.gnn_rounds, "d_node": spec.dims.d_node,
                 "d_hid": spec.dims.d_hid, "mode": spec.dims.mode},
        "mode": spec.mode, "refine": spec.refine, "stress": spec.stress,
        "width_scale": spec.width_scale, "r_values": spec.r_values,
        "total_steps": spec.total_steps, "refine_epochs": spec.refine_epochs,
        "seed": spec.seed, "output_dir": spec.output_dir,
    }
    (out / "effective_config").write_text(
        json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _final_round_rows(records: list[MetricsRecord], rounds: int
                      ) -> list[MetricsRecord]:
    return [r for r in records if r.round == rounds]


# -- commands -------------------------------------------------------------

def cmd_train(spec: ExperimentSpec) -> int:
    clients, _, _ = build_clients(spec)
    out = _out_dir(spec)
    _write_effective_config(spec, out)
    cfg = spec.round
    if spec.mode == "hafl":
        params, records = run_federation(clients, cfg, spec.seed, dims=spec.dims)
        save_checkpoint(params, out / "checkpoint.bin")
        if spec.refine:
            for c in clients:
                res = local_refine_head(params, c, epochs=1, lr=cfg.lr0,
                                        batch_size=cfg.batch_size,
                                        master_seed=spec.seed,
                                        eval_batch=cfg.eval_batch)
                records.append(MetricsRecord(cfg.rounds + 1, c.client_id,
                                             c.graph.name,
                                             res.epoch_losses[-1],
                                             res.metric_after))
    elif spec.mode == "fedavg":
        _, records = fedavg_baseline(clients, cfg, spec.seed)
    else:
        records = []
        for c in clients:
            _, recs = local_baseline(c, cfg.rounds, cfg.lr0,
                                     batch_size=cfg.batch_size,
                                     weight_decay=cfg.weight_decay,
                                     master_seed=spec.seed, dtype=cfg.dtype,
                                     eval_batch=cfg.eval_batch,
                                     clip_norm=cfg.clip_norm)
            records.extend(recs)
    write_metrics_csv(records, out / "metrics.csv")
    (out / "curves.json").write_text(emit_plot_data(records))
    last = max(r.round for r in records)
    for rec in _final_round_rows(records, last):
        _LOG.info("final: client=%d arch=%s metric=%.4f",
                  rec.client_id, rec.arch_name, rec.test_metric)
    return 0


def cmd_comm_sweep(spec: ExperimentSpec) -> int:
    clients, _, _ = build_clients(spec)
    out = _out_dir(spec)
    _write_effective_config(spec, out)
    cfg = spec.round
    result = comm_sweep(clients, spec.total_steps, spec.r_values, lr0=cfg.lr0,
                        batch_size=cfg.batch_size,
                        weight_decay=cfg.weight_decay, dtype=cfg.dtype,
                        dims=spec.dims, master_seed=spec.seed,
                        eval_batch=cfg.eval_batch, clip_norm=cfg.clip_norm)
    rows = []
    points = []
    for r in spec.r_values:
        metric = result.mean_metric[r]
        _LOG.info("R=%d L=%d mean_metric=%.4f", r, spec.total_steps // r, metric)
        rows.extend(_final_round_rows(result.records[r], r))
        points.append({"x": r, "y": metric, "series": "hafl"})
    write_metrics_csv(rows, out / "metrics.csv")
    (out / "curves.json").write_text(emit_plot_data(points))
    return 0


def cmd_leave_one_out(spec: ExperimentSpec) -> int:
    if len(spec.archs) != 4:
        raise SchemaError(f"leave-one-out needs exactly 4 archs, got {len(spec.archs)}")
    if spec.round.clients != len(spec.archs):
        raise SchemaError("leave-one-out needs one client per arch")
    clients, _, _ = build_clients(spec)
    out = _out_dir(spec)
    _write_effective_config(spec, out)
    points = []
    for held in range(len(clients)):
        cs = list(clients)
        held_name = cs[held].graph.name
        if spec.stress:
            in_ch, height, width = cs[held].graph.input_shape
            small = preset("small4", spec.width_scale,
                           cs[held].train.dataset.class_count,
                           (height, width), in_ch)
            cs[held] = ClientState(cs[held].client_id, small, cs[held].train,
                                   cs[held].test)
            held_name = "small4"
        result = leave_one_out(cs, held, spec.round, spec.refine_epochs,
                               dims=spec.dims, master_seed=spec.seed)
        write_metrics_csv(result.fed_records, out / f"metrics_held{held}.csv")
        for epoch, value in enumerate(result.ghn_curve):
            points.append({"x": epoch, "y": value,
                           "series": f"{held_name}/ghn-init"})
        for epoch, value in enumerate(result.scratch_curve):
            points.append({"x": epoch, "y": value,
                           "series": f"{held_name}/scratch"})
        _LOG.info("held=%s ghn-init final=%.4f scratch final=%.4f", held_name,
                  result.ghn_curve[-1], result.scratch_curve[-1])
    (out / "curves.json").write_text(emit_plot_data(points))
    return 0


def cmd_unbalanced(spec: ExperimentSpec) -> int:
    if spec.split.mode != "dirichlet":
        raise SchemaError("the unbalanced experiment needs split=dirichlet")
    clients, test_ds, skewed = build_clients(spec)
    out = _out_dir(spec)
    _write_effective_config(spec, out)
    cfg = spec.round
    rows: list[tuple[str, int, str, str, float]] = []

    def add_rows(arm, client, weights, skew_shard):
        rows.append((arm, client.client_id, client.graph.name, "balanced",
                     evaluate(weights, client.graph, client.test,
                              eval_batch=cfg.eval_batch)))
        rows.append((arm, client.client_id, client.graph.name, "unbalanced",
                     evaluate(weights, client.graph, skew_shard,
                              eval_batch=cfg.eval_batch)))

    params, _ = run_federation(clients, cfg, spec.seed, dims=spec.dims)
    for c, skew in zip(clients, skewed):
        add_rows("hafl", c, generate(params, c.graph), skew)

    for c, skew in zip(clients, skewed):
        weights, _ = local_baseline(c, cfg.rounds, cfg.lr0,
                                    batch_size=cfg.batch_size,
                                    weight_decay=cfg.weight_decay,
                                    master_seed=spec.seed, dtype=cfg.dtype,
                                    eval_batch=cfg.eval_batch,
                                    clip_norm=cfg.clip_norm)
        add_rows("local", c, weights, skew)

    shared_graph = clients[0].graph
    fed_clients = [ClientState(c.client_id, shared_graph, c.train, c.test)
                   for c in clients]
    weights, _ = fedavg_baseline(fed_clients, cfg, spec.seed)
    for c, skew in zip(fed_clients, skewed):
        add_rows("fedavg", c, weights, skew)

    lines = ["arm,client_id,arch_name,test_kind,metric"]
    points = []
    for arm, cid, arch, kind, metric in rows:
        lines.append(f"{arm},{cid},{arch},{kind},{float(metric)!r}")
        points.append({"x": cid, "y": metric, "series": f"{arm}/{kind}"})
        _LOG.info("%s client=%d %s=%.4f", arm, cid, kind, metric)
    (out / "unbalanced.csv").write_text("\n".join(lines) + "\n")
    (out / "curves.json").write_text(emit_plot_data(points))
    return 0


def cmd_ablate_gnn(spec: ExperimentSpec) -> int:
    clients, _, _ = build_clients(spec)
    out = _out_dir(spec)
    _write_effective_config(spec, out)
    cfg = spec.round
    with_gnn = replace(spec.dims, mode="full")
    without = replace(spec.dims, mode="no_gnn")
    _, rec_gnn = run_federation(clients, cfg, spec.seed, dims=with_gnn)
    _, rec_none = run_federation(clients, cfg, spec.seed, dims=without)
    finals_gnn = {r.client_id: r for r in _final_round_rows(rec_gnn, cfg.rounds)}
    finals_none = {r.client_id: r for r in _final_round_rows(rec_none, cfg.rounds)}
    lines = ["arch_name,with_gnn,without_gnn,margin"]
    points = []
    for cid in sorted(finals_gnn):
        g, n = finals_gnn[cid], finals_none[cid]
        margin = g.test_metric - n.test_metric
        lines.append(f"{g.arch_name},{g.test_metric!r},{n.test_metric!r},{margin!r}")
        points.append({"x": cid, "y": g.test_metric, "series": "gnn"})
        points.append({"x": cid, "y": n.test_metric, "series": "no-gnn"})
        _LOG.info("%s with=%.4f without=%.4f margin=%+.4f",
                  g.arch_name, g.test_metric, n.test_metric, margin)
    (out / "ablation.csv").write_text("\n".join(lines) + "\n")
    write_metrics_csv(rec_gnn, out / "metrics.csv")
    write_metrics_csv(rec_none, out / "metrics_no_gnn.csv")
    (out / "curves.json").write_text(emit_plot_data(points))
    return 0


def cmd_gradcheck(spec: ExperimentSpec) -> int:
    out = _out_dir(spec)
    _write_effective_config(spec, out)
    seeds = (spec.seed, spec.seed + 1, spec.seed + 2)
    report, ok = run_gradcheck(seeds=seeds)
    for name in sorted(report):
        _LOG.info("%-24s max_rel_err=%.3e %s", name, report[name],
                  "ok" if report[name] < TOLERANCE else "FAIL")
    (out / "gradcheck.json").write_text(
        json.dumps({k: report[k] for k in sorted(report)}, indent=2) + "\n")
    return 0 if ok else 1


def cmd_inspect(spec: ExperimentSpec, target: str) -> int:
    path = Path(target)
    if path.is_file():
        params = load_checkpoint(path)
        total = sum(t.size for t in params.leaves())
        _LOG.info("checkpoint: mode=%s gnn_rounds=%d d_node=%d d_hid=%d",
                  params.dims.mode, params.dims.gnn_rounds, params.dims.d_node,
                  params.dims.d_hid)
        _LOG.info("dtype=%s tensors=%d parameters=%d vocab_hash=%s",
                  params.dtype, len(params.leaves()), total,
                  vocab_hash(params.vocab)[:16])
        return 0
    graph = preset(target, spec.width_scale)
    report = validate(graph)
    shapes = infer_shapes(graph)
    total = sum(graph.layer(nid).param_count for nid in graph.parametric_nodes)
    _LOG.info("preset %s: %d nodes, %d edges, %d parametric nodes, %d parameters",
              target, len(graph.nodes), len(graph.edges),
              len(graph.parametric_nodes), total)
    for nid, tid in graph.nodes:
        layer = graph.layer(nid)
        _LOG.info("  node %2d type=%2d kind=%-16s out_shape=%s", nid, tid,
                  layer.kind.value, shapes[nid])
    _LOG.info("validation: %s", "ok" if report.ok else report.violations)
    return 0 if report.ok else 1


# -- argument parsing ----------------------------------------------------------

def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="fedghn",
        description="Federated training of a weight-generating hypernetwork "
                    "across clients with different CNN architectures.")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=None, help="JSON config file")
    common.add_argument("--seed", type=int, default=None, help="seed override")
    common.add_argument("--out", default=None, help="output directory override")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("train", "comm-sweep", "leave-one-out", "unbalanced",
                 "ablate-gnn", "gradcheck"):
        sub.add_parser(name, parents=[common])
    inspect = sub.add_parser("inspect", parents=[common])
    inspect.add_argument("target",
                         help=f"checkpoint path or preset name "
                              f"({', '.join(PRESET_NAMES)}, plainN)")
    args = parser.parse_args(argv)
    if not logging.getLogger().handlers:
        logging.basicConfig(level=logging.INFO, format="%(message)s",
                            stream=sys.stderr)
    experiment = args.command.replace("-", "_")
    try:
        spec = parse_config(args.config, experiment=experiment, seed=args.seed,
                            out=args.out)
        if experiment == "inspect":
            return cmd_inspect(spec, args.target)
        command = {
            "train": cmd_train,
            "comm_sweep": cmd_comm_sweep,
            "leave_one_out": cmd_leave_one_out,
            "unbalanced": cmd_unbalanced,
            "ablate_gnn": cmd_ablate_gnn,
            "gradcheck": cmd_gradcheck,
        }[experiment]
        return command(spec)
    except FedGhnError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
