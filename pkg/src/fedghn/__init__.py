"""Federated training of a graph hypernetwork that generates weights for
heterogeneous client CNNs.

Clients describe their networks as typed DAGs over a shared layer
vocabulary; a single hypernetwork maps each graph to that network's
weights.  Only hypernetwork parameters are trained locally and averaged
by the server, so clients with different architectures can federate.
"""

from .archgraph import (ArchGraph, LayerKind, LayerType, LayerVocabulary,
                        PRESET_NAMES, infer_shapes, one_hot_features, preset,
                        serialize, deserialize, shared_vocab, topo_order,
                        validate, vocab_hash)
from .autodiff import Tape, Tensor, backward, finite_diff_check
from .data import (Dataset, Shard, SplitSpec, accuracy, load_cifar10, mean_auc,
                   save_cifar10, split, synth_classify, synth_multilabel,
                   train_test_split, write_split_manifest)
from .federation import (ClientState, LeaveOneOutResult, MetricsRecord,
                         RefineResult, RoundConfig, SweepResult, comm_sweep,
                         derive_seed, evaluate, fedavg_baseline, leave_one_out,
                         local_baseline, local_refine_head, local_update,
                         read_metrics_csv, run_federation, steps_per_epoch,
                         write_metrics_csv)
from .ghn import (ClientWeights, GHNParams, GhnDims, average_params, generate,
                  gnn_forward, head_input_norm, heads_forward, in_adjacency,
                  init_ghn, load_checkpoint, save_checkpoint)
from .gradcheck import run_gradcheck
from .network import client_forward, kaiming_client_weights, loss
from .optim import SGDConfig, cosine_lr, sgd_step

__version__ = "0.1.0"

__all__ = [
    "ArchGraph", "LayerKind", "LayerType", "LayerVocabulary", "PRESET_NAMES",
    "infer_shapes", "one_hot_features", "preset", "serialize", "deserialize",
    "shared_vocab", "topo_order", "validate", "vocab_hash",
    "Tape", "Tensor", "backward", "finite_diff_check",
    "Dataset", "Shard", "SplitSpec", "accuracy", "load_cifar10", "mean_auc",
    "save_cifar10", "split", "synth_classify", "synth_multilabel",
    "train_test_split", "write_split_manifest",
    "ClientState", "LeaveOneOutResult", "MetricsRecord", "RefineResult",
    "RoundConfig", "SweepResult", "comm_sweep", "derive_seed", "evaluate",
    "fedavg_baseline", "leave_one_out", "local_baseline", "local_refine_head",
    "local_update", "read_metrics_csv", "run_federation", "steps_per_epoch",
    "write_metrics_csv",
    "ClientWeights", "GHNParams", "GhnDims", "average_params", "generate",
    "gnn_forward", "head_input_norm", "heads_forward", "in_adjacency", "init_ghn",
    "load_checkpoint", "save_checkpoint",
    "run_gradcheck",
    "client_forward", "kaiming_client_weights", "loss",
    "SGDConfig", "cosine_lr", "sgd_step",
    "__version__",
]
