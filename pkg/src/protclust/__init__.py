"""Iterative neural clustering of protein residue graphs.

A chain of alpha-carbon coordinates is repeatedly coarsened: radius balls
around every surviving node are summarized by learned attention, a nomination
score picks which nodes carry on, and a mean readout classifies whatever is
left. All arithmetic runs on a small numpy reverse-mode core, so the whole
pipeline is trainable without any framework dependency.
"""

from .autodiff import (Tensor, backward, grad_check, load_checkpoint, op_eval, param,
                       save_checkpoint, sgd_step)
from .errors import (DegenerateError, IoError, NumericalError, ParseError, ProtclustError,
                     SchemaError, ShapeError, StateError)
from .geometry import (ENCODING_DIM, LocalFrames, NeighborLists, PairEncoding,
                       adjacency_from_lists, local_frames, pair_encoding,
                       pair_encoding_batch, quat_from_rotation, radius_neighbors)
from .network import (IterationBlock, ModelConfig, ScoreTrace, count_params, forward,
                      init_params, load_trace, next_count, predict, save_trace,
                      survivor_schedule, trace_svg)
from .records import (Dataset, MULTI_LABEL, ProteinRecord, SINGLE_LABEL, load_dataset,
                      load_record, masked_record, parse_pdb_ca, save_dataset,
                      save_record, validate_record)
from .synthetic import (AugmentConfig, SynthConfig, augment, drop_nodes,
                        synth_motif_dataset)
from .training import (MetricReport, SweepGrid, TrainConfig, accuracy, evaluate, fmax,
                       nomination_recall, sweep, train)

__version__ = "0.1.0"

__all__ = [
    "AugmentConfig", "Dataset", "DegenerateError", "ENCODING_DIM", "IoError",
    "IterationBlock", "LocalFrames", "MULTI_LABEL", "MetricReport", "ModelConfig",
    "NeighborLists", "NumericalError", "PairEncoding", "ParseError", "ProteinRecord",
    "ProtclustError", "SINGLE_LABEL", "SchemaError", "ScoreTrace", "ShapeError",
    "StateError", "SweepGrid", "SynthConfig",
    "Tensor", "TrainConfig", "accuracy", "adjacency_from_lists", "augment", "backward",
    "count_params", "drop_nodes", "evaluate", "fmax", "forward", "grad_check",
    "init_params", "load_checkpoint", "load_dataset", "load_record", "load_trace",
    "local_frames", "masked_record", "next_count", "nomination_recall", "op_eval",
    "pair_encoding", "pair_encoding_batch", "param", "parse_pdb_ca", "predict",
    "quat_from_rotation", "radius_neighbors", "save_checkpoint", "save_dataset",
    "save_record", "save_trace", "sgd_step", "survivor_schedule", "sweep",
    "synth_motif_dataset", "trace_svg", "train", "validate_record",
]
