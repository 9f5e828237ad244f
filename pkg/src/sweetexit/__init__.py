"""Multi-exit transformer fine-tuning with separated exit gradients.

A small numpy implementation of early-exit classifiers, Multi-Model
cascades and the SWEET regime, in which each exit's loss updates only the
layers between the previous exit and its own.
"""

__version__ = "0.1.0"

from .autograd import Tape, Tensor, backward, gradient_gate
from .conflict import ConflictReport, conflict_reports, row_cosine_similarity
from .data import Dataset, SyntheticTaskSpec, Vocab, generate_synthetic, load_dataset, subsample
from .errors import ConfigError, DataFormatError, ShapeError, TrainingDiverged
from .exits import ExitPolicy, ExitTrace, calibrate_temperature, predict_cascade, predict_early_exit
from .harness import compare_regimes, interpolate_at, matthews_corrcoef, speedup_ratio
from .model import Batch, ExitTopology, Model, ModelConfig, build_model, forward_all_exits, forward_until, load_checkpoint, save_checkpoint
from .training import Regime, RegimeConfig, train

__all__ = [
    "Batch", "ConfigError", "ConflictReport", "DataFormatError", "Dataset", "ExitPolicy", "ExitTopology",
    "ExitTrace", "Model", "ModelConfig", "Regime", "RegimeConfig", "ShapeError", "SyntheticTaskSpec", "Tape",
    "Tensor", "TrainingDiverged", "Vocab", "backward", "build_model", "calibrate_temperature", "compare_regimes",
    "conflict_reports", "forward_all_exits", "forward_until", "generate_synthetic", "gradient_gate",
    "interpolate_at", "load_checkpoint", "load_dataset", "matthews_corrcoef", "predict_cascade",
    "predict_early_exit", "row_cosine_similarity", "save_checkpoint", "speedup_ratio", "subsample", "train",
]
