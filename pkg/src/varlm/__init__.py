"""Compact byte-level language model with variational feed-forward units.

The transformer backbone is shared between two FFN modes: a bank of local
latent-variable units trained with a KL-regularized objective ("variational")
and a parameter-matched deterministic MLP ("deterministic"). A Monte Carlo
evaluation suite turns repeated stochastic forward passes into uncertainty
metrics (mutual information, predictive variance, flip rates, CVaR of NLL).
"""

from .data import (BOS_ID, SEP_ID, VOCAB_SIZE, ByteTokenizer, Corpus,
                   SplitSpec, TokenWindow, ingest, load_embedding,
                   make_windows, save_embedding, split, synthetic_corpus,
                   training_arrays)
from .mceval import McPrediction, MetricsReport, evaluate, mc_forward
from .model import (CheckpointError, Model, ModelConfig, ffn_param_parity,
                    load_checkpoint, read_checkpoint_header, save_checkpoint)
from .objective import (Adam, LossBreakdown, ObjectiveWeights, Trainer,
                        TrainSettings, kl_warmup, select_best)
from .tensor import NumericGuardError, RngStream, Tensor, no_grad
from .varneuron import ControlState, UnitBank, kl_diag_gauss, latent_energy

__version__ = "0.1.0"

__all__ = [
    "BOS_ID", "SEP_ID", "VOCAB_SIZE", "ByteTokenizer", "Corpus", "SplitSpec",
    "TokenWindow", "ingest", "load_embedding", "make_windows",
    "save_embedding", "split", "synthetic_corpus", "training_arrays",
    "McPrediction", "MetricsReport", "evaluate", "mc_forward",
    "CheckpointError", "Model", "ModelConfig", "ffn_param_parity",
    "load_checkpoint", "read_checkpoint_header", "save_checkpoint",
    "Adam", "LossBreakdown", "ObjectiveWeights", "Trainer", "TrainSettings",
    "kl_warmup", "select_best",
    "NumericGuardError", "RngStream", "Tensor", "no_grad",
    "ControlState", "UnitBank", "kl_diag_gauss", "latent_energy",
    "__version__",
]
