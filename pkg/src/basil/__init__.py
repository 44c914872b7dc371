"""Streaming class-incremental learning with a mean-field Bayesian head,
loss-aware episodic replay, and snapshot self-distillation."""

from .bnn import (MeanFieldPosterior, NetworkArch, WeightSample, forward,
                  kl_diag_gaussian, nll, predict_proba, predictive_uncertainty,
                  sample_weights)
from .buffer import (MemorySlot, ReplacementPolicy, ReplayBuffer, ReplayStrategy)
from .metrics import EvalRecord, offline_reference, omega_all
from .orderings import (DatasetManifest, OrderingKind, SampleRecord,
                        order_stream, synth_dataset)
from .runner import ExperimentConfig, SynthSpec, run_experiment, run_seed
from .trainer import (CheckpointError, Mode, NumericalFault, StreamTrainer,
                      TrainerConfig)

__all__ = [
    "MeanFieldPosterior", "NetworkArch", "WeightSample", "forward",
    "kl_diag_gaussian", "nll", "predict_proba", "predictive_uncertainty",
    "sample_weights", "MemorySlot", "ReplacementPolicy", "ReplayBuffer",
    "ReplayStrategy", "EvalRecord", "offline_reference", "omega_all",
    "DatasetManifest", "OrderingKind", "SampleRecord", "order_stream",
    "synth_dataset", "ExperimentConfig", "SynthSpec", "run_experiment",
    "run_seed", "CheckpointError", "Mode", "NumericalFault", "StreamTrainer",
    "TrainerConfig",
]

__version__ = "0.1.0"
