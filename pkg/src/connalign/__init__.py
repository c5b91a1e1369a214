"""Connectome/clinical-report alignment on a small numpy autodiff engine."""

from .autodiff import Recording, Tensor, backward, grad_check
from .connectome import ConnectomeEncoder, SCMatrix, patchify
from .data import (
    SplitSpec,
    SubjectRecord,
    SyntheticConfig,
    generate_synthetic,
    load_dataset,
    load_reports,
    load_sc,
    make_batches,
    save_dataset,
    stratified_split,
)
from .errors import CheckpointError, ConfigError, ConnAlignError, NonFiniteError, ShapeError, ValidationError
from .interpret import interpret, run_ablation_suite, top_subnetworks, top_tokens
from .metrics import MetricsReport, compute_metrics
from .model import ConnectomeReportModel, ModelConfig
from .text import ClinicalReport, TextEncoder, Vocabulary, build_vocab, compose_narrative, tokenize
from .training import Checkpoint, TrainConfig, load_checkpoint, save_checkpoint, train

__version__ = "0.1.0"
