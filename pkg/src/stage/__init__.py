"""Multi-stage funnel classification: feature completion with an adversarial
encoder / multi-task decoder and a sequence-aware multi-label classifier."""

__version__ = "0.1.0"

from .aemtd import AemtdConfig, AemtdModel, CompletedDataset, complete, train_aemtd
from .baselines import MulticlassModel, StageBinaryBank, train_bank, train_imc, train_stage_binary
from .evaluation import ExperimentPlan, StageReport, f1_positive, run_plan
from .funnel import (
    FunnelDataset,
    LabelMatrix,
    StageSchema,
    SynthFunnelConfig,
    ingest_csv,
    synth_funnel,
    to_label_matrix,
)
from .mlssl import MlsslClassifier, build_graph, predict, tml, train_mlssl
from .nn import FORMAT_VERSION, DenseNet, SgdConfig

__all__ = [
    "AemtdConfig",
    "AemtdModel",
    "CompletedDataset",
    "DenseNet",
    "ExperimentPlan",
    "FORMAT_VERSION",
    "FunnelDataset",
    "LabelMatrix",
    "MlsslClassifier",
    "MulticlassModel",
    "SgdConfig",
    "StageBinaryBank",
    "StageReport",
    "StageSchema",
    "SynthFunnelConfig",
    "build_graph",
    "complete",
    "f1_positive",
    "ingest_csv",
    "predict",
    "run_plan",
    "synth_funnel",
    "tml",
    "to_label_matrix",
    "train_aemtd",
    "train_bank",
    "train_imc",
    "train_mlssl",
    "train_stage_binary",
]
