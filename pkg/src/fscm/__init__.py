"""F-shape click model: page DAGs, a DAG-structured recurrent click model,
list baselines, a synthetic user simulator and evaluation metrics."""
from .page_dag import PageDag, PageLayout, build_dag
from .model import FSCM, ModelConfig, load_model, save_model
from .simulator import SimConfig, calibrate_defaults, simulate
from .trainer import TrainConfig, train
from .metrics import auc, evaluate, log_likelihood

__all__ = [
    "FSCM",
    "ModelConfig",
    "PageDag",
    "PageLayout",
    "SimConfig",
    "TrainConfig",
    "auc",
    "build_dag",
    "calibrate_defaults",
    "evaluate",
    "load_model",
    "log_likelihood",
    "save_model",
    "simulate",
    "train",
]
