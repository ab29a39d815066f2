"""Unsupervised morphing-attack detection toolkit.

Trains a convolutional autoencoder on unlabeled face data with self-paced
sample reweighting and scores samples by reconstruction error, where
attacks reconstruct with lower error than bona fide images.
"""

__version__ = "0.1.0"

from .model import CAE, CAEConfig, init_parameters, per_sample_mse, weighted_batch_objective
from .spl import BatchReport, SPLState, batch_statistics, compute_lambda, compute_weights, spl_step
from .training import TrainConfig, fit, resume, sgd_update
from .data import Manifest, UnlabeledDataset, load_manifest, mix_datasets, preprocess, synth_generate
from .evaluation import ScoreSet, apcer_bpcer_at, compute_eer, roc_auc, roc_points, score

__all__ = [
    "CAE", "CAEConfig", "init_parameters", "per_sample_mse", "weighted_batch_objective",
    "BatchReport", "SPLState", "batch_statistics", "compute_lambda", "compute_weights", "spl_step",
    "TrainConfig", "fit", "resume", "sgd_update",
    "Manifest", "UnlabeledDataset", "load_manifest", "mix_datasets", "preprocess", "synth_generate",
    "ScoreSet", "apcer_bpcer_at", "compute_eer", "roc_auc", "roc_points", "score",
    "__version__",
]
