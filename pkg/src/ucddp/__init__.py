"""Unlearnable-cluster data poisoning under simulated data-parallel training."""

from .clustering import ClusterAssignment, derange_labels, kmeans
from .data import ImageDataset, load_idx, shard_indices, synth_blobs, write_idx
from .ddp import DataParallel, WorldConfig, all_reduce_mean, global_batch
from .evaluation import TrainConfig, evaluate, train_victim, unlearnability_gap
from .models import FeatureHeadClassifier, PerturbationModel, apply_perturbation
from .pipeline import UCConfig, build_clusters, poison_dataset, train_uc, uc_objective
from .sweep import SweepConfig, box_stats, ingest_external_results, run_sweep

__version__ = "0.1.0"
