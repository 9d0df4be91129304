"""
Core modules: numerics, networks, data, training, model files and reports.
"""
from .network import ModelSpec, AffineLevel, ActivationLevel, LevelPartition, forward, mlp
from .data import Dataset, SplitPlan
from .training import TrainConfig
from .model_io import save_model, load_model
from .manifest_loader import ManifestLoader, RunManifest

__all__ = [
    'ModelSpec',
    'AffineLevel',
    'ActivationLevel',
    'LevelPartition',
    'forward',
    'mlp',
    'Dataset',
    'SplitPlan',
    'TrainConfig',
    'save_model',
    'load_model',
    'ManifestLoader',
    'RunManifest',
]
