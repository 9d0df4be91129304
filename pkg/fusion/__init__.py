"""
Neuron-interpolation fusion: importance scores, neuron grouping, per-level
fitting and the baselines fusion is compared against.
"""
from .attribution import ImportanceVector, compute_scores
from .grouping import GroupingResult, hungarian, weighted_kmeans
from .settings import FusionConfig, GRADIENT_PRESETS
from .orchestrator import FusionOrchestrator, FusionReport, fuse, representation_cost
from .baselines import vanilla_average, ensemble_predict, last_layer_kd

__all__ = [
    'ImportanceVector',
    'compute_scores',
    'GroupingResult',
    'hungarian',
    'weighted_kmeans',
    'FusionConfig',
    'GRADIENT_PRESETS',
    'FusionOrchestrator',
    'FusionReport',
    'fuse',
    'representation_cost',
    'vanilla_average',
    'ensemble_predict',
    'last_layer_kd',
]
