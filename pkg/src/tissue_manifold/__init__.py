"""Energy-landscape modelling of multi-sequence MR intensity vectors.

A smooth scalar energy ``E(u)`` over normalized intensity space is fitted by
denoising score matching; its minima, barriers and the drift of follow-up
scans along a healthy-to-tumour axis are then read off the landscape.
"""
from .checkpoint import load_checkpoint, save_checkpoint
from .errors import (ConfigurationError, DegenerateScaleError, FormatError, GeometryError,
                     InputError, NumericError, TissueManifoldError, TrainingError)
from .geometry import (BasinMap, FlowConfig, assign_to_basins, barrier_height, basin_width,
                       descend, find_basins, line_profile)
from .inr import EnergyModel, energy, energy_batch, init_model, laplacian, score
from .longitudinal import ROI, LongitudinalConfig, build_axis, run_longitudinal
from .normalization import NormStats, compute_norm_stats
from .phantom import MixtureSpec, analytic_energy, analytic_score, build_scenario, sample
from .tables import VoxelTable, read_voxel_table, write_voxel_table
from .training import TrainConfig, train

__all__ = [
    "BasinMap", "ConfigurationError", "DegenerateScaleError", "EnergyModel", "FlowConfig",
    "FormatError", "GeometryError", "InputError", "LongitudinalConfig", "MixtureSpec",
    "NormStats", "NumericError", "ROI", "TissueManifoldError", "TrainConfig", "TrainingError",
    "VoxelTable", "analytic_energy", "analytic_score", "assign_to_basins", "barrier_height",
    "basin_width", "build_axis", "build_scenario", "compute_norm_stats", "descend", "energy",
    "energy_batch", "find_basins", "init_model", "laplacian", "line_profile",
    "load_checkpoint", "read_voxel_table", "run_longitudinal", "sample", "save_checkpoint",
    "score", "train", "write_voxel_table",
]
__version__ = "0.1.0"
