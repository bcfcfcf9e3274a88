"""Variational Bayes contour/basis decomposition and label-field segmentation."""

from .grid import ImageGrid, StencilOperator, apply_D, apply_D_transpose, row_squared_apply
from .model import Hyperparams, SceneSpec, VariationalState, init_state, synthesize
from .pipeline import FitConfig, FitReport, decompose, dice, fit, mean_dice, segment
from .var_loss import LossBreakdown, free_energy, total_loss

__all__ = [
    "ImageGrid", "StencilOperator", "apply_D", "apply_D_transpose", "row_squared_apply",
    "Hyperparams", "SceneSpec", "VariationalState", "init_state", "synthesize",
    "FitConfig", "FitReport", "decompose", "dice", "fit", "mean_dice", "segment",
    "LossBreakdown", "free_energy", "total_loss",
]
__version__ = "0.1.0"
