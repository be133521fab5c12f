"""Precipitation nowcasting with a physically constrained recurrent cell.

The latent state is split into a physical part, advanced by learned
finite-difference operators (``PhyCell``), and a residual part advanced by a
stacked ConvLSTM.  See ``phynowcast.cli`` for the command-line pipeline.
"""
from .derivative_ops import DerivativeKernelBank, apply_derivatives, moment_loss, moment_matrix, target_delta
from .phycell import PhyCell, upper_triangular_products
from .phydnet import ModelConfig, PhyDNet, PredictionBundle

__all__ = [
    "DerivativeKernelBank", "apply_derivatives", "moment_loss", "moment_matrix", "target_delta",
    "PhyCell", "upper_triangular_products", "ModelConfig", "PhyDNet", "PredictionBundle",
]
__version__ = "0.1.0"
