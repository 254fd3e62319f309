from .kernel import se_kernel, se_kernel_matrix
from .model import GpHyperparams, GpModel, GpRegressor, fit, log_evidence

__all__ = [
    "se_kernel",
    "se_kernel_matrix",
    "GpHyperparams",
    "GpModel",
    "GpRegressor",
    "fit",
    "log_evidence",
]
