"""Multi-agent trajectory forecasting with state-space dynamics, graph
attention interaction modeling, selective-scan sequence encoding, control
variable recursion and prediction-only Kalman uncertainty."""

__version__ = "0.1.0"

from .numcore import Rng, Tensor, no_grad

__all__ = ["Rng", "Tensor", "no_grad", "__version__"]
