"""Joint audio-visual saliency and sound-source localization lab.

Submodules: numerics (tensors + reverse-mode tape), graph (spatio-temporal
multi-modal structure), gatnet (multi-head attention network), synthdata
(calibrated scene generator + .mvs container), render (Gaussian source maps
and refined saliency), losses, metrics, trainer, cli.
"""

from .errors import StmgError
from .numerics import GradTape, GridSpec, Tensor

__all__ = ["StmgError", "GradTape", "GridSpec", "Tensor"]

__version__ = "0.1.0"
