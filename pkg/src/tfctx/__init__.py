"""Global time-frequency context modeling for speaker embeddings.

Channel and time-frequency recalibration blocks (squeeze-excitation,
attention pooling, multi-DCT pooling, group-wise enhancement) on top of a
small double-precision autodiff engine, with a toy training/evaluation
pipeline and EER/minDCF scoring.
"""

from .tensor import Tensor, finite_diff_check

__version__ = "0.1.0"

__all__ = ["Tensor", "finite_diff_check", "__version__"]
