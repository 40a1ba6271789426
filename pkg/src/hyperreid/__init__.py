"""Cross-modality identity retrieval with whitened hypergraph relation
enhancement, graph-attention middle features, and identity-center
contrastive training, on a self-contained float64 autodiff core.
"""

from . import ops  # noqa: F401  (attaches Tensor arithmetic)
from .tensor import (ContractError, DecompositionError, NumericsError,
                     Parameter, ShapeError, Tape, Tensor, backward,
                     finite_diff_grad, relative_error)

__all__ = [
    "Tensor", "Tape", "Parameter", "backward", "finite_diff_grad",
    "relative_error", "ShapeError", "ContractError", "NumericsError",
    "DecompositionError", "ops",
]

__version__ = "0.1.0"
