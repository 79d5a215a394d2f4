"""Multi-stream SSM language models with constrained residual mixing.

Three variants share one code path: a single-stream diagonal-SSM residual
stack (``baseline``), a multi-stream variant whose residual mixing matrix is
Sinkhorn-projected onto the doubly stochastic manifold (``mhc_static``), and
the same topology with stream-specialized bottleneck adapters
(``mhc_adapters``).
"""

from ._kernels import BACKEND as KERNEL_BACKEND
from .tensor import Tensor

__version__ = "0.1.0"

__all__ = ["Tensor", "KERNEL_BACKEND", "__version__"]
