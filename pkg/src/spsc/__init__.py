"""Dual-stream state-space segmentation for hyperspectral cubes."""

import os as _os

# Thread cap has to land before numpy first loads its BLAS backend, so it
# lives here rather than in the CLI.
_threads = _os.environ.get("SPSC_THREADS")
if _threads:
    for _var in (
        "OMP_NUM_THREADS",
        "OPENBLAS_NUM_THREADS",
        "MKL_NUM_THREADS",
        "NUMEXPR_NUM_THREADS",
    ):
        _os.environ.setdefault(_var, _threads)

from .tensor import Tensor, backward, no_grad  # noqa: E402

__version__ = "0.1.0"
__all__ = ["Tensor", "backward", "no_grad", "__version__"]
