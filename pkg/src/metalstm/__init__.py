"""Meta-LSTM multi-task learning on a small numpy autodiff engine."""

import os as _os

# BLAS reads its thread caps when numpy is first loaded, so they are set here
# before any submodule imports numpy.
_threads = _os.environ.get("METALSTM_THREADS")
if _threads and _threads.isdigit() and int(_threads) > 0:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        _os.environ.setdefault(_var, _threads)

__version__ = "0.1.0"
