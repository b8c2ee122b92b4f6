"""Cross-modal mixed patch reorganization pre-training at desk scale."""

import os as _os

# BLAS reads its thread count once, when numpy loads; set the cap before that
_threads = _os.environ.get("MIXREORG_THREADS")
if _threads:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        _os.environ[_var] = _threads

__version__ = "0.1.0"
