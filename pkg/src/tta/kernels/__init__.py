"""Hot numeric kernels with a numba lane and a pure-numpy fallback.

The jitted lane is used when numba imports cleanly and the environment
variable ``TTA_NUMBA`` is unset or truthy; set ``TTA_NUMBA=0`` to force the
numpy lane (useful for debugging and for the lane-comparison benchmark).
Lane selection happens once at import time.
"""

import os

from . import _numpy

_FALSEY = {"0", "false", "off", "no"}


def _want_numba() -> bool:
    return os.environ.get("TTA_NUMBA", "1").strip().lower() not in _FALSEY


_impl = _numpy
_numba_active = False
if _want_numba():
    try:
        from . import _numba as _impl_numba

        _impl = _impl_numba
        _numba_active = True
    except ImportError:
        pass


def using_numba() -> bool:
    """True when the jitted lane is active."""
    return _numba_active


softmax_rows = _impl.softmax_rows
softmax_rows_grad = _impl.softmax_rows_grad
log_softmax_rows = _impl.log_softmax_rows
log_softmax_rows_grad = _impl.log_softmax_rows_grad
layer_norm_rows = _impl.layer_norm_rows
layer_norm_rows_grad = _impl.layer_norm_rows_grad
mix_rows = _impl.mix_rows
topp_sample_rows = _impl.topp_sample_rows
trigram_nll = _impl.trigram_nll
argmax_hits = _impl.argmax_hits

__all__ = [
    "using_numba",
    "softmax_rows",
    "softmax_rows_grad",
    "log_softmax_rows",
    "log_softmax_rows_grad",
    "layer_norm_rows",
    "layer_norm_rows_grad",
    "mix_rows",
    "topp_sample_rows",
    "trigram_nll",
    "argmax_hits",
]
