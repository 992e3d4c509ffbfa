"""GRU recurrence kernels.

The compiled extension is used when it imports; otherwise the numpy fallback.
Set ``FUSIONATTN_KERNEL=python`` to force the fallback.
"""

import os

from . import _gru_py

try:
    if os.environ.get("FUSIONATTN_KERNEL", "").lower() == "python":
        raise ImportError("compiled kernel disabled by FUSIONATTN_KERNEL")
    from . import _gru_ext as _impl

    BACKEND = "cython"
except ImportError:
    _impl = _gru_py
    BACKEND = "python"

gru_forward = _impl.gru_forward
gru_backward = _impl.gru_backward

__all__ = ["BACKEND", "gru_forward", "gru_backward"]
