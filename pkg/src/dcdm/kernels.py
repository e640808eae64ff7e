"""Kernel dispatch: compiled extension when available, numpy otherwise.

Set ``DCDM_KERNELS=python`` to force the fallback (used by the benchmark
and by the cross-backend tests).
"""
from __future__ import annotations

import os

from . import _pykernels

BACKEND = "python"
_impl = _pykernels

if os.environ.get("DCDM_KERNELS", "").lower() != "python":
    try:
        from . import _ckernels as _impl  # type: ignore[no-redef]

        BACKEND = "cython"
    except ImportError:
        pass

masked_softmax = _impl.masked_softmax
masked_softmax_grad = _impl.masked_softmax_grad
# a single numpy broadcast beats the compiled loop here
noise_masks = _pykernels.noise_masks
chunk_causal_masks = _impl.chunk_causal_masks
training_masks = _impl.training_masks
reach = _impl.reach
