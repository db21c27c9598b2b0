"""Select the statevector kernel implementation at import time.

The compiled extension is preferred. Setting ``DQULEARN_PURE_PYTHON=1`` (or a
missing build) selects the numpy fallback. Both expose ``apply_gate``,
``run_circuit``, ``prob_zero`` and ``IMPLEMENTATION``.
"""
import logging
import os

from . import _fallback

logger = logging.getLogger(__name__)

if os.environ.get("DQULEARN_PURE_PYTHON", "") not in ("", "0"):
    _impl = _fallback
else:
    try:
        from . import _kernels as _impl
    except ImportError:  # extension not built
        logger.debug("compiled kernels unavailable; using numpy fallback")
        _impl = _fallback

apply_gate = _impl.apply_gate
run_circuit = _impl.run_circuit
prob_zero = _impl.prob_zero
IMPLEMENTATION = _impl.IMPLEMENTATION


def implementations():
    """All importable kernel modules, keyed by name (for tests and benchmarks)."""
    found = {"python": _fallback}
    try:
        from . import _kernels

        found["cython"] = _kernels
    except ImportError:
        pass
    return found
