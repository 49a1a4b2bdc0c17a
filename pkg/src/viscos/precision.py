"""Working precision, selected by the ``VISCOS_PRECISION`` environment variable.

``double`` (the default) runs everything in float64. ``single`` stores flow
weights and evaluates flows in float32 and relaxes the Neumann truncation
threshold accordingly. Oracles always run in float64.
"""
import os

import numpy as np

_DTYPES = {"double": np.float64, "single": np.float32}
_TRUNC_TOL = {"double": 1e-10, "single": 1e-5}


def precision_name():
    name = os.environ.get("VISCOS_PRECISION", "double").strip().lower()
    if name not in _DTYPES:
        raise ValueError(f"VISCOS_PRECISION must be 'single' or 'double', got {name!r}")
    return name


def working_dtype():
    return _DTYPES[precision_name()]


def default_trunc_tol():
    """Neumann-series truncation threshold for the current precision."""
    return _TRUNC_TOL[precision_name()]
