"""Backend selection for the hot numeric kernels.

Two interchangeable implementations exist: a numba-jitted one
(`_kernels_numba`) and a pure-NumPy one (`_kernels_numpy`). The environment
variable ``FEDSIM_BACKEND`` picks the path at import time:

* unset        -> numba if importable, else NumPy (with a warning)
* ``numba``    -> numba, error if unavailable
* ``numpy``    -> pure NumPy

`benchmarks/bench_backends.py` times both paths against each other.
"""

from __future__ import annotations

import os
import warnings

from . import _kernels_numpy

BACKEND_ENV = "FEDSIM_BACKEND"

EPS = _kernels_numpy.EPS


def _resolve():
    choice = os.environ.get(BACKEND_ENV, "").strip().lower()
    if choice not in ("", "numba", "numpy"):
        raise ValueError(
            f"{BACKEND_ENV} must be 'numba' or 'numpy', got {choice!r}"
        )
    if choice == "numpy":
        return _kernels_numpy, "numpy"
    try:
        from . import _kernels_numba
        return _kernels_numba, "numba"
    except ImportError as exc:
        if choice == "numba":
            raise RuntimeError(
                f"{BACKEND_ENV}=numba but numba is not importable: {exc}"
            ) from exc
        warnings.warn(
            "numba unavailable; falling back to the pure-NumPy kernel backend",
            RuntimeWarning,
            stacklevel=2,
        )
        return _kernels_numpy, "numpy"


_impl, _name = _resolve()

softmax_rows = _impl.softmax_rows
entropy_rows = _impl.entropy_rows
kl_rows = _impl.kl_rows
forward_logits = _impl.forward_logits
loss_and_grad = _impl.loss_and_grad


def active_backend() -> str:
    """Name of the backend selected at import time."""
    return _name


def get_backend(name: str):
    """Fetch a backend module by name regardless of the active selection."""
    if name == "numpy":
        return _kernels_numpy
    if name == "numba":
        from . import _kernels_numba
        return _kernels_numba
    raise ValueError(f"unknown backend {name!r}")
