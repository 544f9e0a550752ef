"""Pairwise particle kernels with a compiled core and a numpy fallback.

The compiled extension is picked at import time when it has been built
(``pip install -e .`` or ``python setup.py build_ext --inplace``). Setting
``JKOFLOW_PURE_PYTHON=1`` forces the fallback.
"""

import os

import numpy as np

from . import _kernels_py

BACKEND = "python"
_impl = _kernels_py

if os.environ.get("JKOFLOW_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as _compiled
    except ImportError:
        pass
    else:
        _impl = _compiled
        BACKEND = "cython"


class SingularPairError(ValueError):
    """Two distinct particles coincide where the force is singular."""

    def __init__(self, i, k):
        super().__init__(f"particles {i} and {k} coincide; force is singular for p <= 0")
        self.indices = (i, k)


def _as_points(x):
    x = np.ascontiguousarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError(f"expected an (n, d) point array, got shape {x.shape}")
    return x


def pair_velocity(x, p, q, impl=None):
    impl = impl or _impl
    v, i, k = impl.pair_velocity(_as_points(x), float(p), float(q))
    if i >= 0:
        raise SingularPairError(i, k)
    return np.asarray(v)


def pair_energy(x, p, q, impl=None):
    impl = impl or _impl
    return float(impl.pair_energy(_as_points(x), float(p), float(q)))


def chamfer(a, b, impl=None):
    impl = impl or _impl
    return float(impl.chamfer(_as_points(a), _as_points(b)))
