"""Backend selection for the hot loops.

The compiled extension is used when it was built; otherwise the numpy
fallback is used. Set ``MCEGNN_BACKEND=python`` to force the fallback.
"""
import os

import numpy as np

from . import _fallback

try:
    from . import _kernels as _compiled
except ImportError:  # extension not built
    _compiled = None

if os.environ.get("MCEGNN_BACKEND", "").lower() == "python" or _compiled is None:
    _impl = _fallback
    BACKEND = "python"
else:
    _impl = _compiled
    BACKEND = "compiled"


def available_backends():
    return ["compiled", "python"] if _compiled is not None else ["python"]


def get_backend(name=None):
    """Return the kernel module for ``name`` (defaults to the active one)."""
    if name is None:
        return _impl
    if name == "python":
        return _fallback
    if name == "compiled":
        if _compiled is None:
            raise RuntimeError("compiled kernels are not built")
        return _compiled
    raise ValueError(f"unknown backend {name!r}")


def scatter_add_rows(values, index, n_out, backend=None):
    """Sum rows of ``values`` into ``n_out`` buckets, visiting rows in order."""
    impl = get_backend(backend)
    values = np.ascontiguousarray(values, dtype=np.float64)
    index = np.ascontiguousarray(index, dtype=np.int64)
    return impl.scatter_add_rows(values, index, int(n_out))


def leapfrog(pos, vel, coupling, dt, soft2, n_steps, record_every=1, backend=None):
    """Kick-drift-kick integration of softened pairwise inverse-square forces.

    ``pos``/``vel`` are ``[systems, n, 3]``; ``coupling[b, i, j]`` scales the
    acceleration of body ``i`` along ``x_i - x_j``. Returns recorded positions
    and velocities, each ``[systems, n_steps // record_every + 1, n, 3]``.
    """
    impl = get_backend(backend)
    pos = np.ascontiguousarray(pos, dtype=np.float64)
    vel = np.ascontiguousarray(vel, dtype=np.float64)
    coupling = np.ascontiguousarray(coupling, dtype=np.float64)
    return impl.leapfrog(pos, vel, coupling, float(dt), float(soft2), int(n_steps), int(record_every))

