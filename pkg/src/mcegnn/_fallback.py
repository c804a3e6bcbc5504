"""Pure numpy versions of the compiled kernels.

Operation order mirrors ``_kernels.pyx`` so results match bit for bit.
"""
import numpy as np


def scatter_add_rows(values, index, n_out):
    values = np.ascontiguousarray(values, dtype=np.float64)
    if values.ndim != 2:
        raise ValueError("values must be 2-d")
    if len(index) and (index.min() < 0 or index.max() >= n_out):
        raise IndexError("scatter index out of range")
    out = np.zeros((n_out, values.shape[1]), dtype=np.float64)
    # add.at is unbuffered and walks rows in order, like the compiled loop
    np.add.at(out, index, values)
    return out


def _accel(x, coupling, soft2):
    # x: [B, n, 3], coupling: [B, n, n]
    acc = np.zeros_like(x)
    n = x.shape[1]
    for j in range(n):
        others = np.arange(n) != j  # no self interaction
        d = x[:, others] - x[:, j : j + 1, :]
        dx, dy, dz = d[..., 0], d[..., 1], d[..., 2]
        r2 = dx * dx + dy * dy + dz * dz + soft2
        w = coupling[:, others, j] * (1.0 / (r2 * np.sqrt(r2)))
        acc[:, others] = acc[:, others] + w[..., None] * d
    return acc


def leapfrog(pos, vel, coupling, dt, soft2, n_steps, record_every):
    x = np.array(pos, dtype=np.float64)
    v = np.array(vel, dtype=np.float64)
    n_sys, n = x.shape[0], x.shape[1]
    n_rec = n_steps // record_every + 1
    xs = np.empty((n_sys, n_rec, n, 3))
    vs = np.empty((n_sys, n_rec, n, 3))
    xs[:, 0] = x
    vs[:, 0] = v
    half = 0.5 * dt
    a = _accel(x, coupling, soft2)
    r = 1
    for s in range(1, n_steps + 1):
        v = v + half * a
        x = x + dt * v
        a = _accel(x, coupling, soft2)
        v = v + half * a
        if s % record_every == 0:
            xs[:, r] = x
            vs[:, r] = v
            r += 1
    return xs, vs

