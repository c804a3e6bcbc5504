"""Empirical checks of symmetry, gradient correctness and single-channel parity."""
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import nn, rng
from . import tensor as T
from .egnn import MCEGNN, GraphBatch, MCEGNNConfig

GROUP_ELEMENTS = ("identity", "rotation", "reflection", "translation", "permutation", "composite")


@dataclass
class EquivarianceReport:
    property: str
    trials: int
    max_deviation: float
    tol: float
    passed: bool
    seeds: list = field(default_factory=list)
    detail: dict = field(default_factory=dict)

    def to_dict(self):
        return asdict(self)


def reports_to_json(reports, path=None):
    text = json.dumps([r.to_dict() for r in reports], indent=2)
    if path is not None:
        with open(path, "w") as fh:
            fh.write(text + "\n")
    return text


def random_orthogonal(dim, seed, det_sign="either"):
    """Haar-distributed orthogonal matrix from QR of a Gaussian matrix.

    ``det_sign`` is +1, -1 or "either"; a forced sign flips the first column.
    """
    if dim < 1:
        raise ValueError("dim must be >= 1")
    g = rng.stream(seed, "orthogonal", dim)
    q, r = np.linalg.qr(g.standard_normal((dim, dim)))
    q = q * np.where(np.diag(r) < 0, -1.0, 1.0)
    if det_sign != "either":
        if det_sign not in (1, -1):
            raise ValueError("det_sign must be +1, -1 or 'either'")
        if np.sign(np.linalg.det(q)) != det_sign:
            q[:, 0] = -q[:, 0]
    return q


def _output(model, batch):
    with T.no_grad():
        return model(batch).data.copy()


def _is_invariant_output(model):
    return getattr(getattr(model, "cfg", None), "readout", "positions") == "invariant_scalar"


def _translates_output(model):
    cfg = getattr(model, "cfg", None)
    return cfg is None or cfg.residual_positions


def _trial(model, batch, ref, element, g):
    """Apply one random group element; return ``|f(g.x) - g.f(x)|`` max."""
    n = batch.n_nodes
    invariant = _is_invariant_output(model)
    rot = shift = perm = None
    if element in ("rotation", "composite"):
        rot = random_orthogonal(3, int(g.integers(2**31)), det_sign=1)
    if element == "reflection":
        rot = random_orthogonal(3, int(g.integers(2**31)), det_sign=-1)
    if element == "composite" and g.random() < 0.5:
        rot = rot @ np.diag([-1.0, 1.0, 1.0])
    if element in ("translation", "composite"):
        shift = g.standard_normal(3)
    if element in ("permutation", "composite"):
        perm = g.permutation(n)
    moved = batch.transformed(rot, shift)
    if perm is not None:
        moved = moved.permuted(perm)
    out = _output(model, moved)
    expect = ref
    if not invariant:
        if rot is not None:
            expect = expect @ rot.T
        if shift is not None and _translates_output(model):
            expect = expect + shift
        if perm is not None:
            expect = expect[perm]
    return float(np.max(np.abs(out - expect))) if out.size else 0.0


def check_equivariance(model, batch, group_element, trials=20, tol=1e-9, seed=0):
    """Max deviation over ``trials`` random draws of one kind of group element.

    Rotations and reflections act on positions and velocities, translations
    on positions only, permutations relabel nodes together with their edges.
    With the position residual disabled, outputs are expected to be
    translation invariant rather than equivariant; scalar readouts are
    expected to be invariant under everything.
    """
    if group_element not in GROUP_ELEMENTS:
        raise ValueError(f"group element must be one of {GROUP_ELEMENTS}")
    ref = _output(model, batch)
    g = rng.stream(seed, "equicheck", GROUP_ELEMENTS.index(group_element))
    worst = 0.0
    if group_element == "identity":
        worst = float(np.max(np.abs(_output(model, batch) - ref))) if ref.size else 0.0
        trials = 1
    else:
        for _ in range(trials):
            worst = max(worst, _trial(model, batch, ref, group_element, g))
    return EquivarianceReport(group_element, trials, worst, tol, bool(worst <= tol), [seed])


def check_all(model, batch, trials=20, tol=1e-9, seed=0, elements=GROUP_ELEMENTS[1:]):
    return [check_equivariance(model, batch, e, trials, tol, seed) for e in elements]


class CoordinateLeak:
    """Deliberately broken model: absolute positions of ``i`` are fed to the
    edge MLP as extra edge attributes. Used to confirm the harness can fail."""

    def __init__(self, cfg, seed=0, gain=1.0):
        d = cfg.to_dict()
        d["edge_dim"] = cfg.edge_dim + 3
        d["coord_init_gain"] = gain
        self.inner = MCEGNN(MCEGNNConfig.from_dict(d), seed)
        self.cfg = cfg

    def __call__(self, batch):
        leak = batch.x[batch.dst]
        a = leak if batch.edge_attr is None else np.concatenate([batch.edge_attr, leak], axis=1)
        return self.inner(GraphBatch(batch.x, batch.h, batch.dst, batch.src, batch.v, a, batch.graph, batch.n_graphs))


def mutation_check(cfg, batch, trials=20, tol=1e-9, seed=0):
    """Report that passes only if every symmetry check FAILS on the leaky model."""
    bad = CoordinateLeak(cfg, seed)
    inner = [check_equivariance(bad, batch, e, trials, tol, seed) for e in ("rotation", "reflection", "translation")]
    caught = all(not r.passed for r in inner)
    return EquivarianceReport(
        "mutation_coordinate_leak",
        trials,
        min(r.max_deviation for r in inner),
        tol,
        caught,
        [seed],
        {r.property: r.max_deviation for r in inner},
    )


def _probe_indices(params, n_probe, seed):
    sizes = np.array([p.size for p in params])
    total = int(sizes.sum())
    g = rng.stream(seed, "gradprobe")
    flat = np.sort(g.choice(total, size=min(n_probe, total), replace=False))
    bounds = np.cumsum(sizes)
    which = np.searchsorted(bounds, flat, side="right")
    offs = flat - np.concatenate([[0], bounds[:-1]])[which]
    return list(zip(which.tolist(), offs.tolist()))


def displacement_probe(batch, seed=0):
    """Random linear functional of ``pred - x``.

    Measuring the displacement rather than the raw positions keeps the loss
    small, so finite differences are not swamped by rounding of ``x``.
    """
    w = T.Tensor(rng.stream(seed, "probe").standard_normal(batch.x.shape))
    x = T.Tensor(batch.x)

    def loss(pred):
        return T.mean(T.mul(T.sub(pred, x), w))

    return loss


def check_gradients(model, batch, loss=None, tol_rel=1e-4, h=1e-5, n_probe=200, seed=0, floor=1e-7):
    """Tape gradients against central differences on sampled parameters.

    ``loss(pred)`` maps the model output to a scalar Tensor; the default is
    ``displacement_probe``. Relative error is
    ``|g - g_fd| / max(|g|, |g_fd|, floor)``.
    """
    if loss is None:
        loss = displacement_probe(batch, seed)
    params = model.parameters()
    for p in params:
        p.grad = None
    T.current_tape().clear()
    T.backward(loss(model(batch)), params)
    grads = [p.grad.copy() for p in params]
    nn.zero_grad(params)

    def value():
        with T.no_grad():
            return loss(model(batch)).item()

    worst_rel = worst_abs = 0.0
    probes = _probe_indices(params, n_probe, seed)
    for k, off in probes:
        flat = params[k].data.reshape(-1)
        old = flat[off]
        flat[off] = old + h
        fp = value()
        flat[off] = old - h
        fm = value()
        flat[off] = old
        fd = (fp - fm) / (2 * h)
        an = grads[k].reshape(-1)[off]
        err = abs(an - fd)
        worst_abs = max(worst_abs, err)
        worst_rel = max(worst_rel, err / max(abs(an), abs(fd), floor))
    return EquivarianceReport(
        "gradients",
        len(probes),
        float(worst_rel),
        tol_rel,
        bool(worst_rel <= tol_rel),
        [seed],
        {"max_abs_error": float(worst_abs), "h": h},
    )


def _default_target(batch):
    v = batch.v if batch.v is not None else np.zeros_like(batch.x)
    return batch.x + 0.1 * v


def check_parity(mc_model, reference, batches, tol=1e-12, steps=0, lr=1e-3, targets=None):
    """Max output deviation between two models with identical layouts.

    With ``steps > 0`` both are first trained in lockstep with Adam on the
    given batches (cycled) against an MSE target.
    """
    if mc_model.layout() != reference.layout():
        raise ValueError("parameter layouts differ")
    if targets is None:
        targets = [_default_target(b) for b in batches]
    opts = [nn.Adam(m.parameters(), lr=lr) for m in (mc_model, reference)]
    for s in range(steps):
        b, t = batches[s % len(batches)], targets[s % len(batches)]
        for model, opt in zip((mc_model, reference), opts):
            T.current_tape().clear()
            pred = model(b)
            d = T.sub(pred, T.Tensor(t))
            T.backward(T.mean(T.mul(d, d)), opt.params)
            opt.step()
    worst = 0.0
    for b in batches:
        worst = max(worst, float(np.max(np.abs(_output(mc_model, b) - _output(reference, b)))))
    name = "parity" if steps == 0 else f"parity_after_{steps}_steps"
    return EquivarianceReport(name, len(batches), worst, tol, bool(worst <= tol), [mc_model.seed])
