"""MLPs, Glorot initialization, Adam and gradient clipping."""
import math

import numpy as np

from . import rng
from . import tensor as T


class MLP:
    """Chain of affine layers with SiLU between them.

    ``final_activation`` applies SiLU after the last layer too.
    ``final_bias=False`` drops the bias of the last layer.
    ``final_gain`` scales the init bound of the last layer.
    """

    def __init__(self, widths, final_activation=False, seed=0, final_bias=True, final_gain=1.0):
        widths = [int(w) for w in widths]
        if len(widths) < 2:
            raise ValueError("an MLP needs at least input and output widths")
        if min(widths) < 1:
            raise ValueError(f"widths must be positive, got {widths}")
        g = seed if isinstance(seed, np.random.Generator) else rng.stream(seed, "init")
        self.widths = widths
        self.final_activation = bool(final_activation)
        self.weights = []
        self.biases = []
        n = len(widths) - 1
        for k, (fan_in, fan_out) in enumerate(zip(widths[:-1], widths[1:])):
            bound = math.sqrt(6.0 / (fan_in + fan_out)) * (final_gain if k == n - 1 else 1.0)
            self.weights.append(T.Tensor(g.uniform(-bound, bound, (fan_in, fan_out)), requires_grad=True))
            if k < n - 1 or final_bias:
                self.biases.append(T.Tensor(np.zeros(fan_out), requires_grad=True))
            else:
                self.biases.append(None)

    @property
    def in_width(self):
        return self.widths[0]

    @property
    def out_width(self):
        return self.widths[-1]

    @property
    def activations(self):
        n = len(self.weights)
        return ["silu" if (k < n - 1 or self.final_activation) else "identity" for k in range(n)]

    def __call__(self, x):
        return mlp_forward(self, x)

    def forward_from(self, x, start):
        """Run layers ``start:`` on ``x``, the output of layer ``start - 1``."""
        n = len(self.weights)
        for k in range(start, n):
            x = T.linear(x, self.weights[k], self.biases[k])
            if k < n - 1 or self.final_activation:
                x = T.silu(x)
        return x

    def named_parameters(self, prefix=""):
        out = []
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            out.append((f"{prefix}{k}.weight", w))
            if b is not None:
                out.append((f"{prefix}{k}.bias", b))
        return out

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def param_count(self):
        return int(sum(p.size for p in self.parameters()))


def mlp_new(widths, final_activation=False, seed=0, final_bias=True, final_gain=1.0):
    return MLP(widths, final_activation=final_activation, seed=seed, final_bias=final_bias, final_gain=final_gain)


def mlp_forward(m, x):
    if x.data.ndim != 2 or x.shape[1] != m.in_width:
        raise T.ShapeError(f"MLP expects [batch, {m.in_width}], got {x.shape}")
    return m.forward_from(x, 0)


def zero_grad(params):
    for p in params:
        p.grad = None


def global_grad_norm(params):
    return math.sqrt(sum(float(np.sum(p.grad * p.grad)) for p in params if p.grad is not None))


def clip_global_norm(params, max_norm):
    """Rescale all gradients so their joint L2 norm is at most ``max_norm``.

    Returns the norm measured before clipping.
    """
    if not max_norm > 0:
        raise ValueError("max_norm must be positive")
    norm = global_grad_norm(params)
    if norm > max_norm:
        c = max_norm / norm
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * c
    return norm


def cosine_lr(base_lr, epoch, total_epochs):
    """Cosine annealing from ``base_lr`` towards zero over ``total_epochs``."""
    if total_epochs <= 1:
        return base_lr
    return 0.5 * base_lr * (1.0 + math.cos(math.pi * min(epoch, total_epochs - 1) / (total_epochs - 1)))


class Adam:
    def __init__(self, params, lr=5e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        adam_step(self, self.params)

    def state_arrays(self):
        out = {"adam.step": np.array([float(self.step_count)])}
        for k, (m, v) in enumerate(zip(self.m, self.v)):
            out[f"adam.m.{k}"] = m
            out[f"adam.v.{k}"] = v
        return out


def adam_step(state, params=None):
    """One bias-corrected Adam update; gradients are cleared afterwards."""
    params = state.params if params is None else list(params)
    if len(params) != len(state.m):
        raise ValueError("parameter list does not match optimizer state")
    for k, p in enumerate(params):
        if p.grad is None:
            raise ValueError(f"parameter {k} has no gradient")
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for k, p in enumerate(params):
        g = p.grad
        state.m[k] = b1 * state.m[k] + (1.0 - b1) * g
        state.v[k] = b2 * state.v[k] + (1.0 - b2) * (g * g)
        if state.lr != 0.0:
            mhat = state.m[k] / c1
            vhat = state.v[k] / c2
            p.data = p.data - state.lr * mhat / (np.sqrt(vhat) + state.eps)
        p.grad = None
