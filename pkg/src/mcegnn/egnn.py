"""Multi-channel E(n)-equivariant graph network and its single-channel twin.

Every node carries scalar features ``h`` and a ``3 x m`` matrix ``X`` of
vector channels, column 0 being the physical position. A layer

* takes per-edge differences ``X_ij = X_i - X_j``,
* builds a message from ``h_i, h_j``, the squared norm of every channel of
  ``X_ij`` and the edge attributes,
* moves the channels by ``C * sum_j X_ij @ Phi_x(m_ij)``, where ``Phi_x``
  returns an ``m_in x m_out`` mixing matrix per edge,
* updates ``h`` residually from the summed messages.

The first layer lifts 1 -> m channels and the last projects m -> 1.
"""
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import rng
from . import tensor as T
from .nn import MLP

READOUTS = ("positions", "invariant_scalar")
COORD_AGGS = ("mean", "sum")
LIFTS = ("broadcast", "position")


@dataclass
class MCEGNNConfig:
    n_layers: int = 4
    hidden: int = 64
    message: int | None = None
    channels: int = 1
    in_node: int = 1
    edge_dim: int = 0
    velocity_mode: bool = False
    residual_positions: bool = True
    coord_agg: str = "mean"
    lift_residual: str = "broadcast"
    readout: str = "positions"
    out_dim: int = 1
    clip_norm: float | None = None
    coord_init_gain: float = 1e-3  # keeps early coordinate updates small
    velocity_init_gain: float = 1.0

    def __post_init__(self):
        if self.message is None:
            self.message = self.hidden
        if self.n_layers < 1 or self.channels < 1 or self.hidden < 1 or self.message < 1:
            raise ValueError("n_layers, channels and widths must be >= 1")
        if self.in_node < 1 or self.edge_dim < 0 or self.out_dim < 1:
            raise ValueError("in_node and out_dim must be >= 1, edge_dim >= 0")
        if self.readout not in READOUTS:
            raise ValueError(f"readout must be one of {READOUTS}")
        if self.coord_agg not in COORD_AGGS:
            raise ValueError(f"coord_agg must be one of {COORD_AGGS}")
        if self.lift_residual not in LIFTS:
            raise ValueError(f"lift_residual must be one of {LIFTS}")
        if self.clip_norm is not None and not self.clip_norm > 0:
            raise ValueError("clip_norm must be positive")
        if not self.coord_init_gain > 0:
            raise ValueError("coord_init_gain must be positive")
        if not self.velocity_init_gain > 0:
            raise ValueError("velocity_init_gain must be positive")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


def channel_schedule(n_layers, m):
    """(m_in, m_out) per layer: 1 -> m -> ... -> m -> 1."""
    if n_layers == 1:
        return [(1, 1)]
    return [(1, m)] + [(m, m)] * (n_layers - 2) + [(m, 1)]


# graphs ----------------------------------------------------------------------


def fully_connected_edges(n, offset=0):
    """All ordered pairs (i, j), i != j, sorted by (i, j)."""
    i, j = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
    keep = i != j
    return i[keep].astype(np.int64) + offset, j[keep].astype(np.int64) + offset


@dataclass
class GraphBatch:
    """Disjoint union of graphs.

    ``dst[e], src[e]`` is edge ``(i, j)``; its message flows into ``i``.
    Edges are stored sorted by ``(dst, src)`` so aggregation order is fixed.
    """

    x: np.ndarray
    h: np.ndarray
    dst: np.ndarray
    src: np.ndarray
    v: np.ndarray | None = None
    edge_attr: np.ndarray | None = None
    graph: np.ndarray | None = None
    n_graphs: int = field(default=1)

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        if self.x.ndim == 3:
            if self.x.shape[2] != 1:
                raise ValueError("input coordinates must carry a single channel")
            self.x = self.x[:, :, 0]
        if self.x.ndim != 2 or self.x.shape[1] != 3:
            raise ValueError(f"coordinates must be [n, 3], got {self.x.shape}")
        n = self.x.shape[0]
        self.h = np.asarray(self.h, dtype=np.float64).reshape(n, -1)
        if self.v is not None:
            self.v = np.asarray(self.v, dtype=np.float64)
            if self.v.shape != (n, 3):
                raise ValueError(f"velocities must be [{n}, 3], got {self.v.shape}")
        dst = np.asarray(self.dst, dtype=np.int64)
        src = np.asarray(self.src, dtype=np.int64)
        if dst.shape != src.shape or dst.ndim != 1:
            raise ValueError("dst and src must be 1-d arrays of equal length")
        if len(dst) and (min(dst.min(), src.min()) < 0 or max(dst.max(), src.max()) >= n):
            raise ValueError("edge endpoint out of range")
        if np.any(dst == src):
            raise ValueError("self loops are not allowed")
        if self.graph is None:
            self.graph = np.zeros(n, dtype=np.int64)
        self.graph = np.asarray(self.graph, dtype=np.int64)
        if self.graph.shape != (n,):
            raise ValueError("graph membership must have one entry per node")
        if n:
            self.n_graphs = max(int(self.n_graphs), int(self.graph.max()) + 1)
        if np.any(self.graph[dst] != self.graph[src]):
            raise ValueError("edges may not connect different graphs")
        order = np.lexsort((src, dst))
        self.dst = dst[order]
        self.src = src[order]
        if self.edge_attr is not None:
            a = np.asarray(self.edge_attr, dtype=np.float64).reshape(len(dst), -1)
            self.edge_attr = a[order]

    @property
    def n_nodes(self):
        return self.x.shape[0]

    @property
    def n_edges(self):
        return len(self.dst)

    @property
    def edge_dim(self):
        return 0 if self.edge_attr is None else self.edge_attr.shape[1]

    def degree(self):
        return np.bincount(self.dst, minlength=self.n_nodes)

    def transformed(self, rot=None, shift=None):
        """Copy with coordinates mapped to ``x @ rot.T + shift`` and velocities rotated."""
        x, v = self.x, self.v
        if rot is not None:
            x = x @ rot.T
            v = None if v is None else v @ rot.T
        if shift is not None:
            x = x + shift
        return GraphBatch(x, self.h, self.dst, self.src, v, self.edge_attr, self.graph, self.n_graphs)

    def permuted(self, perm):
        """Relabel nodes so that new node ``k`` is old node ``perm[k]``."""
        perm = np.asarray(perm, dtype=np.int64)
        inv = np.empty_like(perm)
        inv[perm] = np.arange(len(perm))
        return GraphBatch(
            self.x[perm],
            self.h[perm],
            inv[self.dst],
            inv[self.src],
            None if self.v is None else self.v[perm],
            self.edge_attr,
            self.graph[perm],
            self.n_graphs,
        )


def collate(graphs):
    """Stack a list of GraphBatch objects into one disjoint batch."""
    xs, hs, vs, dsts, srcs, attrs, gids = [], [], [], [], [], [], []
    offset = 0
    gbase = 0
    for g in graphs:
        xs.append(g.x)
        hs.append(g.h)
        vs.append(g.v)
        dsts.append(g.dst + offset)
        srcs.append(g.src + offset)
        attrs.append(g.edge_attr)
        gids.append(g.graph + gbase)
        offset += g.n_nodes
        gbase += g.n_graphs
    v = None if any(x is None for x in vs) else np.concatenate(vs)
    a = None if any(x is None for x in attrs) else np.concatenate(attrs)
    return GraphBatch(
        np.concatenate(xs), np.concatenate(hs), np.concatenate(dsts), np.concatenate(srcs), v, a, np.concatenate(gids), gbase
    )


# layer operations ----------------------------------------------------------


def edge_differences(X, batch):
    return T.edge_differences(X, batch.dst, batch.src)


def edge_message(layer, h, diffs, a, batch):
    """phi_e(h_i, h_j, ||X_ij||_c^2, a_ij) for every edge."""
    if layer.edge_dim > 0 and a is None:
        raise ValueError("this layer expects edge attributes")
    rest = T.channel_sqnorms(diffs)
    if layer.edge_dim > 0:
        rest = T.concat([rest, a], axis=1)
    mlp = layer.phi_e
    x = T.silu(T.edge_linear(h, batch.dst, batch.src, rest, mlp.weights[0], mlp.biases[0]))
    return mlp.forward_from(x, 1)


def _mixing(layer, messages):
    phi = layer.phi_x(messages)
    return T.reshape(phi, (phi.shape[0], layer.m_in, layer.m_out))


def _aggregate_vectors(layer, diffs, messages, coef, batch):
    trans = T.channel_mix(diffs, _mixing(layer, messages))
    agg = T.segment_sum(trans, batch.dst, batch.n_nodes)
    return T.scale_rows(agg, coef)


def position_residual(X, m_in, m_out, lift="broadcast"):
    """The part of ``X`` carried into an ``m_out``-channel layer output."""
    if m_in == m_out:
        return X
    if m_in == 1:
        if lift == "broadcast":
            return T.broadcast_channels(X, m_out)
        n = X.shape[0]
        return T.concat([X, T.zeros((n, 3, m_out - 1))], axis=2)
    if m_out == 1:
        return T.take_slice(X, 2, 0, 1)
    raise ValueError(f"no residual rule for {m_in} -> {m_out} channels")


def coord_update(layer, X, diffs, messages, coef, batch, residual=True, lift="broadcast"):
    update = _aggregate_vectors(layer, diffs, messages, coef, batch)
    if not residual:
        return update
    return T.add(position_residual(X, layer.m_in, layer.m_out, lift), update)


def node_update(layer, h, messages, batch):
    agg = T.segment_sum(messages, batch.dst, batch.n_nodes)
    return T.add(h, layer.phi_h(T.concat([h, agg], axis=1)))


def velocity_update(layer, v0, h, X, diffs, messages, coef, batch, residual=True, lift="broadcast"):
    """Returns ``(V, X_new)`` with ``V = v0 phi_v(h)^T + C sum_j X_ij Phi_x(m_ij)``."""
    if v0 is None:
        raise ValueError("velocity mode needs initial velocities")
    if layer.phi_v is None:
        raise ValueError("layer was built without a velocity MLP")
    V = T.add(T.outer(v0, layer.phi_v(h)), _aggregate_vectors(layer, diffs, messages, coef, batch))
    if not residual:
        return V, V
    return V, T.add(position_residual(X, layer.m_in, layer.m_out, lift), V)


# model ---------------------------------------------------------------------


class Layer:
    def __init__(self, cfg, m_in, m_out, seed, index):
        d_h, d = cfg.hidden, cfg.message
        self.m_in, self.m_out = m_in, m_out
        self.edge_dim = cfg.edge_dim

        def g(k):
            return rng.stream(seed, "init", index + 1, k)

        self.phi_e = MLP([2 * d_h + m_in + cfg.edge_dim, d, d], final_activation=True, seed=g(0))
        self.phi_x = MLP([d, d, m_in * m_out], seed=g(1), final_bias=False, final_gain=cfg.coord_init_gain)
        self.phi_h = MLP([d_h + d, d_h, d_h], seed=g(2))
        self.phi_v = MLP([d_h, d_h, m_out], seed=g(3), final_gain=cfg.velocity_init_gain) if cfg.velocity_mode else None

    def mlps(self):
        out = [("phi_e", self.phi_e), ("phi_x", self.phi_x), ("phi_h", self.phi_h)]
        if self.phi_v is not None:
            out.append(("phi_v", self.phi_v))
        return out


class _Base:
    def named_parameters(self):
        out = self.embedding.named_parameters("embedding.")
        for k, layer in enumerate(self.layers):
            for name, mlp in layer.mlps():
                out += mlp.named_parameters(f"layers.{k}.{name}.")
        if self.readout_mlp is not None:
            out += self.readout_mlp.named_parameters("readout.")
        return out

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def layout(self):
        return [(name, p.shape) for name, p in self.named_parameters()]

    def state_dict(self):
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state):
        params = dict(self.named_parameters())
        missing = set(params) - set(state)
        extra = set(state) - set(params)
        if missing or extra:
            raise ValueError(f"checkpoint mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for name, p in params.items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != p.shape:
                raise ValueError(f"{name}: checkpoint shape {arr.shape} != {p.shape}")
            p.data = arr.copy()

    def __call__(self, batch):
        return self.forward(batch)

    def _check(self, batch):
        cfg = self.cfg
        if batch.h.shape[1] != cfg.in_node:
            raise ValueError(f"model expects {cfg.in_node} node features, batch has {batch.h.shape[1]}")
        if batch.edge_dim != cfg.edge_dim:
            raise ValueError(f"model expects {cfg.edge_dim} edge attributes, batch has {batch.edge_dim}")
        if cfg.velocity_mode and batch.v is None:
            raise ValueError("velocity mode needs batch velocities")

    def _coef(self, batch):
        if self.cfg.coord_agg == "sum":
            return np.ones(batch.n_nodes)
        return 1.0 / np.maximum(batch.degree(), 1)

    def _readout(self, h, batch):
        pooled = T.segment_sum(h, batch.graph, batch.n_graphs)
        out = self.readout_mlp(pooled)
        if self.cfg.out_dim == 1:
            return T.reshape(out, (batch.n_graphs,))
        return out

    def _build(self, cfg, schedule, seed):
        self.cfg = cfg
        self.seed = int(seed)
        self.schedule = schedule
        self.embedding = MLP([cfg.in_node, cfg.hidden], seed=rng.stream(seed, "init", 0, 0))
        self.layers = [Layer(cfg, mi, mo, seed, k) for k, (mi, mo) in enumerate(schedule)]
        self.readout_mlp = None
        if cfg.readout == "invariant_scalar":
            self.readout_mlp = MLP([cfg.hidden, cfg.hidden, cfg.out_dim], seed=rng.stream(seed, "init", 0, 1))


class MCEGNN(_Base):
    """Multi-channel model; ``cfg.channels`` vector channels inside."""

    def __init__(self, cfg, seed=0):
        self._build(cfg, channel_schedule(cfg.n_layers, cfg.channels), seed)

    def forward(self, batch, return_all=False):
        self._check(batch)
        cfg = self.cfg
        coef = self._coef(batch)
        h = self.embedding(T.Tensor(batch.h))
        X = T.Tensor(batch.x[:, :, None])
        v0 = T.Tensor(batch.v) if cfg.velocity_mode else None
        a = T.Tensor(batch.edge_attr) if batch.edge_attr is not None else None
        trace = {"X": [], "V": []}
        for layer in self.layers:
            diffs = edge_differences(X, batch)
            msg = edge_message(layer, h, diffs, a, batch)
            if cfg.velocity_mode:
                V, X_new = velocity_update(
                    layer, v0, h, X, diffs, msg, coef, batch, cfg.residual_positions, cfg.lift_residual
                )
                trace["V"].append(V)
            else:
                X_new = coord_update(layer, X, diffs, msg, coef, batch, cfg.residual_positions, cfg.lift_residual)
            h = node_update(layer, h, msg, batch)
            X = X_new
            trace["X"].append(X)
        if cfg.readout == "invariant_scalar":
            out = self._readout(h, batch)
        else:
            out = T.reshape(X, (batch.n_nodes, 3))
        if return_all:
            return {"out": out, "h": h, **trace}
        return out


class EGNN(_Base):
    """Single-vector network written directly on ``[n, 3]`` positions.

    Shares the parameter layout (names, shapes, init streams) of an
    ``MCEGNN`` with one channel, which makes it a parity reference.
    """

    def __init__(self, cfg, seed=0):
        if cfg.channels != 1:
            raise ValueError("EGNN is single-channel; use MCEGNN for channels > 1")
        self._build(cfg, [(1, 1)] * cfg.n_layers, seed)

    @staticmethod
    def _tile3(col):
        return T.concat([col, col, col], axis=1)

    def forward(self, batch, return_all=False):
        self._check(batch)
        cfg = self.cfg
        coef = self._coef(batch)
        h = self.embedding(T.Tensor(batch.h))
        x = T.Tensor(batch.x)
        v0 = T.Tensor(batch.v) if cfg.velocity_mode else None
        a = T.Tensor(batch.edge_attr) if batch.edge_attr is not None else None
        for layer in self.layers:
            d = T.edge_differences(x, batch.dst, batch.src)
            sq = T.reshape(T.sum(T.mul(d, d), axis=1), (batch.n_edges, 1))
            parts = [T.gather_rows(h, batch.dst), T.gather_rows(h, batch.src), sq]
            if a is not None:
                parts.append(a)
            m = layer.phi_e(T.concat(parts, axis=1))
            agg = T.segment_sum(T.mul(d, self._tile3(layer.phi_x(m))), batch.dst, batch.n_nodes)
            upd = T.scale_rows(agg, coef)
            if cfg.velocity_mode:
                upd = T.add(T.mul(v0, self._tile3(layer.phi_v(h))), upd)
            x = T.add(x, upd) if cfg.residual_positions else upd
            h = T.add(h, layer.phi_h(T.concat([h, T.segment_sum(m, batch.dst, batch.n_nodes)], axis=1)))
        if cfg.readout == "invariant_scalar":
            out = self._readout(h, batch)
        else:
            out = x
        if return_all:
            return {"out": out, "h": h}
        return out


def build_model(cfg, seed=0):
    return MCEGNN(cfg, seed)


def model_forward(model, batch):
    return model.forward(batch)


def param_count(model):
    return int(sum(p.size for p in model.parameters()))


def param_count_formula(cfg):
    """Closed-form parameter count for ``MCEGNN(cfg)``."""
    d_h, d, de = cfg.hidden, cfg.message, cfg.edge_dim
    total = cfg.in_node * d_h + d_h
    for m_in, m_out in channel_schedule(cfg.n_layers, cfg.channels):
        total += (2 * d_h + m_in + de) * d + d + d * d + d  # phi_e
        total += d * d + d + d * m_in * m_out  # phi_x, no final bias
        total += (d_h + d) * d_h + d_h + d_h * d_h + d_h  # phi_h
        if cfg.velocity_mode:
            total += d_h * d_h + d_h + d_h * m_out + m_out  # phi_v
    if cfg.readout == "invariant_scalar":
        total += d_h * d_h + d_h + d_h * cfg.out_dim + cfg.out_dim
    return total
