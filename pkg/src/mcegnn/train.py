"""Losses, the training loop, evaluation and the forward-time benchmark."""
import math
import time
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import nn, rng
from . import tensor as T
from .egnn import MCEGNN, param_count

LOSSES = ("mse", "normalized_mse")
SCHEDULES = ("constant", "cosine")
NORMALIZED_EPS = 1e-8


def _const(x):
    return x if isinstance(x, T.Tensor) else T.Tensor(x)


def mse_loss(pred, target):
    """Mean over all entries of the squared difference."""
    target = _const(target)
    if pred.shape != target.shape:
        raise T.ShapeError(f"prediction {pred.shape} vs target {target.shape}")
    d = T.sub(pred, target)
    return T.mean(T.mul(d, d))


def normalized_mse_loss(pred, target, initial, eps=NORMALIZED_EPS):
    """Mean over bodies of ``|pred - target|^2 / (|target - initial|^2 + eps)``."""
    if not eps > 0:
        raise ValueError("eps must be positive")
    target, initial = np.asarray(_const(target).data), np.asarray(_const(initial).data)
    if pred.shape != target.shape or target.shape != initial.shape:
        raise T.ShapeError("pred, target and initial must share a shape")
    disp = target - initial
    weight = 1.0 / (np.sum(disp * disp, axis=1) + eps)
    d = T.sub(pred, T.Tensor(target))
    per_body = T.sum(T.mul(d, d), axis=1)
    return T.mean(T.scale_rows(per_body, weight))


def loss_fn(kind, eps=NORMALIZED_EPS):
    if kind == "mse":
        return lambda pred, ds, idx: mse_loss(pred, ds.targets(idx))
    if kind == "normalized_mse":
        return lambda pred, ds, idx: normalized_mse_loss(pred, ds.targets(idx), ds.inputs(idx), eps)
    raise ValueError(f"unknown loss {kind!r}")


@dataclass
class TrainConfig:
    epochs: int = 1000
    batch_size: int = 100
    lr: float = 5e-4
    schedule: str = "constant"
    patience: int = 50
    clip_norm: float | None = None
    seed: int = 0
    loss: str = "mse"
    loss_eps: float = NORMALIZED_EPS
    eval_batch_size: int = 500

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.eval_batch_size < 1:
            raise ValueError("epochs and batch sizes must be positive")
        if self.lr < 0:
            raise ValueError("learning rate must be non-negative")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.schedule not in SCHEDULES:
            raise ValueError(f"schedule must be one of {SCHEDULES}")
        if self.loss not in LOSSES:
            raise ValueError(f"loss must be one of {LOSSES}")
        if self.clip_norm is not None and not self.clip_norm > 0:
            raise ValueError("clip_norm must be positive")
        if not self.loss_eps > 0:
            raise ValueError("loss_eps must be positive")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class RunReport:
    seed: int
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    epoch_seconds: list = field(default_factory=list)
    best_epoch: int = -1
    best_val: float = math.inf
    test_metric: float | None = None
    grad_norms: list = field(default_factory=list)  # (pre-clip, post-clip) per step
    stopped_early: bool = False
    best_state: dict | None = field(default=None, repr=False)

    def to_dict(self):
        d = asdict(self)
        d.pop("best_state")
        return d


def evaluate(model, dataset, split, loss="mse", batch_size=500, eps=NORMALIZED_EPS):
    """Mean loss over a split, without recording a tape.

    Batch-size independent: per-batch means are re-weighted by their counts.
    """
    idx = dataset.indices(split)
    if len(idx) == 0:
        raise ValueError(f"split {split!r} is empty")
    fn = loss_fn(loss, eps)
    total = 0.0
    with T.no_grad():
        for lo in range(0, len(idx), batch_size):
            part = idx[lo : lo + batch_size]
            total += fn(model(dataset.graphs(part)), dataset, part).item() * len(part)
    return total / len(idx)


def fit(model, dataset, cfg, log=None):
    """Adam training with per-epoch validation and early stopping.

    The model is left holding the parameters of the best validation epoch.
    """
    train_idx = dataset.indices("train")
    if len(train_idx) == 0:
        raise ValueError("training split is empty")
    has_val = dataset.count("val") > 0
    params = model.parameters()
    opt = nn.Adam(params, lr=cfg.lr)
    fn = loss_fn(cfg.loss, cfg.loss_eps)
    report = RunReport(seed=cfg.seed)
    best_state = model.state_dict()
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        if cfg.schedule == "cosine":
            opt.lr = nn.cosine_lr(cfg.lr, epoch, cfg.epochs)
        order = train_idx[rng.stream(cfg.seed, "shuffle", epoch).permutation(len(train_idx))]
        running = 0.0
        for lo in range(0, len(order), cfg.batch_size):
            part = order[lo : lo + cfg.batch_size]
            T.current_tape().clear()
            loss = fn(model(dataset.graphs(part)), dataset, part)
            T.backward(loss, params)
            if cfg.clip_norm is not None:
                pre = nn.clip_global_norm(params, cfg.clip_norm)
                report.grad_norms.append((pre, nn.global_grad_norm(params)))
            opt.step()
            running += loss.item() * len(part)
        report.train_loss.append(running / len(order))
        val = evaluate(model, dataset, "val", cfg.loss, cfg.eval_batch_size, cfg.loss_eps) if has_val else report.train_loss[-1]
        report.val_loss.append(val)
        report.epoch_seconds.append(time.perf_counter() - t0)
        if val < report.best_val:
            report.best_val = val
            report.best_epoch = epoch
            best_state = model.state_dict()
        if log is not None:
            log(epoch, report)
        if not math.isfinite(report.train_loss[-1]):
            report.stopped_early = True
            break
        if epoch - report.best_epoch >= cfg.patience:
            report.stopped_early = True
            break
    model.load_state_dict(best_state)
    report.best_state = best_state
    if dataset.count("test"):
        report.test_metric = evaluate(model, dataset, "test", cfg.loss, cfg.eval_batch_size, cfg.loss_eps)
    return report


def bench_forward(model, batch, repeats=10, warmup=3, groups=5):
    """Wall-clock forward timing: median of group means after warmup runs."""
    if repeats < 3:
        raise ValueError("need at least 3 timed repeats")
    with T.no_grad():
        for _ in range(warmup):
            model(batch)
        times = []
        for _ in range(repeats):
            t0 = time.perf_counter()
            model(batch)
            times.append(time.perf_counter() - t0)
    times = np.asarray(times)
    means = [g.mean() for g in np.array_split(times, min(groups, len(times)))]
    return {"mean": float(np.median(means)), "std": float(times.std()), "params": param_count(model)}


def bench_table(cfg, batch, channels=(1, 2, 5, 10, 25), repeats=10, warmup=3, seed=0):
    """Forward time and parameter count per channel count, same config otherwise."""
    rows = []
    for m in channels:
        d = cfg.to_dict()
        d["channels"] = int(m)
        model = MCEGNN(type(cfg).from_dict(d), seed=seed)
        r = bench_forward(model, batch, repeats, warmup)
        rows.append({"m": int(m), "forward_seconds_mean": r["mean"], "forward_seconds_std": r["std"], "params": r["params"]})
    return rows
