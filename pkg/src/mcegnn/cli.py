"""Command line entry point: gen-data, train, eval, equicheck, bench."""
import os

for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

import argparse  # noqa: E402
import copy  # noqa: E402
import csv  # noqa: E402
import json  # noqa: E402
import sys  # noqa: E402
from concurrent.futures import ProcessPoolExecutor  # noqa: E402

import numpy as np  # noqa: E402

from . import data, equicheck, train  # noqa: E402
from ._alloc import tune_allocator  # noqa: E402
from .egnn import EGNN, MCEGNN, GraphBatch, MCEGNNConfig, collate, fully_connected_edges, param_count  # noqa: E402

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME, EXIT_PROPERTY = 0, 1, 2, 3


class UsageError(Exception):
    pass


class RuntimeFailure(Exception):
    pass


# configs -----------------------------------------------------------------------

DATA_DEFAULTS = {
    "charged": {
        "task": "charged",
        "train": 500,
        "val": 100,
        "test": 200,
        "particles": 5,
        "horizon_steps": 1000,
        "dt": 0.001,
        "softening": 0.1,
        "record_every": 100,
        "seed": 1,
    },
    "orbital": {
        "task": "orbital",
        "systems": 100,
        "planets": 3,
        "moons": 2,
        "horizon_steps": 300,
        "stride_steps": 300,
        "n_steps": 2700,
        "dt": 0.001,
        "record_every": 50,
        "seed": 1,
        "splits": [0.6, 0.2, 0.2],
        "loss_eps": 1e-6,
    },
}

PRESETS = {
    "nbody-small": {
        "data": DATA_DEFAULTS["charged"],
        "model": {"n_layers": 4, "hidden": 32, "velocity_mode": True},
        "train": {"epochs": 1000, "batch_size": 100, "lr": 5e-4, "patience": 50},
        "channels": [1, 2],
        "seeds": [0, 1, 2, 3, 4],
    },
    "orbital-small": {
        "data": DATA_DEFAULTS["orbital"],
        "model": {"n_layers": 5, "hidden": 64, "velocity_mode": True, "velocity_init_gain": 1e-3},
        "train": {"epochs": 80, "batch_size": 20, "lr": 1e-3, "schedule": "cosine", "clip_norm": 1.0,
                  "patience": 80},
        "channels": [1, 2, 3],
        "seeds": [0, 1, 2, 3, 4],
    },
}

EXPERIMENT_KEYS = {"data", "model", "train", "channels", "seeds"}


def validate_experiment(cfg):
    """Check an experiment document; raises UsageError on unknown or bad keys."""
    if not isinstance(cfg, dict):
        raise UsageError("experiment config must be a JSON object")
    unknown = set(cfg) - EXPERIMENT_KEYS
    if unknown:
        raise UsageError(f"unknown config keys: {sorted(unknown)}")
    try:
        MCEGNNConfig.from_dict(cfg.get("model", {}))
        train.TrainConfig.from_dict(cfg.get("train", {}))
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from None
    d = cfg.get("data", {})
    if d:
        task = d.get("task")
        if task not in DATA_DEFAULTS:
            raise UsageError(f"data.task must be one of {sorted(DATA_DEFAULTS)}")
        extra = set(d) - set(DATA_DEFAULTS[task]) - {"path"}
        if extra:
            raise UsageError(f"unknown data keys: {sorted(extra)}")
    for key in ("channels", "seeds"):
        vals = cfg.get(key, [])
        if not isinstance(vals, list) or not all(isinstance(v, int) and v >= 0 for v in vals):
            raise UsageError(f"{key} must be a list of non-negative integers")
    if any(m < 1 for m in cfg.get("channels", [])):
        raise UsageError("channel counts must be >= 1")
    return cfg


def _write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _read_json(path):
    try:
        with open(path) as fh:
            return json.load(fh)
    except FileNotFoundError:
        raise UsageError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path}: invalid JSON ({exc})") from None


# gen-data ------------------------------------------------------------------------


def build_dataset(desc):
    """Dataset from a data descriptor (see DATA_DEFAULTS)."""
    s = dict(DATA_DEFAULTS[desc["task"]], **desc)
    if s["task"] == "charged":
        return data.charged_dataset(
            s["train"], s["val"], s["test"], s["particles"], s["horizon_steps"], s["dt"], s["softening"],
            s["seed"], s["record_every"],
        )
    ocfg = data.OrbitalConfig(n_planets=s["planets"], moons_per_planet=s["moons"])
    return data.orbital_dataset(
        s["systems"], ocfg, s["horizon_steps"], s["stride_steps"], s["n_steps"], s["dt"], s["seed"], s["record_every"],
        tuple(s["splits"]), s["loss_eps"],
    )


def dataset_summary(ds):
    return {
        "samples": {k: ds.count(k) for k in data.SPLITS},
        "bodies": ds.n_bodies,
        "node_features": "charge" if ds.meta.get("task") == "charged" else "log_mass",
        "edge_dim": 0 if ds.edge_attr is None else int(ds.edge_attr.shape[-1]),
        "meta": ds.meta,
    }


def cmd_gen_data(args):
    desc = dict(DATA_DEFAULTS[args.task])
    for key in desc:
        val = getattr(args, key, None)
        if val is not None and key != "task":
            desc[key] = val
    if args.task == "charged" and args.systems is not None:
        # 5/8 train, 1/8 val, 2/8 test
        n = args.systems
        desc["val"] = n // 8
        desc["test"] = n // 4
        desc["train"] = n - desc["val"] - desc["test"]
    try:
        ds = build_dataset(desc)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    ds.save(args.out)
    summary = dict(dataset_summary(ds), descriptor=desc)
    _write_json(args.out + ".json", summary)
    print(json.dumps(summary["samples"]))
    return EXIT_OK


# train ---------------------------------------------------------------------------


def save_checkpoint(path, model, extra=None):
    meta = {"kind": "checkpoint", "model": model.cfg.to_dict(), "seed": model.seed, **(extra or {})}
    data.save_container(path, model.state_dict(), meta)


def load_checkpoint(path):
    try:
        arrays, meta = data.load_container(path, with_meta=True)
    except FileNotFoundError:
        raise RuntimeFailure(f"checkpoint not found: {path}") from None
    except data.ContainerError as exc:
        raise RuntimeFailure(f"{path}: {exc}") from None
    if meta.get("kind") != "checkpoint":
        raise RuntimeFailure(f"{path} is not a checkpoint")
    model = MCEGNN(MCEGNNConfig.from_dict(meta["model"]), seed=meta.get("seed", 0))
    try:
        model.load_state_dict(arrays)
    except ValueError as exc:
        raise RuntimeFailure(str(exc)) from None
    return model, meta


def load_dataset(path):
    try:
        return data.TrajectoryDataset.load(path)
    except FileNotFoundError:
        raise RuntimeFailure(f"dataset not found: {path}") from None
    except data.ContainerError as exc:
        raise RuntimeFailure(f"{path}: {exc}") from None


def model_config_for(model_dict, ds, channels):
    d = dict(model_dict)
    d["channels"] = channels
    d["in_node"] = int(ds.node_features.shape[-1])
    d["edge_dim"] = 0 if ds.edge_attr is None else int(ds.edge_attr.shape[-1])
    return MCEGNNConfig.from_dict(d)


def run_one(job):
    """Train one (channels, seed) pair; returns a summary row. Picklable for --jobs."""
    exp, ds_path, out_dir, m, seed, verbose = job
    tune_allocator()
    ds = load_dataset(ds_path)
    cfg = model_config_for(exp.get("model", {}), ds, m)
    tdict = dict(exp.get("train", {}), seed=seed)
    tdict.setdefault("loss", ds.meta.get("loss", "mse"))
    if "loss_eps" in ds.meta:
        tdict.setdefault("loss_eps", ds.meta["loss_eps"])
    tcfg = train.TrainConfig.from_dict(tdict)
    if cfg.clip_norm is not None and tcfg.clip_norm is None:
        tcfg.clip_norm = cfg.clip_norm
    model = MCEGNN(cfg, seed=seed)
    run_dir = os.path.join(out_dir, f"m{m}-seed{seed}")
    os.makedirs(run_dir, exist_ok=True)
    log = None
    if verbose:
        def log(epoch, rep):
            if epoch % verbose == 0:
                print(f"m={m} seed={seed} epoch {epoch} train {rep.train_loss[-1]:.6g} val {rep.val_loss[-1]:.6g}",
                      file=sys.stderr, flush=True)
    report = train.fit(model, ds, tcfg, log=log)
    _write_json(os.path.join(run_dir, "config.json"), {"model": cfg.to_dict(), "train": tcfg.to_dict()})
    _write_json(os.path.join(run_dir, "report.json"), dict(report.to_dict(), channels=m, params=param_count(model)))
    with open(os.path.join(run_dir, "losses.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "train_loss", "val_loss", "epoch_seconds"])
        for k, row in enumerate(zip(report.train_loss, report.val_loss, report.epoch_seconds)):
            w.writerow([k, *(repr(float(v)) for v in row)])
    save_checkpoint(os.path.join(run_dir, "checkpoint.mcc"), model, {"train": tcfg.to_dict()})
    return {
        "channels": m,
        "seed": seed,
        "test_metric": report.test_metric,
        "best_epoch": report.best_epoch,
        "best_val": report.best_val,
        "epochs_run": len(report.train_loss),
        "params": param_count(model),
        "seconds": float(sum(report.epoch_seconds)),
        "run_dir": run_dir,
    }


def _merge(base, override):
    out = copy.deepcopy(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = dict(out[k], **v)
        else:
            out[k] = v
    return out


def resolve_train_config(args):
    exp = copy.deepcopy(PRESETS[args.preset]) if args.preset else {"model": {}, "train": {}}
    if args.config:
        exp = _merge(exp, validate_experiment(_read_json(args.config)))
    model, tr = exp.setdefault("model", {}), exp.setdefault("train", {})
    for flag, key in (("layers", "n_layers"), ("hidden", "hidden"), ("velocity", "velocity_mode"),
                      ("position_residual", "residual_positions"), ("lift", "lift_residual"),
                      ("coord_agg", "coord_agg")):
        val = getattr(args, flag)
        if val is not None:
            model[key] = val
    for flag in ("epochs", "batch_size", "lr", "patience", "clip_norm", "schedule", "loss"):
        val = getattr(args, flag)
        if val is not None:
            tr[flag] = val
    if args.channels:
        exp["channels"] = list(args.channels)
    if args.seeds:
        exp["seeds"] = list(args.seeds)
    exp.setdefault("channels", [1])
    exp.setdefault("seeds", [0])
    exp.pop("data", None)
    return validate_experiment(exp)


def cmd_train(args):
    exp = resolve_train_config(args)
    ds = load_dataset(args.data)
    exp["data"] = {"path": os.path.abspath(args.data), "task": ds.meta.get("task")}
    os.makedirs(args.out, exist_ok=True)
    _write_json(os.path.join(args.out, "config.json"), exp)
    jobs = [(exp, args.data, args.out, m, s, args.log_every) for m in exp["channels"] for s in exp["seeds"]]
    if args.jobs > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            rows = list(pool.map(run_one, jobs))
    else:
        rows = [run_one(j) for j in jobs]
    summary = {"runs": rows, "median_test_metric": {}}
    for m in exp["channels"]:
        vals = [r["test_metric"] for r in rows if r["channels"] == m and r["test_metric"] is not None]
        if vals:
            summary["median_test_metric"][str(m)] = float(np.median(vals))
    _write_json(os.path.join(args.out, "summary.json"), summary)
    print(json.dumps(summary["median_test_metric"]))
    return EXIT_OK


# eval ----------------------------------------------------------------------------


def cmd_eval(args):
    model, meta = load_checkpoint(args.checkpoint)
    ds = load_dataset(args.data)
    in_node = int(ds.node_features.shape[-1])
    edge_dim = 0 if ds.edge_attr is None else int(ds.edge_attr.shape[-1])
    if (in_node, edge_dim) != (model.cfg.in_node, model.cfg.edge_dim):
        raise RuntimeFailure(
            f"checkpoint expects {model.cfg.in_node} node / {model.cfg.edge_dim} edge features, "
            f"dataset has {in_node} / {edge_dim}"
        )
    if ds.count(args.split) == 0:
        raise RuntimeFailure(f"split {args.split!r} is empty")
    loss = args.loss or ds.meta.get("loss", "mse")
    value = train.evaluate(model, ds, args.split, loss, eps=ds.meta.get("loss_eps", train.NORMALIZED_EPS))
    result = {"metric": loss, "split": args.split, "value": value, "samples": ds.count(args.split)}
    if args.out:
        _write_json(args.out, result)
    print(json.dumps(result))
    return EXIT_OK


# equicheck -----------------------------------------------------------------------


def random_batch(seed, n_graphs=3, n_nodes=5, in_node=1, edge_dim=0, velocities=True):
    """Unit-scale random graphs used by the property suite."""
    g = np.random.default_rng(seed)
    graphs = []
    for _ in range(n_graphs):
        dst, src = fully_connected_edges(n_nodes)
        graphs.append(GraphBatch(
            g.standard_normal((n_nodes, 3)),
            g.standard_normal((n_nodes, in_node)),
            dst,
            src,
            g.standard_normal((n_nodes, 3)) if velocities else None,
            g.standard_normal((len(dst), edge_dim)) if edge_dim else None,
        ))
    return collate(graphs)


def property_suite(model, trials=20, tol=1e-9, seed=0, grad_tol=1e-4):
    cfg = model.cfg
    batch = random_batch(seed, in_node=cfg.in_node, edge_dim=cfg.edge_dim, velocities=cfg.velocity_mode)
    reports = equicheck.check_all(model, batch, trials, tol, seed)
    reports.append(equicheck.mutation_check(cfg, batch, trials, tol, seed))
    reports.append(equicheck.check_gradients(model, batch, tol_rel=grad_tol, seed=seed))
    if cfg.channels == 1 and cfg.readout == "positions":
        ref = EGNN(cfg, model.seed)
        ref.load_state_dict(model.state_dict())
        reports.append(equicheck.check_parity(model, ref, [batch], tol=1e-12))
    return reports


def cmd_equicheck(args):
    if args.checkpoint:
        model, _ = load_checkpoint(args.checkpoint)
    else:
        d = _read_json(args.config).get("model", {}) if args.config else {}
        for flag, key in (("layers", "n_layers"), ("hidden", "hidden"), ("velocity", "velocity_mode"),
                          ("position_residual", "residual_positions"), ("lift", "lift_residual")):
            val = getattr(args, flag)
            if val is not None:
                d[key] = val
        if args.channels:
            d["channels"] = args.channels[0]
        try:
            model = MCEGNN(MCEGNNConfig.from_dict(d), seed=args.seed)
        except (TypeError, ValueError) as exc:
            raise UsageError(str(exc)) from None
    reports = property_suite(model, args.trials, args.tol, args.seed)
    text = equicheck.reports_to_json(reports, args.out)
    print(text)
    return EXIT_OK if all(r.passed for r in reports) else EXIT_PROPERTY


# bench ---------------------------------------------------------------------------

BENCH_MODEL = {"n_layers": 4, "hidden": 64, "in_node": 1, "edge_dim": 2, "velocity_mode": True}
BENCH_COLUMNS = ("m", "forward_seconds_mean", "forward_seconds_std", "params")


def cmd_bench(args):
    cfg = MCEGNNConfig.from_dict(BENCH_MODEL)
    batch = random_batch(args.seed, n_graphs=args.batch_size, n_nodes=args.nodes, edge_dim=cfg.edge_dim)
    rows = train.bench_table(cfg, batch, args.channels, args.repeats, args.warmup, args.seed)
    out = open(args.out, "w", newline="") if args.out else sys.stdout
    try:
        w = csv.DictWriter(out, fieldnames=BENCH_COLUMNS)
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    finally:
        if args.out:
            out.close()
    if args.out:
        _write_json(args.out + ".json", {"model": cfg.to_dict(), "batch_size": args.batch_size, "nodes": args.nodes,
                                         "repeats": args.repeats, "warmup": args.warmup, "channels": args.channels})
    return EXIT_OK


# parser --------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _bool_flag(p, name, dest, help_on, help_off):
    g = p.add_mutually_exclusive_group()
    g.add_argument(f"--{name}", dest=dest, action="store_true", default=None, help=help_on)
    g.add_argument(f"--no-{name}", dest=dest, action="store_false", help=help_off)


def _model_flags(p):
    p.add_argument("--layers", type=int, help="number of message-passing layers")
    p.add_argument("--hidden", type=int, help="width of node features and MLP hidden layers")
    p.add_argument("--channels", type=int, nargs="+", help="vector channel count(s)")
    _bool_flag(p, "velocity", "velocity", "use the initial-velocity layer variant", "plain coordinate update")
    _bool_flag(p, "position-residual", "position_residual", "keep the residual on positions (default)",
               "drop it; outputs become translation invariant")
    p.add_argument("--lift", choices=["broadcast", "position"], help="how the first layer lifts 1 -> m channels")


def build_parser():
    p = _Parser(prog="mcegnn", description="Multi-channel equivariant graph networks for particle dynamics.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="simulate trajectories and write a dataset file")
    g.add_argument("task", choices=sorted(DATA_DEFAULTS), help="simulator to run")
    g.add_argument("--out", required=True, help="output dataset path; a .json summary is written next to it")
    g.add_argument("--seed", type=int, help="data seed")
    g.add_argument("--systems", type=int, help="number of systems (charged: split 5/8, 1/8, 2/8)")
    g.add_argument("--train", type=int, help="charged: training systems")
    g.add_argument("--val", type=int, help="charged: validation systems")
    g.add_argument("--test", type=int, help="charged: test systems")
    g.add_argument("--particles", type=int, help="charged: particles per system")
    g.add_argument("--softening", type=float, help="charged: force softening length")
    g.add_argument("--planets", type=int, help="orbital: planets per system")
    g.add_argument("--moons", type=int, help="orbital: moons per planet")
    g.add_argument("--horizon-steps", type=int, help="integrator steps between input and target")
    g.add_argument("--stride-steps", type=int, help="orbital: steps between sample start times")
    g.add_argument("--n-steps", type=int, help="orbital: trajectory length in steps")
    g.add_argument("--dt", type=float, help="integrator step")
    g.add_argument("--record-every", type=int, help="keep every k-th integrator state")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="fit models for every (channels, seed) pair")
    t.add_argument("--data", required=True, help="dataset file from gen-data")
    t.add_argument("--out", required=True, help="run directory")
    t.add_argument("--preset", choices=sorted(PRESETS), help="start from a named experiment preset")
    t.add_argument("--config", help="experiment JSON (model/train/channels/seeds), applied over the preset")
    _model_flags(t)
    t.add_argument("--coord-agg", choices=["mean", "sum"], help="coordinate aggregation")
    t.add_argument("--epochs", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--lr", type=float, help="Adam learning rate")
    t.add_argument("--schedule", choices=list(train.SCHEDULES), help="learning-rate schedule")
    t.add_argument("--patience", type=int, help="early-stopping patience in epochs")
    t.add_argument("--clip-norm", type=float, help="clip gradients to this global L2 norm")
    t.add_argument("--loss", choices=list(train.LOSSES), help="override the dataset's loss")
    t.add_argument("--seeds", type=int, nargs="+", help="model/shuffle seeds")
    t.add_argument("--jobs", type=int, default=1, help="worker processes for independent runs")
    t.add_argument("--log-every", type=int, default=0, help="print losses every k epochs to stderr")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a dataset split")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", choices=list(data.SPLITS), default="test")
    e.add_argument("--loss", choices=list(train.LOSSES), help="override the dataset's metric")
    e.add_argument("--out", help="write the metric JSON here as well")
    e.set_defaults(func=cmd_eval)

    q = sub.add_parser("equicheck", help="run the symmetry, gradient and mutation checks")
    q.add_argument("--checkpoint", help="check a trained model instead of a fresh one")
    q.add_argument("--config", help="experiment JSON whose model section builds the fresh model")
    _model_flags(q)
    q.add_argument("--seed", type=int, default=0)
    q.add_argument("--trials", type=int, default=20, help="random group elements per property")
    q.add_argument("--tol", type=float, default=1e-9, help="absolute tolerance for symmetry checks")
    q.add_argument("--out", help="write the JSON report here as well")
    q.set_defaults(func=cmd_equicheck)

    b = sub.add_parser("bench", help="forward time and parameter count per channel count")
    b.add_argument("--channels", type=int, nargs="+", default=[1, 2, 5, 10, 25])
    b.add_argument("--batch-size", type=int, default=100, help="graphs per forward pass")
    b.add_argument("--nodes", type=int, default=5, help="nodes per graph")
    b.add_argument("--repeats", type=int, default=10)
    b.add_argument("--warmup", type=int, default=3)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--out", help="CSV path (stdout if omitted)")
    b.set_defaults(func=cmd_bench)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    tune_allocator()
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"mcegnn: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (RuntimeFailure, OSError, data.ContainerError) as exc:
        print(f"mcegnn: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
