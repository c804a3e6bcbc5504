"""Physics trajectories, (input, target) datasets and the array container.

Simulation units throughout (G = 1, unit charges and masses where not
stated). Both generators integrate softened pairwise inverse-square forces
with kick-drift-kick leapfrog, via :func:`mcegnn.kernels.leapfrog`.
"""
import csv
import json
import math
import os
import struct
import tempfile
import zlib
from dataclasses import asdict, dataclass, field

import numpy as np

from . import kernels, rng
from .egnn import GraphBatch, fully_connected_edges

SPLITS = ("train", "val", "test")


@dataclass
class Trajectory:
    """Recorded states of one system; ``positions[k]`` is record ``k``."""

    positions: np.ndarray  # [T, n, 3]
    velocities: np.ndarray  # [T, n, 3]
    charges: np.ndarray | None = None  # [n]
    masses: np.ndarray | None = None  # [n]
    record_dt: float = 1.0

    @property
    def n_records(self):
        return self.positions.shape[0]

    @property
    def n_bodies(self):
        return self.positions.shape[1]


# charged particles -----------------------------------------------------------


def charged_initial(n_particles, seed, index=0):
    g = rng.stream(seed, "data", index)
    x = g.normal(0.0, 0.5, (n_particles, 3))
    v = g.normal(0.0, 0.5, (n_particles, 3))
    q = g.choice(np.array([-1.0, 1.0]), size=n_particles)
    return x, v, q


def simulate_charged_batch(n_systems, n_particles=5, n_steps=1000, dt=0.001, softening=0.1, seed=0,
                           record_every=1, first_index=0):
    """Simulate ``n_systems`` independent charged systems.

    System ``k`` draws its initial state from its own stream, so results do
    not depend on how systems are batched.
    """
    if n_particles < 2:
        raise ValueError("need at least two particles")
    if not dt > 0 or not softening > 0:
        raise ValueError("dt and softening must be positive")
    if n_steps < 0 or record_every < 1:
        raise ValueError("n_steps must be >= 0 and record_every >= 1")
    init = [charged_initial(n_particles, seed, first_index + k) for k in range(n_systems)]
    x = np.stack([s[0] for s in init])
    v = np.stack([s[1] for s in init])
    q = np.stack([s[2] for s in init])
    coupling = q[:, :, None] * q[:, None, :]
    xs, vs = kernels.leapfrog(x, v, coupling, dt, softening**2, n_steps, record_every)
    return [Trajectory(xs[k], vs[k], charges=q[k], record_dt=dt * record_every) for k in range(n_systems)]


def simulate_charged(n_particles=5, n_steps=1000, dt=0.001, softening=0.1, seed=0, record_every=1):
    return simulate_charged_batch(1, n_particles, n_steps, dt, softening, seed, record_every)[0]


def integrate(x, v, coupling, n_steps, dt, softening, record_every=1):
    """Leapfrog a single system from explicit initial conditions."""
    xs, vs = kernels.leapfrog(x[None], v[None], coupling[None], dt, softening**2, n_steps, record_every)
    return xs[0], vs[0]


def charged_energy(x, v, q, softening):
    """Kinetic plus softened Coulomb energy (unit masses)."""
    ke = 0.5 * float(np.sum(v * v))
    d = x[:, None, :] - x[None, :, :]
    r = np.sqrt(np.sum(d * d, axis=-1) + softening**2)
    iu = np.triu_indices(len(q), 1)
    return ke + float(np.sum((q[:, None] * q[None, :] / r)[iu]))


# hierarchical orbital systems ------------------------------------------------


@dataclass
class OrbitalConfig:
    n_planets: int = 3
    moons_per_planet: int = 2
    central_mass: float = 1.0
    planet_mass: tuple = (3e-3, 1e-2)
    planet_radius: tuple = (1.5, 4.0)
    moon_mass: tuple = (1e-6, 1e-5)
    moon_radius: tuple = (0.03, 0.06)
    softening: float = 1e-3

    def validate(self):
        if self.n_planets < 0 or self.moons_per_planet < 0:
            raise ValueError("body counts must be non-negative")
        for name in ("planet_mass", "moon_mass", "planet_radius", "moon_radius"):
            lo, hi = getattr(self, name)
            if not 0 < lo <= hi:
                raise ValueError(f"{name} must satisfy 0 < low <= high")
        if not self.central_mass > 0:
            raise ValueError("central mass must be positive")
        if self.moons_per_planet and self.n_planets and self.moon_radius[1] > 0.1 * self.planet_radius[0]:
            raise ValueError("moon orbits must be at most 0.1x the smallest planet orbit radius")

    @property
    def n_bodies(self):
        return 1 + self.n_planets * (1 + self.moons_per_planet)


def _random_circular(g, radius, mu):
    """Position and velocity on a circular orbit of random phase and plane."""
    normal = g.normal(size=3)
    normal /= np.linalg.norm(normal)
    e1 = np.cross(normal, [1.0, 0.0, 0.0])
    if np.linalg.norm(e1) < 1e-6:
        e1 = np.cross(normal, [0.0, 1.0, 0.0])
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(normal, e1)
    phase = g.uniform(0.0, 2.0 * math.pi)
    u = math.cos(phase) * e1 + math.sin(phase) * e2
    w = -math.sin(phase) * e1 + math.cos(phase) * e2
    return radius * u, math.sqrt(mu / radius) * w


def orbital_initial(cfg, seed, index=0):
    """Central body at rest at the origin, planets and their moons on circular orbits."""
    cfg.validate()
    g = rng.stream(seed, "data", index)
    n = cfg.n_bodies
    x = np.zeros((n, 3))
    v = np.zeros((n, 3))
    m = np.empty(n)
    m[0] = cfg.central_mass
    k = 1
    for _ in range(cfg.n_planets):
        mp = g.uniform(*cfg.planet_mass)
        # two-body parameter G(M + m) keeps the relative orbit circular
        xp, vp = _random_circular(g, g.uniform(*cfg.planet_radius), cfg.central_mass + mp)
        x[k], v[k], m[k] = xp, vp, mp
        k += 1
        for _ in range(cfg.moons_per_planet):
            mm = g.uniform(*cfg.moon_mass)
            xm, vm = _random_circular(g, g.uniform(*cfg.moon_radius), mp + mm)
            x[k], v[k], m[k] = xp + xm, vp + vm, mm
            k += 1
    return x, v, m


def gravity_coupling(masses, G=1.0):
    # a_i = sum_j -G m_j (x_i - x_j) / (r^2 + s^2)^(3/2)
    return np.broadcast_to(-G * masses[None, :], (len(masses), len(masses))).copy()


def simulate_orbital_batch(n_systems, cfg=None, n_steps=1000, dt=1e-3, seed=0, record_every=1, first_index=0):
    cfg = cfg or OrbitalConfig()
    cfg.validate()
    if not dt > 0 or n_steps < 0 or record_every < 1:
        raise ValueError("invalid integration parameters")
    init = [orbital_initial(cfg, seed, first_index + k) for k in range(n_systems)]
    x = np.stack([s[0] for s in init])
    v = np.stack([s[1] for s in init])
    m = np.stack([s[2] for s in init])
    coupling = np.stack([gravity_coupling(mk) for mk in m])
    xs, vs = kernels.leapfrog(x, v, coupling, dt, cfg.softening**2, n_steps, record_every)
    return [Trajectory(xs[k], vs[k], masses=m[k], record_dt=dt * record_every) for k in range(n_systems)]


def simulate_orbital(cfg=None, n_steps=1000, dt=1e-3, seed=0, record_every=1):
    return simulate_orbital_batch(1, cfg, n_steps, dt, seed, record_every)[0]


def gravity_energy(x, v, m, softening, G=1.0):
    ke = 0.5 * float(np.sum(m[:, None] * v * v))
    d = x[:, None, :] - x[None, :, :]
    r = np.sqrt(np.sum(d * d, axis=-1) + softening**2)
    iu = np.triu_indices(len(m), 1)
    return ke - G * float(np.sum((m[:, None] * m[None, :] / r)[iu]))


# datasets --------------------------------------------------------------------


@dataclass
class TrajectoryDataset:
    """Flat arrays of samples, all with the same body count."""

    x0: np.ndarray  # [N, n, 3]
    v0: np.ndarray  # [N, n, 3]
    target: np.ndarray  # [N, n, 3]
    node_features: np.ndarray  # [N, n, f]
    split: np.ndarray  # [N] int codes into SPLITS
    system: np.ndarray  # [N]
    start: np.ndarray  # [N] record index of the input state
    edge_attr: np.ndarray | None = None  # [N, n(n-1), d_e]
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return self.x0.shape[0]

    @property
    def n_bodies(self):
        return self.x0.shape[1]

    def indices(self, split):
        return np.flatnonzero(self.split == SPLITS.index(split))

    def count(self, split):
        return int(np.sum(self.split == SPLITS.index(split)))

    def standardize_features(self, split="train"):
        """Shift and scale node features in place by one split's statistics."""
        ref = self.node_features[self.indices(split)].reshape(-1, self.node_features.shape[-1])
        if len(ref) == 0:
            raise ValueError(f"split {split!r} is empty")
        mean = ref.mean(axis=0)
        std = ref.std(axis=0)
        std = np.where(std > 0, std, 1.0)
        self.node_features = (self.node_features - mean) / std
        self.meta["feature_mean"] = mean.tolist()
        self.meta["feature_std"] = std.tolist()

    def graphs(self, idx):
        """One GraphBatch (disjoint union) for the given sample indices."""
        idx = np.asarray(idx, dtype=np.int64)
        b, n = len(idx), self.n_bodies
        dst, src = fully_connected_edges(n)
        offs = (np.arange(b) * n)[:, None]
        attr = None
        if self.edge_attr is not None:
            attr = self.edge_attr[idx].reshape(b * len(dst), -1)
        return GraphBatch(
            self.x0[idx].reshape(b * n, 3),
            self.node_features[idx].reshape(b * n, -1),
            (dst[None, :] + offs).reshape(-1),
            (src[None, :] + offs).reshape(-1),
            self.v0[idx].reshape(b * n, 3),
            attr,
            np.repeat(np.arange(b), n),
            b,
        )

    def targets(self, idx):
        return self.target[np.asarray(idx)].reshape(-1, 3)

    def inputs(self, idx):
        return self.x0[np.asarray(idx)].reshape(-1, 3)

    def arrays(self):
        out = {
            "x0": self.x0,
            "v0": self.v0,
            "target": self.target,
            "node_features": self.node_features,
            "split": self.split.astype(np.float64),
            "system": self.system.astype(np.float64),
            "start": self.start.astype(np.float64),
        }
        if self.edge_attr is not None:
            out["edge_attr"] = self.edge_attr
        return out

    @classmethod
    def from_arrays(cls, arrays, meta=None):
        return cls(
            x0=arrays["x0"],
            v0=arrays["v0"],
            target=arrays["target"],
            node_features=arrays["node_features"],
            split=arrays["split"].astype(np.int64),
            system=arrays["system"].astype(np.int64),
            start=arrays["start"].astype(np.int64),
            edge_attr=arrays.get("edge_attr"),
            meta=dict(meta or {}),
        )

    def save(self, path):
        save_container(path, self.arrays(), meta=self.meta)

    @classmethod
    def load(cls, path):
        arrays, meta = load_container(path, with_meta=True)
        return cls.from_arrays(arrays, meta)


def _block_bounds(n_records, fractions):
    cuts = np.concatenate([[0.0], np.cumsum(fractions)])
    return [(int(round(lo * n_records)), int(round(hi * n_records))) for lo, hi in zip(cuts[:-1], cuts[1:])]


def _check_fractions(fractions):
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or min(fractions) < 0 or abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError("split fractions must be three non-negative numbers summing to 1")
    return fractions


def make_dataset(traj, horizon, stride=1, features="charge", splits=(1.0, 0.0, 0.0), system=0):
    """Cut one trajectory into (state at s, positions at s + horizon) samples.

    ``horizon`` and ``stride`` count recorded intervals. ``splits`` is either
    three fractions cutting the records into contiguous train/val/test time
    blocks (a sample's whole window stays inside its block) or one split name.
    """
    T = traj.n_records
    if not 0 <= horizon < T:
        raise ValueError(f"horizon {horizon} out of range for a trajectory of {T} records")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    if isinstance(splits, str):
        blocks = [(SPLITS.index(splits), 0, T)]
    else:
        bounds = _block_bounds(T, _check_fractions(splits))
        blocks = [(k, lo, hi) for k, (lo, hi) in enumerate(bounds)]
    starts, tags = [], []
    for tag, lo, hi in blocks:
        for s in range(lo, hi - horizon, stride):
            starts.append(s)
            tags.append(tag)
    starts = np.asarray(starts, dtype=np.int64)
    n = traj.n_bodies
    if features == "charge":
        if traj.charges is None:
            raise ValueError("trajectory has no charges")
        feat = traj.charges.reshape(n, 1)
        dst, src = fully_connected_edges(n)
        attr = (traj.charges[dst] * traj.charges[src]).reshape(1, -1, 1)
        attr = np.repeat(attr, len(starts), axis=0)
    elif features == "log_mass":
        if traj.masses is None:
            raise ValueError("trajectory has no masses")
        feat = np.log(traj.masses).reshape(n, 1)
        attr = None
    else:
        raise ValueError(f"unknown feature kind {features!r}")
    return TrajectoryDataset(
        x0=traj.positions[starts].copy(),
        v0=traj.velocities[starts].copy(),
        target=traj.positions[starts + horizon].copy(),
        node_features=np.repeat(feat[None], len(starts), axis=0),
        split=np.asarray(tags, dtype=np.int64),
        system=np.full(len(starts), system, dtype=np.int64),
        start=starts,
        edge_attr=attr,
        meta={"horizon": int(horizon), "stride": int(stride), "features": features},
    )


def concat_datasets(parts, meta=None):
    if not parts:
        raise ValueError("nothing to concatenate")
    cat = lambda name: np.concatenate([getattr(p, name) for p in parts])  # noqa: E731
    attr = None if parts[0].edge_attr is None else cat("edge_attr")
    merged = dict(parts[0].meta)
    merged.update(meta or {})
    return TrajectoryDataset(
        cat("x0"), cat("v0"), cat("target"), cat("node_features"), cat("split"), cat("system"), cat("start"),
        attr, merged,
    )


def charged_dataset(n_train, n_val, n_test, n_particles=5, horizon_steps=1000, dt=0.001, softening=0.1,
                    seed=0, record_every=100):
    """One sample per system; systems are split train/val/test by index block."""
    if horizon_steps % record_every:
        raise ValueError("horizon_steps must be a multiple of record_every")
    horizon = horizon_steps // record_every
    total = n_train + n_val + n_test
    trajs = simulate_charged_batch(total, n_particles, horizon_steps, dt, softening, seed, record_every)
    parts = []
    for k, tr in enumerate(trajs):
        tag = "train" if k < n_train else ("val" if k < n_train + n_val else "test")
        parts.append(make_dataset(tr, horizon, stride=horizon + 1, features="charge", splits=tag, system=k))
    meta = {
        "task": "charged",
        "n_particles": n_particles,
        "horizon_steps": horizon_steps,
        "dt": dt,
        "softening": softening,
        "seed": seed,
        "record_every": record_every,
        "loss": "mse",
    }
    return concat_datasets(parts, meta)


def orbital_dataset(n_systems, cfg=None, horizon_steps=300, stride_steps=300, n_steps=2700, dt=1e-3,
                    seed=0, record_every=50, splits=(0.6, 0.2, 0.2), loss_eps=1e-6, standardize=True):
    """Several samples per system, cut along contiguous time blocks.

    ``loss_eps`` is stored in the metadata as the normalized-loss guard: bodies
    moving less than about sqrt(loss_eps) count as stationary. Log-mass
    features span roughly [-12, 0]; ``standardize`` rescales them with the
    training split's mean and std.
    """
    cfg = cfg or OrbitalConfig()
    if horizon_steps % record_every or stride_steps % record_every:
        raise ValueError("horizon and stride must be multiples of record_every")
    trajs = simulate_orbital_batch(n_systems, cfg, n_steps, dt, seed, record_every)
    parts = [
        make_dataset(tr, horizon_steps // record_every, stride_steps // record_every, "log_mass", splits, system=k)
        for k, tr in enumerate(trajs)
    ]
    meta = {
        "task": "orbital",
        "orbital": asdict(cfg),
        "n_steps": n_steps,
        "horizon_steps": horizon_steps,
        "stride_steps": stride_steps,
        "dt": dt,
        "seed": seed,
        "record_every": record_every,
        "loss": "normalized_mse",
        "loss_eps": loss_eps,
    }
    ds = concat_datasets(parts, meta)
    if standardize:
        ds.standardize_features("train" if ds.count("train") else "test")
    return ds


# CSV trajectories ------------------------------------------------------------

CSV_COLUMNS = ("body", "step", "x", "y", "z", "vx", "vy", "vz", "mass")


def load_trajectory_csv(path):
    """Read ``body,step,x,y,z,vx,vy,vz,mass`` rows into a Trajectory."""
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or any(c not in reader.fieldnames for c in CSV_COLUMNS):
            raise ValueError(f"CSV header must contain {', '.join(CSV_COLUMNS)}")
        rows = list(reader)
    bodies = sorted({r["body"] for r in rows})
    steps = sorted({int(r["step"]) for r in rows})
    bi = {b: k for k, b in enumerate(bodies)}
    si = {s: k for k, s in enumerate(steps)}
    pos = np.full((len(steps), len(bodies), 3), np.nan)
    vel = np.full_like(pos, np.nan)
    mass = np.full(len(bodies), np.nan)
    for r in rows:
        k, b = si[int(r["step"])], bi[r["body"]]
        pos[k, b] = [float(r["x"]), float(r["y"]), float(r["z"])]
        vel[k, b] = [float(r["vx"]), float(r["vy"]), float(r["vz"])]
        mass[b] = float(r["mass"])
    if np.isnan(pos).any() or np.isnan(mass).any():
        raise ValueError("CSV does not give every body at every step")
    return Trajectory(pos, vel, masses=mass)


# container -------------------------------------------------------------------

MAGIC = b"MCEGNNC\x00"
FORMAT_VERSION = (1, 0)


class ContainerError(Exception):
    pass


class VersionError(ContainerError):
    pass


class TruncatedError(ContainerError):
    pass


class LayoutError(ContainerError):
    """Manifest shapes and payload sizes disagree."""


class ChecksumError(ContainerError):
    pass


def save_container(path, arrays, meta=None):
    """Write named float64 arrays: magic, manifest length, JSON manifest, payloads.

    Written to a temporary file and renamed into place.
    """
    entries = []
    payloads = []
    offset = 0
    for name, arr in arrays.items():
        a = np.ascontiguousarray(arr, dtype="<f8")
        raw = a.tobytes()
        entries.append(
            {"name": name, "shape": list(a.shape), "offset": offset, "nbytes": len(raw), "crc32": zlib.crc32(raw)}
        )
        payloads.append(raw)
        offset += len(raw)
    names = [e["name"] for e in entries]
    if len(set(names)) != len(names):
        raise ValueError("array names must be unique")
    manifest = {
        "format_version": list(FORMAT_VERSION),
        "dtype": "float64",
        "endianness": "little",
        "arrays": entries,
        "meta": meta or {},
    }
    head = json.dumps(manifest, sort_keys=True).encode("utf-8")
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=".mcc")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(MAGIC)
            fh.write(struct.pack("<Q", len(head)))
            fh.write(head)
            for raw in payloads:
                fh.write(raw)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_container(path, with_meta=False):
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < len(MAGIC) + 8:
        raise TruncatedError("file too short for a container header")
    if blob[: len(MAGIC)] != MAGIC:
        raise ContainerError("not a container file")
    (hlen,) = struct.unpack("<Q", blob[len(MAGIC) : len(MAGIC) + 8])
    start = len(MAGIC) + 8
    if len(blob) < start + hlen:
        raise TruncatedError("manifest cut short")
    try:
        manifest = json.loads(blob[start : start + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ContainerError(f"unreadable manifest: {exc}") from None
    major = int(manifest.get("format_version", [0])[0])
    if major != FORMAT_VERSION[0]:
        raise VersionError(f"format version {manifest.get('format_version')} is not supported")
    if manifest.get("dtype") != "float64" or manifest.get("endianness") != "little":
        raise ContainerError("only little-endian float64 payloads are supported")
    body = blob[start + hlen :]
    expected = sum(e["nbytes"] for e in manifest["arrays"])
    if len(body) < expected:
        raise TruncatedError(f"payload has {len(body)} bytes, manifest needs {expected}")
    if len(body) > expected:
        raise LayoutError("trailing bytes after the last payload")
    out = {}
    for e in manifest["arrays"]:
        count = int(np.prod(e["shape"], dtype=np.int64))
        if count * 8 != e["nbytes"]:
            raise LayoutError(f"{e['name']}: shape {e['shape']} does not match {e['nbytes']} bytes")
        raw = body[e["offset"] : e["offset"] + e["nbytes"]]
        if zlib.crc32(raw) != e["crc32"]:
            raise ChecksumError(f"{e['name']}: checksum mismatch")
        out[e["name"]] = np.frombuffer(raw, dtype="<f8").reshape(e["shape"]).astype(np.float64)
    if with_meta:
        return out, manifest.get("meta", {})
    return out
