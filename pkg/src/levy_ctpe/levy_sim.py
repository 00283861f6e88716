"""Trajectory data for dX = b dt + Sigma dW + sigma dL, L a symmetric 2*alpha-stable process.

Three regimes are produced: unbiased Euler-Maruyama paths, paths whose large
jumps were filtered out and partly discarded, and Metropolis-Hastings samples
whose exploration is kept local (both censored regimes are stored as pairs).
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
from scipy.interpolate import CubicHermiteSpline

from .ffpe_kernel import QuadratureTables, density_integrals, transition_density

GENERATORS = ("unbiased", "filtered", "mcmc")
_BLOCK = 1024  # trajectories simulated together
_MCMC_BLOCK = 512  # proposals drawn per refill
_MCMC_MAX_TABLES = 8  # distinct (d_o, d_f) targets worth tabulating per step


def sample_standard_stable(alpha, u, e):
    """Chambers-Mallows-Stuck draw of a symmetric stable variate of index a = 2*alpha.

    ``u`` ~ Uniform(-pi/2, pi/2) and ``e`` ~ Exp(1); the result has
    characteristic function exp(-|xi|^{2 alpha}).
    """
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha must lie in (0, 1), got {alpha}")
    u = np.asarray(u, dtype=float)
    e = np.asarray(e, dtype=float)
    a = 2.0 * alpha
    if a == 1.0:
        return np.tan(u)
    return (np.sin(a * u) / np.cos(u) ** (1.0 / a)
            * (np.cos((1.0 - a) * u) / e) ** ((1.0 - a) / a))


def standard_stable(alpha: float, size, rng: np.random.Generator):
    u = rng.uniform(-np.pi / 2, np.pi / 2, size)
    e = rng.standard_exponential(size)
    return sample_standard_stable(alpha, u, e)


def _constant(c):
    return lambda x: np.full(np.shape(x), float(c))


@dataclass(frozen=True)
class SdeSpec:
    """Drift b, Brownian coefficient Sigma and Levy coefficient sigma as periodic callables."""

    b: Callable
    sigma_brownian: Callable
    sigma_levy: Callable
    alpha: float
    name: str = ""

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise ValueError(f"alpha must lie in (0, 1), got {self.alpha}")

    @classmethod
    def from_diffusions(cls, b, d_o, d_f, alpha: float, name: str = "") -> "SdeSpec":
        """Build from (b, D_o, D_f) with Sigma = sqrt(2 D_o), sigma = D_f^{1/(2 alpha)}."""
        b, d_o, d_f = (f if callable(f) else _constant(f) for f in (b, d_o, d_f))
        return cls(
            b=b,
            sigma_brownian=lambda x: np.sqrt(2.0 * np.asarray(d_o(x), dtype=float)),
            sigma_levy=lambda x: np.asarray(d_f(x), dtype=float) ** (1.0 / (2.0 * alpha)),
            alpha=alpha,
            name=name,
        )

    def d_o(self, x):
        return np.asarray(self.sigma_brownian(x), dtype=float) ** 2 / 2.0

    def d_f(self, x):
        return np.abs(np.asarray(self.sigma_levy(x), dtype=float)) ** (2.0 * self.alpha)


@dataclass
class Trajectory:
    traj_id: int
    times: np.ndarray
    states: np.ndarray

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.states = np.asarray(self.states, dtype=float)
        if self.times.shape != self.states.shape or self.times.size < 2:
            raise ValueError("a trajectory needs matching times/states with at least 2 samples")
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("times must be strictly increasing")


@dataclass
class DatasetMeta:
    alpha: float
    dt: float | None
    generator: str
    seed: int | None
    censoring: dict = field(default_factory=dict)
    substeps: int | None = None

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TransitionPairs:
    """Columnar transition pairs (x_current -> x_next over t_next - t_current)."""

    t_current: np.ndarray
    x_current: np.ndarray
    t_next: np.ndarray
    x_next: np.ndarray

    def __post_init__(self):
        for name in ("t_current", "x_current", "t_next", "x_next"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=float).ravel())

    def __len__(self) -> int:
        return self.x_current.size

    @property
    def dx(self) -> np.ndarray:
        return self.x_next - self.x_current

    @property
    def dt(self) -> np.ndarray:
        return self.t_next - self.t_current

    def subset(self, idx) -> "TransitionPairs":
        return TransitionPairs(self.t_current[idx], self.x_current[idx], self.t_next[idx], self.x_next[idx])


@dataclass
class TrajectoryDataset:
    trajectories: list
    meta: DatasetMeta

    def to_pairs(self) -> TransitionPairs:
        cols = [[], [], [], []]
        for tr in self.trajectories:
            cols[0].append(tr.times[:-1])
            cols[1].append(tr.states[:-1])
            cols[2].append(tr.times[1:])
            cols[3].append(tr.states[1:])
        return TransitionPairs(*(np.concatenate(c) for c in cols))

    def __len__(self) -> int:
        return len(self.trajectories)


@dataclass
class PairDataset:
    pairs: TransitionPairs
    meta: DatasetMeta

    def to_pairs(self) -> TransitionPairs:
        return self.pairs

    def __len__(self) -> int:
        return len(self.pairs)


def trajectory_rng(seed: int, traj_id: int) -> np.random.Generator:
    """Independent stream per trajectory, derived by hashing (seed, traj_id)."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(traj_id)]))


def uniform_initial_state(rng: np.random.Generator) -> float:
    """Uniform on (0, 2*pi]."""
    return 2.0 * np.pi - rng.uniform(0.0, 2.0 * np.pi)


def _euler_paths(spec: SdeSpec, x0, dt: float, steps: int, substeps: int, normals, stables):
    """Vectorised Euler-Maruyama; noise arrays have shape (n, steps * substeps)."""
    h = dt / substeps
    sqrt_h = math.sqrt(h)
    jump_scale = h ** (1.0 / (2.0 * spec.alpha))
    x = np.array(x0, dtype=float)
    out = np.empty((x.size, steps + 1))
    out[:, 0] = x
    k = 0
    for j in range(steps):
        for _ in range(substeps):
            x = (x + np.asarray(spec.b(x), dtype=float) * h
                 + np.asarray(spec.sigma_brownian(x), dtype=float) * sqrt_h * normals[:, k]
                 + np.asarray(spec.sigma_levy(x), dtype=float) * jump_scale * stables[:, k])
            k += 1
        out[:, j + 1] = x
    return out


def _draw_noise(spec: SdeSpec, rng: np.random.Generator, n: int):
    normals = rng.standard_normal(n)
    stables = standard_stable(spec.alpha, n, rng)
    return normals, stables


def simulate_trajectory(spec: SdeSpec, x0: float, dt: float, steps: int, substeps: int = 10,
                        rng: np.random.Generator | None = None, traj_id: int = 0) -> Trajectory:
    """Record steps + 1 states every dt; each dt is split into ``substeps`` Euler steps."""
    if substeps < 1:
        raise ValueError("substeps must be >= 1")
    if dt <= 0:
        raise ValueError("dt must be positive")
    rng = rng if rng is not None else np.random.default_rng()
    normals, stables = _draw_noise(spec, rng, steps * substeps)
    states = _euler_paths(spec, [x0], dt, steps, substeps, normals[None], stables[None])[0]
    return Trajectory(traj_id, dt * np.arange(steps + 1), states)


def generate_unbiased_dataset(spec: SdeSpec, init_sampler: Callable | None = None, num_traj: int = 1,
                              steps: int = 40, dt: float = 1 / 40, seed: int = 0,
                              substeps: int = 10) -> TrajectoryDataset:
    """I independent Euler-Maruyama trajectories, one RNG stream per trajectory."""
    if num_traj < 1:
        raise ValueError("num_traj must be >= 1")
    init_sampler = init_sampler or uniform_initial_state
    times = dt * np.arange(steps + 1)
    trajectories = []
    n_noise = steps * substeps
    for start in range(0, num_traj, _BLOCK):
        ids = range(start, min(start + _BLOCK, num_traj))
        x0 = np.empty(len(ids))
        normals = np.empty((len(ids), n_noise))
        stables = np.empty((len(ids), n_noise))
        for row, tid in enumerate(ids):
            rng = trajectory_rng(seed, tid)
            x0[row] = init_sampler(rng)
            normals[row], stables[row] = _draw_noise(spec, rng, n_noise)
        paths = _euler_paths(spec, x0, dt, steps, substeps, normals, stables)
        trajectories.extend(Trajectory(tid, times, paths[row]) for row, tid in enumerate(ids))
    meta = DatasetMeta(spec.alpha, dt, "unbiased", seed, {}, substeps)
    return TrajectoryDataset(trajectories, meta)


def censor_by_filtering(dataset, trt: float, ct: float, drop_fraction: float = 0.5,
                        seed: int | None = None) -> PairDataset:
    """Drop pairs with |dx - mu| >= trt, then discard a share of the pairs with |dx - mu| > ct.

    ``mu`` is the median increment.  The discard draw is seeded by the number of
    trajectories unless ``seed`` is given.
    """
    if not 0 < ct < trt:
        raise ValueError("need 0 < ct < trt")
    if not 0.0 <= drop_fraction <= 1.0:
        raise ValueError("drop_fraction must lie in [0, 1]")
    pairs = dataset.to_pairs()
    if seed is None:
        seed = len(dataset.trajectories) if isinstance(dataset, TrajectoryDataset) else len(pairs)
    dev = np.abs(pairs.dx - np.median(pairs.dx))
    keep = dev < trt
    tail_idx = np.flatnonzero(keep & (dev > ct))
    n_drop = int(math.floor(drop_fraction * tail_idx.size + 0.5))
    if tail_idx.size and n_drop == tail_idx.size and drop_fraction < 1.0:
        raise ValueError("censoring would empty the tail pool; lower drop_fraction or ct")
    rng = np.random.default_rng(seed)
    dropped = rng.choice(tail_idx, size=n_drop, replace=False) if n_drop else np.empty(0, int)
    keep[dropped] = False
    meta = DatasetMeta(
        dataset.meta.alpha, dataset.meta.dt, "filtered", dataset.meta.seed,
        {**dataset.meta.censoring, "trt": trt, "ct": ct, "drop_fraction": drop_fraction,
         "drop_seed": int(seed)},
        dataset.meta.substeps,
    )
    return PairDataset(pairs.subset(np.flatnonzero(keep)), meta)


def mcmc_proposal_std(d_o, dt: float, floor: float = 1e-4):
    return 3.0 * np.sqrt(2.0 * np.asarray(d_o) * dt + floor)


def _mcmc_step_targets(spec: SdeSpec, x_cur, dt):
    return (np.asarray(spec.b(x_cur), dtype=float), spec.d_o(x_cur),
            np.maximum(spec.d_f(x_cur), 1e-8))


class LogTargetTable:
    """ln p(y) on a graded grid with cubic Hermite interpolation.

    Node values and slopes both come from the kernel (the slope through the
    sine integral), so the interpolant is accurate to O(h^4).  Queries outside
    the grid are evaluated directly.
    """

    def __init__(self, dt: float, d_o: float, d_f: float, alpha: float, half_width: float,
                 tables: QuadratureTables | None = None, density: int = 50):
        self.dt, self.d_o, self.d_f, self.alpha, self.tables = dt, d_o, d_f, alpha, tables
        scale = max(math.sqrt(2.0 * d_o * dt), (d_f * dt) ** (1.0 / (2.0 * alpha)))
        # spacing max(scale, |y|)/density: uniform in the core, geometric in the tails
        n_core = density
        n_tail = max(0, int(math.ceil(density * math.log(half_width / scale)))) if half_width > scale else 0
        core = scale * np.arange(n_core) / n_core
        tail = scale * (1.0 + 1.0 / density) ** np.arange(n_tail + 1)
        half = np.concatenate([core, tail])
        self.half_width = float(half[-1])
        grid = np.concatenate([-half[:0:-1], half])
        res = density_integrals(("density", "grad_b"), grid, dt, d_o, d_f, alpha, tables)
        dens, sine = res.values
        dens = np.maximum(dens, 1e-300 * math.pi)
        self._spline = CubicHermiteSpline(grid, np.log(dens / math.pi), -sine / dens)

    def direct(self, y):
        return np.log(transition_density(y=y, t=self.dt, d_o=self.d_o, d_f=self.d_f,
                                         alpha=self.alpha, tables=self.tables))

    def __call__(self, y):
        y = np.asarray(y, dtype=float)
        out = np.empty(y.shape)
        inside = np.abs(y) <= self.half_width
        out[inside] = self._spline(y[inside])
        if not inside.all():
            out[~inside] = self.direct(y[~inside])
        return out


def generate_mcmc_dataset(spec: SdeSpec, init_sampler: Callable | None = None, num_traj: int = 1,
                          steps: int = 40, dt: float = 1 / 40, burn_in: int = 5000, seed: int = 0,
                          tables: QuadratureTables | None = None,
                          count: str = "accepted") -> PairDataset:
    """Each next state is the end of a random-walk Metropolis-Hastings chain.

    The chain targets the constant-coefficient transition density frozen at
    x_current, starts at x_current + b(x_current) dt and is read off after
    ``burn_in`` accepted moves.  When few distinct (d_o, d_f) occur in a step
    the log target is tabulated once per pair (see LogTargetTable).  Chains run in lockstep across trajectories;
    each trajectory refills its proposals in fixed blocks from its own stream,
    so a chain's path never depends on its neighbours.
    """
    if burn_in < 1:
        raise ValueError("burn_in must be >= 1")
    if num_traj < 1:
        raise ValueError("num_traj must be >= 1")
    if count not in ("accepted", "proposals"):
        raise ValueError("count must be 'accepted' or 'proposals'")
    init_sampler = init_sampler or uniform_initial_state
    rngs = [trajectory_rng(seed, tid) for tid in range(num_traj)]
    x = np.array([init_sampler(r) for r in rngs])
    states = np.empty((num_traj, steps + 1))
    states[:, 0] = x
    alpha = spec.alpha
    noise = np.empty((num_traj, _MCMC_BLOCK))
    unif = np.empty((num_traj, _MCMC_BLOCK))

    def refill(rows):
        for i in rows:
            noise[i] = rngs[i].standard_normal(_MCMC_BLOCK)
            unif[i] = rngs[i].uniform(size=_MCMC_BLOCK)

    def make_target(d_o, d_f, std):
        keys, inverse = np.unique(np.stack([d_o, d_f]), axis=1, return_inverse=True)
        inverse = inverse.ravel()
        if keys.shape[1] > _MCMC_MAX_TABLES:
            return lambda y, rows: np.log(transition_density(
                y=y, t=dt, d_o=d_o[rows], d_f=d_f[rows], alpha=alpha, tables=tables))
        width = 30.0 * float(std.max()) + 10.0
        tabs = [LogTargetTable(dt, ko, kf, alpha, width, tables) for ko, kf in keys.T]
        if len(tabs) == 1:
            return lambda y, rows: tabs[0](y)

        def target(y, rows):
            out = np.empty(y.shape)
            g = inverse[rows]
            for i, tab in enumerate(tabs):
                sel = g == i
                out[sel] = tab(y[sel])
            return out
        return target

    for j in range(steps):
        b, d_o, d_f = _mcmc_step_targets(spec, x, dt)
        std = mcmc_proposal_std(d_o, dt)
        centre = x + b * dt
        z = centre.copy()
        log_target = make_target(d_o, d_f, std)
        lp = log_target(np.zeros(num_traj), np.arange(num_traj))
        accepted = np.zeros(num_traj, dtype=int)
        ptr = np.zeros(num_traj, dtype=int)
        refill(range(num_traj))
        active = np.arange(num_traj)
        while active.size:
            k = ptr[active]
            prop = z[active] + std[active] * noise[active, k]
            lp_prop = log_target(prop - centre[active], active)
            ok = np.log(unif[active, k]) < lp_prop - lp[active]
            hit = active[ok]
            z[hit] = prop[ok]
            lp[hit] = lp_prop[ok]
            accepted[hit if count == "accepted" else active] += 1
            ptr[active] += 1
            full = active[ptr[active] == _MCMC_BLOCK]
            refill(full)
            ptr[full] = 0
            active = active[accepted[active] < burn_in]
        states[:, j + 1] = z
        x = z

    times = dt * np.arange(steps + 1)
    t = np.broadcast_to(times, states.shape)
    pairs = TransitionPairs(t[:, :-1], states[:, :-1], t[:, 1:], states[:, 1:])
    meta = DatasetMeta(alpha, dt, "mcmc", seed, {"burn_in": burn_in})
    return PairDataset(pairs, meta)


# ---------------------------------------------------------------------------
# CSV / JSON persistence

SCHEMA_VERSION = 1
TRAJ_HEADER = ("traj_id", "step", "time", "state")
PAIR_HEADER = ("pair_id", "t_current", "x_current", "t_next", "x_next")


def _fmt(v: float) -> str:
    return repr(float(v))


def write_dataset(dataset, csv_path, meta_path=None) -> None:
    """Write the dataset CSV and its metadata sidecar (default: ``<csv>.meta.json``)."""
    csv_path = Path(csv_path)
    meta_path = Path(meta_path) if meta_path else csv_path.with_suffix(".meta.json")
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh)
        if isinstance(dataset, TrajectoryDataset):
            w.writerow(TRAJ_HEADER)
            for tr in dataset.trajectories:
                for j, (t, x) in enumerate(zip(tr.times, tr.states)):
                    w.writerow((tr.traj_id, j, _fmt(t), _fmt(x)))
        else:
            w.writerow(PAIR_HEADER)
            p = dataset.pairs
            for i in range(len(p)):
                w.writerow((i, _fmt(p.t_current[i]), _fmt(p.x_current[i]),
                            _fmt(p.t_next[i]), _fmt(p.x_next[i])))
    meta = {**dataset.meta.to_dict(), "schema_version": SCHEMA_VERSION,
            "layout": "trajectories" if isinstance(dataset, TrajectoryDataset) else "pairs"}
    meta_path.write_text(json.dumps(meta, indent=2, sort_keys=True))


def read_dataset(csv_path, meta_path=None):
    """Inverse of write_dataset; the layout is detected from the CSV header."""
    csv_path = Path(csv_path)
    meta_path = Path(meta_path) if meta_path else csv_path.with_suffix(".meta.json")
    raw = json.loads(meta_path.read_text())
    meta = DatasetMeta(raw["alpha"], raw.get("dt"), raw["generator"], raw.get("seed"),
                       raw.get("censoring", {}), raw.get("substeps"))
    with open(csv_path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ValueError(f"{csv_path}: empty file")
    header, body = tuple(rows[0]), rows[1:]
    if header == TRAJ_HEADER:
        data = np.array(body, dtype=float).reshape(-1, 4)
        trajectories = []
        ids = data[:, 0].astype(int)
        bounds = np.flatnonzero(np.diff(ids)) + 1
        for chunk in np.split(data, bounds):
            trajectories.append(Trajectory(int(chunk[0, 0]), chunk[:, 2], chunk[:, 3]))
        return TrajectoryDataset(trajectories, meta)
    if header == PAIR_HEADER:
        data = np.array(body, dtype=float).reshape(-1, 5)
        return PairDataset(TransitionPairs(data[:, 1], data[:, 2], data[:, 3], data[:, 4]), meta)
    raise ValueError(f"{csv_path}: unrecognised header {header}")
