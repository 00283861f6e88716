"""Robust maximum likelihood recovery of (b, D_o, D_f) from transition pairs.

Adam runs on batch-averaged direct gradients of -ln p.  Pairs with large
increments form a tail pool; once the estimate has settled, each batch is
drawn from the tail pool with probability tcf, chosen so that tail emphasis
matches the tail mass the current model predicts.
"""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np
from scipy import special

from .basis import DF_FLOOR, DO_FLOOR, FourierBasis, ThetaMatrix
from .ffpe_kernel import (
    QuadratureTables,
    TransitionPair,
    central_mass,
    default_tables,
    loglik_grad_fd,
    neg_loglik_and_grad,
    transition_density,
)
from .levy_sim import TransitionPairs

ERROR_GRID = 1024
OUTLIER_THRESHOLD = 1.0


class DegeneratePoolError(ValueError):
    """No cutting threshold yields a tail pool of the requested size."""


def _as_pairs(data) -> TransitionPairs:
    return data if isinstance(data, TransitionPairs) else data.to_pairs()


@dataclass
class SamplePools:
    p_main: TransitionPairs
    p_tail: TransitionPairs
    mu: float
    ct: float
    trt: float
    halvings: int = 0
    rate_based: bool = False  # mu is a drift rate (nonuniform sampling)

    @property
    def r_sample(self) -> float:
        return len(self.p_tail) / len(self.p_main)


def _split_pools(pairs: TransitionPairs, dev, ct_of, trt: float, batch: int, mu: float,
                 ct: float, rate_based: bool) -> SamplePools:
    in_main = dev < trt
    if int(np.count_nonzero(in_main & (dev > 0))) < batch:
        raise DegeneratePoolError(
            f"fewer than {batch} retained pairs deviate from the median; no cutting threshold works")
    factor, halvings = 1.0, 0
    while True:
        in_tail = in_main & (dev > factor * ct_of)
        if np.count_nonzero(in_tail) >= batch:
            break
        factor *= 0.5
        halvings += 1
    return SamplePools(pairs.subset(np.flatnonzero(in_main)), pairs.subset(np.flatnonzero(in_tail)),
                       float(mu), float(ct * factor), float(trt), halvings, rate_based)


def build_pools(dataset, ct: float, trt: float, batch: int = 100) -> SamplePools:
    """Main pool |dx - mu| < trt and tail pool |dx - mu| > ct, halving ct until |tail| >= batch."""
    if not 0 < ct < trt:
        raise ValueError("need 0 < ct < trt")
    pairs = _as_pairs(dataset)
    if len(pairs) == 0:
        raise ValueError("dataset has no pairs")
    mu = float(np.median(pairs.dx))
    dev = np.abs(pairs.dx - mu)
    return _split_pools(pairs, dev, ct, trt, batch, mu, ct, False)


def build_pools_nonuniform(dataset, ct_fn: Callable | float, trt: float, batch: int = 100) -> SamplePools:
    """As build_pools with mu = median(dx/dt) and tail condition |dx - mu dt| > ct_fn(dt)."""
    pairs = _as_pairs(dataset)
    if len(pairs) == 0:
        raise ValueError("dataset has no pairs")
    if not callable(ct_fn):
        ct_fn = (lambda c: (lambda dt: np.full(np.shape(dt), float(c))))(ct_fn)
    dt = pairs.dt
    if np.any(dt <= 0):
        raise ValueError("pairs must have positive dt")
    mu = float(np.median(pairs.dx / dt))
    dev = np.abs(pairs.dx - mu * dt)
    ct_vals = np.asarray(ct_fn(dt), dtype=float)
    if np.any(ct_vals <= 0) or np.any(ct_vals >= trt):
        raise ValueError("need 0 < ct_fn(dt) < trt")
    pools = _split_pools(pairs, dev, ct_vals, trt, batch, mu, 1.0, True)
    pools.ct = float(np.median(ct_vals)) * pools.ct
    return pools


# ---------------------------------------------------------------------------
# Tail correction factor


@dataclass(frozen=True)
class TcfState:
    tcf: float
    r_theta: float
    r_sample: float


def tcf_from_ratios(r_theta: float, r_sample: float) -> float:
    """max(0, (R_theta - R_sample) / (1 - R_sample))."""
    if not 0.0 <= r_sample < 1.0:
        raise ValueError("r_sample must lie in [0, 1)")
    return max(0.0, (r_theta - r_sample) / (1.0 - r_sample))


def mean_coefficients(theta: ThetaMatrix):
    """Period means of (b, D_o, D_f): the constant-mode coefficients, clamped."""
    b, d_o, d_f = theta.values[:, 0]
    return float(b), max(DO_FLOOR, float(d_o)), max(DF_FLOOR, float(d_f))


def model_tail_ratio(b: float, d_o: float, d_f: float, dt: float, ct: float, mu: float,
                     alpha: float, tables: QuadratureTables | None = None) -> float:
    """R_theta = P(|dx - mu| > ct) under the constant-coefficient transition density."""
    inside = central_mass(mu - b * dt, ct, dt, d_o, d_f, alpha, tables)
    return max(0.0, 1.0 - inside)


def stable_tail_bound(x: float, d_f: float, dt: float, alpha: float) -> float:
    """Leading-order P(|S| > x) for a symmetric stable law with scale parameter d_f*dt."""
    a = 2.0 * alpha
    return 2.0 * special.gamma(a) * math.sin(math.pi * alpha) / math.pi * d_f * dt * x ** (-a)


def model_tail_ratio_quadrature(b: float, d_o: float, d_f: float, dt: float, ct: float, mu: float,
                                alpha: float, tables: QuadratureTables | None = None,
                                width: float = 200.0, n_points: int = 2000) -> float:
    """R_theta by direct quadrature of the density over ct < |dx - mu| <= ct + width.

    Composite 8-point Gauss-Legendre on n_points nodes per side plus the
    leading-order stable tail beyond ct + width.  Used as a reference for
    model_tail_ratio.
    """
    order = 8
    panels = n_points // order
    gx, gw = np.polynomial.legendre.leggauss(order)
    edges = np.linspace(ct, ct + width, panels + 1)
    half = 0.5 * np.diff(edges)
    s = (edges[:-1, None] + half[:, None] * (gx + 1.0)).ravel()
    w = (half[:, None] * gw).ravel()
    centre = mu - b * dt
    total = 0.0
    for side in (1.0, -1.0):
        y = centre + side * s
        total += float(w @ transition_density(y=y, t=dt, d_o=d_o, d_f=d_f, alpha=alpha, tables=tables))
    # both sides beyond the window; Gaussian mass out there is negligible
    return total + stable_tail_bound(ct + width, d_f, dt, alpha)


def compute_tcf(theta: ThetaMatrix, dt: float, ct: float, mu: float, r_sample: float,
                alpha: float, tables: QuadratureTables | None = None) -> TcfState:
    """TCF from the mean coefficients of theta."""
    if not 0.0 <= r_sample < 1.0:
        raise ValueError("r_sample must lie in [0, 1)")
    b, d_o, d_f = mean_coefficients(theta)
    r_theta = model_tail_ratio(b, d_o, d_f, dt, ct, mu, alpha, tables)
    return TcfState(tcf_from_ratios(r_theta, r_sample), r_theta, r_sample)


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0

    @classmethod
    def zeros(cls, n: int) -> "AdamState":
        return cls(np.zeros(n), np.zeros(n), 0)


def adam_step(theta: np.ndarray, state: AdamState, gradient: np.ndarray, eta: float = 1e-2,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    """One bias-corrected Adam update.  A non-finite gradient leaves everything untouched.

    Returns (theta, state, applied).
    """
    g = np.asarray(gradient, dtype=float)
    if not np.all(np.isfinite(g)):
        return theta, state, False
    step = state.step + 1
    m = beta1 * state.m + (1.0 - beta1) * g
    v = beta2 * state.v + (1.0 - beta2) * g * g
    m_hat = m / (1.0 - beta1**step)
    v_hat = v / (1.0 - beta2**step)
    theta = theta - eta * m_hat / (np.sqrt(v_hat) + eps)
    return theta, AdamState(m, v, step), True


# ---------------------------------------------------------------------------
# The fit


@dataclass
class FitConfig:
    eta: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_limit: int = 40000
    batch: int = 100
    tcf_warmup: int = 4000
    ma_window: int = 20000
    fd_mix: float = 0.0
    b_fd: int = 10
    conv_lag: int = 1000
    conv_rtol: float = 1e-4
    use_tcf: bool = True

    def __post_init__(self):
        for name in ("eta", "eps", "step_limit", "batch", "ma_window", "conv_lag"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("beta1, beta2 must lie in (0, 1)")
        if self.tcf_warmup < 0:
            raise ValueError("tcf_warmup must be >= 0")
        if self.ma_window > self.step_limit:
            raise ValueError("ma_window must not exceed step_limit")
        if not 0.0 <= self.fd_mix <= 1.0:
            raise ValueError("fd_mix must lie in [0, 1]")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class FitHistory:
    tcf: np.ndarray
    pool: np.ndarray  # 0 = main, 1 = tail
    theta: np.ndarray  # (steps, 3K) raw iterates

    def __len__(self) -> int:
        return self.tcf.size


@dataclass
class FitResult:
    theta: ThetaMatrix  # moving average
    history: FitHistory
    converged: bool
    steps_run: int
    final_tcf: float
    ct_effective: float
    r_sample: float
    skipped: int = 0
    info: dict = field(default_factory=dict)


def initial_theta(basis: FourierBasis, rng: np.random.Generator) -> ThetaMatrix:
    values = rng.normal(0.0, 0.01, size=(3, basis.size))
    values[:, 0] = rng.uniform(1.0, 5.0, size=3)
    return ThetaMatrix(basis, values)


def _fd_batch_gradient(x_cur, x_next, dt, theta, alpha, tables, b_fd, rng):
    grads = [loglik_grad_fd(TransitionPair(a, b, d), theta, tables=tables, b_fd=b_fd, rng=rng, alpha=alpha)
             for a, b, d in zip(x_cur, x_next, dt)]
    return np.mean(grads, axis=0)


def fit(dataset, basis: FourierBasis, alpha: float, config: FitConfig | None = None,
        ct: float = 8.0, trt: float = 20.0, seed: int = 0,
        tables: QuadratureTables | None = None, pools: SamplePools | None = None,
        callback: Callable | None = None) -> FitResult:
    """Adam with tail pools and the tail correction factor; returns the moving-average estimate."""
    config = config or FitConfig()
    tables = tables or default_tables()
    pools = pools or build_pools(dataset, ct, trt, config.batch)
    main, tail = pools.p_main, pools.p_tail
    if len(main) == 0:
        raise ValueError("main pool is empty")
    dts = np.unique(main.dt)
    dt_rep = float(np.median(main.dt))
    r_sample = pools.r_sample
    if config.use_tcf and r_sample >= 1.0:
        raise DegeneratePoolError("tail pool equals the main pool; the tail correction factor is undefined")
    rng = np.random.default_rng(seed)
    theta = initial_theta(basis, rng)
    flat = theta.flat.copy()
    state = AdamState.zeros(flat.size)
    n_max = config.step_limit
    hist_theta = np.empty((n_max, flat.size))
    hist_tcf = np.zeros(n_max)
    hist_pool = np.zeros(n_max, dtype=np.int8)
    csum = np.zeros((n_max + 1, flat.size))  # running sums of the iterates for the moving average
    tcf = 0.0
    skipped = 0
    converged = False
    i = 0
    w = config.ma_window
    lag = config.conv_lag

    while i < n_max:
        use_tail = config.use_tcf and tcf > 0.0 and rng.random() < tcf
        pool = tail if use_tail else main
        idx = rng.integers(0, len(pool), config.batch)
        xc, xn, dt = pool.x_current[idx], pool.x_next[idx], pool.dt[idx]
        theta_cur = ThetaMatrix(basis, flat)
        if config.fd_mix > 0 and rng.random() < config.fd_mix:
            g = _fd_batch_gradient(xc, xn, dt, theta_cur, alpha, tables, config.b_fd, rng)
        else:
            _, grads = neg_loglik_and_grad(xc, xn, dt, theta_cur, alpha, tables)
            g = grads.mean(axis=0)
        flat, state, applied = adam_step(flat, state, g, config.eta, config.beta1, config.beta2, config.eps)
        if not applied:
            skipped += 1
            if skipped > n_max:
                raise FloatingPointError("gradient non-finite on too many batches")
            continue
        hist_theta[i] = flat
        hist_pool[i] = use_tail
        csum[i + 1] = csum[i] + flat
        i += 1
        if config.use_tcf and i >= config.tcf_warmup:
            if pools.rate_based:
                mu_dt = pools.mu * dt_rep
            else:
                mu_dt = pools.mu
            tcf = compute_tcf(ThetaMatrix(basis, flat), dt_rep, pools.ct, mu_dt, r_sample, alpha, tables).tcf
        hist_tcf[i - 1] = tcf
        if callback is not None:
            callback(i, flat, tcf)
        if i >= w and i - lag >= w:
            ma_now = (csum[i] - csum[i - w]) / w
            ma_then = (csum[i - lag] - csum[i - lag - w]) / w
            scale = np.maximum(np.abs(ma_now), 1e-2 * np.max(np.abs(ma_now)))
            if np.all(np.abs(ma_now - ma_then) < config.conv_rtol * scale):
                converged = True
                break

    n_ma = min(w, i)
    theta_ma = ThetaMatrix(basis, (csum[i] - csum[i - n_ma]) / n_ma)
    history = FitHistory(hist_tcf[:i].copy(), hist_pool[:i].copy(), hist_theta[:i].copy())
    info = {"n_main": len(main), "n_tail": len(tail), "mu": pools.mu, "halvings": pools.halvings,
            "distinct_dt": int(dts.size)}
    return FitResult(theta_ma, history, converged, i, float(tcf), pools.ct, r_sample, skipped, info)


# ---------------------------------------------------------------------------
# Error metrics


def error_grid(n: int = ERROR_GRID) -> np.ndarray:
    """n uniform points on (0, 2 pi]."""
    return 2.0 * np.pi * np.arange(1, n + 1) / n


def relative_l2_errors(theta: ThetaMatrix, truth, n: int = ERROR_GRID) -> dict:
    """||f_hat - f||_2 / ||f||_2 on the error grid for b, D_o, D_f.

    ``truth`` is a triple of callables or constants.
    """
    x = error_grid(n)
    est = theta.evaluate(x)
    out = {}
    for name, f_hat, f in zip(("b", "d_o", "d_f"), est, truth):
        fx = np.asarray(f(x) if callable(f) else np.full_like(x, float(f)), dtype=float)
        out[name] = float(np.linalg.norm(f_hat - fx) / np.linalg.norm(fx))
    return out


def is_outlier(errors: dict, threshold: float = OUTLIER_THRESHOLD) -> bool:
    return any(v > threshold for v in errors.values())


# ---------------------------------------------------------------------------
# Persistence


def theta_to_json(result: FitResult, alpha: float) -> dict:
    theta = result.theta
    return {
        "basis": {"n_modes": theta.basis.n_modes},
        "theta": theta.values.tolist(),
        "alpha": alpha,
        "fit": {
            "steps_run": result.steps_run,
            "converged": result.converged,
            "final_tcf": result.final_tcf,
            "ct_effective": result.ct_effective,
            "r_sample": result.r_sample,
            "skipped": result.skipped,
        },
    }


def theta_from_json(data: dict) -> ThetaMatrix:
    return ThetaMatrix(FourierBasis(int(data["basis"]["n_modes"])), np.array(data["theta"], dtype=float))


def write_history(history: FitHistory, path, thin: int = 1) -> None:
    k = history.theta.shape[1] // 3
    cols = [f"theta_{l}_{j}" for l in ("b", "do", "df") for j in range(k)]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "tcf", "pool"] + cols)
        for i in range(0, len(history), max(1, thin)):
            w.writerow([i + 1, repr(float(history.tcf[i])), "tail" if history.pool[i] else "main"]
                       + [repr(float(v)) for v in history.theta[i]])
