"""Fourier collocation for beta V = r + b V' + D_o V'' - D_f (-Delta)^alpha V on (0, 2 pi].

The unknown is expanded in the real trigonometric basis 1, cos kx, sin kx
(k < M/2) and cos(M x / 2); each basis function has closed-form derivatives
and fractional Laplacian (symbol |k|^{2 alpha}), so the collocation matrix is
assembled column by column and solved densely.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy import linalg, stats

from .basis import ThetaMatrix

RESIDUAL_RTOL = 1e-9
COND_LIMIT = 1e12
DF_MIN_PERTURBED = 1e-3


class SolverError(RuntimeError):
    def __init__(self, message: str, condition: float | None = None):
        super().__init__(message)
        self.condition = condition


def collocation_points(m: int) -> np.ndarray:
    """x_j = 2 pi j / M for j = 1..M."""
    if m < 2 or m % 2:
        raise ValueError("resolution M must be an even integer >= 2")
    return 2.0 * np.pi * np.arange(1, m + 1) / m


def wavenumbers(m: int) -> np.ndarray:
    return np.fft.fftfreq(m, d=1.0 / m)


@dataclass
class ValueField:
    """Real samples at the M collocation points, with FFT access to the modes."""

    samples: np.ndarray

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=float).ravel()
        collocation_points(self.samples.size)  # validates M

    @property
    def m(self) -> int:
        return self.samples.size

    @property
    def x(self) -> np.ndarray:
        return collocation_points(self.m)

    @property
    def modes(self) -> np.ndarray:
        """Complex coefficients c_k with v(x_j) = sum_k c_k exp(i k x_j), in np.fft order."""
        # samples start at x = 2 pi / M; roll so index 0 is x = 0 (= 2 pi)
        return np.fft.fft(np.roll(self.samples, 1)) / self.m

    @classmethod
    def from_modes(cls, modes) -> "ValueField":
        modes = np.asarray(modes, dtype=complex)
        vals = np.fft.ifft(modes * modes.size)
        if np.max(np.abs(vals.imag)) > 1e-12 * max(1.0, np.max(np.abs(vals.real))):
            raise ValueError("modes are not conjugate symmetric")
        return cls(np.roll(vals.real, -1))

    @classmethod
    def from_function(cls, fn: Callable, m: int) -> "ValueField":
        return cls(np.asarray(fn(collocation_points(m)), dtype=float))

    def _spectral(self, symbol: np.ndarray) -> np.ndarray:
        vals = np.fft.ifft(self.modes * symbol * self.m)
        return np.roll(vals.real, -1)

    def derivative(self, order: int = 1) -> np.ndarray:
        k = wavenumbers(self.m)
        sym = (1j * k) ** order
        if order % 2:
            sym[self.m // 2] = 0.0  # the Nyquist mode has no odd derivative on the grid
        return self._spectral(sym)

    def fractional_laplacian(self, alpha: float) -> np.ndarray:
        return self._spectral(np.abs(wavenumbers(self.m)) ** (2.0 * alpha))


@dataclass(frozen=True)
class TrigPolynomial:
    """Finite cosine/sine series with exact derivatives and fractional Laplacian."""

    cos: dict = field(default_factory=dict)
    sin: dict = field(default_factory=dict)
    const: float = 0.0

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        out = np.full(x.shape, float(self.const))
        for k, a in self.cos.items():
            out += a * np.cos(k * x)
        for k, a in self.sin.items():
            out += a * np.sin(k * x)
        return out

    def derivative(self, x, order: int = 1):
        x = np.asarray(x, dtype=float)
        out = np.zeros(x.shape)
        for k, a in self.cos.items():
            out += a * k**order * np.cos(k * x + order * np.pi / 2)
        for k, a in self.sin.items():
            out += a * k**order * np.sin(k * x + order * np.pi / 2)
        return out

    def fractional_laplacian(self, x, alpha: float):
        x = np.asarray(x, dtype=float)
        out = np.zeros(x.shape)
        for k, a in self.cos.items():
            out += a * abs(k) ** (2 * alpha) * np.cos(k * x)
        for k, a in self.sin.items():
            out += a * abs(k) ** (2 * alpha) * np.sin(k * x)
        return out

    @property
    def max_mode(self) -> int:
        return max([0, *self.cos, *self.sin])


# cos^3(2x) = (3 cos 2x + cos 6x) / 4
COS3_2X = TrigPolynomial(cos={2: 0.75, 6: 0.25})


def _field(f):
    if isinstance(f, ThetaMatrix):
        return None
    return f if callable(f) else (lambda x, c=float(f): np.full(np.shape(x), c))


@dataclass
class PideProblem:
    """beta > 0, alpha in (0, 1), coefficient fields and reward, resolution M.

    Coefficients may be callables, constants or a single ThetaMatrix passed as
    ``theta`` (its clamped expansion supplies b, d_o, d_f).  The reward may be
    a callable or an array of samples at the collocation points.
    """

    beta: float
    alpha: float
    b: Callable | float | None = None
    d_o: Callable | float | None = None
    d_f: Callable | float | None = None
    r: Callable | np.ndarray | float = 0.0
    m: int = 128
    theta: ThetaMatrix | None = None

    def __post_init__(self):
        if self.beta <= 0:
            raise ValueError("beta must be positive")
        if not 0.0 < self.alpha < 1.0:
            raise ValueError("alpha must lie in (0, 1)")
        collocation_points(self.m)
        if self.theta is None and any(f is None for f in (self.b, self.d_o, self.d_f)):
            raise ValueError("give either theta or all of b, d_o, d_f")

    @property
    def x(self) -> np.ndarray:
        return collocation_points(self.m)

    def coefficients(self, x=None):
        x = self.x if x is None else np.asarray(x, dtype=float)
        if self.theta is not None:
            return self.theta.evaluate(x)
        return tuple(np.asarray(_field(f)(x), dtype=float) for f in (self.b, self.d_o, self.d_f))

    def reward(self) -> np.ndarray:
        if callable(self.r):
            return np.asarray(self.r(self.x), dtype=float)
        r = np.asarray(self.r, dtype=float)
        return np.full(self.m, float(r)) if r.ndim == 0 else r.ravel()

    def check(self) -> None:
        _, d_o, d_f = self.coefficients()
        if np.min(d_f) <= 0:
            raise SolverError("d_f must be positive at every collocation point")
        if np.min(d_o) < 0:
            raise SolverError("d_o must be nonnegative at every collocation point")

    def with_reward(self, r) -> "PideProblem":
        return PideProblem(self.beta, self.alpha, self.b, self.d_o, self.d_f, r, self.m, self.theta)

    def with_resolution(self, m: int) -> "PideProblem":
        r = self.r if not isinstance(self.r, np.ndarray) else self.r
        if isinstance(r, np.ndarray) and r.size != m:
            raise ValueError("sampled reward cannot be resampled; pass a callable")
        return PideProblem(self.beta, self.alpha, self.b, self.d_o, self.d_f, r, m, self.theta)


def apply_generator(v: ValueField, prob: PideProblem) -> ValueField:
    """beta v - b v' - d_o v'' + d_f (-Delta)^alpha v at the collocation points."""
    if v.m != prob.m:
        raise ValueError("resolution mismatch")
    b, d_o, d_f = prob.coefficients()
    out = (prob.beta * v.samples - b * v.derivative(1) - d_o * v.derivative(2)
           + d_f * v.fractional_laplacian(prob.alpha))
    return ValueField(out)


def _basis_matrices(m: int, alpha: float):
    """Values, first and second derivatives and fractional Laplacian of the real basis at the nodes."""
    x = collocation_points(m)
    half = m // 2
    k = np.arange(1, half)
    kx = np.outer(x, k)
    c, s = np.cos(kx), np.sin(kx)
    phi = np.column_stack([np.ones(m), c, s, np.cos(half * x)])
    d1 = np.column_stack([np.zeros(m), -k * s, k * c, np.zeros(m)])
    d2 = np.column_stack([np.zeros(m), -(k**2) * c, -(k**2) * s, -(half**2) * np.cos(half * x)])
    sym = np.concatenate([[0.0], k ** (2 * alpha), k ** (2 * alpha), [half ** (2 * alpha)]])
    return phi, d1, d2, phi * sym


@dataclass
class PideSolution:
    value: ValueField
    coefficients: np.ndarray  # real-basis coefficients
    condition: float
    residual: float  # ||L V - r||_inf / ||r||_inf (absolute when r = 0)


def solve_pide(prob: PideProblem, rtol: float = RESIDUAL_RTOL) -> PideSolution:
    """Collocation solve with LU, one refinement step and a residual check."""
    prob.check()
    phi, d1, d2, fr = _basis_matrices(prob.m, prob.alpha)
    b, d_o, d_f = prob.coefficients()
    a = prob.beta * phi - b[:, None] * d1 - d_o[:, None] * d2 + d_f[:, None] * fr
    r = prob.reward()
    lu = linalg.lu_factor(a, check_finite=True)
    anorm = np.linalg.norm(a, 1)
    rcond, info = linalg.lapack.dgecon(lu[0], anorm, norm="1")
    cond = math.inf if rcond == 0 else 1.0 / rcond
    if info != 0 or cond > COND_LIMIT:
        raise SolverError(f"collocation matrix is ill-conditioned (cond ~ {cond:.3e})", cond)
    coef = linalg.lu_solve(lu, r)
    coef = coef + linalg.lu_solve(lu, r - a @ coef)
    v = ValueField(phi @ coef)
    res = np.max(np.abs(apply_generator(v, prob).samples - r))
    r_norm = np.max(np.abs(r))
    rel = res / r_norm if r_norm > 0 else res
    if rel > rtol:
        raise SolverError(f"residual {rel:.3e} exceeds {rtol:.1e}", cond)
    return PideSolution(v, coef, cond, float(rel))


def manufacture_reward(v_exact: TrigPolynomial, prob: PideProblem) -> Callable:
    """r = beta V - b V' - d_o V'' + d_f (-Delta)^alpha V as a callable."""
    beta, alpha = prob.beta, prob.alpha

    def r(x):
        b, d_o, d_f = prob.coefficients(x)
        return (beta * v_exact(x) - b * v_exact.derivative(x, 1) - d_o * v_exact.derivative(x, 2)
                + d_f * v_exact.fractional_laplacian(x, alpha))

    return r


def value_error(v_hat, v_exact, norm: str = "sup") -> float:
    """sup |v_hat - v| or ||v_hat - v||_2 / ||v||_2 over the collocation points."""
    a = v_hat.samples if isinstance(v_hat, ValueField) else np.asarray(v_hat, dtype=float)
    e = v_exact.samples if isinstance(v_exact, ValueField) else np.asarray(v_exact, dtype=float)
    if a.shape != e.shape:
        raise ValueError("resolution mismatch")
    if norm == "sup":
        return float(np.max(np.abs(a - e)))
    if norm == "l2":
        return float(np.linalg.norm(a - e) / np.linalg.norm(e))
    raise ValueError(f"unknown norm {norm!r}")


# ---------------------------------------------------------------------------
# Sensitivity of the value function to coefficient errors


@dataclass
class StudyResult:
    rows: list  # (epsilon, trial, err_sup, err_l2)
    summary: dict  # epsilon -> statistics
    slope: float
    slope_ci: tuple
    redraws: int


def _bump(x, centre, width=0.5):
    d = np.angle(np.exp(1j * (x - centre)))
    return np.exp(-0.5 * (d / width) ** 2)


def perturbation_study(prob: PideProblem, v_exact: TrigPolynomial, epsilons, trials: int, seed: int = 0,
                       shape: str = "constant", max_redraws: int = 1000) -> StudyResult:
    """Solve with each coefficient shifted by an independent N(0, eps^2) amplitude.

    The reward is manufactured once from the unperturbed coefficients.
    ``shape`` selects a constant shift or a periodic Gaussian bump at a random
    centre.  Draws leaving min d_f < 1e-3 or min d_o < 0 are redrawn and counted.
    """
    if shape not in ("constant", "bump"):
        raise ValueError("shape must be 'constant' or 'bump'")
    if trials < 1:
        raise ValueError("trials must be >= 1")
    x = prob.x
    r = manufacture_reward(v_exact, prob)(x)
    v_true = v_exact(x)
    b0, o0, f0 = prob.coefficients()
    phi, d1, d2, fr = _basis_matrices(prob.m, prob.alpha)
    rng = np.random.default_rng(seed)
    rows, redraws = [], 0
    summary = {}
    for eps in epsilons:
        errs = []
        for trial in range(trials):
            for _ in range(max_redraws):
                amp = rng.normal(0.0, eps, 3)
                if shape == "constant":
                    shifts = [np.full_like(x, a) for a in amp]
                else:
                    shifts = [a * _bump(x, c) for a, c in zip(amp, rng.uniform(0, 2 * np.pi, 3))]
                b, d_o, d_f = b0 + shifts[0], o0 + shifts[1], f0 + shifts[2]
                if d_f.min() >= DF_MIN_PERTURBED and d_o.min() >= 0:
                    break
                redraws += 1
            else:
                raise SolverError(f"no admissible perturbation at eps={eps} after {max_redraws} draws")
            a = prob.beta * phi - b[:, None] * d1 - d_o[:, None] * d2 + d_f[:, None] * fr
            lu = linalg.lu_factor(a)
            coef = linalg.lu_solve(lu, r)
            coef = coef + linalg.lu_solve(lu, r - a @ coef)
            v = phi @ coef
            e_sup = float(np.max(np.abs(v - v_true)))
            e_l2 = float(np.linalg.norm(v - v_true) / np.linalg.norm(v_true))
            rows.append((float(eps), trial, e_sup, e_l2))
            errs.append(e_sup)
        errs = np.asarray(errs)
        summary[float(eps)] = {
            "mean": float(errs.mean()),
            "median": float(np.median(errs)),
            "p10": float(np.percentile(errs, 10)),
            "p90": float(np.percentile(errs, 90)),
        }
    positive = [e for e in summary if e > 0]
    slope, ci = math.nan, (math.nan, math.nan)
    if len(positive) >= 2:
        lx = np.log(positive)
        ly = np.log([summary[e]["mean"] for e in positive])
        fit = stats.linregress(lx, ly)
        slope = float(fit.slope)
        if len(positive) > 2:
            half = stats.t.ppf(0.975, len(positive) - 2) * fit.stderr
            ci = (slope - half, slope + half)
    return StudyResult(rows, summary, slope, ci, redraws)


# ---------------------------------------------------------------------------
# Persistence


def write_value_csv(path, v_hat: ValueField, v_exact=None) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        if v_exact is None:
            w.writerow(["x", "v_hat"])
            for xi, vi in zip(v_hat.x, v_hat.samples):
                w.writerow([repr(float(xi)), repr(float(vi))])
        else:
            ve = v_exact.samples if isinstance(v_exact, ValueField) else np.asarray(v_exact, dtype=float)
            w.writerow(["x", "v_hat", "v_exact", "abs_err"])
            for xi, vi, ei in zip(v_hat.x, v_hat.samples, ve):
                w.writerow([repr(float(xi)), repr(float(vi)), repr(float(ei)), repr(float(abs(vi - ei)))])


def write_study(result: StudyResult, csv_path, json_path) -> None:
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epsilon", "trial", "err_sup", "err_l2"])
        for eps, trial, e_sup, e_l2 in result.rows:
            w.writerow([repr(eps), trial, repr(e_sup), repr(e_l2)])
    summary = {
        "slope": result.slope,
        "slope_ci95": list(result.slope_ci),
        "redraws": result.redraws,
        "per_epsilon": {repr(k): v for k, v in result.summary.items()},
    }
    with open(json_path, "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
