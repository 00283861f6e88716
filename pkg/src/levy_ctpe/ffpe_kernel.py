"""Constant-coefficient fractional Fokker-Planck transition density and its gradients.

For fixed coefficients the one-step density is a one-sided cosine transform

    p(y) = (1/pi) * int_0^inf cos(y r) exp(-d_o r^2 t) exp(-d_f r^{2a} t) dr,

with a = alpha.  The integral is split at r = 1: the part on [0, 1] carries the
non-smooth factor exp(-tau z^{2a}) and is handled by moment-matched or
Taylor/Gauss-Jacobi rules, the part on [1, inf) decays slowly and is handled by
smoothly windowed truncation.  Large displacements are mapped to y = pi/2 by a
change of variables before integrating.

All functions are vectorised over queries; scalars work too.
"""

from __future__ import annotations

import math
import threading
from collections import OrderedDict
from dataclasses import dataclass
from typing import Callable, NamedTuple, Sequence

import numpy as np
from scipy import integrate, special

from .basis import DF_FLOOR, FourierBasis, ThetaMatrix

DENSITY_FLOOR = 1e-300
SCALE_TRIGGER = 10.0
Y_SCALED = math.pi / 2

TAIL_M0 = 80
TAIL_MMAX = 5120
TAIL_EPS = 1e-14
PANEL_WIDTH = 0.25
PANEL_ORDER = 8
N_GAUSS = 16
# (upper tau bound, Taylor order); tau > 1 uses the moment-matched rule
TAYLOR_BRACKETS = ((1e-3, 4), (1e-2, 6), (1e-1, 9), (1.0, 17))
K_MAX = 17

# envelope values below exp(-_LOG_CUT) are skipped in the tail panels
_LOG_CUT = 90.0
# fallback rescale for y ~ 0: envelope reaches exp(-_DECAY_TARGET) at r = _DECAY_AT
_DECAY_TARGET = 40.0
_DECAY_AT = TAIL_MMAX / 4
_CHUNK_BUDGET = 2_000_000


@dataclass(frozen=True)
class IntegrandKind:
    name: str
    oscillator: str  # "cos" or "sin"
    power: float | None  # exponent of r; None means 2*alpha

    def exponent(self, alpha: float) -> float:
        return 2.0 * alpha if self.power is None else float(self.power)


KINDS = {
    "density": IntegrandKind("density", "cos", 0.0),
    "grad_b": IntegrandKind("grad_b", "sin", 1.0),
    "grad_do": IntegrandKind("grad_do", "cos", 2.0),
    "grad_df": IntegrandKind("grad_df", "cos", None),
}
ALL_KINDS = tuple(KINDS)


@dataclass(frozen=True)
class FfpeQuery:
    """One density evaluation: displacement y = x - x0 - b t and the coefficients."""

    y: float
    t: float
    d_o: float
    d_f: float
    alpha: float

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise ValueError(f"alpha must lie in (0, 1), got {self.alpha}")
        if not self.t > 0:
            raise ValueError("t must be positive")
        if self.d_o < 0:
            raise ValueError("d_o must be nonnegative")
        if self.d_f < DF_FLOOR:
            raise ValueError(f"d_f must be >= {DF_FLOOR}")


class TailIntegral(NamedTuple):
    value: np.ndarray
    converged: np.ndarray
    m_final: np.ndarray


def taylor_order(tau):
    """Number of Taylor terms for tau <= 1 (bracket boundaries are closed on the right)."""
    tau = np.asarray(tau, dtype=float)
    return np.select(
        [tau <= b for b, _ in TAYLOR_BRACKETS], [k for _, k in TAYLOR_BRACKETS], default=-1
    )


def window(z, m: float):
    """C-infinity taper: 1 on |z| <= M/2, 0 for |z| >= M."""
    s = 2.0 * np.abs(np.asarray(z, dtype=float)) / m - 1.0
    out = np.where(s <= 0, 1.0, 0.0)
    inside = (s > 0) & (s < 1)
    si = s[inside]
    out[inside] = np.exp(-2.0 * np.exp(-1.0 / si**2) / (1.0 - si) ** 2)
    return out


def _graded_rule(n_levels: int = 52, order: int = 24):
    """Composite Gauss rule on [0, 1] with panels [2^-k-1, 2^-k]; resolves z^{2a} at 0."""
    x, w = np.polynomial.legendre.leggauss(order)
    nodes, weights = [], []
    for k in range(n_levels):
        lo, hi = 2.0 ** -(k + 1), 2.0**-k
        nodes.append(lo + (hi - lo) * (x + 1) / 2)
        weights.append((hi - lo) * w / 2)
    return np.concatenate(nodes), np.concatenate(weights)


class QuadratureTables:
    """Nodes and weights shared by every density evaluation.

    The moment-matched weights for tau > 1 are cached per exact (alpha, tau, power)
    in a bounded LRU map; insertion is guarded by a lock so one instance can be
    shared between threads.
    """

    def __init__(self, cache_size: int = 100_000):
        x, w = np.polynomial.legendre.leggauss(N_GAUSS)
        self.gauss16 = ((x + 1) / 2, w / 2)
        # legendre_matrix[n, j] = P_n(2 x_j - 1)
        self.legendre_matrix = np.polynomial.legendre.legvander(x, N_GAUSS - 1).T
        self.cache_size = cache_size
        self._weights: OrderedDict = OrderedDict()
        self._jacobi: dict = {}
        self._taylor: dict = {}
        self._tail: dict = {}
        self._lock = threading.Lock()
        self._graded = _graded_rule()
        self._graded_leg = np.polynomial.legendre.legvander(2 * self._graded[0] - 1, N_GAUSS - 1)

    def jacobi(self, beta: float, n: int = N_GAUSS):
        """Gauss rule on [0, 1] for the weight z^beta."""
        key = (float(beta), n)
        rule = self._jacobi.get(key)
        if rule is None:
            x, w = special.roots_jacobi(n, 0.0, beta)
            rule = ((x + 1) / 2, w / 2.0 ** (beta + 1))
            with self._lock:
                self._jacobi[key] = rule
        return rule

    def taylor_rule(self, alpha: float, power: float, n_terms: int = K_MAX + 1):
        """Stacked Jacobi rules for weights z^{2 alpha kappa + power}, kappa < n_terms."""
        key = (float(alpha), float(power), n_terms)
        rule = self._taylor.get(key)
        if rule is None:
            rules = [self.jacobi(2 * alpha * k + power) for k in range(n_terms)]
            nodes = np.concatenate([r[0] for r in rules])
            weights = np.stack([r[1] for r in rules])
            rule = (nodes, weights)
            with self._lock:
                self._taylor[key] = rule
        return rule

    def legendre_moments(self, alpha: float, tau: float, power: float = 0.0) -> np.ndarray:
        z, w = self._graded
        weight = w * z**power * np.exp(-tau * z ** (2 * alpha))
        return weight @ self._graded_leg

    def singular_weights(self, alpha: float, tau: float, power: float = 0.0) -> np.ndarray:
        """16 weights reproducing int_0^1 P_n(z) z^power exp(-tau z^{2a}) dz for n < 16."""
        key = (float(alpha), float(tau), float(power))
        with self._lock:
            w = self._weights.get(key)
            if w is not None:
                self._weights.move_to_end(key)
                return w
        moments = self.legendre_moments(alpha, tau, power)
        try:
            w = np.linalg.solve(self.legendre_matrix, moments)
        except np.linalg.LinAlgError as exc:
            raise np.linalg.LinAlgError(
                f"degenerate moment system for alpha={alpha}, tau={tau}"
            ) from exc
        with self._lock:
            self._weights[key] = w
            if len(self._weights) > self.cache_size:
                self._weights.popitem(last=False)
        return w

    def tail_rule(self, m: int):
        """Composite Gauss-Legendre nodes on [1, M] with the window folded into the weights."""
        rule = self._tail.get(m)
        if rule is None:
            x, w = np.polynomial.legendre.leggauss(PANEL_ORDER)
            left = 1.0 + PANEL_WIDTH * np.arange(int(round((m - 1) / PANEL_WIDTH)))
            nodes = (left[:, None] + PANEL_WIDTH * (x + 1) / 2).ravel()
            weights = np.tile(PANEL_WIDTH * w / 2, left.size) * window(nodes, m)
            rule = (nodes, weights)
            with self._lock:
                self._tail[m] = rule
        return rule

    @property
    def tail_panels(self):
        return {m: self.tail_rule(m) for m in _tail_sizes()}


def _tail_sizes():
    m = TAIL_M0
    while m <= TAIL_MMAX:
        yield m
        m *= 2


_DEFAULT_TABLES: QuadratureTables | None = None


def default_tables() -> QuadratureTables:
    global _DEFAULT_TABLES
    if _DEFAULT_TABLES is None:
        _DEFAULT_TABLES = QuadratureTables()
    return _DEFAULT_TABLES


# ---------------------------------------------------------------------------
# Integration on [0, 1]


def integrate_singular(f: Callable, alpha: float, tau, tables: QuadratureTables | None = None,
                       power: float = 0.0):
    """int_0^1 f(z) z^power exp(-tau z^{2 alpha}) dz.

    ``f`` maps a 1-D node array to values of shape (..., n_nodes), where the
    leading shape broadcasts against ``tau``.  ``power`` moves a non-smooth
    z^h factor out of ``f`` and into the quadrature weight.
    """
    tables = tables or default_tables()
    tau = np.asarray(tau, dtype=float)
    if np.any(tau <= 0):
        raise ValueError("tau must be positive")
    big = tau > 1.0
    out = None

    if np.any(~big):
        nodes, weights = tables.taylor_rule(alpha, power)
        fz = np.asarray(f(nodes), dtype=float)
        fz = fz.reshape(fz.shape[:-1] + (K_MAX + 1, N_GAUSS))
        terms = np.einsum("...kj,kj->...k", fz, weights)
        kappa = np.arange(K_MAX + 1)
        order = taylor_order(tau)[..., None]
        coef = (-tau[..., None]) ** kappa / special.factorial(kappa)
        coef = np.where(kappa <= order, coef, 0.0)
        out = np.sum(terms * coef, axis=-1)

    if np.any(big):
        nodes, _ = tables.gauss16
        fz = np.asarray(f(nodes), dtype=float)
        uniq, inverse = np.unique(tau[big], return_inverse=True)
        w_uniq = np.stack([tables.singular_weights(alpha, u, power) for u in uniq])
        w = np.zeros(tau.shape + (N_GAUSS,))
        w[big] = w_uniq[inverse]
        moment_part = np.sum(fz * w, axis=-1)
        out = moment_part if out is None else np.where(big, moment_part, out)
    return out


# ---------------------------------------------------------------------------
# Integration on [1, inf)


def _windowed_tail(panel_sum: Callable, n: int, n_out: int, z_cut, tables: QuadratureTables):
    """Doubling loop shared by the generic and the structured tail integrators.

    panel_sum(idx, nodes, weights) returns an (n_out, len(idx)) array of
    windowed panel sums for the selected elements.
    """
    value = np.zeros((n_out, n))
    prev = np.full((n_out, n), np.inf)
    active = np.ones((n_out, n), dtype=bool)
    m_final = np.zeros((n_out, n), dtype=int)
    z_cut = np.broadcast_to(np.asarray(z_cut, dtype=float), (n,))
    for m in _tail_sizes():
        elems = np.flatnonzero(active.any(axis=0))
        if elems.size == 0:
            break
        nodes, weights = tables.tail_rule(m)
        n_used = np.searchsorted(nodes, z_cut[elems], side="right")
        order = np.argsort(n_used, kind="stable")
        cur = np.zeros((n_out, elems.size))
        start = 0
        while start < order.size:
            stop = start + 1
            while stop < order.size and n_used[order[stop]] * (stop + 1 - start) <= _CHUNK_BUDGET:
                stop += 1
            sel = order[start:stop]
            k = max(int(n_used[sel].max()), 1)
            cur[:, sel] = panel_sum(elems[sel], nodes[:k], weights[:k])
            start = stop
        act = active[:, elems]
        diff = np.abs(cur - prev[:, elems])
        tol = TAIL_EPS * np.maximum(1.0, np.abs(cur))
        blk = value[:, elems]
        blk[act] = cur[act]
        value[:, elems] = blk
        mf = m_final[:, elems]
        mf[act] = m
        m_final[:, elems] = mf
        pv = prev[:, elems]
        pv[act] = cur[act]
        prev[:, elems] = pv
        done = act & (diff <= tol)
        # every node in use sits where the window is 1 for both M and 2M, so the
        # next doubling would reproduce these sums exactly
        repeat = act & np.isinf(diff) & (z_cut[elems] <= m / 2)[None, :] & (2 * m <= TAIL_MMAX)
        if repeat.any():
            mf[repeat] = 2 * m
            m_final[:, elems] = mf
            done |= repeat
        a = active[:, elems]
        a[done] = False
        active[:, elems] = a
    return value, ~active, m_final


def integrate_tail(f: Callable, alpha: float, tau, tables: QuadratureTables | None = None,
                   z_cut=None) -> TailIntegral:
    """int_1^inf f(z) exp(-tau z^{2 alpha}) dz by windowed truncation with M = 80, 160, ..., 5120.

    ``f`` maps a 1-D node array to shape tau.shape + (n_nodes,).  The result
    carries the per-element convergence flag; non-convergence is not an error.
    """
    tables = tables or default_tables()
    shape = np.shape(tau)
    tau = np.atleast_1d(np.asarray(tau, dtype=float))
    n = tau.size
    if z_cut is None:
        z_cut = np.full(n, np.inf)
    flat_tau = tau.ravel()

    def panel_sum(idx, nodes, weights):
        fz = np.asarray(f(nodes), dtype=float).reshape(n, -1)[idx]
        env = np.exp(-flat_tau[idx, None] * nodes ** (2 * alpha))
        return ((fz * env) @ weights)[None, :]

    value, conv, m_final = _windowed_tail(panel_sum, n, 1, z_cut, tables)
    return TailIntegral(value[0].reshape(shape), conv[0].reshape(shape), m_final[0].reshape(shape))


# ---------------------------------------------------------------------------
# The fundamental algorithm


def _envelope_cut(a, tau, alpha):
    """Radius beyond which exp(-a r^2 - tau r^{2 alpha}) < exp(-_LOG_CUT)."""
    with np.errstate(divide="ignore"):
        r_gauss = np.where(a > 0, np.sqrt(_LOG_CUT / np.where(a > 0, a, 1.0)), np.inf)
    r_frac = (_LOG_CUT / tau) ** (1.0 / (2 * alpha))
    return np.minimum(r_gauss, r_frac)


def _taylor_heads(specs, powers, ys, a, tau, alpha, tables):
    """Taylor-branch [0, 1] integrals for every kind from one set of function values.

    Integer exponents h multiply the smooth factor by z^h; h = 2 alpha reuses
    the Jacobi rule of the next Taylor term, whose weight is z^{2 alpha (kappa + 1)}.
    """
    nodes, weights = tables.taylor_rule(alpha, 0.0, K_MAX + 2)
    g = np.exp(-a[:, None] * nodes * nodes)
    phase = ys[:, None] * nodes
    vals = {}
    kappa = np.arange(K_MAX + 1)
    coef = (-tau[:, None]) ** kappa / special.factorial(kappa)
    coef = np.where(kappa <= taylor_order(tau)[:, None], coef, 0.0)
    out = np.empty((len(specs), ys.size))
    for i, s in enumerate(specs):
        if s.oscillator not in vals:
            osc = np.cos if s.oscillator == "cos" else np.sin
            vals[s.oscillator] = (osc(phase) * g).reshape(ys.size, K_MAX + 2, N_GAUSS)
        fz = vals[s.oscillator]
        if s.power is None:
            terms = np.einsum("nkj,kj->nk", fz[:, 1:], weights[1:])
        else:
            zh = nodes.reshape(K_MAX + 2, N_GAUSS)[:K_MAX + 1] ** powers[i]
            terms = np.einsum("nkj,kj->nk", fz[:, :-1], weights[:-1] * zh)
        out[i] = np.sum(terms * coef, axis=1)
    return out


def _scaled_eval(kinds: Sequence[str], y, t, d_o, d_f, alpha, lam, tables):
    """lam^{h+1} * int_0^inf u^h osc(lam y u) exp(-d_o lam^2 t u^2 - d_f lam^{2a} t u^{2a}) du."""
    ys = lam * y
    a = d_o * lam**2 * t
    tau = d_f * lam ** (2 * alpha) * t
    specs = [KINDS[k] for k in kinds]
    powers = np.array([s.exponent(alpha) for s in specs])
    need_sin = any(s.oscillator == "sin" for s in specs)

    head = np.empty((len(specs), y.size))
    small = tau <= 1.0
    if small.any():
        head[:, small] = _taylor_heads(specs, powers, ys[small], a[small], tau[small], alpha, tables)
    if (~small).any():
        big = ~small
        for i, s in enumerate(specs):
            osc = np.sin if s.oscillator == "sin" else np.cos

            def f(z, osc=osc):
                return osc(ys[big, None] * z) * np.exp(-a[big, None] * z * z)

            head[i, big] = integrate_singular(f, alpha, tau[big], tables, power=powers[i])

    cos_rows = [i for i, s in enumerate(specs) if s.oscillator == "cos"]
    sin_rows = [i for i, s in enumerate(specs) if s.oscillator == "sin"]

    def panel_sum(idx, nodes, weights):
        env = np.exp(-a[idx, None] * nodes**2 - tau[idx, None] * nodes ** (2 * alpha))
        phase = ys[idx, None] * nodes
        out = np.empty((len(specs), idx.size))
        if cos_rows:
            c = np.cos(phase) * env
            for i in cos_rows:
                out[i] = c @ (weights * nodes ** powers[i])
        if need_sin:
            s_ = np.sin(phase) * env
            for i in sin_rows:
                out[i] = s_ @ (weights * nodes ** powers[i])
        return out

    z_cut = _envelope_cut(a, tau, alpha)
    tail, conv, _ = _windowed_tail(panel_sum, y.size, len(specs), z_cut, tables)
    scale = lam[None, :] ** (powers[:, None] + 1.0)
    return scale * (head + tail), conv


def _fallback_scale(ay, tau, alpha):
    """Rescale factor for a y <= 10 query whose tail did not converge."""
    lam_y = np.where(ay > 0, Y_SCALED / np.where(ay > 0, ay, 1.0), np.inf)
    lam_decay = (_DECAY_TARGET / tau) ** (1.0 / (2 * alpha)) / _DECAY_AT
    return np.minimum(lam_y, np.maximum(lam_decay, 1.0))


class KernelResult(NamedTuple):
    values: np.ndarray  # (n_kinds,) + shape
    converged: np.ndarray
    scaled: np.ndarray  # scaling branch taken (per element)


def density_integrals(kinds: Sequence[str], y, t, d_o, d_f, alpha: float,
                      tables: QuadratureTables | None = None) -> KernelResult:
    """Evaluate several integrand kinds for a batch of queries sharing one alpha."""
    tables = tables or default_tables()
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha must lie in (0, 1), got {alpha}")
    y, t, d_o, d_f = np.broadcast_arrays(*(np.asarray(v, dtype=float) for v in (y, t, d_o, d_f)))
    shape = y.shape
    y, t, d_o, d_f = (v.ravel() for v in (y, t, d_o, d_f))
    if np.any(t <= 0):
        raise ValueError("t must be positive")
    d_o = np.maximum(d_o, 0.0)
    d_f = np.maximum(d_f, DF_FLOOR)
    ay = np.abs(y)

    far = ay > SCALE_TRIGGER
    lam = np.where(far, Y_SCALED / np.where(far, ay, 1.0), 1.0)
    values, conv = _scaled_eval(kinds, y, t, d_o, d_f, alpha, lam, tables)
    scaled = far.copy()

    redo = ~conv & ~far[None, :]
    elems = np.flatnonzero(redo.any(axis=0))
    if elems.size:
        lam2 = _fallback_scale(ay[elems], d_f[elems] * t[elems], alpha)
        v2, c2 = _scaled_eval(kinds, y[elems], t[elems], d_o[elems], d_f[elems], alpha, lam2, tables)
        r = redo[:, elems]
        values[:, elems] = np.where(r, v2, values[:, elems])
        conv[:, elems] = np.where(r, c2, conv[:, elems])
        scaled[elems] = True

    out_shape = (len(kinds),) + shape
    return KernelResult(values.reshape(out_shape), conv.reshape(out_shape), scaled.reshape(shape))


def density_integral(kind: str | IntegrandKind, q: FfpeQuery, tables: QuadratureTables | None = None) -> float:
    """int_0^inf r^h osc(y r) exp(-d_o r^2 t) exp(-d_f r^{2a} t) dr for one query."""
    name = kind.name if isinstance(kind, IntegrandKind) else kind
    res = density_integrals((name,), q.y, q.t, q.d_o, q.d_f, q.alpha, tables)
    return float(res.values[0])


def transition_density(q: FfpeQuery | None = None, tables: QuadratureTables | None = None, *,
                       y=None, t=None, d_o=None, d_f=None, alpha=None):
    """p(y) = (1/pi) * density integral, floored at 1e-300.

    Pass either an FfpeQuery or array keywords (y, t, d_o, d_f, alpha).
    """
    if q is not None:
        y, t, d_o, d_f, alpha = q.y, q.t, q.d_o, q.d_f, q.alpha
    res = density_integrals(("density",), y, t, d_o, d_f, alpha, tables)
    p = np.maximum(res.values[0] / math.pi, DENSITY_FLOOR)
    return float(p) if np.ndim(p) == 0 else p


def _mass_eval(u, c, t, d_o, d_f, alpha, lam, tables):
    """int_0^inf cos(u r) sin(c r)/r E(r) dr after the substitution r = lam v."""
    a = d_o * lam**2 * t
    tau = d_f * lam ** (2 * alpha) * t
    us, cs = u * lam, c * lam

    def f(z):
        z = np.asarray(z)
        return (np.cos(us[:, None] * z) * cs[:, None] * np.sinc(cs[:, None] * z / math.pi)
                * np.exp(-a[:, None] * z * z))

    head = integrate_singular(f, alpha, tau, tables)
    tail = integrate_tail(f, alpha, tau, tables, z_cut=_envelope_cut(a, tau, alpha))
    return head + tail.value, tail.converged


def central_mass(u, c, t, d_o, d_f, alpha: float, tables: QuadratureTables | None = None):
    """P(|Y - u| <= c) for Y with the constant-coefficient density centred at 0.

    Integrating the cosine representation over [u - c, u + c] gives

        (2/pi) * int_0^inf cos(u r) sin(c r)/r exp(-d_o r^2 t - d_f r^{2a} t) dr,

    evaluated with the same head/tail split and rescaling as the density.
    """
    tables = tables or default_tables()
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha must lie in (0, 1), got {alpha}")
    u, c, t, d_o, d_f = np.broadcast_arrays(*(np.asarray(v, dtype=float) for v in (u, c, t, d_o, d_f)))
    shape = u.shape
    u, c, t, d_o, d_f = (v.ravel() for v in (u, c, t, d_o, d_f))
    if np.any(c <= 0) or np.any(t <= 0):
        raise ValueError("c and t must be positive")
    d_o = np.maximum(d_o, 0.0)
    d_f = np.maximum(d_f, DF_FLOOR)
    freq = np.abs(u) + c
    far = freq > SCALE_TRIGGER
    lam = np.where(far, Y_SCALED / np.where(far, freq, 1.0), 1.0)
    val, conv = _mass_eval(u, c, t, d_o, d_f, alpha, lam, tables)
    redo = np.flatnonzero(~conv & ~far)
    if redo.size:
        lam2 = _fallback_scale(freq[redo], d_f[redo] * t[redo], alpha)
        v2, _ = _mass_eval(u[redo], c[redo], t[redo], d_o[redo], d_f[redo], alpha, lam2, tables)
        val[redo] = v2
    mass = np.clip(2.0 * val / math.pi, 0.0, 1.0).reshape(shape)
    return float(mass) if mass.ndim == 0 else mass


# ---------------------------------------------------------------------------
# Log-likelihood gradients


@dataclass(frozen=True)
class TransitionPair:
    x_current: float
    x_next: float
    dt: float

    @property
    def dx(self) -> float:
        return self.x_next - self.x_current


def _pair_terms(x_cur, x_next, dt, theta: ThetaMatrix, alpha):
    phi = theta.basis(x_cur)
    raw = phi @ theta.values.T
    b = raw[..., 0]
    d_o = np.maximum(0.0, raw[..., 1])
    d_f = np.maximum(DF_FLOOR, raw[..., 2])
    y = x_next - x_cur - dt * b
    return phi, y, d_o, d_f


def neg_loglik_and_grad(x_cur, x_next, dt, theta: ThetaMatrix, alpha: float,
                        tables: QuadratureTables | None = None):
    """Per-pair -ln p and -grad ln p (shape (n, 3K)) for arrays of transition pairs."""
    x_cur, x_next, dt = (np.atleast_1d(np.asarray(v, dtype=float)) for v in (x_cur, x_next, dt))
    x_cur, x_next, dt = np.broadcast_arrays(x_cur, x_next, dt)
    phi, y, d_o, d_f = _pair_terms(x_cur, x_next, dt, theta, alpha)
    res = density_integrals(ALL_KINDS, y, dt, d_o, d_f, alpha, tables)
    dens, i_b, i_do, i_df = res.values
    p = np.maximum(dens / math.pi, DENSITY_FLOOR)
    p_b = dt * i_b / math.pi
    p_do = -dt * i_do / math.pi
    p_df = -dt * i_df / math.pi
    grad = np.concatenate([phi * (p_b / p)[:, None], phi * (p_do / p)[:, None],
                           phi * (p_df / p)[:, None]], axis=1)
    return -np.log(p), -grad


def loglik_grad_direct(pair: TransitionPair, theta: ThetaMatrix, basis: FourierBasis | None = None,
                       tables: QuadratureTables | None = None, *, alpha: float) -> np.ndarray:
    """Gradient of -ln p for one pair, flattened in (drift, Brownian, fractional) row order."""
    if basis is not None and basis != theta.basis:
        raise ValueError("basis does not match theta")
    _, g = neg_loglik_and_grad(pair.x_current, pair.x_next, pair.dt, theta, alpha, tables)
    g = g[0]
    if not np.all(np.isfinite(g)):
        raise FloatingPointError("non-finite gradient (density underflow)")
    return g


def neg_log_density(x_cur, x_next, dt, theta: ThetaMatrix, alpha: float,
                    tables: QuadratureTables | None = None):
    x_cur, x_next, dt = np.broadcast_arrays(*(np.atleast_1d(np.asarray(v, dtype=float))
                                              for v in (x_cur, x_next, dt)))
    _, y, d_o, d_f = _pair_terms(x_cur, x_next, dt, theta, alpha)
    p = transition_density(y=y, t=dt, d_o=d_o, d_f=d_f, alpha=alpha, tables=tables)
    return -np.log(p)


def loglik_grad_fd(pair: TransitionPair, theta: ThetaMatrix, basis: FourierBasis | None = None,
                   tables: QuadratureTables | None = None, b_fd: int = 10,
                   rng: np.random.Generator | None = None, *, alpha: float,
                   step_range=(0.001, 0.1)) -> np.ndarray:
    """Sparse one-sided difference gradient of -ln p over at most b_fd random components."""
    if b_fd < 1:
        raise ValueError("b_fd must be >= 1")
    rng = rng if rng is not None else np.random.default_rng()
    flat = theta.flat
    n = flat.size
    picks = rng.choice(n, size=min(b_fd, n), replace=False)
    steps = rng.uniform(*step_range, size=picks.size) * rng.choice([-1.0, 1.0], size=picks.size)
    base = neg_log_density(pair.x_current, pair.x_next, pair.dt, theta, alpha, tables)[0]
    grad = np.zeros(n)
    for m, h in zip(picks, steps):
        pert = theta.copy()
        pert.values.reshape(-1)[m] += h
        val = neg_log_density(pair.x_current, pair.x_next, pair.dt, pert, alpha, tables)[0]
        grad[m] = (val - base) / h
    if not np.all(np.isfinite(grad)):
        raise FloatingPointError("non-finite gradient (density underflow)")
    return grad


# ---------------------------------------------------------------------------
# Independent oracle


def _oracle_radius(rate, log_bound: float) -> float:
    r = 1.0
    while rate(r) < log_bound:
        r *= 2.0
    return r


def _quad_panels(fn, r_max, tol):
    total, err = 0.0, 0.0
    edges = [0.0, 1.0]
    while edges[-1] < r_max:
        edges.append(min(edges[-1] * 2.0, r_max))
    for lo, hi in zip(edges[:-1], edges[1:]):
        v, e = integrate.quad(fn, lo, hi, epsabs=0.0, epsrel=tol, limit=500)
        total += v
        err += e
    return total, err


def brute_force_density(q: FfpeQuery, tol: float = 1e-10, kind: str = "density") -> float:
    """Independent adaptive-quadrature evaluation of the transition density (or a gradient integral).

    y = 0 integrates the positive integrand on the real axis over [0, R], R being
    where the envelope falls below 1e-20.  For y != 0 the real-axis integrand
    cancels to many digits in the far tail, so the integral of
    r^h exp(i y r) E(r) is taken along the ray r = s exp(i phi), where
    exp(i y r) is damped and the envelope still decays.  No splitting, windowing
    or rescaling is involved.  Raises RuntimeError when the summed QUADPACK error
    estimate exceeds ``tol`` relative to the result.
    """
    if tol < 1e-13:
        raise ValueError("tol must be >= 1e-13")
    spec = KINDS[kind]
    h = spec.exponent(q.alpha)
    a2 = 2 * q.alpha
    y = abs(q.y)
    sign = -1.0 if (spec.oscillator == "sin" and q.y < 0) else 1.0

    if y == 0:
        if spec.oscillator == "sin":
            return 0.0

        def rate(r):
            return (q.d_o * r * r + q.d_f * r**a2) * q.t

        r_max = _oracle_radius(rate, math.log(1e20))
        total, err = _quad_panels(lambda r: r**h * math.exp(-rate(r)), r_max, min(tol, 1e-12))
    else:
        limit = math.pi / 4 if q.d_o > 0 else math.pi / 2
        phi = 0.9 * min(limit, math.pi / (2 * a2))
        rot = complex(math.cos(phi), math.sin(phi))
        rot2, rot_a = rot * rot, rot**a2
        damp = y * math.sin(phi)

        def rate(s):
            return damp * s + q.t * (q.d_o * rot2.real * s * s + q.d_f * rot_a.real * s**a2)

        def value(s):
            r = s * rot
            c = rot * r**h * np.exp(1j * y * r - q.t * (q.d_o * r * r + q.d_f * s**a2 * rot_a))
            return c

        r_max = _oracle_radius(rate, math.log(1e30))
        part = (lambda s: value(s).real) if spec.oscillator == "cos" else (lambda s: value(s).imag)
        total, err = _quad_panels(part, r_max, min(tol, 1e-12))
    if err > tol * abs(total) and err > 1e-300:
        raise RuntimeError(f"oracle error estimate {err:.3g} exceeds tolerance for {q}")
    total *= sign
    return total / math.pi if kind == "density" else total
