"""Shared numerical oracles for the test suite."""

import math

import numpy as np

from levy_ctpe.coeff_recovery import stable_tail_bound
from levy_ctpe.ffpe_kernel import transition_density


def density_scale(t, d_o, d_f, alpha):
    return max(math.sqrt(2.0 * d_o * t), (d_f * t) ** (1.0 / (2.0 * alpha)))


def total_mass(t, d_o, d_f, alpha, tables=None, y_max=None, ratio=2.0, order=16):
    """2 * int_0^{y_max} p dy by Gauss-Legendre on graded panels, plus the stable tail beyond.

    The default y_max of 1e7 scale lengths keeps the next term of the tail
    expansion well below 1e-7 even for alpha = 0.3.
    """
    scale = density_scale(t, d_o, d_f, alpha)
    y_max = 1e7 * scale if y_max is None else y_max
    core = 4.0 * scale
    edges = list(np.linspace(0.0, core, 17))
    while edges[-1] < y_max:
        edges.append(min(edges[-1] * ratio, y_max))
    edges = np.asarray(edges)
    x, w = np.polynomial.legendre.leggauss(order)
    half = 0.5 * np.diff(edges)
    nodes = (edges[:-1, None] + half[:, None] * (x + 1.0)).ravel()
    weights = (half[:, None] * w).ravel()
    p = transition_density(y=nodes, t=t, d_o=d_o, d_f=d_f, alpha=alpha, tables=tables)
    return 2.0 * float(weights @ p) + stable_tail_bound(y_max, d_f, t, alpha)


def cauchy_density(y, scale):
    return scale / (math.pi * (scale**2 + np.asarray(y) ** 2))


def gaussian_density(y, var):
    return np.exp(-np.asarray(y) ** 2 / (2.0 * var)) / math.sqrt(2.0 * math.pi * var)


def oracle_tail_ratio(ct, d_o=4.0, d_f=3.0, alpha=0.3, dt=1 / 40):
    """P(|Y| > ct) for the centred one-step density, from the brute-force oracle."""
    from scipy import integrate

    from levy_ctpe.ffpe_kernel import FfpeQuery, brute_force_density

    def q(y):
        return brute_force_density(FfpeQuery(y, dt, d_o, d_f, alpha), tol=1e-9)

    inner, _ = integrate.quad(q, 0.0, ct, epsabs=1e-12, limit=200, points=[0.5, 2.0])
    return 1.0 - 2.0 * inner
