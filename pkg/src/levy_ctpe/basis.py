"""Real Fourier basis on the periodic cell (0, 2*pi] and the 3 x K coefficient matrix."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

DO_FLOOR = 0.0
DF_FLOOR = 1e-8


@dataclass(frozen=True)
class FourierBasis:
    """phi_1 = 1, phi_{2m} = cos(m x), phi_{2m+1} = sin(m x) for m = 1..n_modes."""

    n_modes: int

    def __post_init__(self):
        if self.n_modes < 0:
            raise ValueError("n_modes must be >= 0")

    @property
    def size(self) -> int:
        return 2 * self.n_modes + 1

    def __call__(self, x) -> np.ndarray:
        """Evaluate all K basis functions; returns shape x.shape + (K,)."""
        x = np.asarray(x, dtype=float)
        out = np.empty(x.shape + (self.size,))
        out[..., 0] = 1.0
        if self.n_modes:
            m = np.arange(1, self.n_modes + 1)
            mx = x[..., None] * m
            out[..., 1::2] = np.cos(mx)
            out[..., 2::2] = np.sin(mx)
        return out

    def project(self, fn, n_points: int = 4096) -> np.ndarray:
        """Trapezoidal L2 projection of a periodic function onto the basis."""
        x = 2 * np.pi * np.arange(n_points) / n_points
        phi = self(x)
        fx = np.asarray(fn(x), dtype=float)
        coef = phi.T @ fx / n_points
        coef[1:] *= 2.0
        return coef


@dataclass
class ThetaMatrix:
    """Coefficients theta[l, k] of (drift, Brownian diffusion, fractional diffusion).

    Storage is unconstrained; the diffusion floors are applied when evaluating.
    """

    basis: FourierBasis
    values: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.values is None:
            self.values = np.zeros((3, self.basis.size))
        self.values = np.array(self.values, dtype=float).reshape(3, self.basis.size)

    @classmethod
    def constant(cls, b: float, d_o: float, d_f: float, n_modes: int = 0) -> "ThetaMatrix":
        theta = cls(FourierBasis(n_modes))
        theta.values[:, 0] = (b, d_o, d_f)
        return theta

    @classmethod
    def from_fields(cls, basis: FourierBasis, b, d_o, d_f, n_points: int = 4096) -> "ThetaMatrix":
        return cls(basis, np.stack([basis.project(fn, n_points) for fn in (b, d_o, d_f)]))

    @property
    def flat(self) -> np.ndarray:
        return self.values.reshape(-1)

    def copy(self) -> "ThetaMatrix":
        return ThetaMatrix(self.basis, self.values.copy())

    def raw(self, x) -> np.ndarray:
        """Unclamped expansions, shape (3,) + x.shape."""
        phi = self.basis(x)
        return np.moveaxis(phi @ self.values.T, -1, 0)

    def evaluate(self, x):
        """(b, d_o, d_f) at x with d_o >= 0 and d_f >= 1e-8."""
        b, d_o, d_f = self.raw(x)
        return b, np.maximum(DO_FLOOR, d_o), np.maximum(DF_FLOOR, d_f)


def evaluate_coefficients(theta: ThetaMatrix, basis: FourierBasis, x):
    if basis != theta.basis:
        raise ValueError("basis does not match theta")
    return theta.evaluate(x)
