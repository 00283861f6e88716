"""Named closed-form coefficient sets (b, D_o, D_f)."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .levy_sim import SdeSpec


@dataclass(frozen=True)
class GroundTruth:
    name: str
    b: Callable
    d_o: Callable
    d_f: Callable
    n_modes: int  # basis size the examples fit with

    @property
    def fields(self):
        return self.b, self.d_o, self.d_f

    def sde(self, alpha: float) -> SdeSpec:
        return SdeSpec.from_diffusions(self.b, self.d_o, self.d_f, alpha, name=self.name)


def _const(c):
    return lambda x: np.full(np.shape(x), float(c))


def _ex42_b(x):
    return 4.0 * np.abs(np.mod(x, 2 * np.pi) - np.pi) - 2 * np.pi


def _ex42_do(x):
    return np.exp(np.sin(np.asarray(x) + 1.0) + 1.0)


def _ex42_df(x):
    x = np.asarray(x)
    return 2.0 + np.exp(np.sin(2 * x) * np.cos(3 * x))


def _study_b(x):
    return np.sin(x) ** 4


def _study_do(x):
    return np.cos(x) ** 2 + np.abs(np.sin(x))


def _study_df(x):
    return np.sin(4 * np.asarray(x)) + 2.0


REGISTRY = {
    "const_543": GroundTruth("const_543", _const(5.0), _const(4.0), _const(3.0), 0),
    "ex42": GroundTruth("ex42", _ex42_b, _ex42_do, _ex42_df, 10),
    "study422": GroundTruth("study422", _study_b, _study_do, _study_df, 10),
}


def get_truth(name: str) -> GroundTruth:
    try:
        return REGISTRY[name]
    except KeyError:
        raise KeyError(f"unknown ground truth {name!r}; known: {sorted(REGISTRY)}") from None
