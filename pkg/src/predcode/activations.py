"""Elementwise activation functions and their derivatives."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import ArgumentError


@dataclass(frozen=True)
class Activation:
    name: str
    f: Callable[[np.ndarray], np.ndarray]
    df: Callable[[np.ndarray], np.ndarray]

    @property
    def is_linear(self) -> bool:
        return self.name == "identity"

    def __call__(self, x):
        return self.f(x)


def _logistic(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _dlogistic(x):
    s = _logistic(x)
    return s * (1.0 - s)


ACTIVATIONS = {
    "identity": Activation("identity", lambda x: np.asarray(x, dtype=float), lambda x: np.ones_like(x, dtype=float)),
    "tanh": Activation("tanh", np.tanh, lambda x: 1.0 - np.tanh(x) ** 2),
    "rectifier": Activation("rectifier", lambda x: np.maximum(x, 0.0), lambda x: (np.asarray(x) > 0).astype(float)),
    "logistic": Activation("logistic", _logistic, _dlogistic),
}


def get_activation(kind: str | Activation) -> Activation:
    if isinstance(kind, Activation):
        return kind
    try:
        return ACTIVATIONS[kind]
    except KeyError:
        raise ArgumentError(f"unknown activation {kind!r}; expected one of {sorted(ACTIVATIONS)}") from None
