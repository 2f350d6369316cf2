"""Convex regularization functionals, their gradients and Bregman distances.

Every penalty exposes the discrete functional value, the L2-representation of
its gradient (so ``<gradient, h>_L2`` equals the directional derivative of
the discrete value exactly) and the Bregman distance built from both.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import InvalidInputError
from .grids import (
    FloatArray,
    Grid,
    Surface,
    h1_gradient_field,
    h1_norm_sq,
    l2_inner,
    trapezoid_weights,
)


class Penalty:
    """Base class; subclasses implement ``value`` and ``gradient_field``."""

    kind: str

    def __init__(self, a0: Surface):
        self.a0 = a0

    def value(self, a: Surface) -> float:
        raise NotImplementedError

    def gradient_field(self, a: Surface) -> Surface:
        raise NotImplementedError

    def bregman(self, a2: Surface, a1: Surface) -> float:
        """Convexity gap value(a2) - value(a1) - <grad(a1), a2 - a1>."""
        grad = self.gradient_field(a1)
        return self.value(a2) - self.value(a1) - l2_inner(grad, a2 - a1)

    def _check_grid(self, a: Surface):
        if a.grid != self.a0.grid:
            raise InvalidInputError("surface grid does not match the penalty reference")


class L2Penalty(Penalty):
    """Squared L2 distance to the reference surface."""

    kind = "l2_squared"

    def value(self, a: Surface) -> float:
        self._check_grid(a)
        s = a.values - self.a0.values
        return float(np.sum(trapezoid_weights(a.grid) * s**2))

    def gradient_field(self, a: Surface) -> Surface:
        self._check_grid(a)
        return Surface(a.grid, 2.0 * (a.values - self.a0.values))


class H1Penalty(Penalty):
    """Squared H1 distance to the reference surface."""

    kind = "h1_squared"

    def value(self, a: Surface) -> float:
        self._check_grid(a)
        return h1_norm_sq(a - self.a0)

    def gradient_field(self, a: Surface) -> Surface:
        self._check_grid(a)
        return Surface(a.grid, h1_gradient_field(a - self.a0))


class KullbackLeiblerPenalty(Penalty):
    """KL divergence of ``a`` from the reference, int a log(a/a0) - (a - a0).

    The reference must be strictly positive; so must every argument.
    """

    kind = "kullback_leibler"

    def __init__(self, a0: Surface):
        if (a0.values <= 0.0).any():
            raise InvalidInputError("KL reference surface must be strictly positive")
        super().__init__(a0)

    def _check_positive(self, a: Surface):
        self._check_grid(a)
        if (a.values <= 0.0).any():
            raise InvalidInputError("KL penalty requires strictly positive surfaces")

    def value(self, a: Surface) -> float:
        self._check_positive(a)
        v, v0 = a.values, self.a0.values
        integrand = v * np.log(v / v0) - (v - v0)
        return float(np.sum(trapezoid_weights(a.grid) * integrand))

    def gradient_field(self, a: Surface) -> Surface:
        self._check_positive(a)
        return Surface(a.grid, np.log(a.values / self.a0.values))


@lru_cache(maxsize=None)
def cosine_modes(grid: Grid, n_modes: int) -> FloatArray:
    """First ``n_modes`` tensor cosine modes, orthonormal under the trapezoid rule.

    Modes are ordered by total frequency; mode indices stay below the node
    count per axis so discrete orthogonality is exact.
    """
    t_span = grid.tau_max - grid.tau_min
    y_span = grid.y_max - grid.y_min
    ts = (grid.tau_nodes() - grid.tau_min) / t_span
    ys = (grid.y_nodes() - grid.y_min) / y_span

    def axis_mode(order: int, coords: FloatArray, span: float) -> FloatArray:
        if order == 0:
            return np.full_like(coords, 1.0 / np.sqrt(span))
        return np.sqrt(2.0 / span) * np.cos(order * np.pi * coords)

    max_t = grid.n_tau - 1
    max_y = grid.n_y - 1
    pairs = sorted(
        ((p, q) for p in range(max_t + 1) for q in range(max_y + 1)),
        key=lambda pq: (pq[0] + pq[1], pq[0], pq[1]),
    )
    if n_modes > len(pairs):
        raise InvalidInputError(
            f"grid supports at most {len(pairs)} orthonormal modes, asked for {n_modes}"
        )
    modes = np.empty((n_modes, grid.n_tau + 1, grid.n_y + 1))
    for k, (p, q) in enumerate(pairs[:n_modes]):
        modes[k] = np.outer(axis_mode(p, ts, t_span), axis_mode(q, ys, y_span))
    modes.setflags(write=False)
    return modes


class FiniteModesPenalty(Penalty):
    """Energy of ``a - a0`` captured by the first ``n_modes`` cosine modes."""

    kind = "finite_quadratic"

    def __init__(self, a0: Surface, n_modes: int):
        if n_modes < 1:
            raise InvalidInputError("need at least one mode")
        super().__init__(a0)
        self.n_modes = int(n_modes)

    def _coefficients(self, a: Surface) -> FloatArray:
        modes = cosine_modes(a.grid, self.n_modes)
        w = trapezoid_weights(a.grid)
        s = a.values - self.a0.values
        return np.tensordot(modes, w * s, axes=((1, 2), (0, 1)))

    def value(self, a: Surface) -> float:
        self._check_grid(a)
        return float(np.sum(self._coefficients(a) ** 2))

    def gradient_field(self, a: Surface) -> Surface:
        self._check_grid(a)
        modes = cosine_modes(a.grid, self.n_modes)
        coeffs = self._coefficients(a)
        return Surface(a.grid, 2.0 * np.tensordot(coeffs, modes, axes=(0, 0)))


def entropy(a: Surface) -> float:
    """Boltzmann-Shannon entropy, int a log a over D (trapezoid rule)."""
    if (a.values <= 0.0).any():
        raise InvalidInputError("entropy requires a strictly positive surface")
    return float(np.sum(trapezoid_weights(a.grid) * a.values * np.log(a.values)))


class BoltzmannShannonEntropy:
    """Entropy functional with the same interface as a penalty (no reference)."""

    def value(self, a: Surface) -> float:
        return entropy(a)

    def gradient_field(self, a: Surface) -> Surface:
        if (a.values <= 0.0).any():
            raise InvalidInputError("entropy requires a strictly positive surface")
        return Surface(a.grid, 1.0 + np.log(a.values))

    def bregman(self, a2: Surface, a1: Surface) -> float:
        grad = self.gradient_field(a1)
        return self.value(a2) - self.value(a1) - l2_inner(grad, a2 - a1)


def make_penalty(spec: str, a0: Surface) -> Penalty:
    """Build a penalty from a CLI-style selector: l2 | h1 | kl | modes:<n>."""
    spec = spec.strip().lower()
    if spec == "l2":
        return L2Penalty(a0)
    if spec == "h1":
        return H1Penalty(a0)
    if spec == "kl":
        return KullbackLeiblerPenalty(a0)
    if spec.startswith("modes:"):
        try:
            n = int(spec.split(":", 1)[1])
        except ValueError as exc:
            raise InvalidInputError(f"bad mode count in penalty spec {spec!r}") from exc
        return FiniteModesPenalty(a0, n)
    raise InvalidInputError(
        f"unknown penalty {spec!r}; expected l2, h1, kl or modes:<n>"
    )
