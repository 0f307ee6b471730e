"""Convergence constants and bounds for stale-update split training.

Formula evaluation only: the smoothness constants are supplied by the user.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

from .errors import ConfigError


@dataclass(frozen=True)
class SmoothnessConstants:
    """Loss is ``G_ell``-smooth with ``L_ell``-Lipschitz gradient; each client's
    prediction function is ``G_f``-smooth with ``L_f``-Lipschitz gradient."""

    G_ell: float
    L_ell: float
    G_f: float
    L_f: float

    def __post_init__(self):
        for name in ("G_ell", "L_ell", "G_f", "L_f"):
            v = getattr(self, name)
            if not (isinstance(v, (int, float)) and math.isfinite(v) and v > 0):
                raise ConfigError(f"{name} must be a positive finite number, got {v!r}")


@dataclass(frozen=True)
class BoundInputs:
    M: int
    Q: int
    T: int
    S: int
    d: int
    delta: float
    delta_L: float
    eta: float = 0.0

    def __post_init__(self):
        for name in ("M", "Q", "T", "S", "d"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be at least 1, got {getattr(self, name)}")
        if not 0.0 < self.delta < 1.0:
            raise ConfigError(f"delta must lie in (0, 1), got {self.delta}")
        if self.delta_L < 0:
            raise ConfigError(f"the initial optimality gap must be non-negative, got {self.delta_L}")
        if self.eta < 0:
            raise ConfigError(f"eta must be non-negative, got {self.eta}")


def c0(k: SmoothnessConstants) -> float:
    """Lipschitz constant of the objective's gradient."""
    return k.G_ell * k.L_f + k.L_ell * k.G_f ** 2


def sigma_var(k: SmoothnessConstants, S: int, d: int, delta: float) -> float:
    """Variance bound of the sampled stochastic gradient, holding with prob. ``1 - delta``.

    ``delta = 1`` is accepted as the limiting case of the logarithm.
    """
    if S < 1 or d < 1:
        raise ConfigError("S and d must be at least 1")
    if not 0.0 < delta <= 1.0:
        raise ConfigError(f"delta must lie in (0, 1], got {delta}")
    lg = math.log(2.0 * d / delta)
    return (64.0 * k.G_ell ** 2 * k.L_f ** 2 * lg
            + 128.0 * k.L_ell ** 2 * (k.G_f ** 4 + 1.0 / S) * (lg + 0.25))


def max_step_size(c0_value: float, Q: int, M: int) -> float:
    if c0_value <= 0 or Q < 1 or M < 1:
        raise ConfigError("max_step_size needs c0 > 0, Q >= 1, M >= 1")
    return 1.0 / (c0_value * (1.0 + 2.0 * Q * Q * M))


def grad_norm_bound(inputs: BoundInputs, c0_value: float, sigma: float) -> float:
    """Bound on the squared gradient norm averaged over all ``T * Q`` updates."""
    limit = max_step_size(c0_value, inputs.Q, inputs.M)
    if inputs.eta <= 0:
        raise ConfigError("the bound needs a positive step size")
    if inputs.eta > limit:
        raise ConfigError(f"step size {inputs.eta:g} exceeds the admissible maximum {limit:g}; "
                          "the bound does not hold")
    M, Q, T, eta = inputs.M, inputs.Q, inputs.T, inputs.eta
    first = 2.0 * inputs.delta_L / (eta * T * Q)
    second = 28.0 * eta * M * (c0_value + math.sqrt(M + 1) * Q) * sigma / 3.0
    return first + second


def local_steps_limit(c0_value: float, M: int) -> float:
    """Largest ``Q`` for which the tuned step size below is valid."""
    return c0_value / math.sqrt(M + 1)


def suggested_step(inputs: BoundInputs, c0_value: float, sigma: float) -> float:
    """Step size balancing the two terms of :func:`grad_norm_bound`."""
    limit = local_steps_limit(c0_value, inputs.M)
    if inputs.Q > limit:
        raise ConfigError(f"tuned step size requires Q <= c0 / sqrt(M + 1) = {limit:g}, got Q={inputs.Q}")
    if inputs.delta_L == 0:
        # degenerate: already optimal, nothing to balance
        return 0.0
    return math.sqrt(3.0 * inputs.delta_L / (28.0 * inputs.M * c0_value * sigma * inputs.T * inputs.Q))


def tuned_rate(inputs: BoundInputs, c0_value: float, sigma: float) -> float:
    """Closed-form bound at the suggested step; tight when ``Q`` sits at its limit."""
    return 8.0 * math.sqrt(7.0 * inputs.delta_L * inputs.M * c0_value * sigma / (3.0 * inputs.T * inputs.Q))


def min_rounds(inputs: BoundInputs, c0_value: float, sigma: float) -> int:
    """Smallest ``T`` for which :func:`suggested_step` does not exceed :func:`max_step_size`."""
    M, Q = inputs.M, inputs.Q
    need = 3.0 * inputs.delta_L * c0_value * (1.0 + 2.0 * Q * Q * M) ** 2 / (28.0 * M * sigma * Q)
    T = max(1, math.ceil(need))
    # guard against rounding at the boundary
    while suggested_step(_with_T(inputs, T), c0_value, sigma) > max_step_size(c0_value, Q, M):
        T += 1
    return T


def _with_T(inputs: BoundInputs, T: int) -> BoundInputs:
    return BoundInputs(inputs.M, inputs.Q, T, inputs.S, inputs.d, inputs.delta, inputs.delta_L, inputs.eta)


def report(k: SmoothnessConstants, inputs: BoundInputs) -> dict:
    """Key-value summary used by the command line."""
    c = c0(k)
    sigma = sigma_var(k, inputs.S, inputs.d, inputs.delta)
    out = {"c0": c, "sigma": sigma, "max_step_size": max_step_size(c, inputs.Q, inputs.M),
           "local_steps_limit": local_steps_limit(c, inputs.M)}
    if inputs.eta > 0:
        try:
            out["grad_norm_bound"] = grad_norm_bound(inputs, c, sigma)
        except ConfigError as exc:
            out["grad_norm_bound"] = None
            out["warning"] = str(exc)
    if inputs.Q <= out["local_steps_limit"] and inputs.delta_L > 0:
        out["suggested_step"] = suggested_step(inputs, c, sigma)
        out["tuned_rate"] = tuned_rate(inputs, c, sigma)
        out["min_rounds"] = min_rounds(inputs, c, sigma)
    return out
