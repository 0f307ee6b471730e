import math

import numpy as np
import pytest

from glasu.errors import ConfigError
from glasu.theory import (BoundInputs, SmoothnessConstants, c0, grad_norm_bound, local_steps_limit,
                          max_step_size, min_rounds, report, sigma_var, suggested_step, tuned_rate)

ONES = SmoothnessConstants(1, 1, 1, 1)


def test_c0_substitutions():
    assert c0(ONES) == 2
    assert c0(SmoothnessConstants(G_ell=2, L_ell=1, G_f=2, L_f=3)) == 10
    # additive in the two terms: G_ell enters only G_ell * L_f
    a = c0(SmoothnessConstants(3, 1, 1, 1)) - c0(SmoothnessConstants(1, 1, 1, 1))
    b = c0(SmoothnessConstants(5, 1, 1, 1)) - c0(SmoothnessConstants(3, 1, 1, 1))
    assert a == b == 2


def test_sigma_substitutions():
    assert sigma_var(ONES, 1, 1, 1.0) == 64 * math.log(2) + 128 * 2 * (math.log(2) + 0.25)
    k = SmoothnessConstants(G_ell=2, L_ell=3, G_f=0.5, L_f=1.5)
    lg = math.log(2 * 10 / 0.1)
    want = 64 * 4 * 2.25 * lg + 128 * 9 * (0.0625 + 1 / 32) * (lg + 0.25)
    assert math.isclose(sigma_var(k, 32, 10, 0.1), want, rel_tol=1e-15)
    assert sigma_var(k, 8, 10, 0.1) > sigma_var(k, 16, 10, 0.1)
    assert sigma_var(k, 8, 20, 0.1) > sigma_var(k, 8, 10, 0.1)
    with pytest.raises(ConfigError):
        sigma_var(k, 8, 10, 0.0)


def test_max_step_size_substitutions():
    assert max_step_size(1, 1, 1) == 1 / 3
    assert max_step_size(2, 1, 1) == 1 / 6
    assert max_step_size(1, 2, 3) == 1 / 25
    assert max_step_size(1, 2, 2) < max_step_size(1, 1, 2) / 2
    steps = [max_step_size(1.5, q, 3) for q in range(1, 200)]
    assert all(a > b > 0 for a, b in zip(steps, steps[1:])) and steps[-1] < 1e-5
    with pytest.raises(ConfigError):
        max_step_size(0, 1, 1)


def inputs(**kw):
    base = dict(M=2, Q=1, T=1000, S=16, d=8, delta=0.05, delta_L=1.0, eta=1e-4)
    base.update(kw)
    return BoundInputs(**base)


def test_grad_norm_bound_terms():
    c, s = 3.0, 5.0
    zero_gap = grad_norm_bound(inputs(delta_L=0.0), c, s)
    assert zero_gap == 28 * 1e-4 * 2 * (3 + math.sqrt(3)) * 5 / 3
    values = [grad_norm_bound(inputs(T=T), c, s) for T in (10, 100, 1000)]
    assert values[0] > values[1] > values[2] > 0
    with pytest.raises(ConfigError, match="exceeds"):
        grad_norm_bound(inputs(eta=1.0), c, s)


def gate_case(rng):
    """Random inputs with Q sitting exactly at its admissible limit."""
    M, Q = int(rng.integers(1, 6)), int(rng.integers(1, 5))
    target = Q * math.sqrt(M + 1)
    G_ell, L_f, L_ell = rng.uniform(0.1, 0.5), rng.uniform(0.1, 1.0), rng.uniform(0.5, 2.0)
    G_f = math.sqrt((target - G_ell * L_f) / L_ell)
    # step up by ulps until rounding lands on the admissible side of the gate
    while local_steps_limit(c0(SmoothnessConstants(G_ell, L_ell, G_f, L_f)), M) < Q:
        G_f = math.nextafter(G_f, math.inf)
    return SmoothnessConstants(G_ell, L_ell, G_f, L_f), M, Q


def test_suggested_step_reaches_closed_form_at_the_gate():
    rng = np.random.default_rng(0)
    for _ in range(5):
        k, M, Q = gate_case(rng)
        c, s = c0(k), sigma_var(k, 16, 10, 0.05)
        base = inputs(M=M, Q=Q, delta_L=float(rng.uniform(0.5, 3)))
        T = min_rounds(base, c, s)
        eta = suggested_step(inputs(M=M, Q=Q, T=T, delta_L=base.delta_L), c, s)
        full = inputs(M=M, Q=Q, T=T, delta_L=base.delta_L, eta=eta)
        assert abs(grad_norm_bound(full, c, s) / tuned_rate(full, c, s) - 1) < 1e-12


def test_tuned_rate_is_an_upper_bound_below_the_gate():
    k = SmoothnessConstants(1.0, 1.0, 3.0, 1.0)  # c0 = 10, limit 10 / sqrt(3)
    c, s = c0(k), sigma_var(k, 16, 10, 0.05)
    for Q in (1, 3, 5):
        base = inputs(M=2, Q=Q)
        T = min_rounds(base, c, s)
        full = inputs(M=2, Q=Q, T=T, eta=suggested_step(inputs(M=2, Q=Q, T=T), c, s))
        assert grad_norm_bound(full, c, s) <= tuned_rate(full, c, s)


def test_suggested_step_gate_and_scaling():
    k = SmoothnessConstants(1.0, 1.0, 1.0, 1.0)
    c, s = c0(k), sigma_var(k, 16, 10, 0.05)
    assert local_steps_limit(c, 2) == 2 / math.sqrt(3)
    with pytest.raises(ConfigError, match="Q <="):
        suggested_step(inputs(Q=2), c, s)
    assert suggested_step(inputs(delta_L=0.0), c, s) == 0.0
    ratio = suggested_step(inputs(T=100), c, s) / suggested_step(inputs(T=400), c, s)
    assert math.isclose(ratio, 2.0, rel_tol=1e-14)


def test_min_rounds_matches_bisection():
    rng = np.random.default_rng(1)
    for _ in range(5):
        k, M, Q = gate_case(rng)
        c, s = c0(k), sigma_var(k, 8, 4, 0.1)
        base = inputs(M=M, Q=Q, delta_L=float(rng.uniform(1, 50)))

        def ok(T):
            return suggested_step(inputs(M=M, Q=Q, T=T, delta_L=base.delta_L), c, s) <= max_step_size(c, Q, M)

        lo, hi = 1, 1
        while not ok(hi):
            hi *= 2
        while lo < hi:
            mid = (lo + hi) // 2
            lo, hi = (lo, mid) if ok(mid) else (mid + 1, hi)
        assert min_rounds(base, c, s) == lo


def test_validation_and_report():
    with pytest.raises(ConfigError):
        SmoothnessConstants(0, 1, 1, 1)
    with pytest.raises(ConfigError):
        inputs(delta=1.0)
    with pytest.raises(ConfigError):
        inputs(M=0)
    out = report(SmoothnessConstants(1, 1, 3, 1), inputs(eta=1.0))
    assert out["c0"] == 10 and out["grad_norm_bound"] is None and "exceeds" in out["warning"]
    assert all(v > 0 for key, v in out.items() if isinstance(v, float))
