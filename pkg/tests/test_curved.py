import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from kalmanhj.config import preset_frame
from kalmanhj.curved import (build_curved_family, concatenated_psi, cone_set, cone_threshold,
                             default_alphas, integrability_proxy, jacobian_profile, psi_cost,
                             psi_families)
from kalmanhj.errors import HTooLargeError, InvalidExponentError, InvalidInputError
from kalmanhj.scenarios import random_controllable_pair

ALPHAS = (0.6, 0.8)


@pytest.fixture(scope="module")
def kfam():
    return build_curved_family(preset_frame("kolmogorov2").frame, 0.0, 1.0, ALPHAS)


def test_endpoint_identity(kfam):
    np.testing.assert_allclose(kfam.phi_matrix(1.0), np.eye(2), atol=1e-12)
    assert np.all(kfam.phi_matrix(0.0) == 0)


def test_closed_form_matches_quadrature(kfam):
    w = np.array([0.3, -0.7])
    for s in (1.0, 0.5, 0.1):
        np.testing.assert_allclose(kfam.phi(s, w), kfam.phi_oracle(s, w), rtol=1e-7, atol=1e-10)


def test_endpoint_random_frames_with_drift():
    rng = np.random.default_rng(11)
    worst = 0.0
    _, _, frame = random_controllable_pair(rng, max_N=4, max_kappa=2)
    fam = build_curved_family(frame, 1e-4, 1.0, default_alphas(frame, 2.0, 40.0))
    for w in rng.normal(size=(100, frame.N)):
        worst = max(worst, np.linalg.norm(fam.phi(1.0, w) - w) / np.linalg.norm(w))
        assert np.allclose(fam.phi(1.0, w), fam.phi_oracle(1.0, w), rtol=1e-6, atol=1e-8)
    assert worst <= 1e-7


@settings(max_examples=30, deadline=None)
@given(st.floats(-3, 3), st.floats(-3, 3), st.floats(0.01, 1.0))
def test_family_is_linear_in_endpoint(c, d, s):
    fam = build_curved_family(preset_frame("kolmogorov2").frame, 0.0, 1.0, ALPHAS)
    u, v = np.array([1.0, 2.0]), np.array([-0.5, 0.25])
    np.testing.assert_allclose(fam.phi(s, c * u + d * v), c * fam.phi(s, u) + d * fam.phi(s, v),
                               atol=1e-10)


def test_cost_matches_closed_form(kfam):
    # |beta|^2 = sum_ij c_i.c_j sigma^(a_i + a_j - 2) integrates termwise for q' = 2.
    w = np.array([0.4, 1.1])
    c = kfam.coefficients(w) @ kfam.basis0.T
    exact = sum(c[i] @ c[j] / (a + b - 1.0)
                for i, a in enumerate(ALPHAS) for j, b in enumerate(ALPHAS))
    assert kfam.cost(w, 2.0) == pytest.approx(exact, rel=1e-7)


def test_jacobian_exponent_within_bound(kfam):
    prof = jacobian_profile(kfam, [0.5 ** k for k in range(11)])
    assert prof["bound_exponent"] == pytest.approx(2 * 0.8 + 1)
    assert prof["fitted_exponent"] <= prof["bound_exponent"] + 0.1
    assert prof["ok"]
    dets = [r["det"] for r in prof["rows"]]
    assert dets[0] == pytest.approx(1.0)
    assert np.all(np.diff(dets) > 0)


@pytest.mark.parametrize("name,alphas,start", [("kolmogorov2", ALPHAS, 1),
                                               ("chain-3", (0.55, 0.7, 0.85), 2)])
def test_gradient_constant_stable_across_decades(name, alphas, start):
    fam = build_curved_family(preset_frame(name).frame, 0.0, 1.0, alphas)
    C = [fam.gradient_norm(10.0 ** -k) * 10.0 ** (-k * max(alphas)) for k in range(start, 6)]
    steps = np.array(C[1:]) / np.array(C[:-1])
    assert np.all((steps >= 0.5) & (steps <= 2.0))


def test_integrability_proxy(kfam):
    assert integrability_proxy(kfam, 10)["converges"]
    below = integrability_proxy(kfam, 3)
    assert not below["converges"] and below["term_ratio"] > 1


def test_psi_path_endpoints():
    frame = preset_frame("kolmogorov2").frame
    fwd, bwd = psi_families(frame, 0.0, -0.5, ALPHAS)
    w = np.array([0.1, 0.0])
    tr = concatenated_psi(fwd, bwd, w)
    mid = len(tr.times) // 2
    assert tr.times[0] == -1.0 and tr.times[-1] == pytest.approx(-0.5)
    assert tr.times[mid] == pytest.approx(-0.75)
    np.testing.assert_allclose(tr.states[0], 0, atol=1e-14)
    np.testing.assert_allclose(tr.states[mid], w, atol=1e-12)
    np.testing.assert_allclose(tr.states[-1], 0, atol=1e-12)
    zero = concatenated_psi(fwd, bwd, np.zeros(2))
    assert np.all(zero.states == 0) and psi_cost(fwd, bwd, np.zeros(2), 2.0) == 0


def test_psi_cost_homogeneous_in_endpoint():
    fwd, bwd = psi_families(preset_frame("kolmogorov2").frame, 0.0, -0.5, ALPHAS)
    w = np.array([0.3, -0.2])
    assert psi_cost(fwd, bwd, 2 * w, 2.0) == pytest.approx(4 * psi_cost(fwd, bwd, w, 2.0), rel=1e-10)


def test_cone_exponents():
    frame = preset_frame("kolmogorov2").frame
    cone = cone_set(frame, 4.0, 2.0, 0.1, -0.5)
    assert cone.a == pytest.approx(0.2) and cone.mu == pytest.approx(0.8)
    assert cone.a + cone.mu == pytest.approx(1.0)
    assert cone.nu == pytest.approx(1 - (1 + 2 * cone.b + 1) / 4)
    with pytest.raises(InvalidExponentError):
        cone_set(frame, cone_threshold(frame, 2.0), 2.0, 0.1, -0.5)


def test_cone_volume_scaling_and_monte_carlo():
    frame = preset_frame("kolmogorov2").frame
    big, small = cone_set(frame, 4.0, 2.0, 0.2, -0.5), cone_set(frame, 4.0, 2.0, 0.1, -0.5)
    assert big.volume() / small.volume() == pytest.approx(2 ** (big.a * big.p), rel=1e-12)
    rng = np.random.default_rng(3)
    half = np.abs(big.shape_matrix).sum(axis=1)
    pts = rng.uniform(-half, half, size=(20000, 2))
    frac = np.mean([big.contains(x) for x in pts])
    assert frac * np.prod(2 * half) == pytest.approx(big.volume(), rel=0.05)


def test_h_too_large_for_random_pair():
    rng = np.random.default_rng(7)
    while True:
        _, _, frame = random_controllable_pair(rng, max_N=3)
        if frame.N == 3 and frame.kappa == 2:
            break
    alphas = (0.55, 0.75, 0.95)
    assert build_curved_family(frame, 0.0, 1.0, alphas).HR_norm == 0
    with pytest.raises(HTooLargeError):
        build_curved_family(frame, 0.05, 1.0, alphas)


def test_exponent_validation():
    frame = preset_frame("kolmogorov2").frame
    with pytest.raises(InvalidExponentError):
        build_curved_family(frame, 0.0, 1.0, (0.7, 0.7))
    with pytest.raises(InvalidExponentError):
        build_curved_family(frame, 0.0, 1.0, (0.5, 1.0))
    with pytest.raises(InvalidInputError):
        build_curved_family(frame, 0.0, 1.0, (0.5,))
    with pytest.raises(InvalidInputError):
        psi_families(frame, 0.0, 0.5, ALPHAS)
    assert math.isfinite(default_alphas(frame, 2.0, 10.0)[0])
