import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from kalmanhj.errors import InvalidInputError
from kalmanhj.scaling import (Cylinder, Membership, ScaleParams, SpaceTimePoint, conjugate_exponent,
                              dilation_determinant, dilation_spacetime, gauge_reference, gauge_rho,
                              group_inverse, group_op, left_translation, modulus_omega)

finite = st.floats(-1.0, 1.0, allow_nan=False)


def test_scale_params_derived_once():
    p = ScaleParams(q=3.0, alpha=0.5)
    assert p.q_conj == pytest.approx(1.5)
    assert p.gamma == pytest.approx(1 / 3 + 0.5 / 1.5)
    with pytest.raises(InvalidInputError):
        ScaleParams(q=1.0)
    with pytest.raises(InvalidInputError):
        conjugate_exponent(0.5)


def test_dilation_example(kolmogorov):
    out = dilation_spacetime(ScaleParams(2.0, 0.0, 4.0), SpaceTimePoint(1.0, [1.0, 1.0]), kolmogorov)
    assert out.allclose(SpaceTimePoint(4.0, [2.0, 8.0]))
    assert dilation_determinant(kolmogorov, 0.5, 4.0) == pytest.approx(64.0)


def test_dilation_determinant_matches_matrix(chain3):
    r, gamma = 0.37, 0.8
    M = r ** gamma * chain3.S(r)
    assert dilation_determinant(chain3, gamma, r) == pytest.approx(r * np.linalg.det(M), rel=1e-12)


def test_group_examples(kolmogorov):
    prod = group_op(kolmogorov, 0.0, SpaceTimePoint(1.0, [1.0, 0.0]), SpaceTimePoint(1.0, [0.0, 0.0]))
    assert prod.allclose(SpaceTimePoint(2.0, [1.0, 1.0]))
    inv = group_inverse(kolmogorov, 0.0, SpaceTimePoint(1.0, [0.0, 1.0]))
    assert inv.allclose(SpaceTimePoint(-1.0, [0.0, -1.0]))


@settings(max_examples=50, deadline=None)
@given(st.tuples(finite, finite, finite), st.tuples(finite, finite, finite), st.floats(0.0, 1.0))
def test_left_translation_composes(a, b, h):
    from kalmanhj.config import preset_frame
    fr = preset_frame("chain-3").frame
    pa = SpaceTimePoint(a[0], np.array(a))
    pb = SpaceTimePoint(b[0], np.array(b[::-1]))
    la, lb = left_translation(fr, h, pa), left_translation(fr, h, pb)
    lhs = la(lb(SpaceTimePoint(0.3, np.ones(3))))
    rhs = left_translation(fr, h, group_op(fr, h, pa, pb))(SpaceTimePoint(0.3, np.ones(3)))
    assert lhs.allclose(rhs, atol=1e-10)


def test_cylinder_membership(kolmogorov):
    cyl = Cylinder(kolmogorov, 0.0, 0.5, 1.0)
    assert cyl.contains(SpaceTimePoint(-0.5, [0.5, 0.0]))
    assert not cyl.contains(SpaceTimePoint(0.5, [0.0, 0.0]))
    # at t = -1 the flow shears: exp(A) (0.9, -0.9) = (0.9, 0)
    assert cyl.contains(SpaceTimePoint(-1.0, [0.9, -0.9]))
    assert cyl.classify(SpaceTimePoint(-0.5, [1.0, -0.5])) is Membership.BOUNDARY
    assert cyl.classify(SpaceTimePoint(-0.5, [2.0, 0.0])) is Membership.OUTSIDE


def test_cylinder_vectorised_matches_scalar(random_frame):
    rng = np.random.default_rng(5)
    cyl = Cylinder(random_frame, 0.3, 0.7, 0.8)
    t = rng.choice([-0.6, -0.2, 0.0], size=40)
    X = rng.normal(scale=0.4, size=(40, random_frame.N))
    many = cyl.contains_many(t, X)
    assert list(many) == [cyl.contains(SpaceTimePoint(ti, xi)) for ti, xi in zip(t, X)]


def test_gauge_examples(kolmogorov):
    assert gauge_rho(kolmogorov, 0.0, 0.5, SpaceTimePoint(-0.0625, [0.0, 0.0])) == pytest.approx(0.0625)
    assert gauge_rho(kolmogorov, 0.0, 0.5, SpaceTimePoint(0.0, [0.25, 0.0])) == pytest.approx(0.0625)
    with pytest.raises(InvalidInputError):
        gauge_rho(kolmogorov, 0.0, 0.5, SpaceTimePoint(0.1, [0.0, 0.0]))


@settings(max_examples=40, deadline=None)
@given(st.floats(-1.0, 0.0), finite, finite, st.floats(0.0, 1.0))
def test_gauge_lies_on_cylinder_boundary(t, x1, x2, h):
    from kalmanhj.config import preset_frame
    fr = preset_frame("kolmogorov2").frame
    p = SpaceTimePoint(t, [x1, x2])
    rho = gauge_rho(fr, h, 0.5, p)
    if rho == 0:
        return
    assert Cylinder(fr, h, 0.5, rho * (1 + 1e-9)).contains_many([t], [[x1, x2]], closed=True)[0]
    assert not Cylinder(fr, h, 0.5, rho * (1 - 1e-6)).contains_many([t], [[x1, x2]], closed=True)[0]


@settings(max_examples=40, deadline=None)
@given(st.floats(-1.0, 0.0), finite, finite, finite, st.floats(0.05, 3.0))
def test_gauge_homogeneous_under_dilation(t, x1, x2, x3, r):
    from kalmanhj.config import preset_frame
    fr = preset_frame("chain-3").frame
    gamma = 0.6
    p = SpaceTimePoint(t, [x1, x2, x3])
    q = SpaceTimePoint(r * t, r ** gamma * (fr.S(r) @ p.x))
    assert gauge_rho(fr, 0.0, gamma, q) == pytest.approx(r * gauge_rho(fr, 0.0, gamma, p), rel=1e-8, abs=1e-12)


def test_gauge_comparable_to_reference(chain3):
    rng = np.random.default_rng(11)
    ratios = []
    for _ in range(200):
        p = SpaceTimePoint(-rng.uniform(0, 1), rng.normal(size=3))
        ratios.append(gauge_rho(chain3, 0.0, 0.5, p) / gauge_reference(chain3, 0.5, p))
    assert 0.1 < min(ratios) and max(ratios) <= 1.0 + 1e-12


def test_modulus_examples(kolmogorov):
    assert modulus_omega(kolmogorov, 2.0, 1.0, SpaceTimePoint(-1.0, [1.0, 8.0])) == pytest.approx(2 + np.sqrt(8))
    assert modulus_omega(kolmogorov, 2.0, 0.5, SpaceTimePoint(0.0, [0.1, 0.0])) == pytest.approx(0.1 ** (2 / 3))
    with pytest.raises(InvalidInputError):
        modulus_omega(kolmogorov, 2.0, 0.0, SpaceTimePoint(0.0, [0.1, 0.0]))


@settings(max_examples=40, deadline=None)
@given(st.floats(-1.0, 0.0), finite, finite, st.floats(0.05, 3.0), st.floats(0.1, 1.0))
def test_modulus_homogeneity(t, x1, x2, r, alpha):
    from kalmanhj.config import preset_frame
    fr = preset_frame("kolmogorov2").frame
    gamma = ScaleParams(2.0, alpha).gamma
    p = SpaceTimePoint(t, [x1, x2])
    q = SpaceTimePoint(r * t, r ** gamma * (fr.S(r) @ p.x))
    assert modulus_omega(fr, 2.0, alpha, q) == pytest.approx(r ** alpha * modulus_omega(fr, 2.0, alpha, p),
                                                             rel=1e-9, abs=1e-12)
