from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kinseg.errors import InadmissibleExponent
from kinseg.potential import phi, potential_gradient, potential_value, validate_exponents


def test_symmetric_well_constants():
    spec = validate_exponents(0.5, 2.0)
    assert spec.beta_exp[0] == pytest.approx(2.0)
    assert spec.norm_const[0] == pytest.approx(4.0)


def test_rejects_small_exponent_above_half():
    with pytest.raises(InadmissibleExponent):
        validate_exponents(0.75, 2.0)


def test_accepts_low_cmax():
    spec = validate_exponents(0.25, 1.5)
    assert spec.beta_exp[0] == pytest.approx(4.5)


@settings(max_examples=60, deadline=None)
@given(st.floats(0.05, 0.95))
def test_maximum_at_cmax(cm):
    spec = validate_exponents(cm)
    assert potential_value(spec, cm) == pytest.approx(0.25)
    assert abs(potential_gradient(spec, cm)[0]) < 1e-10
    t = np.linspace(0, 1, 401)
    assert potential_value(spec, t).max() <= 0.25 + 1e-12


def test_three_channel_maximum():
    spec = validate_exponents([0.4, 0.5, 0.6])
    assert potential_value(spec, [0.4, 0.5, 0.6]) == pytest.approx(0.75)


def test_boundary_gradient_vanishes():
    spec = validate_exponents([0.3, 0.5, 0.7])
    pts = np.array([[0.0, 0.2, 0.9], [0.5, 1.0, 0.1], [0.6, 0.4, 0.0]])
    g = potential_gradient(spec, pts)
    assert g[0, 0] == 0 and g[1, 1] == 0 and g[2, 2] == 0


def test_gradient_matches_finite_differences():
    rng = np.random.default_rng(0)
    spec = validate_exponents([0.35, 0.5, 0.62])
    c = rng.uniform(0.05, 0.95, (1000, 3))
    h = 1e-6
    g = potential_gradient(spec, c)
    fd = np.empty_like(c)
    for i in range(3):
        e = np.zeros(3)
        e[i] = h
        fd[:, i] = (potential_value(spec, c + e) - potential_value(spec, c - e)) / (2 * h)
    rel = np.abs(g - fd) / np.maximum(np.abs(g), 1e-3)
    assert rel.max() < 1e-6


def test_phi_values():
    assert phi(0.5, d=1) == pytest.approx(0.5)
    assert phi(np.array([0.0, 1.0, 0.0])) == pytest.approx(0.0)
    assert phi(np.array([0.5, 0.5, 0.5])) == pytest.approx(1.5)
    np.testing.assert_allclose(phi(np.array([0.0, 1.0]), d=1), 0.0)
