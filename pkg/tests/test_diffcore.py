import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from sia_lab.diffcore import (AttributeVector, GradientBundle, NumericError, check_gradient,
                              finite_difference_gradient, project_linf, relative_error,
                              signed_step)

unit = st.floats(0.0, 1.0, allow_nan=False)
wide = st.floats(-3.0, 3.0, allow_nan=False)


# --- signed_step --------------------------------------------------------------

@pytest.mark.parametrize("v, grad, eta, expected", [
    ([0.5, 0.5], [0.3, -0.2], 0.1, [0.6, 0.4]),
    ([0.2], [0.0], 0.1, [0.2]),
    ([0.1, 0.9, 0.5], [-5.0, 1e-9, 7.0], 0.05, [0.05, 0.95, 0.55]),
])
def test_signed_step_examples(v, grad, eta, expected):
    np.testing.assert_allclose(signed_step(np.array(v), np.array(grad), eta), expected,
                               atol=1e-12)


def test_signed_step_leaves_inputs_alone():
    v, g = np.array([0.3, 0.4]), np.array([1.0, -1.0])
    signed_step(v, g, 0.1)
    np.testing.assert_array_equal(v, [0.3, 0.4])
    np.testing.assert_array_equal(g, [1.0, -1.0])


def test_signed_step_errors():
    with pytest.raises(ValueError):
        signed_step(np.zeros(2), np.zeros(3), 0.1)
    with pytest.raises(ValueError):
        signed_step(np.zeros(2), np.zeros(2), -0.1)
    with pytest.raises(NumericError):
        signed_step(np.zeros(2), np.array([np.nan, 1.0]), 0.1)


@given(arrays(np.float64, 5, elements=wide), arrays(np.float64, 5, elements=wide))
def test_signed_step_zero_eta_is_identity(v, g):
    np.testing.assert_array_equal(signed_step(v, g, 0.0), v)


# --- project_linf ---------------------------------------------------------------

@pytest.mark.parametrize("v, center, eps, expected", [
    ([0.75], [0.5], 0.1, [0.6]),
    ([0.55], [0.5], 0.1, [0.55]),
    ([-0.2], [0.05], 0.1, [0.0]),
])
def test_project_linf_examples(v, center, eps, expected):
    np.testing.assert_allclose(project_linf(np.array(v), np.array(center), eps, 0.0, 1.0),
                               expected, atol=1e-12)


def test_project_linf_shape_mismatch():
    with pytest.raises(ValueError):
        project_linf(np.zeros(3), np.zeros(2), 0.1)


@given(arrays(np.float64, 6, elements=wide), arrays(np.float64, 6, elements=unit),
       st.floats(0.0, 1.0))
def test_project_linf_bounds_and_idempotence(v, center, eps):
    once = project_linf(v, center, eps, 0.0, 1.0)
    assert np.all(np.abs(once - center) <= eps + 1e-12)
    assert np.all((once >= 0.0) & (once <= 1.0))
    np.testing.assert_array_equal(project_linf(once, center, eps, 0.0, 1.0), once)


def test_project_linf_per_coordinate_radius():
    out = project_linf(np.array([1.0, 1.0]), np.array([0.5, 0.5]), np.array([0.05, 0.3]))
    np.testing.assert_allclose(out, [0.55, 0.8])


# --- finite differences -------------------------------------------------------------

def test_fd_quadratic():
    g = finite_difference_gradient(lambda v: v[0] ** 2, np.array([3.0]), h=1e-4)
    np.testing.assert_allclose(g, [6.0], atol=1e-6)


def test_fd_constant_is_zero():
    g = finite_difference_gradient(lambda v: 4.2, np.array([0.1, 0.7, 0.3]))
    np.testing.assert_array_equal(g, np.zeros(3))


def test_fd_non_finite_function():
    with pytest.raises(NumericError):
        finite_difference_gradient(lambda v: np.inf, np.array([0.5]))


def test_fd_matches_classifier_gradient(classifier, rng):
    x = rng.uniform(0.2, 0.8, classifier.image_shape)
    analytic = classifier.loss_gradient(x, 1)
    coords = rng.choice(x.size, 20, replace=False)
    numeric = finite_difference_gradient(lambda z: classifier.loss(z, 1), x, 1e-4, coords)
    err = relative_error(analytic.ravel()[coords], numeric.ravel()[coords])
    assert err.max() <= 1e-4


def test_relative_error_floor():
    assert relative_error(np.array([0.0]), np.array([0.0]))[0] == 0.0
    np.testing.assert_allclose(relative_error(np.array([2.0]), np.array([1.0])), [0.5])


# --- check_gradient ----------------------------------------------------------------------

def test_check_gradient_generator(world):
    report = check_gradient(world.generator, probes=8, tol=1e-4, seed=0)
    assert report.passed, report


def test_check_gradient_trained_classifier(classifier):
    report = check_gradient(classifier, probes=8, tol=1e-3, seed=0)
    assert report.passed and report.probes == 8


def test_check_gradient_detector(detector):
    assert check_gradient(detector, probes=8, tol=1e-3, seed=0).passed


class _DoubledGradient:
    """Fault fixture: reports twice the true gradient."""

    def __init__(self, model):
        self.model = model
        self.image_shape = model.image_shape
        self.kind = "doubled"

    def loss(self, x, gt):
        return self.model.loss(x, gt)

    def loss_gradient(self, x, gt):
        return 2.0 * self.model.loss_gradient(x, gt)

    def random_ground_truth(self, rng):
        return self.model.random_ground_truth(rng)


def test_check_gradient_catches_scaled_bug(classifier):
    report = check_gradient(_DoubledGradient(classifier), probes=8, tol=1e-3, seed=0)
    assert not report.passed
    # |2g - g| / max(|2g|, |g|) = 1/2 under the max-magnitude denominator
    assert report.max_relative_error == pytest.approx(0.5, abs=1e-3)


def test_check_gradient_deterministic(classifier):
    a = check_gradient(classifier, probes=3, seed=5)
    b = check_gradient(classifier, probes=3, seed=5)
    assert a.max_relative_error == b.max_relative_error


# --- domain types ---------------------------------------------------------------------------

def test_attribute_vector_validation():
    v = AttributeVector(np.array([0.1, 0.9]), ("a", "b"))
    assert len(v) == 2
    with pytest.raises(ValueError):
        AttributeVector(np.array([1.2, 0.0]), ("a", "b"))
    with pytest.raises(ValueError):
        AttributeVector(np.array([0.2, 0.0]), ("a", "a"))


def test_gradient_bundle_rejects_nan():
    with pytest.raises(NumericError):
        GradientBundle(np.zeros((2, 2, 1)), np.array([np.nan]))
