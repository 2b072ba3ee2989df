"""Quaternion algebra against hand-computed and finite-difference oracles."""

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from stitch4d import quaternion as quat

unit_vecs = arrays(
    np.float64, 3, elements=st.floats(-1.0, 1.0, allow_nan=False)
).filter(lambda v: 0.1 < np.linalg.norm(v) < 1.7)

quats = arrays(
    np.float64, 4, elements=st.floats(-2.0, 2.0, allow_nan=False)
).filter(lambda q: np.linalg.norm(q) > 0.1)


def test_identity_is_no_rotation():
    np.testing.assert_array_equal(quat.rotation_matrix(quat.identity()), np.eye(3))


def test_multiply_oracle():
    # (1 + i) * (1 + j) = 1 + i + j + ij = 1 + i + j + k (unnormalized)
    a = np.array([1.0, 1.0, 0.0, 0.0])
    b = np.array([1.0, 0.0, 1.0, 0.0])
    np.testing.assert_array_equal(quat.multiply(a, b), [1.0, 1.0, 1.0, 1.0])


def test_rotation_matrix_90deg_about_z():
    q = quat.from_axis_angle([0.0, 0.0, 1.0], np.pi / 2.0)
    R = quat.rotation_matrix(q)
    # x-axis maps to y-axis
    np.testing.assert_allclose(R @ [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], atol=1e-15)


def test_normalize_zero_raises():
    with pytest.raises(ValueError):
        quat.normalize(np.zeros(4))


def test_left_right_matrices_match_multiply(rng):
    a, b = rng.normal(size=4), rng.normal(size=4)
    np.testing.assert_allclose(quat.left_matrix(a) @ b, quat.multiply(a, b), atol=1e-14)
    np.testing.assert_allclose(quat.right_matrix(b) @ a, quat.multiply(a, b), atol=1e-14)


@given(quats, quats)
def test_multiply_norm_is_product_of_norms(a, b):
    # |ab| = |a||b| for the Hamilton product
    np.testing.assert_allclose(
        np.linalg.norm(quat.multiply(a, b)),
        np.linalg.norm(a) * np.linalg.norm(b),
        rtol=1e-10,
    )


@given(quats)
def test_rotation_matrix_is_orthonormal(q):
    R = quat.rotation_matrix(quat.normalize(q))
    np.testing.assert_allclose(R @ R.T, np.eye(3), atol=1e-12)
    np.testing.assert_allclose(np.linalg.det(R), 1.0, atol=1e-12)


@given(unit_vecs)
def test_quat_exp_is_unit(v):
    np.testing.assert_allclose(np.linalg.norm(quat.quat_exp(v)), 1.0, atol=1e-12)


def test_quat_exp_oracle():
    # pi about z: exp([0,0,pi]) = (cos(pi/2), 0, 0, sin(pi/2)) = (0,0,0,1)
    np.testing.assert_allclose(
        quat.quat_exp([0.0, 0.0, np.pi]), [0.0, 0.0, 0.0, 1.0], atol=1e-15
    )


def test_quat_exp_zero_is_identity():
    np.testing.assert_array_equal(quat.quat_exp(np.zeros(3)), quat.identity())


def test_batched_shapes(rng):
    q = rng.normal(size=(7, 4))
    v = rng.normal(size=(7, 3))
    assert quat.rotation_matrix(q).shape == (7, 3, 3)
    assert quat.rotation_matrix_jacobian(q).shape == (7, 4, 3, 3)
    assert quat.quat_exp(v).shape == (7, 4)
    assert quat.quat_exp_jacobian(v).shape == (7, 4, 3)


def _fd_jacobian(fn, x, out_shape, h=1e-7):
    jac = np.zeros(out_shape + (x.size,))
    for k in range(x.size):
        xp, xm = x.copy(), x.copy()
        xp[k] += h
        xm[k] -= h
        jac[..., k] = (fn(xp) - fn(xm)) / (2.0 * h)
    return jac


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_rotation_matrix_jacobian_matches_fd(seed):
    q = np.random.default_rng(seed).normal(size=4)
    analytic = np.moveaxis(quat.rotation_matrix_jacobian(q), 0, -1)  # (3,3,4)
    fd = _fd_jacobian(quat.rotation_matrix, q, (3, 3))
    np.testing.assert_allclose(analytic, fd, atol=1e-6)


@pytest.mark.parametrize("scale", [1.0, 1e-7, 0.0])
def test_quat_exp_jacobian_matches_fd(scale, rng):
    # includes the small-angle branch (scale <= 1e-7)
    v = rng.normal(size=3) * scale
    analytic = quat.quat_exp_jacobian(v)
    fd = _fd_jacobian(quat.quat_exp, v, (4,))
    np.testing.assert_allclose(analytic, fd, atol=1e-6)
