import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from endovo.errors import DegenerateRotationError
from endovo.geometry import (canonicalize, compose, quat_angle, quat_conj, quat_distance, quat_from_rotvec, quat_mul,
                             quat_normalize, quat_rotate, quat_to_matrix, relative)


def _rand_q(rng, n):
    q = rng.standard_normal((n, 4))
    return q / np.linalg.norm(q, axis=1, keepdims=True)


def test_matrix_matches_scipy():
    # scipy stores quaternions scalar-last
    rng = np.random.default_rng(0)
    q = _rand_q(rng, 20)
    ref = Rotation.from_quat(np.roll(q, -1, axis=1)).as_matrix()
    assert np.allclose(quat_to_matrix(q), ref, rtol=0, atol=1e-12)


def test_mul_is_matrix_product():
    rng = np.random.default_rng(1)
    a, b = _rand_q(rng, 10), _rand_q(rng, 10)
    assert np.allclose(quat_to_matrix(quat_mul(a, b)), quat_to_matrix(a) @ quat_to_matrix(b), atol=1e-12)


def test_rotvec_and_angle():
    q = quat_from_rotvec(np.array([0.0, 0.0, np.pi / 2]))
    assert np.allclose(quat_rotate(q, np.array([1.0, 0, 0])), [0, 1, 0], atol=1e-15)
    assert np.isclose(quat_angle(q), np.pi / 2)
    assert np.array_equal(quat_from_rotvec(np.zeros(3)), [1, 0, 0, 0])


def test_canonicalize_hemisphere():
    assert np.array_equal(canonicalize([-1.0, 0, 0, 0]), [1, 0, 0, 0])
    assert np.array_equal(canonicalize([0.0, -1, 0, 0]), [0, 1, 0, 0])
    assert np.array_equal(canonicalize([0.0, 0, -0.6, 0.8]), [0, 0, 0.6, -0.8])


def test_normalize_degenerate():
    with pytest.raises(DegenerateRotationError):
        quat_normalize(np.zeros(4))


def test_distance_sign_insensitive():
    rng = np.random.default_rng(2)
    a, b = _rand_q(rng, 5), _rand_q(rng, 5)
    assert np.allclose(quat_distance(a, b), quat_distance(a, -b))
    assert np.allclose(quat_distance(a, -a), 0)


def test_relative_inverts_compose():
    rng = np.random.default_rng(3)
    xa, qa = rng.standard_normal((50, 3)), _rand_q(rng, 50)
    xb, qb = rng.standard_normal((50, 3)), _rand_q(rng, 50)
    xr, qr = relative(xa, qa, xb, qb)
    xc, qc = compose(xa, qa, xr, qr)
    assert np.allclose(xc, xb, atol=1e-12)
    assert np.allclose(quat_distance(qc, qb), 0, atol=1e-12)
    xi, qi = relative(xa, qa, xa, qa)
    assert np.allclose(xi, 0, atol=1e-15) and np.allclose(np.abs(qi[:, 0]), 1, atol=1e-15)
    assert np.allclose(quat_mul(qa, quat_conj(qa))[:, 1:], 0, atol=1e-15)
