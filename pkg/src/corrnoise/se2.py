"""SE(2) and se(2) primitives.

Poses are 3x3 homogeneous matrices ``[[C, r], [0, 0, 1]]`` and twists are
3-vectors ordered ``(rho_1, rho_2, phi)``. Every function accepts arbitrary
leading batch dimensions.

The exponential map is the plain matrix exponential of the twist's hat
matrix. A state ``T_k`` maps points from the inertial frame into the robot
frame at time k, so a robot driving forward at speed ``v`` and turning at
``omega`` propagates as ``T_k = exp(dt * [-v, 0, -omega]^) T_{k-1}``.
Perturbations are applied on the left: ``T <- exp(delta^) T``.
"""

import numpy as np

from .errors import InvalidArgumentError

SMALL_ANGLE = 1e-7


def wrap_angle(theta):
    """Wrap angles into (-pi, pi]."""
    wrapped = np.pi - np.mod(np.pi - np.asarray(theta, dtype=float), 2 * np.pi)
    return wrapped


def _check_finite(x, name):
    x = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(x)):
        raise InvalidArgumentError(f"{name} must be finite")
    return x


def rot(theta):
    theta = np.asarray(theta, dtype=float)
    c, s = np.cos(theta), np.sin(theta)
    out = np.empty(theta.shape + (2, 2))
    out[..., 0, 0] = c
    out[..., 0, 1] = -s
    out[..., 1, 0] = s
    out[..., 1, 1] = c
    return out


def identity(batch=()):
    return np.broadcast_to(np.eye(3), tuple(batch) + (3, 3)).copy()


def from_xyt(xyt):
    """Build poses from ``(x, y, theta)`` = (translation, rotation angle)."""
    xyt = _check_finite(xyt, "xyt")
    out = np.zeros(xyt.shape[:-1] + (3, 3))
    out[..., :2, :2] = rot(xyt[..., 2])
    out[..., :2, 2] = xyt[..., :2]
    out[..., 2, 2] = 1.0
    return out


def to_xyt(T):
    T = np.asarray(T, dtype=float)
    theta = np.arctan2(T[..., 1, 0], T[..., 0, 0])
    return np.concatenate([T[..., :2, 2], theta[..., None]], axis=-1)


def angle(T):
    T = np.asarray(T, dtype=float)
    return np.arctan2(T[..., 1, 0], T[..., 0, 0])


def hat(xi):
    xi = np.asarray(xi, dtype=float)
    out = np.zeros(xi.shape[:-1] + (3, 3))
    out[..., 0, 1] = -xi[..., 2]
    out[..., 1, 0] = xi[..., 2]
    out[..., :2, 2] = xi[..., :2]
    return out


def vee(X):
    X = np.asarray(X, dtype=float)
    return np.stack([X[..., 0, 2], X[..., 1, 2], X[..., 1, 0]], axis=-1)


def _coefficients(phi):
    """Return sin(phi)/phi, (1-cos phi)/phi, (phi-sin phi)/phi^2, (1-cos phi)/phi^2."""
    phi = np.asarray(phi, dtype=float)
    small = np.abs(phi) < SMALL_ANGLE
    p = np.where(small, 1.0, phi)
    s, c = np.sin(p), np.cos(p)
    a = s / p
    b = (1.0 - c) / p
    cc = (p - s) / p**2
    d = (1.0 - c) / p**2
    ph2 = phi * phi
    a = np.where(small, 1.0 - ph2 / 6.0 + ph2 * ph2 / 120.0, a)
    b = np.where(small, phi / 2.0 - phi * ph2 / 24.0, b)
    cc = np.where(small, phi / 6.0 - phi * ph2 / 120.0, cc)
    d = np.where(small, 0.5 - ph2 / 24.0 + ph2 * ph2 / 720.0, d)
    return a, b, cc, d


def exp(xi):
    """Closed-form exponential map se(2) -> SE(2)."""
    xi = _check_finite(xi, "twist")
    phi = xi[..., 2]
    a, b, _, _ = _coefficients(phi)
    rho1, rho2 = xi[..., 0], xi[..., 1]
    out = np.zeros(xi.shape[:-1] + (3, 3))
    out[..., :2, :2] = rot(phi)
    out[..., 0, 2] = a * rho1 - b * rho2
    out[..., 1, 2] = b * rho1 + a * rho2
    out[..., 2, 2] = 1.0
    return out


def log(T):
    """Logarithmic map SE(2) -> se(2); the rotation part lies in (-pi, pi]."""
    T = _check_finite(T, "pose")
    phi = np.arctan2(T[..., 1, 0], T[..., 0, 0])
    # arctan2 returns -pi for a negative-zero sine; resolve the tie to +pi
    phi = np.where(phi <= -np.pi, np.pi, phi)
    a, b, _, _ = _coefficients(phi)
    den = a * a + b * b
    t1, t2 = T[..., 0, 2], T[..., 1, 2]
    rho1 = (a * t1 + b * t2) / den
    rho2 = (-b * t1 + a * t2) / den
    return np.stack([rho1, rho2, phi], axis=-1)


def compose(A, B):
    return np.matmul(A, B)


def inverse(T):
    T = np.asarray(T, dtype=float)
    C = T[..., :2, :2]
    Ct = np.swapaxes(C, -1, -2)
    out = np.zeros(T.shape)
    out[..., :2, :2] = Ct
    out[..., :2, 2] = -np.einsum("...ij,...j->...i", Ct, T[..., :2, 2])
    out[..., 2, 2] = 1.0
    return out


def normalize(T):
    """Re-orthonormalize the rotation block by projecting onto its angle."""
    T = np.array(T, dtype=float)
    T[..., :2, :2] = rot(angle(T))
    T[..., 2, :2] = 0.0
    T[..., 2, 2] = 1.0
    return T


def transform_points(T, points):
    """Apply ``T`` to 2D points of shape (..., n, 2)."""
    T = np.asarray(T, dtype=float)
    points = np.asarray(points, dtype=float)
    return np.einsum("...ij,...nj->...ni", T[..., :2, :2], points) + T[..., None, :2, 2]


def adjoint(T):
    """Adjoint such that ``T exp(xi^) T^-1 = exp((Ad(T) xi)^)``."""
    T = np.asarray(T, dtype=float)
    out = np.zeros(T.shape)
    out[..., :2, :2] = T[..., :2, :2]
    out[..., 0, 2] = T[..., 1, 2]
    out[..., 1, 2] = -T[..., 0, 2]
    out[..., 2, 2] = 1.0
    return out


def left_jacobian(xi):
    """Left Jacobian: ``exp((xi + d)^) ~= exp((J_l(xi) d)^) exp(xi^)``."""
    xi = np.asarray(xi, dtype=float)
    a, b, c, d = _coefficients(xi[..., 2])
    rho1, rho2 = xi[..., 0], xi[..., 1]
    out = np.zeros(xi.shape[:-1] + (3, 3))
    out[..., 0, 0] = a
    out[..., 0, 1] = -b
    out[..., 1, 0] = b
    out[..., 1, 1] = a
    out[..., 0, 2] = rho1 * c + rho2 * d
    out[..., 1, 2] = -rho1 * d + rho2 * c
    out[..., 2, 2] = 1.0
    return out


def left_jacobian_inv(xi):
    J = left_jacobian(xi)
    a, b = J[..., 0, 0], J[..., 1, 0]
    den = a * a + b * b
    out = np.zeros(J.shape)
    out[..., 0, 0] = a / den
    out[..., 0, 1] = b / den
    out[..., 1, 0] = -b / den
    out[..., 1, 1] = a / den
    q = J[..., :2, 2]
    out[..., :2, 2] = -np.einsum("...ij,...j->...i", out[..., :2, :2], q)
    out[..., 2, 2] = 1.0
    return out


def right_jacobian_inv(xi):
    return left_jacobian_inv(-np.asarray(xi, dtype=float))
