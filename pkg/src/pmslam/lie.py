"""Sim(3) group machinery.

Poses are similarity transforms ``x -> s R x + t``. Tangent vectors are
7-vectors ordered ``(translation, rotation, log-scale)`` so that the
left-perturbation Jacobian of a transformed point is ``[I, -[x]x, x]``.
Updates are applied on the left: ``T <- Exp(tau) * T``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from math import factorial

import numpy as np

SMALL_ANGLE = 1e-8
REORTHO_CHAIN = 100

# Coefficient tables for the power series of the V-matrix terms (|sigma|, theta < 1).
_K = 24
_M = 12
_SERIES_A = np.array(
    [[(-1) ** m / (factorial(k) * factorial(2 * m + 1) * (k + 2 * m + 2)) for m in range(_M)] for k in range(_K)]
)
_SERIES_B = np.array(
    [[(-1) ** m / (factorial(k) * factorial(2 * m + 2) * (k + 2 * m + 3)) for m in range(_M)] for k in range(_K)]
)


class DegenerateRotationError(ValueError):
    """Rotation angle at pi: the logarithm axis is ambiguous."""


def hat(w):
    """Skew-symmetric matrix of a 3-vector (batched over leading axes)."""
    w = np.asarray(w, dtype=float)
    out = np.zeros(w.shape[:-1] + (3, 3))
    out[..., 0, 1] = -w[..., 2]
    out[..., 0, 2] = w[..., 1]
    out[..., 1, 0] = w[..., 2]
    out[..., 1, 2] = -w[..., 0]
    out[..., 2, 0] = -w[..., 1]
    out[..., 2, 1] = w[..., 0]
    return out


def vee(W):
    W = np.asarray(W, dtype=float)
    return np.stack([W[..., 2, 1], W[..., 0, 2], W[..., 1, 0]], axis=-1)


def so3_exp(w):
    w = np.asarray(w, dtype=float)
    theta = np.linalg.norm(w)
    W = hat(w)
    if theta < SMALL_ANGLE:
        return np.eye(3) + W + 0.5 * W @ W
    return np.eye(3) + (np.sin(theta) / theta) * W + ((1.0 - np.cos(theta)) / theta**2) * W @ W


def so3_log(R):
    R = np.asarray(R, dtype=float)
    w = 0.5 * vee(R - R.T)
    sin_t = np.linalg.norm(w)
    cos_t = np.clip(0.5 * (np.trace(R) - 1.0), -1.0, 1.0)
    theta = np.arctan2(sin_t, cos_t)
    if theta < SMALL_ANGLE:
        return w * (1.0 + theta**2 / 6.0)
    if theta < np.pi - 1e-3:
        return w * (theta / sin_t)
    # Near pi the antisymmetric part vanishes; recover the axis from the symmetric part.
    if sin_t < 1e-15:
        raise DegenerateRotationError("rotation angle is pi; logarithm is not unique")
    S = 0.5 * (R + R.T) - cos_t * np.eye(3)
    k = int(np.argmax(np.diag(S)))
    axis = S[:, k] / np.sqrt(S[k, k] * (1.0 - cos_t))
    axis /= np.linalg.norm(axis)
    if axis @ w < 0:
        axis = -axis
    return theta * axis


def _v_coefficients(sigma, theta):
    """Scalars (c, a, b) with V = c I + a W + b W^2, W = hat(omega)."""
    if sigma**2 + theta**2 < 1.0:
        sk = sigma ** np.arange(_K)
        tm = (theta**2) ** np.arange(_M)
        a = sk @ _SERIES_A @ tm
        b = sk @ _SERIES_B @ tm
        c = np.expm1(sigma) / sigma if sigma != 0.0 else 1.0
        return c, a, b
    es = np.exp(sigma)
    c = np.expm1(sigma) / sigma if sigma != 0.0 else 1.0
    if theta < SMALL_ANGLE:
        a = ((sigma - 1.0) * es + 1.0) / sigma**2
        b = (es * (sigma**2 - 2.0 * sigma + 2.0) - 2.0) / (2.0 * sigma**3)
        return c, a, b
    denom = sigma**2 + theta**2
    sin_int = (es * (sigma * np.sin(theta) - theta * np.cos(theta)) + theta) / denom
    cos_int = (es * (sigma * np.cos(theta) + theta * np.sin(theta)) - sigma) / denom
    return c, sin_int / theta, (c - cos_int) / theta**2


def _v_matrix(omega, sigma):
    theta = float(np.linalg.norm(omega))
    c, a, b = _v_coefficients(float(sigma), theta)
    W = hat(omega)
    return c * np.eye(3) + a * W + b * W @ W


def _orthonormalize(R):
    U, _, Vt = np.linalg.svd(R)
    Q = U @ Vt
    if np.linalg.det(Q) < 0:
        U[:, -1] *= -1
        Q = U @ Vt
    return Q


def _frozen(a):
    a = np.array(a, dtype=float)
    a.flags.writeable = False
    return a


@dataclass(frozen=True, eq=False)
class Sim3:
    """Similarity transform ``x -> s R x + t``. Immutable."""

    R: np.ndarray = field(default_factory=lambda: np.eye(3))
    t: np.ndarray = field(default_factory=lambda: np.zeros(3))
    s: float = 1.0
    chain: int = field(default=0, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "R", _frozen(np.reshape(self.R, (3, 3))))
        object.__setattr__(self, "t", _frozen(np.reshape(self.t, (3,))))
        object.__setattr__(self, "s", float(self.s))
        if not self.s > 0:
            raise ValueError(f"scale must be positive, got {self.s}")

    @classmethod
    def identity(cls) -> "Sim3":
        return cls()

    @classmethod
    def exp(cls, tau) -> "Sim3":
        return exp(tau)

    @classmethod
    def from_matrix(cls, M) -> "Sim3":
        M = np.asarray(M, dtype=float)
        sR = M[:3, :3]
        s = np.cbrt(np.linalg.det(sR))
        return cls(sR / s, M[:3, 3], s)

    def matrix(self) -> np.ndarray:
        M = np.eye(4)
        M[:3, :3] = self.s * self.R
        M[:3, 3] = self.t
        return M

    def log(self) -> np.ndarray:
        return log(self)

    def inverse(self) -> "Sim3":
        Rt = self.R.T
        return Sim3(Rt, -(Rt @ self.t) / self.s, 1.0 / self.s, self.chain)

    def compose(self, other: "Sim3") -> "Sim3":
        R = self.R @ other.R
        chain = max(self.chain, other.chain) + 1
        if chain > REORTHO_CHAIN:
            R, chain = _orthonormalize(R), 0
        return Sim3(R, self.s * (self.R @ other.t) + self.t, self.s * other.s, chain)

    __matmul__ = compose

    def act(self, x):
        """Apply to points of shape (..., 3)."""
        x = np.asarray(x, dtype=float)
        return self.s * (x @ self.R.T) + self.t

    def adjoint(self) -> np.ndarray:
        return adjoint(self)

    def center(self) -> np.ndarray:
        """Camera centre when the transform maps camera to world coordinates."""
        return self.t.copy()

    def __repr__(self):
        return f"Sim3(t={np.round(self.t, 6).tolist()}, rotvec={np.round(so3_log(self.R), 6).tolist()}, s={self.s:.6g})"


def exp(tau) -> Sim3:
    tau = np.asarray(tau, dtype=float).reshape(7)
    rho, omega, sigma = tau[:3], tau[3:6], tau[6]
    return Sim3(so3_exp(omega), _v_matrix(omega, sigma) @ rho, np.exp(sigma))


def log(T: Sim3) -> np.ndarray:
    omega = so3_log(T.R)
    sigma = np.log(T.s)
    rho = np.linalg.solve(_v_matrix(omega, sigma), T.t)
    return np.concatenate([rho, omega, [sigma]])


def oplus(tau, T: Sim3) -> Sim3:
    """Left-plus update ``Exp(tau) * T``."""
    return exp(tau) @ T


def act(T: Sim3, x):
    return T.act(x)


def relative_pose(T_wi: Sim3, T_wj: Sim3) -> Sim3:
    """``T_wi^-1 * T_wj``: maps frame-j coordinates into frame i."""
    return T_wi.inverse() @ T_wj


def adjoint(T: Sim3) -> np.ndarray:
    """7x7 matrix with ``Exp(Ad_T tau) = T Exp(tau) T^-1``."""
    Ad = np.zeros((7, 7))
    Ad[:3, :3] = T.s * T.R
    Ad[:3, 3:6] = hat(T.t) @ T.R
    Ad[:3, 6] = -T.t
    Ad[3:6, 3:6] = T.R
    Ad[6, 6] = 1.0
    return Ad


def point_jacobian(x):
    """Left-perturbation Jacobian ``[I, -[x]x, x]`` of transformed points, shape (..., 3, 7)."""
    x = np.asarray(x, dtype=float)
    J = np.zeros(x.shape[:-1] + (3, 7))
    J[..., :, :3] = np.eye(3)
    J[..., :, 3:6] = -hat(x)
    J[..., :, 6] = x
    return J


def random_sim3(rng, max_angle=np.pi * 0.95, trans_scale=1.0, log_scale_sigma=0.3) -> Sim3:
    """Sample a pose with rotation angle uniform in [0, max_angle)."""
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    angle = rng.uniform(0.0, max_angle)
    return Sim3(so3_exp(axis * angle), rng.normal(scale=trans_scale, size=3), np.exp(rng.normal(scale=log_scale_sigma)))
