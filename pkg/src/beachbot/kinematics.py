"""Differential kinematics of the 4-DoF survey arm.

The wrist joint is slaved so the last link stays vertical: gamma3 is always
``wrist_sum - gamma1 - gamma2`` and only (gamma0, gamma1, gamma2) are
controlled.  Positions are those of the last joint, in the arm base frame
(x forward, z up).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import JointLimitError, SingularityError

COND_LIMIT = 1e6
DAMPING_SCALE = 1e-4


@dataclass(frozen=True)
class ArmGeometry:
    r1: float = 0.13
    r2: float = 0.124
    alpha_j: float = 0.186
    wrist_sum: float = math.pi / 2

    def __post_init__(self):
        if self.r1 <= 0 or self.r2 <= 0:
            raise ValueError("link lengths must be positive")
        if abs(self.wrist_sum - math.pi / 2) > 0.1:
            raise ValueError(f"wrist_sum {self.wrist_sum} outside pi/2 +- 0.1")


@dataclass(frozen=True)
class JointLimits:
    lower: tuple[float, float, float]
    upper: tuple[float, float, float]

    @classmethod
    def around(cls, q: "JointConfig", half_width: float = math.pi / 2) -> "JointLimits":
        c = q.as_array()
        return cls(tuple(c - half_width), tuple(c + half_width))

    def contains(self, q: "JointConfig") -> bool:
        a = q.as_array()
        return bool(np.all(a >= self.lower) and np.all(a <= self.upper))

    def clamp(self, q: "JointConfig") -> tuple["JointConfig", bool]:
        a = q.as_array()
        c = np.clip(a, self.lower, self.upper)
        return JointConfig(*c), bool(np.any(c != a))


@dataclass(frozen=True)
class JointConfig:
    gamma0: float
    gamma1: float
    gamma2: float

    def gamma3(self, geom: ArmGeometry) -> float:
        return geom.wrist_sum - self.gamma1 - self.gamma2

    def as_array(self) -> np.ndarray:
        return np.array([self.gamma0, self.gamma1, self.gamma2], dtype=float)

    def __add__(self, delta) -> "JointConfig":
        d = np.asarray(delta, dtype=float)
        return JointConfig(self.gamma0 + d[0], self.gamma1 + d[1], self.gamma2 + d[2])


@dataclass(frozen=True)
class CylindricalPoint:
    r: float
    theta: float
    h: float

    def to_cartesian(self) -> "CartesianPoint":
        return CartesianPoint(self.r * math.cos(self.theta), self.r * math.sin(self.theta), self.h)


@dataclass(frozen=True)
class CartesianPoint:
    x: float
    y: float
    z: float

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z], dtype=float)


# Nominal scan pose: wrist about 0.2 m ahead of the base joint.  Limits default
# to +-pi/2 around it.
NOMINAL_Q = JointConfig(0.0, 0.95, 0.05)
DEFAULT_LIMITS = JointLimits.around(NOMINAL_Q)


def _check(q: JointConfig, limits: JointLimits | None):
    if limits is not None and not limits.contains(q):
        raise JointLimitError(f"{q} outside joint limits {limits}")


def forward_cylindrical(geom: ArmGeometry, q: JointConfig, limits: JointLimits | None = None) -> CylindricalPoint:
    _check(q, limits)
    delta = q.gamma1 + geom.alpha_j
    beta = -q.gamma1 - q.gamma2
    r = geom.r1 * math.sin(delta) + geom.r2 * math.cos(beta)
    h = geom.r1 * math.cos(delta) + geom.r2 * math.sin(beta)
    return CylindricalPoint(r, q.gamma0, h)


def forward_cartesian(geom: ArmGeometry, q: JointConfig, limits: JointLimits | None = None) -> CartesianPoint:
    return forward_cylindrical(geom, q, limits).to_cartesian()


def image_jacobian(geom: ArmGeometry, q: JointConfig, limits: JointLimits | None = None) -> np.ndarray:
    """Analytic d(x, y, z)/d(gamma0, gamma1, gamma2).

    The bottom row carries cos(beta); this is the exact derivative of the
    forward map and is what finite differences confirm.
    """
    _check(q, limits)
    delta = q.gamma1 + geom.alpha_j
    beta = -q.gamma1 - q.gamma2
    phi1 = geom.r1 * math.sin(delta)
    phi2 = geom.r2
    phi3 = geom.r1 * math.cos(delta)
    sb, cb = math.sin(beta), math.cos(beta)
    s0, c0 = math.sin(q.gamma0), math.cos(q.gamma0)
    return np.array(
        [
            [-(phi1 + phi2 * cb) * s0, (phi3 + phi2 * sb) * c0, phi2 * sb * c0],
            [(phi1 + phi2 * cb) * c0, (phi3 + phi2 * sb) * s0, phi2 * sb * s0],
            [0.0, -phi1 - phi2 * cb, -phi2 * cb],
        ]
    )


def solve_increment(
    geom: ArmGeometry,
    q: JointConfig,
    delta_pos,
    lam: float = 0.2,
    damping: bool = True,
) -> np.ndarray:
    """Joint increments moving the last joint by ``lam`` times ``delta_pos``.

    Falls back to damped least squares when cond(J) >= 1e6; raises
    SingularityError there instead if ``damping`` is False.
    """
    if not 0 < lam <= 1:
        raise ValueError(f"lambda must be in (0, 1], got {lam}")
    d = np.asarray(
        delta_pos.as_array() if isinstance(delta_pos, CartesianPoint) else delta_pos, dtype=float
    )
    J = image_jacobian(geom, q)
    cond = np.linalg.cond(J)
    if cond < COND_LIMIT:
        full = np.linalg.solve(J, d)
    elif damping:
        JtJ = J.T @ J
        mu = DAMPING_SCALE * np.trace(JtJ) / 3.0
        full = np.linalg.solve(JtJ + mu * np.eye(3), J.T @ d)
    else:
        raise SingularityError(q, cond)
    return lam * full


def solve_position(
    geom: ArmGeometry,
    target,
    q0: JointConfig = NOMINAL_Q,
    tol: float = 1e-12,
    max_iter: int = 100,
) -> JointConfig:
    """Newton iteration on the forward map; returns q reaching ``target``."""
    t = np.asarray(target.as_array() if isinstance(target, CartesianPoint) else target, dtype=float)
    q = q0
    for _ in range(max_iter):
        err = t - forward_cartesian(geom, q).as_array()
        if np.linalg.norm(err) < tol:
            return q
        q = q + solve_increment(geom, q, err, lam=1.0)
    raise ValueError(f"position {t} not reached from {q0}")
