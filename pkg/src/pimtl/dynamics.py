"""Single-DOF wrist rigid-body model.

Equation of motion used throughout the package (simulator and physics loss)::

    I * theta_ddot + b * theta_dot + m * g * l * sin(theta) = tau
    tau = sum_n r_n * F_n

Flexion is positive; extensor moment arms are negative.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

MUSCLES = ("FCR", "FCU", "ECRL", "ECRB", "ECU")
DEFAULT_MOMENT_ARMS = (0.015, 0.018, -0.014, -0.012, -0.016)


class DimensionError(ValueError):
    pass


class InvalidParameterError(ValueError):
    pass


@dataclass(frozen=True)
class WristDynamicsParams:
    inertia: float = 0.004      # kg m^2
    damping: float = 0.05       # N m s / rad
    mass: float = 0.5           # kg
    com_length: float = 0.1     # m
    gravity: float = 9.81       # m / s^2

    def __post_init__(self):
        if not self.inertia > 0:
            raise InvalidParameterError(f"inertia must be > 0, got {self.inertia}")
        for name in ("damping", "mass", "com_length"):
            if getattr(self, name) < 0:
                raise InvalidParameterError(f"{name} must be >= 0, got {getattr(self, name)}")

    @classmethod
    def unchecked(cls, **kw) -> "WristDynamicsParams":
        """Build without validation (degenerate physics, e.g. I = 0, in tests)."""
        obj = object.__new__(cls)
        base = {f: getattr(cls, f) for f in ("inertia", "damping", "mass", "com_length", "gravity")}
        base.update(kw)
        for k, v in base.items():
            object.__setattr__(obj, k, float(v))
        return obj


@dataclass(frozen=True)
class MomentArms:
    r: tuple = field(default=DEFAULT_MOMENT_ARMS)

    def __post_init__(self):
        r = tuple(float(v) for v in self.r)
        if any(math.isnan(v) for v in r):
            raise InvalidParameterError("moment arm is NaN")
        object.__setattr__(self, "r", r)

    def __len__(self):
        return len(self.r)

    def as_array(self) -> np.ndarray:
        return np.asarray(self.r, dtype=np.float64)


@dataclass(frozen=True)
class JointState:
    theta: float
    theta_dot: float
    theta_ddot: float


def joint_torque(forces, arms: MomentArms):
    """Joint torque sum_n r_n F_n.

    ``forces`` may be a length-N vector or a (..., N) array; the last axis is
    contracted.
    """
    f = np.asarray(forces, dtype=np.float64)
    r = arms.as_array()
    if f.shape[-1:] != r.shape:
        raise DimensionError(f"forces last dim {f.shape[-1:]} != {len(r)} moment arms")
    out = f @ r
    return float(out) if out.ndim == 0 else out


def gravity_torque(p: WristDynamicsParams, theta):
    return p.mass * p.gravity * p.com_length * np.sin(theta)


def eom_residual(p: WristDynamicsParams, s: JointState, tau):
    return (p.inertia * s.theta_ddot + p.damping * s.theta_dot
            + gravity_torque(p, s.theta) - tau)


def forward_accel(p: WristDynamicsParams, theta, theta_dot, tau):
    if not p.inertia > 0:
        raise InvalidParameterError(f"inertia must be > 0, got {p.inertia}")
    return (tau - p.damping * theta_dot - gravity_torque(p, theta)) / p.inertia
