"""Quadrotor rigid-body dynamics with rotor lag and a body-rate controller.

State is (p, q, v, w, Omega): position, world<-body unit quaternion,
velocity, body rates, and the four rotor speeds.  All functions accept
either a single state or a batch (leading axes broadcast), so many
simulator instances can be stepped with one call.
"""

from dataclasses import dataclass, field

import numpy as np

GRAVITY = np.array([0.0, 0.0, -9.81])


class ThrustRangeError(ValueError):
    """Motor thrust outside [f_min, f_max]."""


@dataclass
class QuadParams:
    """Physical parameters of the quadrotor."""

    m: float = 0.85                # mass [kg]
    J: np.ndarray = field(default_factory=lambda: np.array([1e-3, 1e-3, 1.7e-3]))  # diagonal inertia [kg m^2]
    l: float = 0.15                # arm length [m]
    kappa: float = 0.05            # torque constant [-]
    c_f: float = 1.563e-6          # thrust coefficient [N s^2/rad^2]
    f_min: float = 0.0             # per-motor thrust bounds [N]
    f_max: float = 7.0
    k_mot: float = 0.033           # motor time constant [s]
    k_v: np.ndarray = field(default_factory=lambda: np.array([0.26, 0.28, 0.42]))  # linear drag [N s/m]
    w_max: float = 15.0            # body-rate limit [rad/s]
    g: np.ndarray = field(default_factory=lambda: GRAVITY.copy())
    K_w: np.ndarray = field(default_factory=lambda: np.array([20.0, 20.0, 8.0]))  # body-rate P gain [1/s]

    def __post_init__(self):
        self.J = np.asarray(self.J, dtype=float)
        self.k_v = np.asarray(self.k_v, dtype=float)
        self.g = np.asarray(self.g, dtype=float)
        self.K_w = np.asarray(self.K_w, dtype=float)
        if self.m <= 0:
            raise ValueError("mass must be positive")
        if np.any(self.J <= 0):
            raise ValueError("inertia components must be positive")
        if not (0 <= self.f_min < self.f_max):
            raise ValueError("thrust bounds must satisfy 0 <= f_min < f_max")
        if self.c_f <= 0:
            raise ValueError("thrust coefficient must be positive")
        if self.k_mot <= 0:
            raise ValueError("motor time constant must be positive")

    @property
    def hover_thrust(self):
        """Per-motor thrust at hover [N]."""
        return self.m * np.linalg.norm(self.g) / 4.0

    @property
    def mixing_matrix(self):
        """Maps per-motor thrusts to (collective thrust, body torque)."""
        c = self.l / np.sqrt(2.0)
        return np.array([
            [1.0, 1.0, 1.0, 1.0],
            [c, -c, -c, c],
            [-c, -c, c, c],
            [self.kappa, -self.kappa, self.kappa, -self.kappa],
        ])


@dataclass
class QuadState:
    """Quadrotor state; fields may carry leading batch axes."""

    p: np.ndarray
    q: np.ndarray
    v: np.ndarray
    w: np.ndarray
    omega: np.ndarray  # rotor speeds [rad/s]

    @classmethod
    def hover(cls, p=(0.0, 0.0, 0.0), params: QuadParams | None = None):
        """State at rest at `p`, rotors spinning at hover speed."""
        params = params or QuadParams()
        omega_h = motor_speed_for_thrust(params.hover_thrust, params)
        return cls(
            p=np.asarray(p, dtype=float),
            q=np.array([1.0, 0.0, 0.0, 0.0]),
            v=np.zeros(3),
            w=np.zeros(3),
            omega=np.full(4, omega_h),
        )

    def copy(self):
        return QuadState(self.p.copy(), self.q.copy(), self.v.copy(),
                         self.w.copy(), self.omega.copy())


@dataclass
class BodyRateCommand:
    """Collective thrust [N] along body z plus commanded body rates [rad/s]."""

    f_T: np.ndarray
    w_cmd: np.ndarray


@dataclass
class MotorCommand:
    """Commanded rotor speeds [rad/s]; `saturated` reports allocation clamping."""

    omega_c: np.ndarray
    saturated: np.ndarray | bool = False


# ---------------------------------------------------------------------------
# quaternion helpers (scalar-first convention, batched on the last axis)

def quat_mul(a, b):
    aw, ax, ay, az = np.moveaxis(a, -1, 0)
    bw, bx, by, bz = np.moveaxis(b, -1, 0)
    return np.stack([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ], axis=-1)


def quat_to_rot(q):
    """Rotation matrix R(q), world<-body, shape (..., 3, 3)."""
    w, x, y, z = np.moveaxis(q, -1, 0)
    row0 = np.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], axis=-1)
    row1 = np.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], axis=-1)
    row2 = np.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], axis=-1)
    return np.stack([row0, row1, row2], axis=-2)


def quat_rotate(q, vec):
    """Rotate body-frame vector into world frame."""
    return np.einsum("...ij,...j->...i", quat_to_rot(q), vec)


def quat_rotate_inv(q, vec):
    """Rotate world-frame vector into body frame."""
    return np.einsum("...ji,...j->...i", quat_to_rot(q), vec)


def quat_normalize(q):
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


# ---------------------------------------------------------------------------
# motor and force models

def motor_thrust(omega, params: QuadParams):
    """Per-motor thrust f = c_f * Omega^2."""
    omega = np.asarray(omega, dtype=float)
    if np.any(omega < 0):
        raise ValueError("rotor speed must be nonnegative")
    return params.c_f * omega ** 2


def motor_speed_for_thrust(f, params: QuadParams):
    """Inverse of the quadratic thrust map."""
    f = np.asarray(f, dtype=float)
    if np.any(f < 0):
        raise ValueError("thrust must be nonnegative")
    return np.sqrt(f / params.c_f)


def _mix(f, params: QuadParams):
    """Per-motor thrusts -> (collective force vector, body torque). No range check."""
    f1, f2, f3, f4 = np.moveaxis(f, -1, 0)
    total = f1 + f2 + f3 + f4
    f_T = np.stack([np.zeros_like(total), np.zeros_like(total), total], axis=-1)
    c = params.l / np.sqrt(2.0)
    tau = np.stack([
        c * (f1 - f2 - f3 + f4),
        c * (-f1 - f2 + f3 + f4),
        params.kappa * (f1 - f2 + f3 - f4),
    ], axis=-1)
    return f_T, tau


def thrust_torque(f, params: QuadParams):
    """Collective thrust vector and body torque from the four motor thrusts.

    Raises ThrustRangeError when any thrust is outside [f_min, f_max];
    clamping is the low-level controller's job, not the model's.
    """
    f = np.asarray(f, dtype=float)
    if np.any(f < params.f_min - 1e-12) or np.any(f > params.f_max + 1e-12):
        raise ThrustRangeError(
            f"motor thrusts {f} outside [{params.f_min}, {params.f_max}]")
    return _mix(f, params)


def drag_force(v_body, params: QuadParams):
    """Linear body-frame drag, f_D = -k_v * v_body (componentwise)."""
    return -params.k_v * np.asarray(v_body, dtype=float)


def state_derivative(state: QuadState, motor_thrusts, params: QuadParams):
    """Time derivative of (p, q, v, w) for given per-motor thrusts.

    Rotor-speed dynamics are handled by the first-order motor model in
    step(); this function covers the rigid body only.
    """
    f_T, tau = _mix(np.asarray(motor_thrusts, dtype=float), params)
    v_body = quat_rotate_inv(state.q, state.v)
    f_D = drag_force(v_body, params)
    dp = state.v
    dv = quat_rotate(state.q, f_T + f_D) / params.m + params.g
    zeros = np.zeros(state.w.shape[:-1] + (1,))
    dq = 0.5 * quat_mul(state.q, np.concatenate([zeros, state.w], axis=-1))
    dw = (tau - np.cross(state.w, params.J * state.w)) / params.J
    return dp, dq, dv, dw


def _full_derivative(p, q, v, w, omega, omega_c, params):
    state = QuadState(p, q, v, w, omega)
    f = params.c_f * omega ** 2
    dp, dq, dv, dw = state_derivative(state, f, params)
    domega = (omega_c - omega) / params.k_mot
    return dp, dq, dv, dw, domega


def step(state: QuadState, cmd: MotorCommand, dt: float, params: QuadParams) -> QuadState:
    """One RK4 step of the full dynamics, rotor lag included in each stage."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    y = (state.p, state.q, state.v, state.w, state.omega)
    omega_c = np.asarray(cmd.omega_c, dtype=float)

    k1 = _full_derivative(*y, omega_c, params)
    y2 = tuple(a + 0.5 * dt * k for a, k in zip(y, k1))
    k2 = _full_derivative(*y2, omega_c, params)
    y3 = tuple(a + 0.5 * dt * k for a, k in zip(y, k2))
    k3 = _full_derivative(*y3, omega_c, params)
    y4 = tuple(a + dt * k for a, k in zip(y, k3))
    k4 = _full_derivative(*y4, omega_c, params)

    out = [a + dt / 6.0 * (a1 + 2 * a2 + 2 * a3 + a4)
           for a, a1, a2, a3, a4 in zip(y, k1, k2, k3, k4)]
    p, q, v, w, omega = out
    return QuadState(p, quat_normalize(q), v, w, np.maximum(omega, 0.0))


def low_level_control(state: QuadState, cmd: BodyRateCommand, params: QuadParams) -> MotorCommand:
    """Track a collective-thrust/body-rate command with a diagonal P law.

    Desired torque is J*K_w*(w_cmd - w) + w x Jw; the mixing matrix is
    solved for per-motor thrusts which are clamped to [f_min, f_max] and
    converted to rotor-speed commands.  Saturation is silent but flagged.
    """
    f_T = np.clip(np.asarray(cmd.f_T, dtype=float), 4 * params.f_min, 4 * params.f_max)
    w_cmd = np.clip(np.asarray(cmd.w_cmd, dtype=float), -params.w_max, params.w_max)
    tau = params.J * (params.K_w * (w_cmd - state.w)) + np.cross(state.w, params.J * state.w)
    wrench = np.concatenate([f_T[..., None], tau], axis=-1)
    f = np.einsum("ij,...j->...i", np.linalg.inv(params.mixing_matrix), wrench)
    clamped = np.clip(f, params.f_min, params.f_max)
    saturated = np.any(np.abs(clamped - f) > 1e-9, axis=-1)
    return MotorCommand(omega_c=motor_speed_for_thrust(clamped, params),
                        saturated=saturated)
