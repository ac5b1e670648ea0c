"""Point-mass UAV plant, box-constrained MPC and linear Kalman estimator.

Per axis the model is a double integrator with linear drag, Euler-discretized:

    p[k+1] = p[k] + Ts * v[k]
    v[k+1] = v[k] + Ts * (u[k] - c * v[k])

Axes are decoupled and share the same matrices, so arrays carry a trailing
axis dimension (2 for the planar UAV; 1 is fine for scalar test problems).
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields, replace
from functools import lru_cache
from typing import Callable, Optional, Sequence

import numpy as np


class OptimizerDivergenceError(RuntimeError):
    pass


class NumericalDegeneracyError(RuntimeError):
    pass


class ConfigError(ValueError):
    pass


@dataclass
class UavState:
    position: np.ndarray
    velocity: np.ndarray

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=float)
        self.velocity = np.asarray(self.velocity, dtype=float)

    @classmethod
    def at_rest(cls, position=(0.0, 0.0)) -> "UavState":
        p = np.asarray(position, dtype=float)
        return cls(p, np.zeros_like(p))

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.position, self.velocity])

    @classmethod
    def from_vector(cls, x: np.ndarray) -> "UavState":
        d = len(x) // 2
        return cls(np.array(x[:d], dtype=float), np.array(x[d:], dtype=float))

    def copy(self) -> "UavState":
        return UavState(self.position.copy(), self.velocity.copy())


def _default_q() -> tuple[float, float, float, float]:
    # process noise of 0.5 m/s^2 integrated over the nominal 50 ms step
    qv = (0.5 * 0.05) ** 2
    qp = (0.5 * 0.5 * 0.05**2) ** 2
    return (qp, qp, qv, qv)


@dataclass
class MpcConfig:
    """Adaptable controller parameters. Current values default to nominal."""

    Np_nominal: int = 20
    Np_min: int = 5
    Ts_nominal: float = 0.05
    Ts_min: float = 0.02
    u_bound_nominal: float = 4.0
    C_drag_nominal: float = 0.1
    Q_nominal: tuple = field(default_factory=_default_q)
    w_pos: float = 1.0
    w_vel: float = 0.1
    w_u: float = 0.01
    iterations: int = 30
    step_size: Optional[float] = None  # None: 1 / Lipschitz constant of the gradient
    Np: Optional[int] = None
    Ts: Optional[float] = None
    u_bound: Optional[float] = None
    C_drag: Optional[float] = None
    Q_scale: float = 1.0

    def __post_init__(self):
        self.Q_nominal = tuple(float(q) for q in self.Q_nominal)
        if self.Np is None:
            self.Np = self.Np_nominal
        if self.Ts is None:
            self.Ts = self.Ts_nominal
        if self.u_bound is None:
            self.u_bound = self.u_bound_nominal
        if self.C_drag is None:
            self.C_drag = self.C_drag_nominal

    def validate(self) -> "MpcConfig":
        problems = []
        if not (isinstance(self.Np, int) and isinstance(self.Np_min, int) and isinstance(self.Np_nominal, int)):
            problems.append("Np, Np_min, Np_nominal must be integers")
        elif not (self.Np >= self.Np_min >= 1 and self.Np_nominal >= self.Np_min):
            problems.append(f"need Np ({self.Np}) and Np_nominal ({self.Np_nominal}) >= Np_min ({self.Np_min}) >= 1")
        if not (self.Ts_min > 0 and self.Ts >= self.Ts_min and self.Ts_nominal >= self.Ts_min):
            problems.append(f"need Ts ({self.Ts}) and Ts_nominal >= Ts_min ({self.Ts_min}) > 0")
        if not (self.u_bound > 0 and self.u_bound_nominal > 0):
            problems.append("u_bound must be > 0")
        if not (self.C_drag >= 0 and self.C_drag_nominal >= 0):
            problems.append("C_drag must be >= 0")
        if len(self.Q_nominal) != 4 or not all(q > 0 for q in self.Q_nominal) or not self.Q_scale > 0:
            problems.append("Q diagonal entries must be > 0")
        if min(self.w_pos, self.w_vel) < 0 or self.w_u <= 0:
            problems.append("weights must be >= 0 (w_u > 0)")
        if self.iterations < 1:
            problems.append("iterations must be >= 1")
        if self.step_size is not None and not self.step_size > 0:
            problems.append("step_size must be > 0")
        if problems:
            raise ConfigError("; ".join(problems))
        return self

    @property
    def Q(self) -> np.ndarray:
        return np.diag(self.Q_nominal) * self.Q_scale

    def copy(self, **changes) -> "MpcConfig":
        return replace(self, **changes)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["Q_nominal"] = list(self.Q_nominal)
        return d

    @classmethod
    def field_names(cls) -> set[str]:
        return {f.name for f in fields(cls)}


@dataclass
class PlantParams:
    drag: float = 0.1
    wind: Optional[Callable[[float], np.ndarray] | Sequence[float]] = None
    process_noise_std: float = 0.0
    measurement_noise_std: tuple = (0.0, 0.0)  # (position m, velocity m/s)

    def __post_init__(self):
        if self.process_noise_std < 0 or min(self.measurement_noise_std) < 0:
            raise ConfigError("noise stds must be >= 0")

    def wind_at(self, t: float, dim: int) -> np.ndarray:
        if self.wind is None:
            return np.zeros(dim)
        if callable(self.wind):
            return np.asarray(self.wind(t), dtype=float)
        return np.asarray(self.wind, dtype=float)

    @property
    def R(self) -> np.ndarray:
        sp, sv = self.measurement_noise_std
        return np.diag([sp**2, sp**2, sv**2, sv**2])


def step_plant(
    state: UavState,
    u: np.ndarray,
    params: PlantParams,
    t: float,
    rng: Optional[np.random.Generator],
    ts: float,
) -> UavState:
    """One Euler step of the true dynamics.

    Wind acts through drag on the air-relative velocity, so the wind force is
    ``drag * wind``. A noise sample is always drawn when an rng is given so the
    random stream does not depend on the noise level.
    """
    v = state.velocity
    dim = len(v)
    accel = np.asarray(u, dtype=float) - params.drag * (v - params.wind_at(t, dim))
    if rng is not None:
        accel = accel + params.process_noise_std * rng.standard_normal(dim)
    return UavState(state.position + ts * v, v + ts * accel)


def predict_horizon(x0: UavState, u_seq: Sequence[np.ndarray], config: MpcConfig) -> list[UavState]:
    """Roll the controller's model (no wind, no noise) over the horizon."""
    if len(u_seq) != config.Np:
        raise ValueError(f"u_seq has {len(u_seq)} steps, horizon is {config.Np}")
    ts, c = config.Ts, config.C_drag
    p, v = x0.position.copy(), x0.velocity.copy()
    out = []
    for u in u_seq:
        p, v = p + ts * v, v + ts * (np.asarray(u, dtype=float) - c * v)
        out.append(UavState(p, v))
    return out


@dataclass(frozen=True)
class _Condensed:
    phi: np.ndarray  # (2Np, 2): maps per-axis (p0, v0) to stacked [p_1..p_Np, v_1..v_Np]
    gamma: np.ndarray  # (2Np, Np): maps per-axis inputs to the same stack
    weights: np.ndarray  # (2Np, 1)
    hess: np.ndarray  # (Np, Np): G^T W G + w_u I, half the cost Hessian
    gtw: np.ndarray  # (Np, 2Np): G^T W
    step: float


@lru_cache(maxsize=64)
def _condensed(np_: int, ts: float, c: float, w_pos: float, w_vel: float, w_u: float) -> _Condensed:
    a = 1.0 - c * ts
    A = np.array([[1.0, ts], [0.0, a]])
    B = np.array([0.0, ts])
    phi = np.zeros((2 * np_, 2))
    gamma = np.zeros((2 * np_, np_))
    Ak = np.eye(2)
    # columns of A^j B
    AjB = [B]
    for _ in range(np_ - 1):
        AjB.append(A @ AjB[-1])
    for k in range(1, np_ + 1):
        Ak = A @ Ak
        phi[k - 1] = Ak[0]
        phi[np_ + k - 1] = Ak[1]
        for j in range(k):
            col = AjB[k - 1 - j]
            gamma[k - 1, j] = col[0]
            gamma[np_ + k - 1, j] = col[1]
    weights = np.concatenate([np.full(np_, w_pos), np.full(np_, w_vel)])[:, None]
    gtw = gamma.T * weights.T
    hess = gtw @ gamma + w_u * np.eye(np_)
    lipschitz = 2.0 * float(np.linalg.eigvalsh(hess)[-1])
    for arr in (phi, gamma, weights, hess, gtw):
        arr.setflags(write=False)
    return _Condensed(phi, gamma, weights, hess, gtw, 1.0 / lipschitz)


def _model(config: MpcConfig) -> _Condensed:
    return _condensed(config.Np, float(config.Ts), float(config.C_drag), config.w_pos, config.w_vel, config.w_u)


@dataclass
class RefWindow:
    """Reference over the horizon: rows k = 1..Np after the current time."""

    positions: np.ndarray  # (Np, d)
    velocities: np.ndarray  # (Np, d)

    def stacked(self) -> np.ndarray:
        return np.vstack([self.positions, self.velocities])


def _x0_matrix(x0: UavState) -> np.ndarray:
    return np.vstack([x0.position, x0.velocity])  # (2, d)


def horizon_cost(x0: UavState, u_seq: np.ndarray, ref: RefWindow, config: MpcConfig) -> float:
    """Tracking cost evaluated by explicit rollout (independent of the condensed path)."""
    preds = predict_horizon(x0, list(u_seq), config)
    j = 0.0
    for k, st in enumerate(preds):
        j += config.w_pos * float(np.sum((st.position - ref.positions[k]) ** 2))
        j += config.w_vel * float(np.sum((st.velocity - ref.velocities[k]) ** 2))
    return j + config.w_u * float(np.sum(np.asarray(u_seq) ** 2))


def cost_and_gradient(x0: UavState, u_seq: np.ndarray, ref: RefWindow, config: MpcConfig) -> tuple[float, np.ndarray]:
    """Cost and gradient through the condensed linear model.

    The gradient ``2 G^T W e + 2 w_u U`` is the backward (adjoint) recursion
    unrolled into one transposed matrix product.
    """
    m = _model(config)
    u = np.asarray(u_seq, dtype=float)
    e = m.phi @ _x0_matrix(x0) + m.gamma @ u - ref.stacked()
    we = m.weights * e
    j = float(np.sum(we * e) + config.w_u * np.sum(u * u))
    g = 2.0 * (m.gamma.T @ we) + 2.0 * config.w_u * u
    return j, g


def gradient_adjoint(x0: UavState, u_seq: np.ndarray, ref: RefWindow, config: MpcConfig) -> np.ndarray:
    """Gradient by an explicit backward costate recursion over the horizon."""
    ts, c = config.Ts, config.C_drag
    u = np.asarray(u_seq, dtype=float)
    preds = predict_horizon(x0, list(u), config)
    lam_p = np.zeros_like(x0.position)
    lam_v = np.zeros_like(x0.velocity)
    g = np.zeros_like(u)
    for k in range(len(u) - 1, -1, -1):
        # costate of x_{k+1} = stage-cost gradient + A^T costate of x_{k+2}
        st = preds[k]
        lp = 2.0 * config.w_pos * (st.position - ref.positions[k]) + lam_p
        lv = 2.0 * config.w_vel * (st.velocity - ref.velocities[k]) + lam_v
        g[k] = ts * lv + 2.0 * config.w_u * u[k]
        lam_p, lam_v = lp, ts * lp + (1.0 - c * ts) * lv
    return g


@dataclass
class OptimizerIo:
    s_features: tuple  # (|position error|, |velocity error|, terminal predicted cost)
    a_features: tuple  # applied acceleration components
    cost: float
    iterations: int
    saturated: tuple
    cost_history: list


def optimize(
    x0: UavState,
    ref: RefWindow,
    config: MpcConfig,
    u_init: Optional[np.ndarray] = None,
    ref_now: Optional[tuple[np.ndarray, np.ndarray]] = None,
) -> tuple[np.ndarray, OptimizerIo]:
    """Projected gradient descent on the box-constrained horizon cost.

    ``u_init`` warm-starts the iterate (already shifted by the caller);
    ``ref_now`` is the reference (position, velocity) at the current time,
    used only for the S features.
    """
    np_ = config.Np
    if len(ref.positions) < np_ or len(ref.velocities) < np_:
        raise ValueError("reference window shorter than horizon")
    if len(ref.positions) > np_:
        ref = RefWindow(ref.positions[:np_], ref.velocities[:np_])
    m = _model(config)
    ub = config.u_bound
    dim = len(x0.position)
    free = m.phi @ _x0_matrix(x0) - ref.stacked()
    # J(U) = sum(U * (H U)) + 2 sum(f * U) + c0, gradient 2 (H U + f)
    f = m.gtw @ free
    c0 = float(np.sum(m.weights * free * free))
    u = np.zeros((np_, dim)) if u_init is None else np.clip(np.asarray(u_init, dtype=float), -ub, ub)
    hess = m.hess
    f2 = 2.0 * f
    vdot, maximum, minimum = np.vdot, np.maximum, np.minimum
    hu = hess @ u
    j = float(vdot(u, hu + f2)) + c0
    if not math.isfinite(j):
        raise OptimizerDivergenceError(f"non-finite initial cost {j}")
    base_step = config.step_size if config.step_size is not None else m.step
    history = [j]
    used = 0
    for _ in range(config.iterations):
        g = 2.0 * hu + f2
        step = base_step
        while True:
            u_new = u - step * g
            minimum(maximum(u_new, -ub, out=u_new), ub, out=u_new)
            hu_new = hess @ u_new
            j_new = float(vdot(u_new, hu_new + f2)) + c0
            if not math.isfinite(j_new):
                raise OptimizerDivergenceError(f"non-finite cost {j_new}")
            if j_new <= j:
                break
            step *= 0.5
            if step < 1e-12 * base_step:
                u_new, hu_new, j_new = u, hu, j
                break
        used += 1
        stalled = j_new == j
        u, hu, j = u_new, hu_new, j_new
        history.append(j)
        if stalled:
            break

    e = free + m.gamma @ u
    terminal = config.w_pos * float(np.sum(e[np_ - 1] ** 2)) + config.w_vel * float(np.sum(e[2 * np_ - 1] ** 2))
    if ref_now is None:
        pos_err = vel_err = 0.0
    else:
        pos_err = float(np.linalg.norm(x0.position - ref_now[0]))
        vel_err = float(np.linalg.norm(x0.velocity - ref_now[1]))
    u0 = u[0]
    io = OptimizerIo(
        s_features=(pos_err, vel_err, terminal),
        a_features=tuple(float(x) for x in u0),
        cost=j,
        iterations=used,
        saturated=tuple(bool(abs(x) >= ub) for x in u0),
        cost_history=history,
    )
    return u, io


def shift_warm_start(u_prev: Optional[np.ndarray], np_: int, dim: int = 2) -> np.ndarray:
    """Shift the previous solution by one step and fit it to horizon ``np_``.

    The last input is repeated after the shift; a longer horizon is padded with
    zeros, a shorter one truncated.
    """
    if u_prev is None or len(u_prev) == 0:
        return np.zeros((np_, dim))
    shifted = np.vstack([u_prev[1:], u_prev[-1:]])
    if len(shifted) >= np_:
        return shifted[:np_].copy()
    return np.vstack([shifted, np.zeros((np_ - len(shifted), shifted.shape[1]))])


@dataclass
class KalmanEstimate:
    x: np.ndarray  # [px, py, vx, vy]
    P: np.ndarray

    def state(self) -> UavState:
        return UavState.from_vector(self.x)


def _fb(ts: float, c: float) -> tuple[np.ndarray, np.ndarray]:
    i2 = np.eye(2)
    z2 = np.zeros((2, 2))
    F = np.block([[i2, ts * i2], [z2, (1.0 - c * ts) * i2]])
    B = np.vstack([z2, ts * i2])
    return F, B


def kalman_step(
    prior: KalmanEstimate,
    u: np.ndarray,
    measurement: Optional[np.ndarray],
    config: MpcConfig,
    R: np.ndarray,
) -> KalmanEstimate:
    """Linear predict with the current Q, then update with a full-state measurement."""
    F, B = _fb(config.Ts, config.C_drag)
    x = F @ prior.x + B @ np.asarray(u, dtype=float)
    P = F @ prior.P @ F.T + config.Q
    if measurement is None:
        return KalmanEstimate(x, 0.5 * (P + P.T))
    S = P + R
    if np.linalg.cond(S) > 1e12:
        raise NumericalDegeneracyError("innovation covariance is singular")
    K = np.linalg.solve(S, P).T  # P S^-1, S and P symmetric
    x = x + K @ (np.asarray(measurement, dtype=float) - x)
    IK = np.eye(4) - K
    P = IK @ P @ IK.T + K @ R @ K.T
    return KalmanEstimate(x, 0.5 * (P + P.T))


class Trajectory:
    """Reference states sampled at fixed timestamps, linearly interpolated between knots."""

    def __init__(self, times: np.ndarray, positions: np.ndarray, velocities: np.ndarray):
        self.times = np.asarray(times, dtype=float)
        self.positions = np.asarray(positions, dtype=float)
        self.velocities = np.asarray(velocities, dtype=float)
        n = len(self.times)
        if self.positions.shape[0] != n or self.velocities.shape[0] != n:
            raise ValueError("times, positions and velocities must have equal length")
        if n == 0 or not (np.all(np.isfinite(self.positions)) and np.all(np.isfinite(self.velocities))):
            raise ValueError("trajectory must be non-empty and finite")
        if n > 1 and np.any(np.diff(self.times) <= 0):
            raise ValueError("trajectory times must be strictly increasing")

    def __len__(self) -> int:
        return len(self.times)

    def sample(self, times) -> tuple[np.ndarray, np.ndarray]:
        """Interpolated (positions, velocities) at ``times``; clamps beyond the ends."""
        t = np.atleast_1d(np.asarray(times, dtype=float))
        pos = np.column_stack([np.interp(t, self.times, self.positions[:, i]) for i in range(self.positions.shape[1])])
        vel = np.column_stack([np.interp(t, self.times, self.velocities[:, i]) for i in range(self.velocities.shape[1])])
        return pos, vel

    def window(self, t: float, np_: int, ts: float) -> RefWindow:
        pos, vel = self.sample(t + ts * np.arange(1, np_ + 1))
        return RefWindow(pos, vel)

    def resample(self, ts: float) -> "Trajectory":
        n = int(math.floor((self.times[-1] - self.times[0]) / ts + 1e-9)) + 1
        times = self.times[0] + ts * np.arange(n)
        pos, vel = self.sample(times)
        return Trajectory(times, pos, vel)
