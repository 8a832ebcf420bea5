"""Linear time-invariant plant with additive Gaussian disturbance.

The plant is simulated in discrete time at a base step ``dt``. Continuous
models are converted with an exact zero-order-hold discretization.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import expm

__all__ = [
    "InvalidModelError",
    "PlantModel",
    "PlantState",
    "discretize",
    "step",
    "measure",
    "double_integrator",
    "inverted_pendulum",
]


class InvalidModelError(ValueError):
    """Raised when plant matrices are malformed or non-finite."""


def _as_matrix(m, name: str) -> np.ndarray:
    arr = np.atleast_2d(np.asarray(m, dtype=float))
    if arr.ndim != 2:
        raise InvalidModelError(f"{name} must be a 2-D matrix, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise InvalidModelError(f"{name} has non-finite entries")
    return arr


def _check_psd(m: np.ndarray, name: str) -> None:
    if m.shape[0] != m.shape[1]:
        raise InvalidModelError(f"{name} must be square, got {m.shape}")
    if not np.allclose(m, m.T, atol=1e-12):
        raise InvalidModelError(f"{name} must be symmetric")
    if m.size and np.linalg.eigvalsh(m).min() < -1e-10:
        raise InvalidModelError(f"{name} must be positive semi-definite")


@dataclass(frozen=True, eq=False)
class PlantModel:
    """Discrete-time plant ``x' = A x + B u + w``, ``y = C x + v``.

    ``A`` and ``B`` are per-step matrices (already discretized at ``dt``).
    """

    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    disturbance_cov: np.ndarray
    measurement_noise_cov: np.ndarray
    dt: float
    # continuous-time matrices, kept so the model can be re-sampled
    A_c: np.ndarray | None = field(default=None, repr=False)
    B_c: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        A = _as_matrix(self.A, "A")
        B = _as_matrix(self.B, "B")
        C = _as_matrix(self.C, "C")
        W = _as_matrix(self.disturbance_cov, "disturbance_cov")
        V = _as_matrix(self.measurement_noise_cov, "measurement_noise_cov")
        if not np.isfinite(self.dt) or self.dt <= 0:
            raise InvalidModelError(f"dt must be positive, got {self.dt}")
        n = A.shape[0]
        if A.shape != (n, n):
            raise InvalidModelError(f"A must be square, got {A.shape}")
        if B.shape[0] != n:
            raise InvalidModelError(f"B has {B.shape[0]} rows, expected {n}")
        if C.shape[1] != n:
            raise InvalidModelError(f"C has {C.shape[1]} columns, expected {n}")
        if W.shape != (n, n):
            raise InvalidModelError(f"disturbance_cov must be {n}x{n}, got {W.shape}")
        if V.shape != (C.shape[0], C.shape[0]):
            raise InvalidModelError(
                f"measurement_noise_cov must be {C.shape[0]}x{C.shape[0]}, got {V.shape}"
            )
        _check_psd(W, "disturbance_cov")
        _check_psd(V, "measurement_noise_cov")
        for name, arr in (("A", A), ("B", B), ("C", C),
                          ("disturbance_cov", W), ("measurement_noise_cov", V)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        for name in ("A_c", "B_c"):
            val = getattr(self, name)
            if val is not None:
                arr = _as_matrix(val, name)
                arr.setflags(write=False)
                object.__setattr__(self, name, arr)
        object.__setattr__(self, "dt", float(self.dt))

    @property
    def n_x(self) -> int:
        return self.A.shape[0]

    @property
    def n_u(self) -> int:
        return self.B.shape[1]

    @property
    def n_y(self) -> int:
        return self.C.shape[0]

    def resample(self, dt: float) -> "PlantModel":
        """Return the same continuous plant discretized at a new step.

        Disturbance covariance is scaled linearly with the step length.
        """
        if self.A_c is None:
            raise InvalidModelError("model has no continuous-time description to resample")
        return discretize(
            self.A_c, self.B_c, dt, C=self.C,
            disturbance_cov=self.disturbance_cov * (dt / self.dt),
            measurement_noise_cov=self.measurement_noise_cov,
        )


@dataclass(frozen=True)
class PlantState:
    x: np.ndarray
    t: float = 0.0

    def __post_init__(self):
        x = np.asarray(self.x, dtype=float).reshape(-1)
        if not np.all(np.isfinite(x)):
            raise InvalidModelError("plant state has non-finite entries")
        object.__setattr__(self, "x", x)


def discretize(A, B, dt: float, C=None, disturbance_cov=None,
               measurement_noise_cov=None) -> PlantModel:
    """Zero-order-hold discretization of ``x_dot = A x + B u``.

    Uses the matrix exponential of the augmented block ``[[A, B], [0, 0]] * dt``,
    whose top blocks are ``A_d`` and ``B_d``.
    """
    A = _as_matrix(A, "A")
    B = _as_matrix(B, "B")
    if not np.isfinite(dt) or dt <= 0:
        raise InvalidModelError(f"dt must be positive, got {dt}")
    n, m = A.shape[0], B.shape[1]
    if A.shape != (n, n) or B.shape[0] != n:
        raise InvalidModelError(f"inconsistent shapes A{A.shape}, B{B.shape}")
    block = np.zeros((n + m, n + m))
    block[:n, :n] = A
    block[:n, n:] = B
    phi = expm(block * dt)
    C = np.eye(n) if C is None else C
    C = _as_matrix(C, "C")
    W = np.zeros((n, n)) if disturbance_cov is None else disturbance_cov
    V = np.zeros((C.shape[0], C.shape[0])) if measurement_noise_cov is None else measurement_noise_cov
    return PlantModel(phi[:n, :n], phi[:n, n:], C, W, V, dt, A_c=A, B_c=B)


def step(model: PlantModel, state: PlantState, u, w=None) -> PlantState:
    """Advance one step: ``x' = A x + B u + w`` and ``t' = t + dt``."""
    u = np.asarray(u, dtype=float).reshape(-1)
    if state.x.shape != (model.n_x,):
        raise ValueError(f"state has {state.x.size} entries, expected {model.n_x}")
    if u.shape != (model.n_u,):
        raise ValueError(f"u has {u.size} entries, expected {model.n_u}")
    w = np.zeros(model.n_x) if w is None else np.asarray(w, dtype=float).reshape(-1)
    if w.shape != (model.n_x,):
        raise ValueError(f"w has {w.size} entries, expected {model.n_x}")
    return PlantState(model.A @ state.x + model.B @ u + w, state.t + model.dt)


def measure(model: PlantModel, state: PlantState, v=None) -> np.ndarray:
    """Sensor reading ``C x + v``."""
    v = np.zeros(model.n_y) if v is None else np.asarray(v, dtype=float).reshape(-1)
    if v.shape != (model.n_y,):
        raise ValueError(f"v has {v.size} entries, expected {model.n_y}")
    return model.C @ state.x + v


def double_integrator(dt: float = 0.001, disturbance_std: float = 0.0,
                      noise_std: float = 0.0) -> PlantModel:
    """Unit-mass double integrator, state ``[position, velocity]``.

    ``disturbance_std`` is the continuous-time intensity of a force disturbance;
    per-step covariance is ``std**2 * dt`` on the velocity channel.
    """
    A = [[0.0, 1.0], [0.0, 0.0]]
    B = [[0.0], [1.0]]
    W = np.diag([0.0, disturbance_std**2 * dt])
    V = np.eye(2) * noise_std**2
    return discretize(A, B, dt, disturbance_cov=W, measurement_noise_cov=V)


def inverted_pendulum(dt: float = 0.001, length: float = 0.5, g: float = 9.81,
                      disturbance_std: float = 0.0, noise_std: float = 0.0) -> PlantModel:
    """Pendulum linearized about the upright position, state ``[angle, rate]``.

    Torque input is normalized by inertia; the open loop is unstable with pole
    ``sqrt(g / length)``.
    """
    A = [[0.0, 1.0], [g / length, 0.0]]
    B = [[0.0], [1.0]]
    W = np.diag([0.0, disturbance_std**2 * dt])
    V = np.eye(2) * noise_std**2
    return discretize(A, B, dt, disturbance_cov=W, measurement_noise_cov=V)
