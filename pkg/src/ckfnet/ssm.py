"""State-space models, land-vehicle navigation scenarios and a seeded simulator."""
from __future__ import annotations

import dataclasses
import io
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Optional

import numpy as np

from .linalg import as_vector, chol_lower

ZERO_NOISE_LEVEL = 1e-30
SENSOR_POSITION = (100.0, 100.0)

MODEL_IDS = ("linear_full", "linear_partial", "nonlinear")


class RngStream:
    """Deterministic Gaussian source on a Philox counter-based generator.

    The (seed, stream) pair is the Philox key, so distinct streams of the
    same seed are independent and every draw is reproducible on any platform.
    Normals come from the Box-Muller transform of 53-bit uniforms.
    """

    def __init__(self, seed: int, stream: int = 0):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.stream = int(stream) & 0xFFFFFFFFFFFFFFFF
        self._bits = np.random.Philox(key=np.array([self.seed, self.stream], dtype=np.uint64))
        self.counter = 0

    def uniforms(self, size: int) -> np.ndarray:
        """`size` draws in [0, 1) with 53 bits of resolution."""
        raw = self._bits.random_raw(size)
        self.counter += size
        return (raw >> np.uint64(11)).astype(np.float64) * (1.0 / 9007199254740992.0)

    def uniform(self, low: float, high: float, size: int) -> np.ndarray:
        return low + (high - low) * self.uniforms(size)

    def normals(self, shape) -> np.ndarray:
        shape = (shape,) if np.isscalar(shape) else tuple(shape)
        count = int(np.prod(shape))
        pairs = (count + 1) // 2
        u = self.uniforms(2 * pairs)
        radius = np.sqrt(-2.0 * np.log1p(-u[:pairs]))  # 1 - u lies in (0, 1]
        angle = 2.0 * np.pi * u[pairs:]
        z = np.concatenate([radius * np.cos(angle), radius * np.sin(angle)])
        return z[:count].reshape(shape)

    def permutation(self, n: int) -> np.ndarray:
        # Fisher-Yates on our own uniforms keeps shuffles platform independent.
        order = np.arange(n)
        u = self.uniforms(max(n - 1, 0))
        for i in range(n - 1, 0, -1):
            j = int(u[n - 1 - i] * (i + 1))
            order[i], order[j] = order[j], order[i]
        return order


@dataclass(frozen=True)
class StateSpaceModel:
    """x_i = f(x_{i-1}) + w, z_i = h(x_i) + v with Gaussian w ~ N(0, W), v ~ N(0, V).

    ``f`` and ``h`` map arrays of shape (..., n) and must broadcast over the
    leading axes. ``f_jac``/``h_jac`` return the matching (..., n, n) and
    (..., m, n) Jacobians; the learned filter needs them for backpropagation.
    """

    n: int
    m: int
    f: Callable[[np.ndarray], np.ndarray]
    h: Callable[[np.ndarray], np.ndarray]
    W: np.ndarray
    V: np.ndarray
    f_jac: Optional[Callable[[np.ndarray], np.ndarray]] = None
    h_jac: Optional[Callable[[np.ndarray], np.ndarray]] = None
    F: Optional[np.ndarray] = None
    H: Optional[np.ndarray] = None
    model_id: str = "custom"
    params: dict = field(default_factory=dict)

    @property
    def is_linear(self) -> bool:
        return self.F is not None and self.H is not None

    def with_noise(self, W, V) -> "StateSpaceModel":
        return dataclasses.replace(self, W=np.asarray(W, dtype=np.float64), V=np.asarray(V, dtype=np.float64))

    def scaled(self, scale: float) -> "StateSpaceModel":
        return self.with_noise(scale * self.W, scale * self.V)


def transition_matrix(dt: float) -> np.ndarray:
    F = np.eye(4)
    F[0, 2] = F[1, 3] = dt
    return F


def _linear_map(A: np.ndarray):
    def apply(x):
        return np.asarray(x) @ A.T

    def jac(x):
        return np.broadcast_to(A, np.shape(x)[:-1] + A.shape)

    return apply, jac


def linear_nav_model(dt: float = 1.0, q: float = 0.1, r: float = 0.1, partial: bool = False) -> StateSpaceModel:
    """Constant-velocity vehicle (north/east position and velocity) observed linearly.

    With ``partial`` only the two positions are measured.
    """
    if not (dt > 0 and q > 0 and r > 0):
        raise ValueError("dt, q and r must be positive")
    F = transition_matrix(dt)
    H = np.eye(4)[:2] if partial else np.eye(4)
    f, f_jac = _linear_map(F)
    h, h_jac = _linear_map(H)
    m = H.shape[0]
    return StateSpaceModel(
        n=4, m=m, f=f, h=h, W=q * np.eye(4), V=r * np.eye(m), f_jac=f_jac, h_jac=h_jac,
        F=F, H=H, model_id="linear_partial" if partial else "linear_full",
        params={"dt": dt, "q": q, "r": r},
    )


def nav_measurement(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    x1, x2, x3, x4 = x[..., 0], x[..., 1], x[..., 2], x[..., 3]
    rng = np.hypot(x1, x2)
    # atan2(0, 0) is 0 in IEEE arithmetic, which is the convention at the sensor.
    bearing = np.arctan2(x2 - SENSOR_POSITION[1], x1 - SENSOR_POSITION[0])
    bearing = np.where(bearing == -np.pi, np.pi, bearing)
    return np.stack([-x1 - x3, -x2 - x4, rng, bearing], axis=-1)


def nav_measurement_jac(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    x1, x2 = x[..., 0], x[..., 1]
    J = np.zeros(x.shape[:-1] + (4, 4))
    J[..., 0, 0] = J[..., 0, 2] = -1.0
    J[..., 1, 1] = J[..., 1, 3] = -1.0
    rng = np.hypot(x1, x2)
    safe = np.where(rng > 0, rng, 1.0)
    J[..., 2, 0] = np.where(rng > 0, x1 / safe, 0.0)
    J[..., 2, 1] = np.where(rng > 0, x2 / safe, 0.0)
    dx = x1 - SENSOR_POSITION[0]
    dy = x2 - SENSOR_POSITION[1]
    rho2 = dx * dx + dy * dy
    safe2 = np.where(rho2 > 0, rho2, 1.0)
    J[..., 3, 0] = np.where(rho2 > 0, -dy / safe2, 0.0)
    J[..., 3, 1] = np.where(rho2 > 0, dx / safe2, 0.0)
    return J


def nonlinear_nav_model(q: float = 0.1, r: float = 0.1, dt: float = 1.0) -> StateSpaceModel:
    """Same vehicle dynamics, observed through velocity-offset positions, range and bearing."""
    if not (q > 0 and r > 0):
        raise ValueError("q and r must be positive")
    F = transition_matrix(dt)
    f, f_jac = _linear_map(F)
    return StateSpaceModel(
        n=4, m=4, f=f, h=nav_measurement, W=q * np.eye(4), V=r * np.eye(4),
        f_jac=f_jac, h_jac=nav_measurement_jac, F=F, H=None, model_id="nonlinear",
        params={"dt": dt, "q": q, "r": r},
    )


def make_model(model_id: str, q: float = 0.1, r: float = 0.1, dt: float = 1.0) -> StateSpaceModel:
    if model_id == "linear_full":
        return linear_nav_model(dt, q, r, partial=False)
    if model_id == "linear_partial":
        return linear_nav_model(dt, q, r, partial=True)
    if model_id == "nonlinear":
        return nonlinear_nav_model(q, r, dt)
    raise ValueError(f"unknown model_id {model_id!r}; expected one of {MODEL_IDS}")


def noise_factor(cov: np.ndarray) -> np.ndarray:
    """Cholesky factor used for sampling; all-but-zero covariances sample exactly zero."""
    cov = np.asarray(cov, dtype=np.float64)
    if np.max(np.abs(cov), initial=0.0) <= ZERO_NOISE_LEVEL:
        return np.zeros_like(cov)
    return chol_lower(0.5 * (cov + cov.T))


def gaussian_draw(rng: RngStream, cov_factor: np.ndarray, size: Optional[int] = None) -> np.ndarray:
    """L @ u for standard normal u; with ``size`` returns that many rows."""
    L = np.asarray(getattr(cov_factor, "lower", cov_factor), dtype=np.float64)
    if size is None:
        return L @ rng.normals(L.shape[0])
    return rng.normals((size, L.shape[0])) @ L.T


@dataclass(frozen=True)
class Trajectory:
    states: np.ndarray
    measurements: np.ndarray
    seed: int
    model_id: str
    traj_id: int = 0

    def __post_init__(self):
        if len(self.states) != len(self.measurements) or len(self.states) < 1:
            raise ValueError("states and measurements need equal length >= 1")

    @property
    def T(self) -> int:
        return len(self.states)


def simulate_trajectory(model: StateSpaceModel, x0, T: int, rng: RngStream, traj_id: int = 0) -> Trajectory:
    x0 = as_vector(x0, "x0")
    if T < 1:
        raise ValueError("T must be >= 1")
    if x0.shape[0] != model.n:
        raise ValueError("x0 has the wrong dimension")
    w = gaussian_draw(rng, noise_factor(model.W), size=T)
    v = gaussian_draw(rng, noise_factor(model.V), size=T)
    states = np.empty((T, model.n))
    x = x0
    for t in range(T):
        x = model.f(x) + w[t]
        states[t] = x
    measurements = model.h(states) + v
    return Trajectory(states, measurements, rng.seed, model.model_id, traj_id)


# -- persistence -------------------------------------------------------------

def fmt17(a) -> str:
    """JSON text for a (nested) float array using 17 significant digits."""
    a = np.asarray(a, dtype=np.float64)
    if a.ndim == 0:
        return format(float(a), ".17g")
    if a.ndim == 1:
        return "[" + ",".join([format(v, ".17g") for v in a.tolist()]) + "]"
    return "[" + ",".join(fmt17(row) for row in a) + "]"


def trajectory_record(traj: Trajectory) -> str:
    return (
        f'{{"traj_id":{traj.traj_id},"seed":{traj.seed},"model_id":{json.dumps(traj.model_id)},'
        f'"T":{traj.T},"states":{fmt17(traj.states)},"measurements":{fmt17(traj.measurements)}}}'
    )


def write_trajectories(path, trajectories: Iterable[Trajectory]) -> None:
    buf = io.StringIO()
    for traj in trajectories:
        buf.write(trajectory_record(traj))
        buf.write("\n")
    Path(path).write_text(buf.getvalue())


def read_trajectories(path) -> list[Trajectory]:
    out = []
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        rec = json.loads(line)
        states = np.array(rec["states"], dtype=np.float64)
        meas = np.array(rec["measurements"], dtype=np.float64)
        if states.shape[0] != rec["T"] or meas.shape[0] != rec["T"]:
            raise ValueError(f"record {rec['traj_id']} length does not match T")
        out.append(Trajectory(states, meas, int(rec["seed"]), rec["model_id"], int(rec["traj_id"])))
    return out
