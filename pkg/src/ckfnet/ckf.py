"""Classical cubature Kalman filter and a linear Kalman filter used as its oracle."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .linalg import (
    NotPositiveDefinite,
    as_matrix,
    as_vector,
    chol_lower,
    cholesky,
    jacobi_eigen,
    spd_solve,
    symmetrize,
)
from .ssm import StateSpaceModel


@dataclass(frozen=True)
class CubaturePointSet:
    points: np.ndarray  # (2n, n)
    weights: np.ndarray  # (2n,)
    propagated: Optional[np.ndarray] = None

    @property
    def n(self) -> int:
        return self.points.shape[1]

    def mean(self) -> np.ndarray:
        return self.weights @ self.points

    def scatter(self, center: np.ndarray) -> np.ndarray:
        d = self.points - center
        return (d * self.weights[:, None]).T @ d


@dataclass(frozen=True)
class FilterState:
    mean: np.ndarray
    cov: np.ndarray
    predicted_meas: Optional[np.ndarray] = None
    gain: Optional[np.ndarray] = None
    innovation_cov: Optional[np.ndarray] = None
    cross_cov: Optional[np.ndarray] = None


def cubature_offsets(L: np.ndarray) -> np.ndarray:
    """The 2n offsets +-sqrt(n) * L[:, k] as rows, positive half first."""
    n = L.shape[-1]
    cols = np.sqrt(n) * np.swapaxes(L, -1, -2)
    return np.concatenate([cols, -cols], axis=-2)


def cubature_points(mean, cov_factor) -> CubaturePointSet:
    mean = as_vector(mean, "mean")
    L = np.asarray(getattr(cov_factor, "lower", cov_factor), dtype=np.float64)
    if L.shape != (mean.shape[0], mean.shape[0]):
        raise ValueError("factor and mean dimensions differ")
    n = mean.shape[0]
    return CubaturePointSet(mean + cubature_offsets(L), np.full(2 * n, 1.0 / (2 * n)))


def _stabilize(P: np.ndarray) -> np.ndarray:
    P = symmetrize(P)
    try:
        chol_lower(P)
        return P
    except NotPositiveDefinite:
        pass
    lam_min = jacobi_eigen(P)[0][-1]
    if lam_min < 0:
        P = P + (abs(lam_min) + 1e-12) * np.eye(P.shape[0])
    return P


def ckf_predict(prior: FilterState, model: StateSpaceModel) -> FilterState:
    pts = cubature_points(prior.mean, cholesky(prior.cov))
    xi = model.f(pts.points)
    w = pts.weights
    mean = w @ xi
    d = xi - mean
    cov = (d * w[:, None]).T @ d + model.W
    return FilterState(mean, symmetrize(cov))


def ckf_update(predicted: FilterState, model: StateSpaceModel, z) -> FilterState:
    z = as_vector(z, "z")
    pts = cubature_points(predicted.mean, cholesky(predicted.cov))
    w = pts.weights
    g = model.h(pts.points)
    z_hat = w @ g
    dg = g - z_hat
    dx = pts.points - predicted.mean
    P_zz = symmetrize((dg * w[:, None]).T @ dg + model.V)
    P_xz = (dx * w[:, None]).T @ dg
    K = spd_solve(P_zz, P_xz.T).T
    mean = predicted.mean + K @ (z - z_hat)
    cov = _stabilize(predicted.cov - K @ P_zz @ K.T)
    return FilterState(mean, cov, z_hat, K, P_zz, P_xz)


def kf_step(prior: FilterState, F, H, W, V, z) -> FilterState:
    """One textbook linear Kalman predict/update."""
    F, H, W, V = (as_matrix(a, name) for a, name in ((F, "F"), (H, "H"), (W, "W"), (V, "V")))
    z = as_vector(z, "z")
    x_pred = F @ prior.mean
    P_pred = F @ prior.cov @ F.T + W
    z_hat = H @ x_pred
    S = symmetrize(H @ P_pred @ H.T + V)
    K = spd_solve(S, H @ P_pred).T
    x = x_pred + K @ (z - z_hat)
    P = (np.eye(P_pred.shape[0]) - K @ H) @ P_pred
    return FilterState(x, symmetrize(P), z_hat, K, S, P_pred @ H.T)


def run_ckf(model: StateSpaceModel, measurements: Sequence, x0, P0) -> list[FilterState]:
    if len(measurements) == 0:
        raise ValueError("need at least one measurement")
    state = FilterState(as_vector(x0, "x0"), symmetrize(as_matrix(P0, "P0")))
    out = []
    for z in measurements:
        state = ckf_update(ckf_predict(state, model), model, z)
        out.append(state)
    return out


def run_kf(model: StateSpaceModel, measurements: Sequence, x0, P0) -> list[FilterState]:
    if not model.is_linear:
        raise ValueError("the Kalman oracle needs a linear model")
    state = FilterState(as_vector(x0, "x0"), symmetrize(as_matrix(P0, "P0")))
    out = []
    for z in measurements:
        state = kf_step(state, model.F, model.H, model.W, model.V, z)
        out.append(state)
    return out


def means(states: Sequence[FilterState]) -> np.ndarray:
    return np.stack([s.mean for s in states])

