"""CKFNet: a cubature Kalman filter whose spread, weights, noise and gain are learned.

Prediction phase: two GRUs read the lagged state-correction features and emit
the cubature spread factor and the 2n point weights; a fusion GRU combines
their hidden states and emits a process-noise factor. The prior mean and
covariance follow the cubature rule with those learned quantities.

Update phase: two GRUs read the innovation features and the fusion state and
emit the state-measurement cross covariance and a factor of the innovation
covariance; the gain comes from a factored solve against the latter.

Everything runs on a batch of B trajectories at once. :func:`ckfnet_run`
keeps per-step caches so :func:`ckfnet_backward` can do exact BPTT.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .ckf import cubature_offsets
from .linalg import NotPositiveDefinite, chol_backward, chol_lower, factor_solve
from .neural import (
    ParamTape,
    flush_gru_grads,
    fuse_gru,
    gru_backward,
    gru_forward,
    init_gru,
    init_linear,
    linear_backward,
    linear_forward,
)
from .ssm import RngStream, StateSpaceModel

FEATURE_EPS = 1e-9
FACTOR_FLOOR = 1e-6
COV_JITTER = 1e-9
MAX_JITTER_TRIES = 12
GRUS = ("gru_S", "gru_w", "gru_fuse", "gru_Pxz", "gru_Pzz")
HEADS = ("head_S", "head_w", "head_Q", "head_Pxz", "head_Pzz")


def tri(n: int) -> int:
    return n * (n + 1) // 2


def _tri_dim(k: int) -> int:
    n = int(round((np.sqrt(8 * k + 1) - 1) / 2))
    if tri(n) != k:
        raise ValueError(f"{k} is not a triangular number")
    return n


def head_to_spd_factor(raw: np.ndarray) -> np.ndarray:
    """Fill a lower triangle row-wise; diagonal goes through softplus + 1e-6."""
    raw = np.asarray(raw, dtype=np.float64)
    n = _tri_dim(raw.shape[-1])
    rows, cols = np.tril_indices(n)
    diag = rows == cols
    vals = raw.copy()
    vals[..., diag] = np.logaddexp(0.0, raw[..., diag]) + FACTOR_FLOOR
    L = np.zeros(raw.shape[:-1] + (n, n))
    L[..., rows, cols] = vals
    return L


def spd_factor_backward(raw: np.ndarray, grad_L: np.ndarray) -> np.ndarray:
    n = grad_L.shape[-1]
    rows, cols = np.tril_indices(n)
    diag = rows == cols
    g = grad_L[..., rows, cols].copy()
    s = 0.5 * (1.0 + np.tanh(0.5 * raw[..., diag]))  # sigmoid, overflow free
    g[..., diag] *= s
    return g


def head_to_weights(logits: np.ndarray) -> np.ndarray:
    logits = np.asarray(logits, dtype=np.float64)
    e = np.exp(logits - logits.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def weights_backward(w: np.ndarray, grad_w: np.ndarray) -> np.ndarray:
    return w * (grad_w - np.sum(w * grad_w, axis=-1, keepdims=True))


def _factor_prior_cov(P: np.ndarray) -> np.ndarray:
    """Batched Cholesky that retries numerically singular members with growing jitter.

    The jitter is a constant diagonal shift, so the backward pass through the
    returned factor is still exact. Members with non-finite entries get a NaN
    factor, which surfaces as non-finite estimates instead of an exception.
    """
    try:
        with np.errstate(invalid="ignore", over="ignore"):
            return chol_lower(P)
    except NotPositiveDefinite:
        pass
    n = P.shape[-1]
    out = np.full_like(P, np.nan)
    for b in range(P.shape[0]):
        if not np.all(np.isfinite(P[b])):
            continue
        jitter = 0.0
        base = 1e-12 * max(float(np.max(np.abs(np.diag(P[b])))), 1.0)
        for _ in range(MAX_JITTER_TRIES):
            try:
                out[b] = chol_lower(P[b] + jitter * np.eye(n))
                break
            except NotPositiveDefinite:
                jitter = base if jitter == 0.0 else 10.0 * jitter
    return out


def _unit(u: np.ndarray):
    norm = np.linalg.norm(u, axis=-1, keepdims=True)
    big = norm > FEATURE_EPS
    scale = np.where(big, norm, 1.0)
    return u / scale, (u / scale, scale, big)


def _unit_backward(cache, gy: np.ndarray) -> np.ndarray:
    y, scale, big = cache
    proj = (gy - y * np.sum(y * gy, axis=-1, keepdims=True)) / scale
    return np.where(big, proj, gy)


@dataclass(frozen=True)
class Architecture:
    n: int
    m: int
    hidden_dim: int

    def gru_inputs(self) -> dict:
        H = self.hidden_dim
        return {
            "gru_S": 2 * self.n,
            "gru_w": 2 * self.n,
            "gru_fuse": 2 * H,
            "gru_Pxz": 2 * self.m + H,
            "gru_Pzz": 2 * self.m + H,
        }

    def head_outputs(self) -> dict:
        return {
            "head_S": tri(self.n),
            "head_w": 2 * self.n,
            "head_Q": tri(self.n),
            "head_Pxz": self.n * self.m,
            "head_Pzz": tri(self.m),
        }

    def manifest(self) -> dict:
        return {
            "n": self.n,
            "m": self.m,
            "hidden_dim": self.hidden_dim,
            "gru_inputs": self.gru_inputs(),
            "head_outputs": self.head_outputs(),
        }

    def shapes(self) -> dict:
        H = self.hidden_dim
        out = {}
        for name, d_in in self.gru_inputs().items():
            for w in ("W_z", "W_r", "W_h"):
                out[f"{name}.{w}"] = (H, d_in)
            for u in ("U_z", "U_r", "U_h"):
                out[f"{name}.{u}"] = (H, H)
            for b in ("b_z", "b_r", "b_h"):
                out[f"{name}.{b}"] = (H,)
        for name, d_out in self.head_outputs().items():
            out[f"{name}.W"] = (d_out, H)
            out[f"{name}.b"] = (d_out,)
        return out


def init_params(arch: Architecture, seed: int = 0) -> ParamTape:
    rng = RngStream(seed, stream=7)
    tape = ParamTape()
    H = arch.hidden_dim
    for name, d_in in arch.gru_inputs().items():
        init_gru(tape, name, d_in, H, rng)
    for name, d_out in arch.head_outputs().items():
        init_linear(tape, name, H, d_out, rng, scale_dim=H)
    return tape


def validate_params(arch: Architecture, tape: ParamTape) -> None:
    expected = arch.shapes()
    if set(expected) != set(tape.params):
        missing = sorted(set(expected) - set(tape.params))
        extra = sorted(set(tape.params) - set(expected))
        raise ValueError(f"parameter names do not match architecture (missing {missing}, unexpected {extra})")
    for k, shape in expected.items():
        if tape.params[k].shape != shape:
            raise ValueError(f"{k}: shape {tape.params[k].shape} != expected {shape}")


@dataclass
class CkfNetState:
    x_post: np.ndarray  # x_{i-1|i-1}
    x_prior: np.ndarray  # x_{i-1|i-2}
    x_post_prev: np.ndarray  # x_{i-2|i-2}
    z_prev: Optional[np.ndarray]
    hidden: dict = field(default_factory=dict)

    @classmethod
    def initial(cls, arch: Architecture, x0: np.ndarray, batch: int) -> "CkfNetState":
        x0 = np.broadcast_to(np.asarray(x0, dtype=np.float64), (batch, arch.n)).copy()
        hidden = {g: np.zeros((batch, arch.hidden_dim)) for g in GRUS}
        return cls(x0, x0.copy(), x0.copy(), None, hidden)


@dataclass
class Prediction:
    x_prior: np.ndarray
    S_pred: np.ndarray
    weights: np.ndarray
    hidden: dict
    cache: dict


def _layer(tape: ParamTape, name: str):
    return tape.view(name)


def _gru(tape: ParamTape, name: str, fused: Optional[dict]):
    return fused[name] if fused else tape.view(name)[0]


def ckfnet_predict(state: CkfNetState, tape: ParamTape, model: StateSpaceModel,
                   fused: Optional[dict] = None) -> Prediction:
    n = model.n
    f3, c3 = _unit(state.x_post - state.x_prior)
    f4, c4 = _unit(state.x_post - state.x_post_prev)
    inp = np.concatenate([f3, f4], axis=-1)

    pS = _gru(tape, "gru_S", fused)
    hS, gS_cache = gru_forward(pS, inp, state.hidden["gru_S"])
    raw_S = linear_forward(_layer(tape, "head_S")[0], hS)
    L_spread = head_to_spd_factor(raw_S)

    pw = _gru(tape, "gru_w", fused)
    hw, gw_cache = gru_forward(pw, inp, state.hidden["gru_w"])
    logits = linear_forward(_layer(tape, "head_w")[0], hw)
    w = head_to_weights(logits)

    chi = state.x_post[:, None, :] + cubature_offsets(L_spread)
    xi = model.f(chi)
    x_prior = np.einsum("bk,bkn->bn", w, xi)
    dxi = xi - x_prior[:, None, :]

    pf = _gru(tape, "gru_fuse", fused)
    fuse_in = np.concatenate([hS, hw], axis=-1)
    hf, gf_cache = gru_forward(pf, fuse_in, state.hidden["gru_fuse"])
    raw_Q = linear_forward(_layer(tape, "head_Q")[0], hf)
    L_W = head_to_spd_factor(raw_Q)

    P = np.einsum("bk,bki,bkj->bij", w, dxi, dxi) + L_W @ np.swapaxes(L_W, -1, -2)
    P = P + COV_JITTER * np.eye(n)
    S = _factor_prior_cov(P)

    hidden = dict(state.hidden)
    hidden.update(gru_S=hS, gru_w=hw, gru_fuse=hf)
    cache = dict(
        c3=c3, c4=c4, inp=inp, hS=hS, gS_cache=gS_cache, raw_S=raw_S, L_spread=L_spread,
        hw=hw, gw_cache=gw_cache, w=w, chi=chi, xi=xi, dxi=dxi, hf=hf, gf_cache=gf_cache,
        raw_Q=raw_Q, L_W=L_W, S=S,
    )
    return Prediction(x_prior, S, w, hidden, cache)


def ckfnet_update(pred: Prediction, tape: ParamTape, model: StateSpaceModel, z: np.ndarray,
                  z_prev: Optional[np.ndarray] = None, fused: Optional[dict] = None):
    """Returns (x_post, hidden states, cache)."""
    n, m = model.n, model.m
    z = np.atleast_2d(z)
    w = pred.weights
    chi_u = pred.x_prior[:, None, :] + cubature_offsets(pred.S_pred)
    g = model.h(chi_u)
    z_hat = np.einsum("bk,bkm->bm", w, g)
    innov = z - z_hat
    f1, c1 = _unit(innov)
    f2, _ = _unit(z - (z if z_prev is None else z_prev))
    hf = pred.hidden["gru_fuse"]
    inp = np.concatenate([f1, f2, hf], axis=-1)

    pxz = _gru(tape, "gru_Pxz", fused)
    hxz, gxz_cache = gru_forward(pxz, inp, pred.hidden["gru_Pxz"])
    P_xz = linear_forward(_layer(tape, "head_Pxz")[0], hxz).reshape(-1, n, m)

    pzz = _gru(tape, "gru_Pzz", fused)
    hzz, gzz_cache = gru_forward(pzz, inp, pred.hidden["gru_Pzz"])
    raw_zz = linear_forward(_layer(tape, "head_Pzz")[0], hzz)
    L_zz = head_to_spd_factor(raw_zz)

    K = np.swapaxes(factor_solve(L_zz, np.swapaxes(P_xz, -1, -2)), -1, -2)
    x_post = pred.x_prior + np.einsum("bnm,bm->bn", K, innov)

    hidden = dict(pred.hidden)
    hidden.update(gru_Pxz=hxz, gru_Pzz=hzz)
    cache = dict(
        chi_u=chi_u, g=g, innov=innov, c1=c1, inp=inp, hxz=hxz, gxz_cache=gxz_cache,
        hzz=hzz, gzz_cache=gzz_cache, raw_zz=raw_zz, L_zz=L_zz, K=K, P_xz=P_xz,
    )
    return x_post, hidden, cache


@dataclass
class RunRecord:
    estimates: np.ndarray  # (B, T, n)
    priors: np.ndarray  # (B, T, n)
    steps: list


def ckfnet_run(tape: ParamTape, model: StateSpaceModel, measurements: np.ndarray, x0,
               arch: Architecture, keep_cache: bool = False):
    """Filter a batch of measurement sequences.

    ``measurements`` is (T, m) or (B, T, m). Returns the posterior means with the
    same leading layout, or a :class:`RunRecord` when ``keep_cache`` is set.
    """
    Z = np.asarray(measurements, dtype=np.float64)
    single = Z.ndim == 2
    if single:
        Z = Z[None]
    B, T, _ = Z.shape
    if T < 1:
        raise ValueError("need at least one measurement")
    state = CkfNetState.initial(arch, x0, B)
    est = np.empty((B, T, model.n))
    pri = np.empty((B, T, model.n))
    steps = []
    fused = {g: fuse_gru(tape.view(g)[0]) for g in GRUS}
    for t in range(T):
        pred = ckfnet_predict(state, tape, model, fused)
        z_prev = Z[:, t] if state.z_prev is None else state.z_prev
        x_post, hidden, ucache = ckfnet_update(pred, tape, model, Z[:, t], z_prev, fused)
        est[:, t] = x_post
        pri[:, t] = pred.x_prior
        if keep_cache:
            steps.append((pred, ucache))
        state = CkfNetState(x_post, pred.x_prior, state.x_post, Z[:, t], hidden)
    if keep_cache:
        return RunRecord(est, pri, steps)
    return est[0] if single else est


def _jac_t(J_fn, fixed: Optional[np.ndarray], x: np.ndarray, g: np.ndarray) -> np.ndarray:
    """g^T J at points x, i.e. the pullback of g through a map with Jacobian J."""
    if fixed is not None:
        return g @ fixed
    return np.einsum("...ij,...i->...j", J_fn(x), g)


def _split_offsets(g: np.ndarray, n: int) -> np.ndarray:
    """Gradient on the factor L from gradients on the 2n points built by cubature_offsets."""
    return np.sqrt(n) * np.swapaxes(g[:, :n, :] - g[:, n:, :], -1, -2)


def ckfnet_backward(tape: ParamTape, model: StateSpaceModel, arch: Architecture, record: RunRecord,
                    grad_est: np.ndarray) -> None:
    """Backpropagate d(loss)/d(estimates) of shape (B, T, n) into ``tape.grads``."""
    n, m, H = arch.n, arch.m, arch.hidden_dim
    B, T, _ = grad_est.shape
    g_post = grad_est.copy()
    g_prior = np.zeros_like(grad_est)
    dh = {gname: np.zeros((B, H)) for gname in GRUS}
    views = {name: tape.view(name) for name in GRUS + HEADS}
    pending = {name: [] for name in GRUS}
    F_fixed = model.F
    H_fixed = model.H

    for t in range(T - 1, -1, -1):
        pred, uc = record.steps[t]
        pc = pred.cache
        w = pred.weights
        gp = g_post[:, t]
        gx_prior = gp + g_prior[:, t]

        # x_post = x_prior + K innov
        K = uc["K"]
        innov = uc["innov"]
        gK = gp[:, :, None] * innov[:, None, :]
        g_innov = np.einsum("bnm,bn->bm", K, gp)
        L_zz = uc["L_zz"]
        g_Pxz = np.swapaxes(factor_solve(L_zz, np.swapaxes(gK, -1, -2)), -1, -2)
        g_Pzz = -np.swapaxes(K, -1, -2) @ g_Pxz
        g_Lzz = (g_Pzz + np.swapaxes(g_Pzz, -1, -2)) @ L_zz

        p, gr = views["head_Pzz"]
        dhzz = linear_backward(p, gr, uc["hzz"], spd_factor_backward(uc["raw_zz"], g_Lzz))
        p, gr = views["gru_Pzz"]
        d_in, dh["gru_Pzz"] = gru_backward(p, gr, uc["gzz_cache"], dh["gru_Pzz"] + dhzz, pending["gru_Pzz"])

        p, gr = views["head_Pxz"]
        dhxz = linear_backward(p, gr, uc["hxz"], g_Pxz.reshape(B, n * m))
        p, gr = views["gru_Pxz"]
        d_in2, dh["gru_Pxz"] = gru_backward(p, gr, uc["gxz_cache"], dh["gru_Pxz"] + dhxz, pending["gru_Pxz"])
        d_in = d_in + d_in2

        g_hf = d_in[:, 2 * m:].copy()
        g_innov = g_innov + _unit_backward(uc["c1"], d_in[:, :m])
        g_zhat = -g_innov
        g_w = np.einsum("bkm,bm->bk", uc["g"], g_zhat)
        g_g = w[:, :, None] * g_zhat[:, None, :]
        g_chi_u = _jac_t(model.h_jac, H_fixed, uc["chi_u"], g_g)
        gx_prior = gx_prior + g_chi_u.sum(axis=1)
        g_S = _split_offsets(g_chi_u, n)

        # prediction phase: S = chol(scatter + L_W L_W^T + jitter)
        g_P = chol_backward(pc["S"], g_S)
        g_P2 = g_P + np.swapaxes(g_P, -1, -2)
        dxi = pc["dxi"]
        g_w = g_w + np.einsum("bki,bij,bkj->bk", dxi, g_P, dxi)
        g_dxi = w[:, :, None] * np.einsum("bij,bkj->bki", g_P2, dxi)
        g_LW = g_P2 @ pc["L_W"]
        gx_prior = gx_prior - g_dxi.sum(axis=1)
        g_xi = g_dxi

        p, gr = views["head_Q"]
        g_hf = g_hf + linear_backward(p, gr, pc["hf"], spd_factor_backward(pc["raw_Q"], g_LW))
        p, gr = views["gru_fuse"]
        d_fuse, dh["gru_fuse"] = gru_backward(p, gr, pc["gf_cache"], dh["gru_fuse"] + g_hf, pending["gru_fuse"])

        # x_prior = sum_k w_k xi_k
        g_w = g_w + np.einsum("bkn,bn->bk", pc["xi"], gx_prior)
        g_xi = g_xi + w[:, :, None] * gx_prior[:, None, :]
        g_chi = _jac_t(model.f_jac, F_fixed, pc["chi"], g_xi)
        g_xpost_prev = g_chi.sum(axis=1)
        g_Ls = _split_offsets(g_chi, n)

        p, gr = views["head_w"]
        g_hw = d_fuse[:, H:] + linear_backward(p, gr, pc["hw"], weights_backward(w, g_w))
        p, gr = views["gru_w"]
        d_inp, dh["gru_w"] = gru_backward(p, gr, pc["gw_cache"], dh["gru_w"] + g_hw, pending["gru_w"])

        p, gr = views["head_S"]
        g_hS = d_fuse[:, :H] + linear_backward(p, gr, pc["hS"], spd_factor_backward(pc["raw_S"], g_Ls))
        p, gr = views["gru_S"]
        d_inp2, dh["gru_S"] = gru_backward(p, gr, pc["gS_cache"], dh["gru_S"] + g_hS, pending["gru_S"])
        d_inp = d_inp + d_inp2

        g_f3 = _unit_backward(pc["c3"], d_inp[:, :n])
        g_f4 = _unit_backward(pc["c4"], d_inp[:, n:])
        # features of step t read x_post[t-1], x_prior[t-1] and x_post[t-2]
        if t >= 1:
            g_post[:, t - 1] += g_xpost_prev + g_f3 + g_f4
            g_prior[:, t - 1] -= g_f3
        if t >= 2:
            g_post[:, t - 2] -= g_f4

    for name, terms in pending.items():
        flush_gru_grads(views[name][1], terms)
