"""GRU cells and linear heads with hand-written backward passes, plus Adam.

All kernels take batched inputs of shape (B, features); 1-D inputs are
treated as a batch of one and returned 1-D. Parameters live in a
:class:`ParamTape`; a cell or head is addressed by a name prefix, and its
backward pass accumulates into the tape's gradient buffers in place.

GRU convention used throughout::

    z  = sigmoid(W_z x + U_z h + b_z)
    r  = sigmoid(W_r x + U_r h + b_r)
    c  = tanh(W_h x + U_h (r * h) + b_h)
    h' = (1 - z) * h + z * c
"""
from __future__ import annotations

import json
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Mapping, Optional

import numpy as np

from .ssm import RngStream, fmt17

GRU_WEIGHTS = ("W_z", "W_r", "W_h", "U_z", "U_r", "U_h")
GRU_BIASES = ("b_z", "b_r", "b_h")


def sigmoid(a: np.ndarray) -> np.ndarray:
    # tanh form never overflows
    return 0.5 * (1.0 + np.tanh(0.5 * a))


class ParamTape:
    """Ordered named parameter tensors with a parallel gradient accumulator."""

    def __init__(self):
        self.params: "OrderedDict[str, np.ndarray]" = OrderedDict()
        self.grads: "OrderedDict[str, np.ndarray]" = OrderedDict()
        self._views: dict = {}

    def add(self, name: str, value: np.ndarray) -> None:
        if name in self.params:
            raise KeyError(f"duplicate parameter {name}")
        value = np.array(value, dtype=np.float64)
        self.params[name] = value
        self.grads[name] = np.zeros_like(value)
        self._views.clear()

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def __iter__(self) -> Iterator[str]:
        return iter(self.params)

    def __len__(self) -> int:
        return len(self.params)

    def view(self, prefix: str) -> tuple[dict, dict]:
        """Parameter and gradient dicts for one layer, keyed without the prefix.

        The arrays are shared with the tape, so in-place updates go through.
        """
        if prefix not in self._views:
            cut = len(prefix) + 1
            keys = [k for k in self.params if k.startswith(prefix + ".")]
            self._views[prefix] = ({k[cut:]: self.params[k] for k in keys}, {k[cut:]: self.grads[k] for k in keys})
        return self._views[prefix]

    def zero_grad(self) -> None:
        for g in self.grads.values():
            g.fill(0.0)

    def sq_norm(self) -> float:
        return float(sum(np.sum(p * p) for p in self.params.values()))

    def grad_norm(self) -> float:
        return float(np.sqrt(sum(np.sum(g * g) for g in self.grads.values())))

    def size(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def copy(self) -> "ParamTape":
        tape = ParamTape()
        for k, v in self.params.items():
            tape.add(k, v)
        return tape

    def assign(self, other: "ParamTape") -> None:
        for k, v in other.params.items():
            self.params[k][...] = v


# -- GRU ---------------------------------------------------------------------

def init_gru(tape: ParamTape, prefix: str, input_dim: int, hidden_dim: int, rng: RngStream) -> None:
    k = 1.0 / np.sqrt(hidden_dim)
    for name in GRU_WEIGHTS:
        cols = input_dim if name.startswith("W") else hidden_dim
        tape.add(f"{prefix}.{name}", rng.uniform(-k, k, hidden_dim * cols).reshape(hidden_dim, cols))
    for name in GRU_BIASES:
        tape.add(f"{prefix}.{name}", np.zeros(hidden_dim))


def fuse_gru(p: Mapping[str, np.ndarray]) -> dict:
    """Gate weights stacked for :func:`gru_forward`; valid until the parameters change."""
    return {
        "Wx": np.concatenate([p["W_z"], p["W_r"], p["W_h"]]).T.copy(),
        "Uzr": np.concatenate([p["U_z"], p["U_r"]]).T.copy(),
        "Uh": p["U_h"].T.copy(),
        "b": np.concatenate([p["b_z"], p["b_r"], p["b_h"]]),
    }


def gru_forward(p: Mapping[str, np.ndarray], x: np.ndarray, h_prev: np.ndarray):
    """One GRU step. Returns (h_new, cache).

    ``p`` is either the named parameters or the output of :func:`fuse_gru`;
    both give the same values, the fused form in fewer matrix products.
    """
    vec = x.ndim == 1
    x2 = np.atleast_2d(x)
    h2 = np.atleast_2d(h_prev)
    if "Wx" not in p:
        p = fuse_gru(p)
    H = h2.shape[-1]
    ax = x2 @ p["Wx"] + p["b"]
    azr = ax[:, : 2 * H] + h2 @ p["Uzr"]
    z = sigmoid(azr[:, :H])
    r = sigmoid(azr[:, H:])
    rh = r * h2
    c = np.tanh(ax[:, 2 * H:] + rh @ p["Uh"])
    h_new = (1.0 - z) * h2 + z * c
    cache = (x2, h2, z, r, rh, c, vec)
    return (h_new[0] if vec else h_new), cache


def gru_backward(p: Mapping[str, np.ndarray], g: Mapping[str, np.ndarray], cache, dh_new: np.ndarray,
                 defer: Optional[list] = None):
    """Exact gradients of one GRU step. Returns (dx, dh_prev).

    Parameter gradients are accumulated into ``g``, or, when ``defer`` is a
    list, the per-step terms are appended to it and :func:`flush_gru_grads`
    applies them later in one stacked product per weight. Over a long
    sequence that is much cheaper than updating every H x H buffer each step.
    """
    x, h, z, r, rh, c, vec = cache
    dh_new = np.atleast_2d(dh_new)
    dz = dh_new * (c - h)
    dc = dh_new * z
    dh_prev = dh_new * (1.0 - z)

    da_h = dc * (1.0 - c * c)
    drh = da_h @ p["U_h"]
    dx = da_h @ p["W_h"]
    dh_prev += drh * r

    da_r = drh * h * r * (1.0 - r)
    dx += da_r @ p["W_r"]
    dh_prev += da_r @ p["U_r"]

    da_z = dz * z * (1.0 - z)
    dx += da_z @ p["W_z"]
    dh_prev += da_z @ p["U_z"]
    terms = (x, h, rh, da_z, da_r, da_h)
    if defer is None:
        flush_gru_grads(g, [terms])
    else:
        defer.append(terms)
    if vec:
        return dx[0], dh_prev[0]
    return dx, dh_prev


def flush_gru_grads(g: Mapping[str, np.ndarray], terms: list) -> None:
    """Apply parameter-gradient terms collected by :func:`gru_backward`."""
    if not terms:
        return
    x, h, rh, da_z, da_r, da_h = (np.concatenate(parts) for parts in zip(*terms))
    for gate, da, hidden in (("z", da_z, h), ("r", da_r, h), ("h", da_h, rh)):
        g[f"W_{gate}"] += da.T @ x
        g[f"U_{gate}"] += da.T @ hidden
        g[f"b_{gate}"] += da.sum(axis=0)
    terms.clear()


# -- linear head -------------------------------------------------------------

def init_linear(tape: ParamTape, prefix: str, in_dim: int, out_dim: int, rng: RngStream, scale_dim: int) -> None:
    k = 1.0 / np.sqrt(scale_dim)
    tape.add(f"{prefix}.W", rng.uniform(-k, k, out_dim * in_dim).reshape(out_dim, in_dim))
    tape.add(f"{prefix}.b", np.zeros(out_dim))


def linear_forward(p: Mapping[str, np.ndarray], x: np.ndarray) -> np.ndarray:
    return x @ p["W"].T + p["b"]


def linear_backward(p: Mapping[str, np.ndarray], g: Mapping[str, np.ndarray], x: np.ndarray, dy: np.ndarray) -> np.ndarray:
    x2 = np.atleast_2d(x)
    dy2 = np.atleast_2d(dy)
    g["W"] += dy2.T @ x2
    g["b"] += dy2.sum(axis=0)
    dx = dy2 @ p["W"]
    return dx[0] if np.ndim(x) == 1 else dx


# -- optimizer ---------------------------------------------------------------

@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    lr_scale: dict = field(default_factory=dict)  # layer prefix -> multiplier on lr

    def ensure(self, tape: ParamTape) -> None:
        for k, p in tape.params.items():
            if k not in self.m:
                self.m[k] = np.zeros_like(p)
                self.v[k] = np.zeros_like(p)


def adam_step(opt: AdamState, tape: ParamTape, weight_decay: float = 0.0) -> None:
    """Bias-corrected Adam on every tensor, then zero the gradients.

    ``weight_decay`` is the coefficient of an l2 penalty in the loss, so its
    gradient 2 * weight_decay * theta is added before the moment update.
    """
    opt.ensure(tape)
    opt.step += 1
    c1 = 1.0 - opt.beta1 ** opt.step
    c2 = 1.0 - opt.beta2 ** opt.step
    for k, p in tape.params.items():
        g = tape.grads[k]
        if weight_decay:
            g = g + 2.0 * weight_decay * p
        m = opt.m[k]
        v = opt.v[k]
        m *= opt.beta1
        m += (1.0 - opt.beta1) * g
        v *= opt.beta2
        v += (1.0 - opt.beta2) * g * g
        lr = opt.lr * opt.lr_scale.get(k.split(".", 1)[0], 1.0)
        p -= lr * (m / c1) / (np.sqrt(v / c2) + opt.eps)
    tape.zero_grad()


# -- persistence -------------------------------------------------------------

def _tensor_block(tensors: Mapping[str, np.ndarray]) -> str:
    items = [
        f'{json.dumps(k)}:{{"shape":{json.dumps(list(v.shape))},"values":{fmt17(v.reshape(-1))}}}'
        for k, v in tensors.items()
    ]
    return "{" + ",".join(items) + "}"


def dump_tensors(path, manifest: dict, tensors: Mapping[str, np.ndarray], extra: Mapping[str, Mapping] = ()) -> None:
    """Write a manifest plus named tensors; ``extra`` adds more named tensor groups."""
    parts = [f'"manifest":{json.dumps(manifest, sort_keys=True)}', f'"tensors":{_tensor_block(tensors)}']
    for group, block in dict(extra).items():
        parts.append(f"{json.dumps(group)}:{_tensor_block(block)}")
    Path(path).write_text("{" + ",\n".join(parts) + "}\n")


def _read_block(block: Mapping) -> "OrderedDict[str, np.ndarray]":
    out = OrderedDict()
    for k, rec in block.items():
        arr = np.array(rec["values"], dtype=np.float64)
        shape = tuple(rec["shape"])
        if arr.size != int(np.prod(shape)):
            raise ValueError(f"tensor {k}: {arr.size} values do not fill shape {shape}")
        out[k] = arr.reshape(shape)
    return out


def load_tensors(path) -> tuple[dict, "OrderedDict[str, np.ndarray]", dict]:
    raw = json.loads(Path(path).read_text())
    extra = {k: _read_block(v) for k, v in raw.items() if k not in ("manifest", "tensors")}
    return raw["manifest"], _read_block(raw["tensors"]), extra
