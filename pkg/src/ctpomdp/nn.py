"""Numpy multilayer perceptron with analytic input derivatives and Adam.

The network is ``in -> sigmoid(in) -> sigmoid(in) -> out`` by default. Besides the
usual forward/backward pass it provides

* the input gradient and Hessian through first and second order messages
  ``m[h][b,k,i] = d z_k / d x_i`` and ``mm[h][b,k,i,j] = d^2 z_k / d x_i d x_j``;
* a tangent (directional-derivative) forward pass, and parameter gradients of
  losses that depend on both the output and its directional derivatives. The
  HJB residual contains ``dV/dpi . f``, so training needs the latter.

All functions accept a single input ``(d,)`` or a batch ``(B, d)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class MlpParams:
    weights: list  # W[h] has shape (out_h, in_h)
    biases: list

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[1]

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[0]

    @property
    def num_layers(self) -> int:
        return len(self.weights)

    def copy(self) -> "MlpParams":
        return MlpParams([w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def arrays(self) -> list:
        return [*self.weights, *self.biases]

    def map(self, fn, *others: "MlpParams") -> "MlpParams":
        return MlpParams(
            [fn(w, *(o.weights[i] for o in others)) for i, w in enumerate(self.weights)],
            [fn(b, *(o.biases[i] for o in others)) for i, b in enumerate(self.biases)],
        )

    def to_dict(self) -> dict:
        return {
            "layers": [
                {"weight": w.tolist(), "bias": b.tolist()}
                for w, b in zip(self.weights, self.biases)
            ]
        }

    @classmethod
    def from_dict(cls, data: dict) -> "MlpParams":
        weights = [np.asarray(layer["weight"], dtype=float) for layer in data["layers"]]
        biases = [np.asarray(layer["bias"], dtype=float) for layer in data["layers"]]
        params = cls(weights, biases)
        _check_shapes(params)
        return params


def _check_shapes(params: MlpParams) -> None:
    prev = params.weights[0].shape[1]
    for h, (w, b) in enumerate(zip(params.weights, params.biases)):
        if w.ndim != 2 or w.shape[1] != prev or b.shape != (w.shape[0],):
            raise ValueError(f"inconsistent layer {h}: weight {w.shape}, bias {b.shape}")
        prev = w.shape[0]


def init_mlp(
    in_dim: int, out_dim: int, rng: np.random.Generator, hidden: list | None = None
) -> MlpParams:
    """Two hidden layers of width ``in_dim`` by default.

    Weights and biases are drawn uniformly from +-1/sqrt(fan_in), the common
    default for fully connected layers. Nonzero biases matter here: with zero
    biases the advantage-updating runs often stall on a flat value plateau.
    """
    sizes = [in_dim, *(hidden if hidden is not None else [in_dim, in_dim]), out_dim]
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        bound = 1.0 / np.sqrt(fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
        biases.append(rng.uniform(-bound, bound, size=fan_out))
    return MlpParams(weights, biases)


def zeros_like(params: MlpParams) -> MlpParams:
    return params.map(np.zeros_like)


def sigmoid(a):
    return 0.5 * (1.0 + np.tanh(0.5 * a))


@dataclass
class ForwardCache:
    params: MlpParams
    x: np.ndarray  # (B, d)
    a: list  # pre-activations per hidden layer, (B, k)
    z: list  # activations per hidden layer, (B, k)
    single: bool
    v: np.ndarray | None = None  # tangents (B, K, d)
    da: list = field(default_factory=list)
    dz: list = field(default_factory=list)

    def slope(self, h: int) -> np.ndarray:
        z = self.z[h]
        return z * (1.0 - z)

    def curvature(self, h: int) -> np.ndarray:
        z = self.z[h]
        return z * (1.0 - z) * (1.0 - 2.0 * z)


def _as_batch(params: MlpParams, x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != params.in_dim:
        raise ValueError(f"expected input of dimension {params.in_dim}, got shape {x.shape}")
    return x, single


def forward(params: MlpParams, x) -> tuple[np.ndarray, ForwardCache]:
    xb, single = _as_batch(params, x)
    a_list, z_list = [], []
    z = xb
    for w, b in zip(params.weights[:-1], params.biases[:-1]):
        a = z @ w.T + b
        z = sigmoid(a)
        a_list.append(a)
        z_list.append(z)
    out = z @ params.weights[-1].T + params.biases[-1]
    cache = ForwardCache(params, xb, a_list, z_list, single)
    return (out[0] if single else out), cache


def forward_tangent(params: MlpParams, x, v) -> tuple[np.ndarray, np.ndarray, ForwardCache]:
    """Forward pass plus directional derivatives along tangents ``v``.

    ``x`` is (B, d) and ``v`` is (B, K, d): K directions per input. Returns the
    output (B, out), the directional derivatives (B, K, out) and the cache.
    """
    out, cache = forward(params, x)
    single = cache.single
    if single:
        out = out[None]
        cache.single = False
    v = np.asarray(v, dtype=float)
    if single:
        v = v.reshape(1, -1, params.in_dim)
    elif v.ndim == 2:
        v = v[:, None, :]
    if v.shape[0] != cache.x.shape[0] or v.shape[2] != params.in_dim:
        raise ValueError(f"tangent shape {v.shape} incompatible with input {cache.x.shape}")
    cache.v = v
    dz = v
    for h, w in enumerate(params.weights[:-1]):
        da = dz @ w.T
        dz = cache.slope(h)[:, None, :] * da
        cache.da.append(da)
        cache.dz.append(dz)
    dout = dz @ params.weights[-1].T
    return out, dout, cache


def param_gradients(
    params: MlpParams, cache: ForwardCache, g_out, g_dout=None
) -> MlpParams:
    """Reverse-mode gradients of ``sum(g_out * out) + sum(g_dout * dout)`` w.r.t. parameters.

    ``g_out`` has the output's shape; ``g_dout`` (only with a tangent cache) has
    shape (B, K, out).
    """
    if cache.params is not params:
        raise ValueError("stale cache: it was produced with different parameters")
    g_out = np.asarray(g_out, dtype=float)
    if cache.single and g_out.ndim == 1:
        g_out = g_out[None]
    if g_out.shape != (cache.x.shape[0], params.out_dim):
        raise ValueError(f"cotangent shape {g_out.shape} does not match output")
    tangent = g_dout is not None
    if tangent and cache.v is None:
        raise ValueError("tangent cotangent given but cache has no tangent pass")

    H = params.num_layers - 1
    gw = [None] * (H + 1)
    gb = [None] * (H + 1)
    z_prev = cache.z[H - 1] if H > 0 else cache.x
    gw[H] = g_out.T @ z_prev
    gb[H] = g_out.sum(axis=0)
    g_z = g_out @ params.weights[H]
    if tangent:
        g_dout = np.asarray(g_dout, dtype=float)
        dz_prev = cache.dz[H - 1] if H > 0 else cache.v
        gw[H] = gw[H] + np.einsum("bko,bki->oi", g_dout, dz_prev)
        g_dz = g_dout @ params.weights[H]
    for h in range(H - 1, -1, -1):
        s1 = cache.slope(h)
        g_a = s1 * g_z
        if tangent:
            g_da = s1[:, None, :] * g_dz
            g_a = g_a + cache.curvature(h) * np.einsum("bkn,bkn->bn", cache.da[h], g_dz)
        below = cache.z[h - 1] if h > 0 else cache.x
        gw[h] = g_a.T @ below
        gb[h] = g_a.sum(axis=0)
        if tangent:
            dbelow = cache.dz[h - 1] if h > 0 else cache.v
            gw[h] = gw[h] + np.einsum("bkn,bki->ni", g_da, dbelow)
        if h > 0:
            g_z = g_a @ params.weights[h]
            if tangent:
                g_dz = g_da @ params.weights[h]
    return MlpParams(gw, gb)


def input_gradient(params: MlpParams, cache: ForwardCache) -> tuple[np.ndarray, list]:
    """Input gradient via first-order messages; returns (gradient, messages).

    For a scalar-output network the gradient has the input's shape; otherwise it
    is the Jacobian (out, d) per input.
    """
    if cache.params is not params:
        raise ValueError("stale cache: it was produced with different parameters")
    messages = []
    m = None
    for h, w in enumerate(params.weights[:-1]):
        wm = w[None, :, :] if h == 0 else np.einsum("kn,bni->bki", w, m)
        m = cache.slope(h)[:, :, None] * wm
        messages.append(m)
    jac = np.einsum("on,bni->boi", params.weights[-1], m) if m is not None else (
        np.broadcast_to(params.weights[-1], (cache.x.shape[0], *params.weights[-1].shape))
    )
    if params.out_dim == 1:
        jac = jac[:, 0, :]
    return (jac[0] if cache.single else jac), messages


def input_hessian(params: MlpParams, cache: ForwardCache, messages: list) -> np.ndarray:
    """Input Hessian via second-order messages (scalar output: (d, d) per input)."""
    if cache.params is not params or len(messages) != params.num_layers - 1:
        raise ValueError("stale messages: recompute input_gradient for these parameters")
    mm = None
    for h, w in enumerate(params.weights[:-1]):
        if h == 0:
            wm = np.broadcast_to(w, (cache.x.shape[0], *w.shape))
        else:
            wm = np.einsum("kn,bni->bki", w, messages[h - 1])
        first = cache.curvature(h)[:, :, None, None] * wm[:, :, :, None] * wm[:, :, None, :]
        if h == 0:
            mm = first
        else:
            mm = first + cache.slope(h)[:, :, None, None] * np.einsum(
                "kn,bnij->bkij", w, mm
            )
    hess = np.einsum("on,bnij->boij", params.weights[-1], mm)
    if params.out_dim == 1:
        hess = hess[:, 0]
    return hess[0] if cache.single else hess


def value_gradient_hessian(params: MlpParams, x):
    """Value, input gradient and input Hessian from a single forward pass."""
    out, cache = forward(params, x)
    grad, messages = input_gradient(params, cache)
    return out, grad, input_hessian(params, cache, messages)


@dataclass
class AdamState:
    m: MlpParams
    v: MlpParams
    step: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_init(params: MlpParams, lr: float = 1e-3, beta1=0.9, beta2=0.999, eps=1e-8) -> AdamState:
    return AdamState(zeros_like(params), zeros_like(params), 0, lr, beta1, beta2, eps)


def adam_step(state: AdamState, params: MlpParams, grads: MlpParams) -> tuple[MlpParams, AdamState]:
    if not all(np.isfinite(g).all() for g in grads.arrays()):
        raise FloatingPointError("non-finite gradient passed to adam_step")
    b1, b2 = state.beta1, state.beta2
    step = state.step + 1
    m = state.m.map(lambda m_, g: b1 * m_ + (1 - b1) * g, grads)
    v = state.v.map(lambda v_, g: b2 * v_ + (1 - b2) * g * g, grads)
    c1 = 1 - b1**step
    c2 = 1 - b2**step
    new = params.map(
        lambda p, m_, v_: p - state.lr * (m_ / c1) / (np.sqrt(v_ / c2) + state.eps), m, v
    )
    return new, AdamState(m, v, step, state.lr, b1, b2, state.eps)
