"""Fixed layer vocabulary with analytic forward/backward pairs.

All ops work on float64 arrays, sequence-first with no batch axis
(shape (n, d)); batching is a loop with gradient accumulation. Every
``*_fwd`` returns ``(out, cache)`` and the matching ``*_bwd`` consumes
``(dout, cache)``, so a layer instance can be applied many times per step
(shared weights across views) without cache aliasing.
"""

from __future__ import annotations

import math

import numpy as np

from tempoground.errors import ConfigError, DimensionError
from tempoground.numerics.params import Parameter, ParamStore
from tempoground.numerics.rng import Rng

_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715


# ---------------------------------------------------------------------------
# elementwise / row ops


def linear_fwd(x: np.ndarray, w: np.ndarray, b: np.ndarray):
    if x.shape[-1] != w.shape[0]:
        raise DimensionError(f"linear: x features {x.shape[-1]} != w rows {w.shape[0]}")
    if b.shape != (w.shape[1],):
        raise DimensionError(f"linear: bias shape {b.shape} != ({w.shape[1]},)")
    y = x @ w + b
    return y, (x, w)


def linear_bwd(dy: np.ndarray, cache):
    x, w = cache
    x2 = x.reshape(-1, x.shape[-1])
    dy2 = dy.reshape(-1, dy.shape[-1])
    dw = x2.T @ dy2
    db = dy2.sum(axis=0)
    dx = (dy2 @ w.T).reshape(x.shape)
    return dx, dw, db


def layernorm_fwd(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray, eps: float = 1e-6):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    y = gamma * xhat + beta
    return y, (xhat, inv, gamma)


def layernorm_bwd(dy: np.ndarray, cache):
    xhat, inv, gamma = cache
    lead = dy.reshape(-1, dy.shape[-1])
    xh2 = xhat.reshape(-1, xhat.shape[-1])
    dgamma = (lead * xh2).sum(axis=0)
    dbeta = lead.sum(axis=0)
    dxhat = dy * gamma
    m1 = dxhat.mean(axis=-1, keepdims=True)
    m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
    dx = inv * (dxhat - m1 - xhat * m2)
    return dx, dgamma, dbeta


def gelu_fwd(x: np.ndarray):
    u = _GELU_C * (x + _GELU_A * x**3)
    t = np.tanh(u)
    y = 0.5 * x * (1.0 + t)
    return y, (x, t)


def gelu_bwd(dy: np.ndarray, cache):
    x, t = cache
    du = _GELU_C * (1.0 + 3.0 * _GELU_A * x * x)
    return dy * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)


def tanh_fwd(x: np.ndarray):
    y = np.tanh(x)
    return y, (y,)


def tanh_bwd(dy: np.ndarray, cache):
    (y,) = cache
    return dy * (1.0 - y * y)


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    """Shift-stabilized softmax; rows sum to 1 within 1e-12."""
    if not -x.ndim <= axis < x.ndim:
        raise DimensionError(f"softmax: axis {axis} invalid for ndim {x.ndim}")
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax_bwd(dy: np.ndarray, s: np.ndarray, axis: int = -1) -> np.ndarray:
    inner = (dy * s).sum(axis=axis, keepdims=True)
    return s * (dy - inner)


# ---------------------------------------------------------------------------
# attention


def _split_heads(x: np.ndarray, heads: int) -> np.ndarray:
    n, d = x.shape
    return x.reshape(n, heads, d // heads).transpose(1, 0, 2)


def _merge_heads(x: np.ndarray) -> np.ndarray:
    h, n, dh = x.shape
    return x.transpose(1, 0, 2).reshape(n, h * dh)


def _attention_fwd(q_in, kv_in, params, heads):
    """Shared core: queries from q_in, keys/values from kv_in."""
    wq, bq, wk, bk, wv, bv, wo, bo = params
    q, cq = linear_fwd(q_in, wq, bq)
    k, ck = linear_fwd(kv_in, wk, bk)
    v, cv = linear_fwd(kv_in, wv, bv)
    dh = q.shape[-1] // heads
    qh = _split_heads(q, heads)
    kh = _split_heads(k, heads)
    vh = _split_heads(v, heads)
    scale = 1.0 / math.sqrt(dh)
    att = softmax(qh @ kh.transpose(0, 2, 1) * scale, axis=-1)
    yh = att @ vh
    y = _merge_heads(yh)
    out, co = linear_fwd(y, wo, bo)
    cache = (cq, ck, cv, co, qh, kh, vh, att, heads, scale)
    return out, cache


def _attention_bwd(dout, cache):
    cq, ck, cv, co, qh, kh, vh, att, heads, scale = cache
    dy, dwo, dbo = linear_bwd(dout, co)
    dyh = _split_heads(dy, heads)
    datt = dyh @ vh.transpose(0, 2, 1)
    dvh = att.transpose(0, 2, 1) @ dyh
    dscore = softmax_bwd(datt, att, axis=-1) * scale
    dqh = dscore @ kh
    dkh = dscore.transpose(0, 2, 1) @ qh
    dq_in, dwq, dbq = linear_bwd(_merge_heads(dqh), cq)
    dk_in, dwk, dbk = linear_bwd(_merge_heads(dkh), ck)
    dv_in, dwv, dbv = linear_bwd(_merge_heads(dvh), cv)
    grads = (dwq, dbq, dwk, dbk, dwv, dbv, dwo, dbo)
    return dq_in, dk_in + dv_in, grads


def mhsa_fwd(x, params, heads):
    """Multi-head self-attention over a (n, d) sequence."""
    return _attention_fwd(x, x, params, heads)


def mhsa_bwd(dout, cache):
    dq, dkv, grads = _attention_bwd(dout, cache)
    return dq + dkv, grads


def mhca_fwd(queries, memory, params, heads):
    """Multi-head cross-attention: (m, d) queries attend to (n, d) memory."""
    return _attention_fwd(queries, memory, params, heads)


def mhca_bwd(dout, cache):
    return _attention_bwd(dout, cache)


# ---------------------------------------------------------------------------
# temporal resampling and positional encoding


def resample_weights(source_len: int, target_len: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Endpoint-aligned linear interpolation coefficients."""
    if source_len < 1 or target_len < 1:
        raise DimensionError("resample: lengths must be >= 1")
    if target_len == 1:
        pos = np.array([0.5 * (source_len - 1)])
    else:
        pos = np.arange(target_len) * (source_len - 1) / (target_len - 1)
    lo = np.floor(pos).astype(int)
    lo = np.minimum(lo, source_len - 1)
    hi = np.minimum(lo + 1, source_len - 1)
    frac = pos - lo
    return lo, hi, frac


def time_resample_fwd(u: np.ndarray, target_len: int):
    lo, hi, frac = resample_weights(u.shape[0], target_len)
    f = frac[:, None]
    out = (1.0 - f) * u[lo] + f * u[hi]
    return out, (u.shape[0], lo, hi, f)


def time_resample_bwd(dout: np.ndarray, cache):
    source_len, lo, hi, f = cache
    du = np.zeros((source_len, dout.shape[1]))
    np.add.at(du, lo, (1.0 - f) * dout)
    np.add.at(du, hi, f * dout)
    return du


def sinusoid_positions(positions: np.ndarray, width: int) -> np.ndarray:
    """Transformer-style sin/cos encoding of (possibly real) positions."""
    if width % 2 != 0:
        raise ConfigError("positional width must be even")
    half = width // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    ang = np.asarray(positions, dtype=np.float64)[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=-1)


# ---------------------------------------------------------------------------
# parameterized layer classes


def glorot(rng: Rng, fan_in: int, fan_out: int) -> np.ndarray:
    std = math.sqrt(2.0 / (fan_in + fan_out))
    return rng.normal((fan_in, fan_out), scale=std)


class Linear:
    def __init__(self, store: ParamStore, prefix: str, d_in: int, d_out: int, rng: Rng):
        self.w = store.add(f"{prefix}.w", glorot(rng, d_in, d_out))
        self.b = store.add(f"{prefix}.b", np.zeros(d_out))

    def forward(self, x):
        return linear_fwd(x, self.w.data, self.b.data)

    def backward(self, dy, cache):
        dx, dw, db = linear_bwd(dy, cache)
        self.w.grad += dw
        self.b.grad += db
        return dx


class LayerNorm:
    def __init__(self, store: ParamStore, prefix: str, width: int, eps: float = 1e-6):
        self.gamma = store.add(f"{prefix}.gamma", np.ones(width))
        self.beta = store.add(f"{prefix}.beta", np.zeros(width))
        self.eps = eps

    def forward(self, x):
        return layernorm_fwd(x, self.gamma.data, self.beta.data, self.eps)

    def backward(self, dy, cache):
        dx, dgamma, dbeta = layernorm_bwd(dy, cache)
        self.gamma.grad += dgamma
        self.beta.grad += dbeta
        return dx


class _Attention:
    """Parameter bundle for self- or cross-attention."""

    def __init__(self, store: ParamStore, prefix: str, width: int, heads: int, rng: Rng):
        if width % heads != 0:
            raise ConfigError(f"width {width} not divisible by heads {heads}")
        self.heads = heads
        self.wq = store.add(f"{prefix}.wq", glorot(rng, width, width))
        self.bq = store.add(f"{prefix}.bq", np.zeros(width))
        self.wk = store.add(f"{prefix}.wk", glorot(rng, width, width))
        self.bk = store.add(f"{prefix}.bk", np.zeros(width))
        self.wv = store.add(f"{prefix}.wv", glorot(rng, width, width))
        self.bv = store.add(f"{prefix}.bv", np.zeros(width))
        self.wo = store.add(f"{prefix}.wo", glorot(rng, width, width))
        self.bo = store.add(f"{prefix}.bo", np.zeros(width))

    def _params(self):
        return (
            self.wq.data, self.bq.data, self.wk.data, self.bk.data,
            self.wv.data, self.bv.data, self.wo.data, self.bo.data,
        )

    def _accumulate(self, grads):
        for p, g in zip(
            (self.wq, self.bq, self.wk, self.bk, self.wv, self.bv, self.wo, self.bo),
            grads,
        ):
            p.grad += g


class MultiHeadSelfAttention(_Attention):
    def forward(self, x):
        return mhsa_fwd(x, self._params(), self.heads)

    def backward(self, dout, cache):
        dx, grads = mhsa_bwd(dout, cache)
        self._accumulate(grads)
        return dx


class MultiHeadCrossAttention(_Attention):
    def forward(self, queries, memory):
        return mhca_fwd(queries, memory, self._params(), self.heads)

    def backward(self, dout, cache):
        dq, dmem, grads = mhca_bwd(dout, cache)
        self._accumulate(grads)
        return dq, dmem


class Mlp:
    """Two-layer feed-forward with GELU."""

    def __init__(self, store: ParamStore, prefix: str, width: int, hidden: int, rng: Rng, d_out: int | None = None):
        self.fc1 = Linear(store, f"{prefix}.fc1", width, hidden, rng)
        self.fc2 = Linear(store, f"{prefix}.fc2", hidden, d_out if d_out is not None else width, rng)

    def forward(self, x):
        h, c1 = self.fc1.forward(x)
        a, cg = gelu_fwd(h)
        y, c2 = self.fc2.forward(a)
        return y, (c1, cg, c2)

    def backward(self, dy, cache):
        c1, cg, c2 = cache
        da = self.fc2.backward(dy, c2)
        dh = gelu_bwd(da, cg)
        return self.fc1.backward(dh, c1)


class SelfAttentionBlock:
    """Pre-norm transformer block: x + MHSA(LN(x)), then x + MLP(LN(x))."""

    def __init__(self, store: ParamStore, prefix: str, width: int, heads: int, mlp_ratio: float, rng: Rng):
        self.ln1 = LayerNorm(store, f"{prefix}.ln1", width)
        self.attn = MultiHeadSelfAttention(store, f"{prefix}.attn", width, heads, rng)
        self.ln2 = LayerNorm(store, f"{prefix}.ln2", width)
        self.mlp = Mlp(store, f"{prefix}.mlp", width, int(width * mlp_ratio), rng)

    def forward(self, x):
        h1, cl1 = self.ln1.forward(x)
        a, ca = self.attn.forward(h1)
        x1 = x + a
        h2, cl2 = self.ln2.forward(x1)
        m, cm = self.mlp.forward(h2)
        y = x1 + m
        return y, (cl1, ca, cl2, cm)

    def backward(self, dy, cache):
        cl1, ca, cl2, cm = cache
        dh2 = self.mlp.backward(dy, cm)
        dx1 = dy + self.ln2.backward(dh2, cl2)
        dh1 = self.attn.backward(dx1, ca)
        return dx1 + self.ln1.backward(dh1, cl1)


class CrossAttentionBlock:
    """Pre-norm cross-attention block for query tokens over a memory."""

    def __init__(self, store: ParamStore, prefix: str, width: int, heads: int, mlp_ratio: float, rng: Rng):
        self.lnq = LayerNorm(store, f"{prefix}.lnq", width)
        self.lnm = LayerNorm(store, f"{prefix}.lnm", width)
        self.attn = MultiHeadCrossAttention(store, f"{prefix}.attn", width, heads, rng)
        self.ln2 = LayerNorm(store, f"{prefix}.ln2", width)
        self.mlp = Mlp(store, f"{prefix}.mlp", width, int(width * mlp_ratio), rng)

    def forward(self, q, memory):
        hq, clq = self.lnq.forward(q)
        hm, clm = self.lnm.forward(memory)
        a, ca = self.attn.forward(hq, hm)
        q1 = q + a
        h2, cl2 = self.ln2.forward(q1)
        m, cm = self.mlp.forward(h2)
        y = q1 + m
        return y, (clq, clm, ca, cl2, cm)

    def backward(self, dy, cache):
        clq, clm, ca, cl2, cm = cache
        dh2 = self.mlp.backward(dy, cm)
        dq1 = dy + self.ln2.backward(dh2, cl2)
        dhq, dhm = self.attn.backward(dq1, ca)
        dq = dq1 + self.lnq.backward(dhq, clq)
        dmem = self.lnm.backward(dhm, clm)
        return dq, dmem
