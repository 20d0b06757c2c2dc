"""Small reverse-mode autodiff over numpy float64 arrays.

Only a closed set of primitives is differentiable; ``grad`` refuses graphs
containing anything else. Tensors opt out of numpy's ufunc protocol so that
an accidental ``np.sin(t)`` fails loudly instead of silently detaching.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

PRIMITIVES = frozenset(
    {
        "leaf", "const", "add", "sub", "mul", "neg", "matmul", "sum", "mean",
        "exp", "log", "sigmoid", "tanh", "silu", "square", "clip", "minimum",
        "log_softmax", "kl_rows", "gated_scan", "getitem", "stack", "concat", "reshape", "transpose",
    }
)


class UnsupportedPrimitiveError(TypeError):
    pass


class Tensor:
    __array_ufunc__ = None
    __slots__ = ("value", "op", "parents", "backward", "requires_grad", "name")

    def __init__(self, value, op="const", parents=(), backward=None, requires_grad=False, name=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.op = op
        self.parents = parents
        self.backward = backward
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Tensor(op={self.op}, shape={self.shape})"

    def __add__(self, o):
        return add(self, o)

    __radd__ = __add__

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    __rmul__ = __mul__

    def __truediv__(self, o):
        if isinstance(o, Tensor):
            raise UnsupportedPrimitiveError("division by a tensor is not a supported primitive")
        return mul(self, 1.0 / o)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, o):
        return matmul(self, o)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def __pow__(self, _):
        raise UnsupportedPrimitiveError("pow is not a supported primitive; use square")


def leaf(value, name=None) -> Tensor:
    return Tensor(np.array(value, dtype=np.float64), op="leaf", requires_grad=True, name=name)


def _t(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(value, op, parents, backward):
    if any(p.requires_grad for p in parents):
        return Tensor(value, op, parents, backward, True)
    return Tensor(value, op)


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# ---------------------------------------------------------------- primitives


def add(a, b):
    a, b = _t(a), _t(b)
    return _node(a.value + b.value, "add", (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b):
    a, b = _t(a), _t(b)
    return _node(a.value - b.value, "sub", (a, b), lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)))


def mul(a, b):
    a, b = _t(a), _t(b)
    return _node(
        a.value * b.value,
        "mul",
        (a, b),
        lambda g: (_unbroadcast(g * b.value, a.shape), _unbroadcast(g * a.value, b.shape)),
    )


def neg(a):
    return _node(-a.value, "neg", (a,), lambda g: (-g,))


def matmul(a, b):
    a, b = _t(a), _t(b)
    av, bv = a.value, b.value

    def back(g):
        if av.ndim == 2 and bv.ndim == 2:
            return g @ bv.T, av.T @ g
        if av.ndim == 2:
            return np.outer(g, bv), av.T @ g
        if bv.ndim == 2:
            return bv @ g, np.outer(av, g)
        return g * bv, g * av

    return _node(av @ bv, "matmul", (a, b), back)


def transpose(a):
    return _node(a.value.T, "transpose", (a,), lambda g: (g.T,))


def sum(a, axis=None, keepdims=False):  # noqa: A001 - mirrors numpy
    a = _t(a)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _node(a.value.sum(axis=axis, keepdims=keepdims), "sum", (a,), back)


def mean(a, axis=None):
    a = _t(a)
    n = a.value.size if axis is None else a.shape[axis]

    def back(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, a.shape).copy(),)

    return _node(a.value.mean(axis=axis), "mean", (a,), back)


def exp(a):
    v = np.exp(a.value)
    return _node(v, "exp", (a,), lambda g: (g * v,))


def log(a):
    return _node(np.log(a.value), "log", (a,), lambda g: (g / a.value,))


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid(a):
    s = _sigmoid(a.value)
    return _node(s, "sigmoid", (a,), lambda g: (g * s * (1.0 - s),))


def tanh(a):
    v = np.tanh(a.value)
    return _node(v, "tanh", (a,), lambda g: (g * (1.0 - v * v),))


def silu(a):
    x = a.value
    s = _sigmoid(x)
    return _node(x * s, "silu", (a,), lambda g: (g * (s + x * s * (1.0 - s)),))


def square(a):
    a = _t(a)
    return _node(a.value * a.value, "square", (a,), lambda g: (2.0 * g * a.value,))


def clip(a, lo, hi):
    inside = (a.value >= lo) & (a.value <= hi)
    return _node(np.clip(a.value, lo, hi), "clip", (a,), lambda g: (g * inside,))


def minimum(a, b):
    a, b = _t(a), _t(b)
    take_a = a.value <= b.value
    return _node(
        np.where(take_a, a.value, b.value),
        "minimum",
        (a, b),
        lambda g: (_unbroadcast(g * take_a, a.shape), _unbroadcast(g * ~take_a, b.shape)),
    )


def log_softmax(a, mask=None):
    """Log-softmax over the last axis; entries where ``mask`` is False get -inf and no gradient."""
    x = a.value
    if mask is not None:
        x = np.where(mask, x, -np.inf)
    mx = x.max(axis=-1, keepdims=True)
    z = x - mx
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def back(g):
        gg = np.where(np.isfinite(out), g, 0.0)
        return (gg - p * gg.sum(axis=-1, keepdims=True),)

    return _node(out, "log_softmax", (a,), back)


def kl_rows(logp, logq):
    """Row-wise KL(p ‖ q) from log-probabilities; entries where p is zero contribute nothing.

    ``logq`` is treated as a constant target.
    """
    logp = _t(logp)
    lq = logq.value if isinstance(logq, Tensor) else np.asarray(logq, dtype=np.float64)
    live = np.isfinite(logp.value)
    p = np.where(live, np.exp(np.where(live, logp.value, 0.0)), 0.0)
    diff = np.where(live, logp.value - np.where(live, lq, 0.0), 0.0)
    out = (p * diff).sum(axis=-1)
    return _node(out, "kl_rows", (logp,), lambda g: (g[..., None] * p * (diff + 1.0),))


def gated_scan(emb, wx, wh, b, tokens, mask, h0=None):
    """Gated recurrence over embedded tokens, returning every state as ``[T, B, H]``.

    Step: ``a = E[tok]·Wx + h·Wh + b``, ``z = σ(a[:H])``, ``c = tanh(a[H:])``,
    ``h ← h + m·z·(c − h)``. Gradients flow to ``emb``, ``wx``, ``wh`` and ``b``;
    ``h0`` is a constant.
    """
    emb, wx, wh, b = _t(emb), _t(wx), _t(wh), _t(b)
    tokens = np.asarray(tokens)
    mask = np.asarray(mask, dtype=np.float64)
    B, T = tokens.shape
    H = wh.shape[0]
    X = emb.value[tokens]
    XW = X @ wx.value
    bv = b.value
    h = np.zeros((B, H)) if h0 is None else np.array(h0.value if isinstance(h0, Tensor) else h0, dtype=np.float64)
    Z = np.empty((T, B, H))
    C = np.empty((T, B, H))
    S = np.empty((T + 1, B, H))
    S[0] = h
    whv = wh.value
    for t in range(T):
        a = XW[:, t] + h @ whv + bv
        z = _sigmoid(a[:, :H])
        c = np.tanh(a[:, H:])
        h = h + z * (c - h) * mask[:, t, None]
        Z[t], C[t], S[t + 1] = z, c, h

    def back(G):
        dA = np.empty((B, T, 2 * H))
        dwh = np.zeros_like(whv)
        dh = np.zeros((B, H))
        for t in range(T - 1, -1, -1):
            g = G[t] + dh
            m = mask[:, t, None]
            z, c, hp = Z[t], C[t], S[t]
            gz = g * m * (c - hp) * z * (1.0 - z)
            gc = g * m * z * (1.0 - c * c)
            da = np.concatenate([gz, gc], axis=1)
            dA[:, t] = da
            dwh += hp.T @ da
            dh = g * (1.0 - m * z) + da @ whv.T
        flat = dA.reshape(-1, 2 * H)
        dwx = X.reshape(-1, X.shape[-1]).T @ flat
        demb = np.zeros_like(emb.value)
        np.add.at(demb, tokens.reshape(-1), flat @ wx.value.T)
        return demb, dwx, dwh, flat.sum(axis=0)

    return _node(S[1:], "gated_scan", (emb, wx, wh, b), back)


def getitem(a, idx):
    def back(g):
        full = np.zeros_like(a.value)
        np.add.at(full, idx, g)
        return (full,)

    return _node(a.value[idx], "getitem", (a,), back)


def stack(ts, axis=0):
    ts = [_t(t) for t in ts]

    def back(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(ts)))

    return _node(np.stack([t.value for t in ts], axis=axis), "stack", tuple(ts), back)


def concat(ts, axis=-1):
    ts = [_t(t) for t in ts]
    cuts = np.cumsum([t.shape[axis] for t in ts])[:-1]
    return _node(
        np.concatenate([t.value for t in ts], axis=axis),
        "concat",
        tuple(ts),
        lambda g: tuple(np.split(g, cuts, axis=axis)),
    )


def reshape(a, shape):
    return _node(a.value.reshape(shape), "reshape", (a,), lambda g: (g.reshape(a.shape),))


def pick(logp, idx):
    """``logp[i, idx[i]]`` for each row."""
    rows = np.arange(logp.shape[0])
    return getitem(logp, (rows, np.asarray(idx)))


def softmax_xent(logits, targets, mask=None):
    """Per-row negative log-likelihood of ``targets`` under softmax(logits)."""
    return neg(pick(log_softmax(logits, mask), targets))


# ---------------------------------------------------------------- gradients


def _topo(root):
    order, seen, stack_ = [], set(), [(root, False)]
    while stack_:
        node, done = stack_.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack_.append((p, False))
    return order


def grad(loss: Tensor, wrt) -> dict:
    """Exact reverse-mode gradients of a scalar ``loss``.

    ``wrt`` maps names to leaf tensors; leaves the loss does not depend on
    get zero gradients.
    """
    if loss.value.size != 1:
        raise ValueError("loss must be a scalar")
    order = _topo(loss)
    for node in order:
        if node.op not in PRIMITIVES:
            raise UnsupportedPrimitiveError(f"primitive {node.op!r} has no gradient rule")
    grads = {id(loss): np.ones_like(loss.value)}
    for node in reversed(order):
        g = grads.pop(id(node), None) if node.op != "leaf" else grads.get(id(node))
        if g is None or node.backward is None:
            continue
        for p, pg in zip(node.parents, node.backward(g)):
            if not p.requires_grad:
                continue
            if id(p) in grads:
                grads[id(p)] = grads[id(p)] + pg
            else:
                grads[id(p)] = pg
    return {k: grads.get(id(t), np.zeros_like(t.value)) for k, t in wrt.items()}


def finite_difference(f, params: dict, eps: float = 1e-5) -> dict:
    """Central differences of scalar ``f(params)`` with respect to every entry."""
    out = {}
    for name, arr in params.items():
        g = np.zeros_like(arr)
        flat, gflat = arr.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = f(params)
            flat[i] = orig - eps
            fm = f(params)
            flat[i] = orig
            gflat[i] = (fp - fm) / (2 * eps)
        out[name] = g
    return out


def relative_error(a, b, floor: float = 1e-8) -> float:
    a, b = np.ravel(a), np.ravel(b)
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))


# ---------------------------------------------------------------- parameters


@dataclass
class ParamSet:
    arrays: dict = field(default_factory=dict)
    version: str = "hisr-params/1"

    def __getitem__(self, name):
        return self.arrays[name]

    def __contains__(self, name):
        return name in self.arrays

    def __iter__(self):
        return iter(self.arrays)

    def add(self, name, value):
        if name in self.arrays:
            raise KeyError(f"parameter {name!r} already exists")
        self.arrays[name] = np.array(value, dtype=np.float64)

    def leaves(self, names=None) -> dict:
        names = self.arrays if names is None else names
        return {n: leaf(self.arrays[n], n) for n in names}

    def consts(self) -> dict:
        return {n: Tensor(a) for n, a in self.arrays.items()}

    def copy(self) -> "ParamSet":
        return ParamSet({n: a.copy() for n, a in self.arrays.items()}, self.version)

    def equal(self, other: "ParamSet") -> bool:
        return list(self.arrays) == list(other.arrays) and all(
            np.array_equal(a, other.arrays[n]) and a.shape == other.arrays[n].shape for n, a in self.arrays.items()
        )


@dataclass
class OptimState:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: ParamSet, grads: dict, state: OptimState, max_norm: float | None = None):
    """Bias-corrected Adam update of ``params`` in place; returns (params, state)."""
    if max_norm is not None:
        total = np.sqrt(np.add.reduce([float(np.sum(g * g)) for g in grads.values()]))
        if total > max_norm:
            grads = {n: g * (max_norm / total) for n, g in grads.items()}
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1, c2 = 1.0 - b1**state.step, 1.0 - b2**state.step
    for name, g in grads.items():
        p = params.arrays[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape} for {name}")
        m = state.m.setdefault(name, np.zeros_like(p))
        v = state.v.setdefault(name, np.zeros_like(p))
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state


# ---------------------------------------------------------------- layers


def mlp_head(h, w1, w2):
    """Scalar (or per-row) ``W2 · SiLU(W1 · h)`` with no biases."""
    h, w1, w2 = _t(h), _t(w1), _t(w2)
    if w1.value.ndim != 2 or w2.value.ndim != 2 or w2.shape[0] != 1 or w2.shape[1] != w1.shape[0]:
        raise ValueError(f"head shapes W1 {w1.shape}, W2 {w2.shape} are inconsistent")
    if h.shape[-1] != w1.shape[1]:
        raise ValueError(f"input width {h.shape[-1]} does not match W1 {w1.shape}")
    if h.value.ndim == 1:
        return getitem(matmul(w2, silu(matmul(w1, h))), 0)
    # rows of h -> [N]
    hidden = silu(matmul(h, transpose(w1)))
    return reshape(matmul(hidden, transpose(w2)), (h.shape[0],))


def init_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    scale = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-scale, scale, size=shape)


# ---------------------------------------------------------------- checkpoints

MAGIC = b"HISR"
FORMAT_VERSION = 1


def save_params(params: ParamSet, path) -> None:
    """Write ``params`` in the HISR binary checkpoint format."""
    tag = params.version.encode("utf-8")
    chunks = [MAGIC, struct.pack("<I", FORMAT_VERSION), struct.pack("<I", len(tag)), tag]
    for name, arr in params.arrays.items():
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_params(path) -> ParamSet:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise ValueError(f"{path}: not a HISR checkpoint")
    (fmt,) = struct.unpack_from("<I", data, 4)
    if fmt != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint format {fmt}")
    (tag_len,) = struct.unpack_from("<I", data, 8)
    off = 12
    tag = data[off : off + tag_len].decode("utf-8")
    off += tag_len
    arrays = {}
    while off < len(data):
        (n,) = struct.unpack_from("<I", data, off)
        off += 4
        name = data[off : off + n].decode("utf-8")
        off += n
        (rank,) = struct.unpack_from("<I", data, off)
        off += 4
        dims = struct.unpack_from(f"<{rank}Q", data, off)
        off += 8 * rank
        count = int(np.prod(dims)) if rank else 1
        arrays[name] = np.frombuffer(data, dtype="<f8", count=count, offset=off).reshape(dims).astype(np.float64)
        off += 8 * count
    return ParamSet(arrays, tag)
