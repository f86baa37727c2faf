"""Minimal reverse-mode differentiation over float64 numpy arrays.

A :class:`Tape` records every operation applied to its :class:`Node` values
during a forward pass. ``tape.backward(loss)`` replays the records in reverse,
accumulating gradients into the :class:`Parameter` objects that were read
through :meth:`Tape.param`.

Operations work on 2-D batches (rows are samples) unless noted otherwise.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import NonFiniteError, ShapeError, TapeError

DTYPE = np.float64


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------


class Parameter:
    """A named trainable array together with its gradient buffer."""

    __slots__ = ("name", "values", "gradient")

    def __init__(self, name: str, values):
        self.name = name
        self.values = np.array(values, dtype=DTYPE)
        self.gradient = np.zeros_like(self.values)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


class ParameterStore:
    """Ordered collection of uniquely named parameters."""

    def __init__(self):
        self._params: dict[str, Parameter] = {}

    def add(self, name: str, values) -> Parameter:
        if name in self._params:
            raise ShapeError(f"duplicate parameter name {name!r}")
        p = Parameter(name, values)
        self._params[name] = p
        return p

    def __getitem__(self, name: str) -> Parameter:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self):
        return iter(self._params.values())

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def zero_grad(self) -> None:
        for p in self._params.values():
            p.gradient.fill(0.0)

    def snapshot(self) -> dict[str, np.ndarray]:
        return {name: p.values.copy() for name, p in self._params.items()}

    def load(self, values: dict[str, np.ndarray]) -> None:
        for name, arr in values.items():
            p = self._params[name]
            arr = np.asarray(arr, dtype=DTYPE)
            if arr.shape != p.shape:
                raise ShapeError(f"parameter {name!r}: stored shape {arr.shape} != {p.shape}")
            p.values[...] = arr

    def digest(self) -> str:
        h = hashlib.sha256()
        for name, p in self._params.items():
            h.update(name.encode())
            h.update(repr(p.shape).encode())
            h.update(np.ascontiguousarray(p.values).tobytes())
        return h.hexdigest()


def glorot_uniform(rng: np.random.Generator, shape: tuple[int, ...]) -> np.ndarray:
    """Uniform draw on [-s, s] with s = sqrt(6 / (fan_in + fan_out))."""
    if len(shape) == 1:
        fan_in, fan_out = 1, shape[0]
    else:
        fan_out, fan_in = shape[-2], shape[-1]
    s = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-s, s, size=shape)


# ---------------------------------------------------------------------------
# Plain numeric kernels
# ---------------------------------------------------------------------------


def _check_finite(a: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(a)):
        raise NonFiniteError(f"{what} contains non-finite values")


def linear_forward(x, W, b) -> np.ndarray:
    """Return ``W @ x + b`` for a single vector ``x``."""
    x = np.asarray(x, dtype=DTYPE)
    W = np.asarray(W, dtype=DTYPE)
    b = np.asarray(b, dtype=DTYPE)
    if W.ndim != 2 or x.ndim != 1 or b.ndim != 1 or W.shape[1] != x.shape[0] or W.shape[0] != b.shape[0]:
        raise ShapeError(f"linear: W{W.shape} x{x.shape} + b{b.shape} do not agree")
    return W @ x + b


def softmax(z, axis: int = -1) -> np.ndarray:
    """Numerically stable softmax (max-subtraction)."""
    z = np.asarray(z, dtype=DTYPE)
    if z.size == 0:
        raise ShapeError("softmax of an empty array")
    _check_finite(z, "softmax input")
    e = np.exp(z - z.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def sigmoid(x: np.ndarray) -> np.ndarray:
    # tanh form never overflows
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=DTYPE)))


# ---------------------------------------------------------------------------
# Tape and nodes
# ---------------------------------------------------------------------------


class Node:
    """A value produced on a tape."""

    __slots__ = ("value", "grad", "tape", "param")

    def __init__(self, value: np.ndarray, tape: "Tape", param: Parameter | None = None):
        self.value = value
        self.grad = None
        self.tape = tape
        self.param = param

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __repr__(self) -> str:
        return f"Node(shape={self.shape})"


BackwardFn = Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    """Records operations for one forward pass.

    With ``record=False`` the tape only evaluates; calling :meth:`backward`
    on it is an error. A tape may be backpropagated once.
    """

    def __init__(self, record: bool = True):
        self.record = record
        self._ops: list[tuple[Node, tuple[Node | None, ...], BackwardFn]] = []
        self._leaves: dict[str, Node] = {}
        self._consumed = False

    def param(self, p: Parameter) -> Node:
        node = self._leaves.get(p.name)
        if node is None:
            node = Node(p.values, self, p)
            self._leaves[p.name] = node
        return node

    def constant(self, value) -> Node:
        return Node(np.asarray(value, dtype=DTYPE), self)

    def emit(self, value: np.ndarray, parents: tuple[Node | None, ...], backward: BackwardFn) -> Node:
        out = Node(value, self)
        if self.record:
            self._ops.append((out, parents, backward))
        return out

    def backward(self, loss: Node) -> None:
        """Propagate d(loss)/d(node) back to every parameter read on this tape."""
        if not self.record:
            raise TapeError("tape was created with record=False")
        if self._consumed:
            raise TapeError("tape has already been backpropagated")
        if not self._ops or loss.tape is not self:
            raise TapeError("backward called without a recorded forward pass")
        if loss.value.size != 1:
            raise TapeError(f"loss must be scalar, got shape {loss.shape}")
        self._consumed = True
        loss.grad = np.ones_like(loss.value)
        for out, parents, fn in reversed(self._ops):
            if out.grad is None:
                continue
            grads = fn(out.grad)
            for parent, g in zip(parents, grads):
                if parent is None or g is None:
                    continue
                if parent.grad is None:
                    parent.grad = g
                else:
                    parent.grad = parent.grad + g
            out.grad = None
        for node in self._leaves.values():
            if node.grad is not None:
                node.param.gradient += node.grad
                node.grad = None
        self._ops.clear()


def _tape_of(*nodes) -> Tape:
    for n in nodes:
        if isinstance(n, Node):
            return n.tape
    raise TapeError("operation needs at least one tape node")


# ---------------------------------------------------------------------------
# Differentiable operations
# ---------------------------------------------------------------------------


def linear(x: Node, W: Node, b: Node) -> Node:
    """Batched affine map: ``x @ W.T + b`` for x of shape (B, n_in)."""
    xv, Wv, bv = x.value, W.value, b.value
    if xv.ndim != 2 or Wv.ndim != 2 or xv.shape[1] != Wv.shape[1] or bv.shape != (Wv.shape[0],):
        raise ShapeError(f"linear: x{xv.shape} W{Wv.shape} b{bv.shape} do not agree")
    out = xv @ Wv.T + bv

    def backward(g):
        return g @ Wv, g.T @ xv, g.sum(axis=0)

    return x.tape.emit(out, (x, W, b), backward)


def relu(x: Node) -> Node:
    mask = x.value > 0
    return x.tape.emit(x.value * mask, (x,), lambda g: (g * mask,))


def tanh(x: Node) -> Node:
    t = np.tanh(x.value)
    return x.tape.emit(t, (x,), lambda g: (g * (1.0 - t * t),))


def sigmoid_op(x: Node) -> Node:
    s = sigmoid(x.value)
    return x.tape.emit(s, (x,), lambda g: (g * s * (1.0 - s),))


def add(a: Node, b: Node) -> Node:
    if a.shape != b.shape:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} differ")
    return _tape_of(a, b).emit(a.value + b.value, (a, b), lambda g: (g, g))


def scale(a: Node, c: float) -> Node:
    return a.tape.emit(a.value * c, (a,), lambda g: (g * c,))


def mul(a: Node, b: Node) -> Node:
    if a.shape != b.shape:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} differ")
    av, bv = a.value, b.value
    return _tape_of(a, b).emit(av * bv, (a, b), lambda g: (g * bv, g * av))


def sum_axis(x: Node, axis: int) -> Node:
    shape = x.shape

    def backward(g):
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return x.tape.emit(x.value.sum(axis=axis), (x,), backward)


def mean_axis(x: Node, axis: int) -> Node:
    n = x.shape[axis]
    return scale(sum_axis(x, axis), 1.0 / n)


def concat(nodes: Sequence[Node], axis: int = -1) -> Node:
    values = [n.value for n in nodes]
    out = np.concatenate(values, axis=axis)
    splits = np.cumsum([v.shape[axis] for v in values])[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _tape_of(*nodes).emit(out, tuple(nodes), backward)


def softmax_op(z: Node, axis: int = -1) -> Node:
    s = softmax(z.value, axis=axis)

    def backward(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return z.tape.emit(s, (z,), backward)


def scatter_rows(src: Node | None, index: np.ndarray, fill: Node | None, n_rows: int, width: int) -> Node:
    """Build an (n_rows, width) matrix from ``src`` rows placed at ``index``.

    Remaining rows take the vector ``fill``, or zeros when ``fill`` is None.
    """
    tape = _tape_of(src, fill)
    index = np.asarray(index, dtype=np.intp)
    out = np.zeros((n_rows, width), dtype=DTYPE)
    rest = np.ones(n_rows, dtype=bool)
    rest[index] = False
    if src is not None:
        if src.shape != (len(index), width):
            raise ShapeError(f"scatter_rows: src{src.shape} vs {len(index)} rows of width {width}")
        out[index] = src.value
    if fill is not None:
        if fill.shape != (width,):
            raise ShapeError(f"scatter_rows: fill{fill.shape} vs width {width}")
        out[rest] = fill.value

    def backward(g):
        gs = g[index] if src is not None else None
        gf = g[rest].sum(axis=0) if fill is not None else None
        return gs, gf

    return tape.emit(out, (src, fill), backward)


def bag_mean(table: Node, tokens: Sequence[Sequence[int]]) -> Node:
    """Mean of embedding-table rows per token list; returns (len(tokens), d)."""
    V = table.shape[0]
    pool = np.zeros((len(tokens), V), dtype=DTYPE)
    for r, toks in enumerate(tokens):
        toks = np.asarray(toks, dtype=np.intp)
        np.add.at(pool[r], toks, 1.0 / len(toks))
    tv = table.value
    return table.tape.emit(pool @ tv, (table,), lambda g: (pool.T @ g,))


def renormalize(g: Node, mask: np.ndarray) -> Node:
    """Zero unselected entries of each row of ``g`` and rescale rows to sum 1."""
    gm = g.value * mask
    s = gm.sum(axis=1, keepdims=True)
    w = gm / s

    def backward(G):
        return (mask * (G - (G * w).sum(axis=1, keepdims=True)) / s,)

    return g.tape.emit(w, (g,), backward)


def binary_cross_entropy(pred: Node, labels: np.ndarray, eps: float = 1e-7) -> Node:
    """Mean BCE with predictions clamped to [eps, 1 - eps] before the log."""
    p = pred.value
    y = np.asarray(labels, dtype=DTYPE)
    if p.shape != y.shape:
        raise ShapeError(f"bce: predictions{p.shape} vs labels{y.shape}")
    n = p.size
    pc = np.clip(p, eps, 1.0 - eps)
    loss = -np.mean(y * np.log(pc) + (1.0 - y) * np.log(1.0 - pc))
    inside = (p > eps) & (p < 1.0 - eps)

    def backward(g):
        return (g * inside * (-(y / pc) + (1.0 - y) / (1.0 - pc)) / n,)

    return pred.tape.emit(np.asarray(loss), (pred,), backward)


def coefficient_of_variation(x: Node, guard: float = 1e-12) -> Node:
    """Population std / mean of a 1-D node; zero when the mean is <= guard."""
    v = x.value
    K = v.size
    mu = v.mean()
    if mu <= guard:
        return x.tape.emit(np.asarray(0.0), (x,), lambda g: (np.zeros_like(v),))
    dev = v - mu
    sigma = math.sqrt(float(np.mean(dev * dev)))
    cv = sigma / mu

    def backward(g):
        dsigma = dev / (K * sigma) if sigma > 0 else np.zeros_like(v)
        return (g * (dsigma / mu - sigma / (K * mu * mu)),)

    return x.tape.emit(np.asarray(cv), (x,), backward)


def bilstm_final(x: np.ndarray, fwd: Sequence[Node], bwd: Sequence[Node]) -> Node:
    """Bidirectional LSTM over a constant input batch.

    ``x`` has shape (B, T, F). ``fwd`` and ``bwd`` are ``(W_in, W_rec, b)``
    triples with shapes (4H, F), (4H, H), (4H,); gate order is input, forget,
    cell, output. Returns (B, 2H): the forward pass's hidden state after the
    last step concatenated with the backward pass's after the first step.
    """
    x = np.asarray(x, dtype=DTYPE)
    B, T, F = x.shape
    if T < 1:
        raise ShapeError("bilstm: sequence length must be >= 1")
    Wx = np.stack([fwd[0].value, bwd[0].value])
    Wh = np.stack([fwd[1].value, bwd[1].value])
    bias = np.stack([fwd[2].value, bwd[2].value])
    H = Wh.shape[2]
    if Wx.shape != (2, 4 * H, F) or Wh.shape != (2, 4 * H, H) or bias.shape != (2, 4 * H):
        raise ShapeError(f"bilstm: x{x.shape} with W_in{Wx.shape[1:]} W_rec{Wh.shape[1:]} b{bias.shape[1:]}")
    # Layout: time-major and gate-major, so per-step slices are contiguous.
    # xs is (T, 2, B, F); gate tensors are (T, 4, 2, B, H); direction 1 reads
    # the sequence backwards.
    xt = x.transpose(1, 0, 2)
    xs = np.stack([xt, xt[::-1]], axis=1)
    # sigmoid(a) = 0.5 * tanh(a / 2) + 0.5, so one tanh covers all four gates
    # once the sigmoid-gate pre-activations are halved
    half = np.array([0.5, 0.5, 1.0, 0.5])[:, None, None, None]
    offset = np.array([0.5, 0.5, 0.0, 0.5])[:, None, None, None]
    Win = Wx.reshape(2, 4, H, F).transpose(1, 0, 3, 2) * half  # [gate, direction, in, out]
    xw = np.matmul(xs[:, None], Win)  # broadcasts straight into (T, 4, 2, B, H)
    xw += bias.reshape(2, 4, H).transpose(1, 0, 2)[:, :, None, :] * half
    Wg = Wh.reshape(2, 4, H, H)  # [direction, gate, out, in]
    Wrec = np.ascontiguousarray(Wg.transpose(1, 0, 3, 2)) * half

    # Without a recording tape only the current step is kept (rolling buffers).
    keep = fwd[0].tape.record
    depth = T if keep else 1
    th = np.empty((depth, 4, 2, B, H), dtype=DTYPE)
    acts = np.empty_like(th)
    tcs = np.empty((depth, 2, B, H), dtype=DTYPE)
    cs = np.zeros((depth + 1, 2, B, H), dtype=DTYPE)
    hs = np.zeros((depth + 1, 2, B, H), dtype=DTYPE)
    a = np.empty((4, 2, B, H), dtype=DTYPE)
    tmp = np.empty((2, B, H), dtype=DTYPE)
    for t in range(T):
        s, cur, nxt = (t, t, t + 1) if keep else (0, t % 2, (t + 1) % 2)
        np.matmul(hs[cur], Wrec, out=a)
        a += xw[t]
        np.tanh(a, out=th[s])
        act = acts[s]
        np.multiply(th[s], half, out=act)
        act += offset
        c = cs[nxt]
        np.multiply(act[1], cs[cur], out=c)
        np.multiply(act[0], act[2], out=tmp)
        c += tmp
        np.tanh(c, out=tcs[s])
        np.multiply(act[3], tcs[s], out=hs[nxt])
    last = T if keep else T % 2
    out = np.concatenate([hs[last, 0], hs[last, 1]], axis=1)

    def backward(G):
        dh = np.ascontiguousarray(np.stack([G[:, :H], G[:, H:]]))
        dc = np.zeros_like(dh)
        da = np.empty_like(acts)
        deriv = (half * half) * (1.0 - th * th)
        out_coef = acts[:, 3] * (1.0 - tcs * tcs)
        Wback = np.ascontiguousarray(Wg.transpose(1, 0, 2, 3))  # [gate, direction, out, in]
        back = np.empty((4, 2, B, H), dtype=DTYPE)
        for t in range(T - 1, -1, -1):
            act = acts[t]
            np.multiply(dh, out_coef[t], out=tmp)
            dc += tmp
            d = da[t]
            np.multiply(dc, act[2], out=d[0])
            np.multiply(dc, cs[t], out=d[1])
            np.multiply(dc, act[0], out=d[2])
            np.multiply(dh, tcs[t], out=d[3])
            d *= deriv[t]
            np.matmul(d, Wback, out=back)
            dh = back.sum(axis=0)
            dc *= act[1]
        daT = da.swapaxes(-1, -2)
        dWh = np.matmul(daT, hs[:T, None]).sum(axis=0).transpose(1, 0, 2, 3).reshape(2, 4 * H, H)
        dWx = np.matmul(daT, xs[:, None]).sum(axis=0).transpose(1, 0, 2, 3).reshape(2, 4 * H, F)
        db = da.sum(axis=(0, 3)).transpose(1, 0, 2).reshape(2, 4 * H)
        return dWx[0], dWh[0], db[0], dWx[1], dWh[1], db[1]

    tape = fwd[0].tape
    return tape.emit(out, (fwd[0], fwd[1], fwd[2], bwd[0], bwd[1], bwd[2]), backward)


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------


@dataclass
class OptimizerState:
    """AdamW hyperparameters, moment estimates and step counter."""

    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    weight_decay: float = 0.01
    step: int = 0
    first_moment: dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: dict[str, np.ndarray] = field(default_factory=dict)
    _flat: dict = field(default_factory=dict, repr=False, compare=False)


def _flat_moments(state: OptimizerState, params: list[Parameter]):
    """Contiguous moment buffers for ``params``; the per-name dict entries become views into them."""
    key = tuple(p.name for p in params)
    cached = state._flat.get(key)
    if cached is not None and all(state.first_moment[n].base is cached[0] for n in key):
        return cached
    sizes = [p.values.size for p in params]
    m = np.zeros(sum(sizes))
    v = np.zeros(sum(sizes))
    offset = 0
    for p, n in zip(params, sizes):
        for moments, flat in ((state.first_moment, m), (state.second_moment, v)):
            old = moments.get(p.name)
            if old is not None:
                if old.shape != p.shape:
                    raise ShapeError(f"optimizer state for {p.name!r} has shape {old.shape}, parameter has {p.shape}")
                flat[offset : offset + n] = old.ravel()
            moments[p.name] = flat[offset : offset + n].reshape(p.shape)
        offset += n
    state._flat[key] = (m, v)
    return m, v


def optimizer_step(store: ParameterStore, state: OptimizerState, names: Iterable[str] | None = None) -> None:
    """One AdamW update of ``names`` (default: every parameter), then zero all gradients.

    Weight decay is decoupled: ``p -= lr * wd * p`` before the moment update.
    The update runs on one flat vector per parameter set, so its cost does not
    grow with the number of parameter tensors.
    """
    state.step += 1
    t = state.step
    lr, b1, b2 = state.learning_rate, state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    params = [store[n] for n in (store.names() if names is None else names)]
    if params:
        m, v = _flat_moments(state, params)
        g = np.concatenate([p.gradient.ravel() for p in params])
        w = np.concatenate([p.values.ravel() for p in params])
        if state.weight_decay:
            w *= 1.0 - lr * state.weight_decay
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        g *= g
        g *= 1.0 - b2
        v += g
        # g is spent; reuse it and w-sized scratch for the step
        np.divide(v, c2, out=g)
        np.sqrt(g, out=g)
        g += state.epsilon
        step = np.multiply(m, lr / c1)
        step /= g
        w -= step
        offset = 0
        for p in params:
            n = p.values.size
            p.values[...] = w[offset : offset + n].reshape(p.shape)
            offset += n
    store.zero_grad()


# ---------------------------------------------------------------------------
# Finite differences
# ---------------------------------------------------------------------------


def finite_difference_gradients(
    loss_fn: Callable[[], float], store: ParameterStore, names: Iterable[str] | None = None, h: float = 1e-5
) -> dict[str, np.ndarray]:
    """Central-difference estimate of d(loss_fn)/d(parameter), element by element."""
    grads = {}
    for name in store.names() if names is None else names:
        p = store[name]
        flat = p.values.reshape(-1)
        g = np.zeros_like(flat)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + h
            up = loss_fn()
            flat[j] = orig - h
            down = loss_fn()
            flat[j] = orig
            g[j] = (up - down) / (2.0 * h)
        grads[name] = g.reshape(p.shape)
    return grads


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-12) -> float:
    """Norm-wise relative error ||a - n|| / max(||a||, ||n||, floor)."""
    diff = float(np.linalg.norm(analytic - numeric))
    denom = max(float(np.linalg.norm(analytic)), float(np.linalg.norm(numeric)), floor)
    return diff / denom
