"""Dense float64 tensors with a reverse-mode differentiation tape.

Only the operations needed by the recurrent cells, dense heads and the ELBO
losses are provided. Arrays are numpy ``float64``; every op records a node on
the active :class:`Tape` when one of its inputs is being tracked.

Usage::

    with Tape() as tape:
        loss = reduce_sum(square(linear(x, W, b)))
    grads = backward(tape, loss, [W, b])
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable, Optional, Sequence

import numpy as np


class ShapeMismatch(ValueError):
    pass


class NonScalarLoss(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "name", "_tape", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str = ""):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name
        self._tape: Optional[Tape] = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag})"

    # arithmetic sugar; all routed through the recorded primitives
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return mul(_as_tensor(other), self)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def Parameter(data, name: str = "") -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True, name=name)


def constant(data) -> Tensor:
    return Tensor(data)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class Node:
    out: Tensor
    parents: tuple[Tensor, ...]
    vjp: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tape:
    """Append-only record of primitive applications in evaluation order."""

    _stack: list["Tape"] = []

    def __init__(self):
        self.nodes: list[Node] = []
        self._leaves: dict[int, Tensor] = {}

    def __enter__(self) -> "Tape":
        Tape._stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        Tape._stack.pop()

    @classmethod
    def active(cls) -> Optional["Tape"]:
        return cls._stack[-1] if cls._stack else None

    def tracks(self, t: Tensor) -> bool:
        return t.requires_grad or t._tape is self

    def record(self, out: Tensor, parents: tuple[Tensor, ...], vjp) -> None:
        for p in parents:
            if p.requires_grad and p._tape is not self:
                self._leaves.setdefault(id(p), p)
        out._tape = self
        self.nodes.append(Node(out, parents, vjp))

    def leaves(self) -> list[Tensor]:
        return list(self._leaves.values())


class no_grad:
    """Suspend recording inside the block."""

    def __enter__(self):
        self._saved = Tape._stack[:]
        Tape._stack.clear()
        return self

    def __exit__(self, *exc):
        Tape._stack[:] = self._saved


def apply_op(out_data: np.ndarray, parents: Sequence[Tensor], vjp) -> Tensor:
    """Wrap ``out_data`` and, when a tape is tracking any parent, record ``vjp``.

    ``vjp(g)`` receives the output cotangent and returns one cotangent (or
    None) per parent, in order.
    """
    out = Tensor(out_data)
    tape = Tape.active()
    if tape is not None:
        parents = tuple(parents)
        if any(tape.tracks(p) for p in parents):
            tape.record(out, parents, vjp)
    return out


def backward(tape: Tape, loss: Tensor, params: Optional[Iterable[Tensor]] = None) -> dict:
    """Reverse sweep over ``tape``. Returns ``{tensor: grad}`` for leaf parameters.

    When ``params`` is given the result holds exactly those tensors, with zero
    gradients for any that the loss does not reach.
    """
    if loss.data.size != 1:
        raise NonScalarLoss(f"loss must be scalar, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        pgs = node.vjp(g)
        for p, pg in zip(node.parents, pgs):
            if pg is None or not tape.tracks(p):
                continue
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    targets = list(params) if params is not None else tape.leaves()
    out = {}
    for p in targets:
        g = grads.get(id(p))
        out[p] = np.zeros_like(p.data) if g is None else np.asarray(g, dtype=np.float64).reshape(p.shape)
    return out


# ---------------------------------------------------------------------------
# primitives


def _same_or_scalar(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape and a.data.ndim != 0 and b.data.ndim != 0:
        raise ShapeMismatch(f"{op}: {a.shape} vs {b.shape}")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    return np.asarray(g.sum())


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_or_scalar(a, b, "add")
    return apply_op(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_or_scalar(a, b, "sub")
    return apply_op(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_or_scalar(a, b, "mul")
    ad, bd = a.data, b.data
    return apply_op(ad * bd, (a, b), lambda g: (_unbroadcast(g * bd, a.shape), _unbroadcast(g * ad, b.shape)))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return apply_op(a.data * c, (a,), lambda g: (g * c,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"matmul: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    return apply_op(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeMismatch(f"transpose expects 2-D, got {a.shape}")
    return apply_op(a.data.T.copy(), (a,), lambda g: (g.T,))


def add_rowwise(x: Tensor, b: Tensor) -> Tensor:
    """x (B, H) plus bias b (H,) added to every row."""
    if x.data.ndim != 2 or b.data.ndim != 1 or x.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"add_rowwise: {x.shape} + {b.shape}")
    return apply_op(x.data + b.data, (x, b), lambda g: (g, g.sum(axis=0)))


def linear(x: Tensor, W: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """Dense layer ``x @ W.T + b`` with x (B, in), W (out, in), b (out,)."""
    if x.data.ndim != 2 or W.data.ndim != 2 or x.shape[1] != W.shape[1]:
        raise ShapeMismatch(f"linear: x {x.shape}, W {W.shape}")
    xd, Wd = x.data, W.data
    out = xd @ Wd.T
    if b is None:
        return apply_op(out, (x, W), lambda g: (g @ Wd, g.T @ xd))
    if b.shape != (W.shape[0],):
        raise ShapeMismatch(f"linear: bias {b.shape} for W {W.shape}")
    return apply_op(out + b.data, (x, W, b), lambda g: (g @ Wd, g.T @ xd, g.sum(axis=0)))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign to avoid overflow in exp
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Tensor) -> Tensor:
    s = _sigmoid(a.data)
    return apply_op(s, (a,), lambda g: (g * s * (1.0 - s),))


def tanh(a: Tensor) -> Tensor:
    t = np.tanh(a.data)
    return apply_op(t, (a,), lambda g: (g * (1.0 - t * t),))


def exp(a: Tensor) -> Tensor:
    e = np.exp(a.data)
    return apply_op(e, (a,), lambda g: (g * e,))


def log(a: Tensor) -> Tensor:
    ad = a.data
    return apply_op(np.log(ad), (a,), lambda g: (g / ad,))


def square(a: Tensor) -> Tensor:
    ad = a.data
    return apply_op(ad * ad, (a,), lambda g: (2.0 * g * ad,))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    datas = [t.data for t in tensors]
    try:
        out = np.concatenate(datas, axis=axis)
    except ValueError as exc:
        raise ShapeMismatch(str(exc)) from None
    sizes = np.cumsum([d.shape[axis] for d in datas])[:-1]

    def vjp(g):
        return tuple(np.split(g, sizes, axis=axis))

    return apply_op(out, tuple(tensors), vjp)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    datas = [t.data for t in tensors]
    try:
        out = np.stack(datas, axis=axis)
    except ValueError as exc:
        raise ShapeMismatch(str(exc)) from None
    n = len(datas)

    def vjp(g):
        return tuple(np.take(g, i, axis=axis) for i in range(n))

    return apply_op(out, tuple(tensors), vjp)


def slice_axis(a: Tensor, start: int, stop: int, axis: int = 0) -> Tensor:
    if a.data.ndim == 0:
        raise ShapeMismatch("cannot slice a scalar")
    n = a.shape[axis]
    if not (0 <= start <= stop <= n):
        raise ShapeMismatch(f"slice [{start}:{stop}] out of range for axis size {n}")
    idx = [slice(None)] * a.data.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)
    shape = a.shape

    def vjp(g):
        full = np.zeros(shape)
        full[idx] = g
        return (full,)

    return apply_op(a.data[idx].copy(), (a,), vjp)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeMismatch(str(exc)) from None
    return apply_op(out, (a,), lambda g: (g.reshape(old),))


def index_axis(a: Tensor, i: int, axis: int = 0) -> Tensor:
    """Select index ``i`` along ``axis``, dropping that axis."""
    if a.data.ndim == 0 or not 0 <= i < a.shape[axis]:
        raise ShapeMismatch(f"index {i} out of range for shape {a.shape} axis {axis}")
    shape = a.shape

    def vjp(g):
        full = np.zeros(shape)
        idx = [slice(None)] * len(shape)
        idx[axis] = i
        full[tuple(idx)] = g
        return (full,)

    return apply_op(np.take(a.data, i, axis=axis), (a,), vjp)


def take_rows(a: Tensor, rows: np.ndarray) -> Tensor:
    """Gather rows (first axis) by integer index."""
    rows = np.asarray(rows, dtype=np.intp)
    shape = a.shape

    def vjp(g):
        full = np.zeros(shape)
        np.add.at(full, rows, g)
        return (full,)

    return apply_op(a.data[rows], (a,), vjp)


def reduce_sum(a: Tensor, axis: Optional[int] = None) -> Tensor:
    shape = a.shape
    if axis is None:
        return apply_op(np.asarray(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, shape).copy(),))
    return apply_op(
        a.data.sum(axis=axis), (a,), lambda g: (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)
    )


def reduce_mean(a: Tensor, axis: Optional[int] = None) -> Tensor:
    n = a.data.size if axis is None else a.shape[axis]
    return scale(reduce_sum(a, axis), 1.0 / n)


def masked_mean_square(pred: Tensor, target: np.ndarray, mask: np.ndarray) -> Tensor:
    """Mean of (pred - target)^2 over entries where ``mask`` is true.

    ``mask`` broadcasts against ``pred``; masked-out target entries never
    reach the value or the gradient.
    """
    if pred.shape != np.shape(target):
        raise ShapeMismatch(f"masked_mean_square: {pred.shape} vs {np.shape(target)}")
    m = np.broadcast_to(np.asarray(mask, dtype=bool), pred.shape)
    count = int(m.sum())
    if count == 0:
        return apply_op(np.asarray(0.0), (pred,), lambda g: (np.zeros(pred.shape),))
    diff = np.where(m, pred.data - np.where(m, target, 0.0), 0.0)
    val = np.asarray((diff * diff).sum() / count)
    return apply_op(val, (pred,), lambda g: (g * 2.0 * diff / count,))


# ---------------------------------------------------------------------------
# recurrent cells


@dataclass
class LstmCellParams:
    W_i: Tensor
    W_f: Tensor
    W_g: Tensor
    W_o: Tensor
    b_i: Tensor
    b_f: Tensor
    b_g: Tensor
    b_o: Tensor

    @property
    def hidden_size(self) -> int:
        return self.W_i.shape[0]

    @property
    def input_size(self) -> int:
        return self.W_i.shape[1] - self.W_i.shape[0]

    def parameters(self) -> list[Tensor]:
        return [self.W_i, self.W_f, self.W_g, self.W_o, self.b_i, self.b_f, self.b_g, self.b_o]

    def named_parameters(self, prefix: str = "") -> list[tuple[str, Tensor]]:
        names = ["W_i", "W_f", "W_g", "W_o", "b_i", "b_f", "b_g", "b_o"]
        return [(prefix + n, p) for n, p in zip(names, self.parameters())]

    @classmethod
    def init(cls, input_size: int, hidden_size: int, rng: np.random.Generator) -> "LstmCellParams":
        fan_in = input_size + hidden_size
        bound = 1.0 / np.sqrt(fan_in)

        def w():
            return Parameter(rng.uniform(-bound, bound, size=(hidden_size, fan_in)))

        def b(value=None):
            if value is not None:
                return Parameter(np.full(hidden_size, value))
            return Parameter(rng.uniform(-bound, bound, size=hidden_size))

        W_i, W_f, W_g, W_o = w(), w(), w(), w()
        return cls(W_i, W_f, W_g, W_o, b(), b(1.0), b(), b())

    @classmethod
    def zeros(cls, input_size: int, hidden_size: int) -> "LstmCellParams":
        fan_in = input_size + hidden_size
        return cls(
            *[Parameter(np.zeros((hidden_size, fan_in))) for _ in range(4)],
            *[Parameter(np.zeros(hidden_size)) for _ in range(4)],
        )


def _check_cell_inputs(W: Tensor, x: Tensor, h: Tensor) -> None:
    H = W.shape[0]
    if x.data.ndim != 2 or h.data.ndim != 2:
        raise ShapeMismatch(f"cell inputs must be (batch, size); got x {x.shape}, h {h.shape}")
    if h.shape[1] != H or x.shape[1] + H != W.shape[1] or x.shape[0] != h.shape[0]:
        raise ShapeMismatch(f"cell shapes: W {W.shape}, x {x.shape}, h {h.shape}")


def lstm_cell(p: LstmCellParams, x_t: Tensor, h_prev: Tensor, c_prev: Tensor) -> tuple[Tensor, Tensor]:
    """One LSTM step on a batch: x_t (B, D_in), h_prev/c_prev (B, H).

    Gates i, f, o are sigmoids, the candidate g is tanh, all reading
    ``[x_t, h_prev]``. Returns ``(h_t, c_t)``.
    """
    _check_cell_inputs(p.W_i, x_t, h_prev)
    if c_prev.shape != h_prev.shape:
        raise ShapeMismatch(f"c_prev {c_prev.shape} vs h_prev {h_prev.shape}")
    D = x_t.shape[1]
    xh = np.concatenate([x_t.data, h_prev.data], axis=1)
    i = _sigmoid(xh @ p.W_i.data.T + p.b_i.data)
    f = _sigmoid(xh @ p.W_f.data.T + p.b_f.data)
    g = np.tanh(xh @ p.W_g.data.T + p.b_g.data)
    o = _sigmoid(xh @ p.W_o.data.T + p.b_o.data)
    cp = c_prev.data
    c = f * cp + i * g
    tc = np.tanh(c)
    h = o * tc
    Ws = (p.W_i.data, p.W_f.data, p.W_g.data, p.W_o.data)

    # one node carries the whole backward; c is a thin node hanging off h
    shared: dict = {}

    def joint(gh, gc):
        do = gh * tc * o * (1.0 - o)
        dc = gh * o * (1.0 - tc * tc) + gc
        df = dc * cp * f * (1.0 - f)
        di = dc * g * i * (1.0 - i)
        dg = dc * i * (1.0 - g * g)
        dcp = dc * f
        pre = (di, df, dg, do)
        dxh = sum(d @ W for d, W in zip(pre, Ws))
        dWs = [d.T @ xh for d in pre]
        dbs = [d.sum(axis=0) for d in pre]
        return dxh[:, :D], dxh[:, D:], dcp, dWs, dbs

    parents = (x_t, h_prev, c_prev, *p.parameters())

    def vjp_h(gh):
        gc = shared.pop("gc", None)
        dx, dh, dcp, dWs, dbs = joint(gh, np.zeros_like(c) if gc is None else gc)
        return (dx, dh, dcp, *dWs, *dbs)

    def vjp_c(gc):
        # c's node is recorded after h's, so the reverse sweep reaches it first
        shared["gc"] = gc
        return (np.zeros_like(h),)

    h_t = apply_op(h, parents, vjp_h)
    if h_t._tape is not None:
        c_t = apply_op(c, (h_t,), vjp_c)
    else:
        c_t = Tensor(c)
    return h_t, c_t


@dataclass
class GruCellParams:
    W_r: Tensor
    W_u: Tensor
    W_n: Tensor
    b_r: Tensor
    b_u: Tensor
    b_n: Tensor

    @property
    def hidden_size(self) -> int:
        return self.W_r.shape[0]

    @property
    def input_size(self) -> int:
        return self.W_r.shape[1] - self.W_r.shape[0]

    def parameters(self) -> list[Tensor]:
        return [self.W_r, self.W_u, self.W_n, self.b_r, self.b_u, self.b_n]

    def named_parameters(self, prefix: str = "") -> list[tuple[str, Tensor]]:
        names = ["W_r", "W_u", "W_n", "b_r", "b_u", "b_n"]
        return [(prefix + n, p) for n, p in zip(names, self.parameters())]

    @classmethod
    def init(cls, input_size: int, hidden_size: int, rng: np.random.Generator) -> "GruCellParams":
        fan_in = input_size + hidden_size
        bound = 1.0 / np.sqrt(fan_in)
        ws = [Parameter(rng.uniform(-bound, bound, size=(hidden_size, fan_in))) for _ in range(3)]
        bs = [Parameter(rng.uniform(-bound, bound, size=hidden_size)) for _ in range(3)]
        return cls(*ws, *bs)

    @classmethod
    def zeros(cls, input_size: int, hidden_size: int) -> "GruCellParams":
        fan_in = input_size + hidden_size
        return cls(
            *[Parameter(np.zeros((hidden_size, fan_in))) for _ in range(3)],
            *[Parameter(np.zeros(hidden_size)) for _ in range(3)],
        )


def gru_cell(p: GruCellParams, x_t: Tensor, h_prev: Tensor) -> Tensor:
    """One GRU step: reset r, update u, candidate n = tanh(W_n [x, r*h] + b_n).

    ``h_t = u * h_prev + (1 - u) * n``.
    """
    _check_cell_inputs(p.W_r, x_t, h_prev)
    D = x_t.shape[1]
    xd, hp = x_t.data, h_prev.data
    xh = np.concatenate([xd, hp], axis=1)
    r = _sigmoid(xh @ p.W_r.data.T + p.b_r.data)
    u = _sigmoid(xh @ p.W_u.data.T + p.b_u.data)
    xrh = np.concatenate([xd, r * hp], axis=1)
    n = np.tanh(xrh @ p.W_n.data.T + p.b_n.data)
    h = u * hp + (1.0 - u) * n
    Wr, Wu, Wn = p.W_r.data, p.W_u.data, p.W_n.data

    def vjp(gh):
        du_pre = gh * (hp - n) * u * (1.0 - u)
        dn_pre = gh * (1.0 - u) * (1.0 - n * n)
        dxrh = dn_pre @ Wn
        dr_pre = dxrh[:, D:] * hp * r * (1.0 - r)
        dxh = du_pre @ Wu + dr_pre @ Wr
        dx = dxh[:, :D] + dxrh[:, :D]
        dh = dxh[:, D:] + dxrh[:, D:] * r + gh * u
        return (
            dx,
            dh,
            dr_pre.T @ xh,
            du_pre.T @ xh,
            dn_pre.T @ xrh,
            dr_pre.sum(axis=0),
            du_pre.sum(axis=0),
            dn_pre.sum(axis=0),
        )

    return apply_op(h, (x_t, h_prev, *p.parameters()), vjp)


# ---------------------------------------------------------------------------
# optimisation


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0

    @classmethod
    def for_params(cls, params: Sequence[Tensor]) -> "AdamState":
        return cls([np.zeros_like(p.data) for p in params], [np.zeros_like(p.data) for p in params], 0)


def adam_step(
    params: Sequence[Tensor],
    grads: Sequence[np.ndarray],
    state: AdamState,
    lr: float = 1e-3,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> AdamState:
    """Bias-corrected Adam update, applied to ``params`` in place."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ShapeMismatch("params, grads and state must have equal length")
    t = state.t + 1
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for k, (p, g) in enumerate(zip(params, grads)):
        if np.shape(g) != p.shape:
            raise ShapeMismatch(f"grad {np.shape(g)} for param {p.shape}")
        m = beta1 * state.m[k] + (1.0 - beta1) * g
        v = beta2 * state.v[k] + (1.0 - beta2) * (g * g)
        state.m[k], state.v[k] = m, v
        p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + eps)
    state.t = t
    return state


class Adam:
    def __init__(self, params: Sequence[Tensor], lr: float = 1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.state = AdamState.for_params(self.params)

    def step(self, grads: dict) -> None:
        adam_step(
            self.params,
            [grads[p] for p in self.params],
            self.state,
            self.lr,
            self.beta1,
            self.beta2,
            self.eps,
        )


def dense_init(out_size: int, in_size: int, rng: np.random.Generator) -> tuple[Tensor, Tensor]:
    bound = 1.0 / np.sqrt(in_size)
    W = Parameter(rng.uniform(-bound, bound, size=(out_size, in_size)))
    b = Parameter(rng.uniform(-bound, bound, size=out_size))
    return W, b


def finite_difference_grad(f: Callable[[], float], param: Tensor, step: float = 1e-5) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. every entry of ``param``."""
    grad = np.zeros_like(param.data)
    flat = param.data.reshape(-1)
    gflat = grad.reshape(-1)
    for k in range(flat.size):
        orig = flat[k]
        flat[k] = orig + step
        fp = f()
        flat[k] = orig - step
        fm = f()
        flat[k] = orig
        gflat[k] = (fp - fm) / (2.0 * step)
    return grad
