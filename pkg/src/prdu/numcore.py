"""Dense float64 tensors with a reverse-mode tape, plus categorical primitives.

Every differentiable quantity in the model is a :class:`Tensor` recorded on a
:class:`Tape`.  A tensor without a node id is a constant: operations whose
inputs are all constants are evaluated eagerly and never recorded.

Layout conventions used across the package:

* sequences are time-major, ``(T, B, d)``; reductions over time are taken over
  axis 0 so that numpy accumulates rows sequentially (appending masked steps
  then leaves every sum bit-identical);
* weight matrices are stored for right multiplication, ``x @ W`` with ``W`` of
  shape ``(d_in, d_out)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

DTYPE = np.float64
LOG_FLOOR = -1.0e300  # stand-in for ln(0); never produced by log_softmax on finite logits
MASK_NEG = -1.0e30    # additive score for masked attention positions


class ShapeError(ValueError):
    pass


class TapeError(RuntimeError):
    pass


class Tensor:
    """An n-d float64 array, optionally tied to a node on a tape."""

    __slots__ = ("data", "tape", "node", "_generation")

    def __init__(self, data, tape: Tape | None = None, node: int | None = None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.tape = tape
        self.node = node
        self._generation = tape.generation if tape is not None else None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def is_constant(self) -> bool:
        return self.node is None

    def check_live(self):
        if self.tape is not None and self._generation != self.tape.generation:
            raise TapeError("tensor belongs to a cleared tape")

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        kind = "const" if self.node is None else f"node={self.node}"
        return f"Tensor(shape={self.shape}, {kind})"

    def __add__(self, other):
        return add(self, _as_tensor(other, self.shape))

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, scale(_as_tensor(other, self.shape), -1.0))

    def __rsub__(self, other):
        return add(_as_tensor(other, self.shape), scale(self, -1.0))

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x, shape) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.broadcast_to(np.asarray(x, dtype=DTYPE), shape))


def constant(x) -> Tensor:
    return Tensor(x)


@dataclass
class Record:
    kind: str
    inputs: tuple  # node ids, None for constants
    consts: list | None  # constant input data, aligned with inputs
    output: int
    saved: object
    attrs: dict


class Tape:
    """Ordered log of primitive applications.

    Node ids are indices into ``values``; records are appended in evaluation
    order, so every input precedes its consumer.
    """

    def __init__(self):
        self.generation = 0
        self.values: list[np.ndarray] = []
        self.records: list[Record] = []
        self.leaves: list[int] = []

    def leaf(self, array) -> Tensor:
        data = np.asarray(array, dtype=DTYPE)
        node = len(self.values)
        self.values.append(data)
        self.leaves.append(node)
        return Tensor(data, self, node)

    def _emit(self, kind, inputs, consts, out, saved, attrs) -> Tensor:
        node = len(self.values)
        self.values.append(out)
        self.records.append(Record(kind, inputs, consts, node, saved, attrs))
        return Tensor(out, self, node)

    def clear(self):
        self.generation += 1
        self.values = []
        self.records = []
        self.leaves = []

    def __len__(self):
        return len(self.records)


# ---------------------------------------------------------------------------
# primitive implementations: forward(datas, attrs) -> (out, saved)
#                            backward(g, datas, out, saved, attrs) -> grads
# ---------------------------------------------------------------------------


def _sum_to_2d(a):
    return a.reshape(-1, a.shape[-1])


def _matmul_fwd(xs, attrs):
    a, b = xs
    if b.ndim != 2 or a.ndim < 1 or a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    return np.matmul(a, b), None


def _matmul_bwd(g, xs, out, saved, attrs):
    a, b = xs
    if a.ndim == 1:
        return [g @ b.T, np.outer(a, g)]
    return [g @ b.T, _sum_to_2d(a).T @ _sum_to_2d(g)]


def _same_shape(kind, xs):
    s = xs[0].shape
    for x in xs[1:]:
        if x.shape != s:
            raise ShapeError(f"{kind}: shape mismatch {s} vs {x.shape}")


def _add_fwd(xs, attrs):
    _same_shape("add", xs)
    return xs[0] + xs[1], None


def _add_bwd(g, xs, out, saved, attrs):
    return [g, g]


def _add_bias_fwd(xs, attrs):
    x, b = xs
    if b.ndim != 1 or x.shape[-1] != b.shape[0]:
        raise ShapeError(f"add_bias: bias {b.shape} does not match last axis of {x.shape}")
    return x + b, None


def _add_bias_bwd(g, xs, out, saved, attrs):
    return [g, _sum_to_2d(g).sum(axis=0)]


def _mul_fwd(xs, attrs):
    _same_shape("mul", xs)
    return xs[0] * xs[1], None


def _mul_bwd(g, xs, out, saved, attrs):
    return [g * xs[1], g * xs[0]]


def _scale_fwd(xs, attrs):
    return xs[0] * attrs["factor"], None


def _scale_bwd(g, xs, out, saved, attrs):
    return [g * attrs["factor"]]


def _sigmoid(x):
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def _sigmoid_fwd(xs, attrs):
    return _sigmoid(xs[0]), None


def _sigmoid_bwd(g, xs, out, saved, attrs):
    return [g * out * (1.0 - out)]


def _tanh_fwd(xs, attrs):
    return np.tanh(xs[0]), None


def _tanh_bwd(g, xs, out, saved, attrs):
    return [g * (1.0 - out * out)]


def _exp_fwd(xs, attrs):
    return np.exp(xs[0]), None


def _exp_bwd(g, xs, out, saved, attrs):
    return [g * out]


def _log_fwd(xs, attrs):
    if np.any(xs[0] <= 0):
        raise ValueError("log: non-positive input")
    return np.log(xs[0]), None


def _log_bwd(g, xs, out, saved, attrs):
    return [g / xs[0]]


def _concat_fwd(xs, attrs):
    lead = xs[0].shape[:-1]
    for x in xs[1:]:
        if x.shape[:-1] != lead:
            raise ShapeError("concat: leading shapes differ")
    widths = [x.shape[-1] for x in xs]
    return np.concatenate(xs, axis=-1), widths


def _concat_bwd(g, xs, out, widths, attrs):
    cuts = np.cumsum(widths)[:-1]
    return np.split(g, cuts, axis=-1)


def _norm_axis(axis, ndim):
    if not -ndim <= axis < ndim:
        raise ShapeError(f"axis {axis} out of range for {ndim}-d tensor")
    return axis % ndim


def _sum_fwd(xs, attrs):
    axis = attrs.get("axis")
    if axis is None:
        return np.asarray(xs[0].sum()), None
    return xs[0].sum(axis=_norm_axis(axis, xs[0].ndim)), None


def _sum_bwd(g, xs, out, saved, attrs):
    x = xs[0]
    axis = attrs.get("axis")
    if axis is None:
        return [np.full(x.shape, float(g))]
    axis = _norm_axis(axis, x.ndim)
    return [np.broadcast_to(np.expand_dims(g, axis), x.shape).copy()]


def _mean_fwd(xs, attrs):
    x = xs[0]
    axis = _norm_axis(attrs["axis"], x.ndim)
    return x.sum(axis=axis) / x.shape[axis], None


def _mean_bwd(g, xs, out, saved, attrs):
    x = xs[0]
    axis = _norm_axis(attrs["axis"], x.ndim)
    return [np.broadcast_to(np.expand_dims(g / x.shape[axis], axis), x.shape).copy()]


def _expand_fwd(xs, attrs):
    x = xs[0]
    n, axis = attrs["n"], attrs["axis"]
    axis = _norm_axis(axis, x.ndim + 1)
    return np.repeat(np.expand_dims(x, axis), n, axis=axis), axis


def _expand_bwd(g, xs, out, axis, attrs):
    return [g.sum(axis=axis)]


def _transpose_fwd(xs, attrs):
    if xs[0].ndim != 2:
        raise ShapeError("transpose expects a matrix")
    return xs[0].T.copy(), None


def _transpose_bwd(g, xs, out, saved, attrs):
    return [g.T.copy()]


def _gather_fwd(xs, attrs):
    table = xs[0]
    ids = attrs["ids"]
    if table.ndim != 2:
        raise ShapeError("gather expects a 2-d table")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"token id out of range for vocabulary of {table.shape[0]}")
    return table[ids], None


def _gather_bwd(g, xs, out, saved, attrs):
    grad = np.zeros_like(xs[0])
    np.add.at(grad, attrs["ids"].reshape(-1), g.reshape(-1, xs[0].shape[1]))
    return [grad]


def _log_softmax_np(x, axis):
    shifted = x - x.max(axis=axis, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


def _softmax_np(x, axis):
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def _softmax_fwd(xs, attrs):
    axis = _norm_axis(attrs.get("axis", -1), xs[0].ndim)
    return _softmax_np(xs[0], axis), axis


def _softmax_bwd(g, xs, out, axis, attrs):
    return [out * (g - (g * out).sum(axis=axis, keepdims=True))]


def _log_softmax_fwd(xs, attrs):
    axis = _norm_axis(attrs.get("axis", -1), xs[0].ndim)
    out = _log_softmax_np(xs[0], axis)
    return out, axis


def _log_softmax_bwd(g, xs, out, axis, attrs):
    return [g - np.exp(out) * g.sum(axis=axis, keepdims=True)]


def _gru_fwd(xs, attrs):
    x, Wz, Wr, Wh, Uz, Ur, Uh, bz, br, bh = xs
    if x.ndim != 3 or x.shape[2] != Wz.shape[0]:
        raise ShapeError(f"gru: input {x.shape} does not match weights {Wz.shape}")
    T, B, _ = x.shape
    H = Uz.shape[0]
    mask = attrs.get("mask")
    steps = range(T - 1, -1, -1) if attrs.get("reverse") else range(T)
    xz, xr, xh = x @ Wz + bz, x @ Wr + br, x @ Wh + bh
    out = np.zeros((T, B, H))
    cache = []
    h = np.zeros((B, H))
    for t in steps:
        z = _sigmoid(xz[t] + h @ Uz)
        r = _sigmoid(xr[t] + h @ Ur)
        cand = np.tanh(xh[t] + (r * h) @ Uh)
        h_new = (1.0 - z) * h + z * cand
        if mask is not None:
            m = mask[t][:, None]
            h_new = m * h_new + (1.0 - m) * h
        cache.append((t, h, z, r, cand))
        h = h_new
        out[t] = h
    return out, cache


def _gru_bwd(g, xs, out, cache, attrs):
    x, Wz, Wr, Wh, Uz, Ur, Uh, bz, br, bh = xs
    mask = attrs.get("mask")
    grads = [np.zeros_like(a) for a in xs]
    dx, dWz, dWr, dWh, dUz, dUr, dUh, dbz, dbr, dbh = grads
    dh_next = np.zeros_like(cache[0][1])
    for t, h_prev, z, r, cand in reversed(cache):
        dh = g[t] + dh_next
        if mask is not None:
            m = mask[t][:, None]
            dh_new = m * dh
            dh_prev = (1.0 - m) * dh
        else:
            dh_new = dh
            dh_prev = np.zeros_like(dh)
        dh_prev += dh_new * (1.0 - z)
        dz = dh_new * (cand - h_prev)
        dah = dh_new * z * (1.0 - cand * cand)
        rh = r * h_prev
        drh = dah @ Uh.T
        dar = drh * h_prev * r * (1.0 - r)
        daz = dz * z * (1.0 - z)
        dh_prev += drh * r + dar @ Ur.T + daz @ Uz.T
        xt = x[t]
        dWz += xt.T @ daz
        dWr += xt.T @ dar
        dWh += xt.T @ dah
        dUz += h_prev.T @ daz
        dUr += h_prev.T @ dar
        dUh += rh.T @ dah
        dbz += daz.sum(axis=0)
        dbr += dar.sum(axis=0)
        dbh += dah.sum(axis=0)
        dx[t] = daz @ Wz.T + dar @ Wr.T + dah @ Wh.T
        dh_next = dh_prev
    return grads


PRIMITIVES: dict[str, tuple[Callable, Callable, int | None]] = {
    # kind: (forward, backward, arity or None for variadic)
    "matmul": (_matmul_fwd, _matmul_bwd, 2),
    "add": (_add_fwd, _add_bwd, 2),
    "add_bias": (_add_bias_fwd, _add_bias_bwd, 2),
    "mul": (_mul_fwd, _mul_bwd, 2),
    "scale": (_scale_fwd, _scale_bwd, 1),
    "sigmoid": (_sigmoid_fwd, _sigmoid_bwd, 1),
    "tanh": (_tanh_fwd, _tanh_bwd, 1),
    "exp": (_exp_fwd, _exp_bwd, 1),
    "log": (_log_fwd, _log_bwd, 1),
    "concat": (_concat_fwd, _concat_bwd, None),
    "sum": (_sum_fwd, _sum_bwd, 1),
    "mean": (_mean_fwd, _mean_bwd, 1),
    "expand": (_expand_fwd, _expand_bwd, 1),
    "transpose": (_transpose_fwd, _transpose_bwd, 1),
    "gather": (_gather_fwd, _gather_bwd, 1),
    "softmax": (_softmax_fwd, _softmax_bwd, 1),
    "log_softmax": (_log_softmax_fwd, _log_softmax_bwd, 1),
    "gru": (_gru_fwd, _gru_bwd, 10),
}


def apply_primitive(kind: str, inputs: Sequence[Tensor], **attrs) -> Tensor:
    """Evaluate primitive ``kind`` and record it on the inputs' tape."""
    try:
        fwd, _, arity = PRIMITIVES[kind]
    except KeyError:
        raise ValueError(f"unknown primitive {kind!r}") from None
    if arity is not None and len(inputs) != arity:
        raise ShapeError(f"{kind} takes {arity} inputs, got {len(inputs)}")
    tape = None
    for t in inputs:
        t.check_live()
        if t.node is not None:
            if tape is not None and t.tape is not tape:
                raise TapeError("inputs recorded on different tapes")
            tape = t.tape
    datas = [t.data for t in inputs]
    out, saved = fwd(datas, attrs)
    if tape is None:
        return Tensor(out)
    nodes = tuple(t.node for t in inputs)
    consts = None
    if None in nodes:
        consts = [t.data if t.node is None else None for t in inputs]
    return tape._emit(kind, nodes, consts, out, saved, attrs)


def backward(tape: Tape, loss: Tensor) -> dict[int, np.ndarray]:
    """Gradients of a scalar ``loss`` for every leaf of ``tape``.

    Leaves that do not influence the loss get exact zeros.  Accumulation
    follows reverse tape order, so results are reproducible bit for bit.
    """
    if loss.data.size != 1:
        raise ShapeError(f"loss must be scalar, got shape {loss.shape}")
    loss.check_live()
    if loss.tape is not None and loss.tape is not tape:
        raise TapeError("loss is not recorded on this tape")
    grads: dict[int, np.ndarray] = {}
    if loss.node is not None:
        grads[loss.node] = np.ones_like(loss.data)
        values = tape.values
        for rec in reversed(tape.records):
            g = grads.pop(rec.output, None)
            if g is None:
                continue
            _, bwd, _ = PRIMITIVES[rec.kind]
            if rec.consts is None:
                datas = [values[n] for n in rec.inputs]
            else:
                datas = [c if n is None else values[n] for n, c in zip(rec.inputs, rec.consts)]
            in_grads = bwd(g, datas, values[rec.output], rec.saved, rec.attrs)
            for n, ig in zip(rec.inputs, in_grads):
                if n is None:
                    continue
                if n in grads:
                    grads[n] = grads[n] + ig
                else:
                    grads[n] = ig
    for leaf in tape.leaves:
        if leaf not in grads:
            grads[leaf] = np.zeros_like(tape.values[leaf])
    return grads


def grad_of(grads: dict[int, np.ndarray], t: Tensor) -> np.ndarray:
    return grads[t.node]


# ---------------------------------------------------------------------------
# functional wrappers
# ---------------------------------------------------------------------------


def matmul(a, b):
    return apply_primitive("matmul", [a, b])


def add(a, b):
    return apply_primitive("add", [a, b])


def add_bias(x, b):
    return apply_primitive("add_bias", [x, b])


def mul(a, b):
    return apply_primitive("mul", [a, b])


def scale(x, factor: float):
    return apply_primitive("scale", [x], factor=float(factor))


def sigmoid(x):
    return apply_primitive("sigmoid", [x])


def tanh(x):
    return apply_primitive("tanh", [x])


def exp(x):
    return apply_primitive("exp", [x])


def log(x):
    return apply_primitive("log", [x])


def concat(xs):
    return apply_primitive("concat", list(xs))


def sum(x, axis=None):  # noqa: A001
    return apply_primitive("sum", [x], axis=axis)


def mean(x, axis: int):
    return apply_primitive("mean", [x], axis=axis)


def expand(x, n: int, axis: int = 0):
    return apply_primitive("expand", [x], n=int(n), axis=axis)


def transpose(x):
    return apply_primitive("transpose", [x])


def gather(table, ids):
    return apply_primitive("gather", [table], ids=np.asarray(ids, dtype=np.int64))


def softmax_t(x, axis: int = -1):
    return apply_primitive("softmax", [x], axis=axis)


def log_softmax(x, axis: int = -1):
    return apply_primitive("log_softmax", [x], axis=axis)


def gru(x, weights: Sequence[Tensor], mask=None, reverse=False):
    """Run a GRU over time-major ``x`` (T, B, d_in) from a zero state.

    ``weights`` is ``(W_z, W_r, W_h, U_z, U_r, U_h, b_z, b_r, b_h)``.  Steps
    where ``mask`` is 0 carry the previous state through unchanged.
    """
    m = None if mask is None else np.asarray(mask, dtype=DTYPE)
    return apply_primitive("gru", [x, *weights], mask=m, reverse=bool(reverse))


# ---------------------------------------------------------------------------
# categorical distributions
# ---------------------------------------------------------------------------


@dataclass
class Categorical:
    """Probabilities and log-probabilities over the last axis."""

    probs: Tensor
    log_probs: Tensor

    @property
    def n_classes(self) -> int:
        return self.probs.shape[-1]

    def argmax(self) -> np.ndarray:
        # np.argmax returns the first maximum: ties go to the lowest index
        return np.argmax(self.probs.data, axis=-1)


def softmax(logits: Tensor) -> Categorical:
    """Categorical from logits; log-probs come from the log-sum-exp path."""
    if not isinstance(logits, Tensor):
        logits = constant(logits)
    if logits.shape[-1] < 2:
        raise ShapeError("softmax needs at least two classes")
    return Categorical(softmax_t(logits, -1), log_softmax(logits, -1))


def categorical_from_log_probs(log_probs) -> Categorical:
    """Constant categorical from (possibly unnormalised) log weights."""
    lp = _log_softmax_np(np.asarray(log_probs, dtype=DTYPE), -1)
    lp = np.maximum(lp, LOG_FLOOR)
    return Categorical(constant(np.exp(lp)), constant(lp))


def _one_hot(labels, n, shape):
    labels = np.asarray(labels)
    if np.any(labels < 0) or np.any(labels >= n):
        raise ValueError(f"label out of range [0, {n})")
    oh = np.zeros(shape)
    if labels.ndim == 0:
        oh[int(labels)] = 1.0
    else:
        oh[np.arange(labels.shape[0]), labels] = 1.0
    return oh


def cross_entropy(dist: Categorical, label) -> Tensor:
    """``-log p[label]``; batched distributions give one value per row."""
    lp = dist.log_probs
    oh = constant(_one_hot(label, lp.shape[-1], lp.shape))
    return scale(sum(mul(lp, oh), axis=-1), -1.0)


def kl_categorical(q: Categorical, p: Categorical) -> Tensor:
    """KL(q || p) over the last axis."""
    if q.probs.shape != p.probs.shape:
        raise ShapeError(f"kl: {q.probs.shape} vs {p.probs.shape}")
    diff = add(q.log_probs, scale(p.log_probs, -1.0))
    return sum(mul(q.probs, diff), axis=-1)


def detach(t: Tensor) -> Tensor:
    return constant(t.data.copy())


def detach_categorical(c: Categorical) -> Categorical:
    return Categorical(detach(c.probs), detach(c.log_probs))


# ---------------------------------------------------------------------------
# gradient oracle
# ---------------------------------------------------------------------------


def finite_difference_gradient(f: Callable[[np.ndarray], float], params, eps: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``params``."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    x = np.array(params, dtype=DTYPE)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = float(f(x))
        flat[i] = orig - eps
        lo = float(f(x))
        flat[i] = orig
        if not (np.isfinite(hi) and np.isfinite(lo)):
            raise FloatingPointError(f"non-finite function value probing coordinate {i}")
        gflat[i] = (hi - lo) / (2.0 * eps)
    return grad


def relative_error(analytic, numeric, floor: float = 1e-6) -> float:
    """Norm-wise relative error between two gradient arrays."""
    a = np.asarray(analytic, dtype=DTYPE).ravel()
    n = np.asarray(numeric, dtype=DTYPE).ravel()
    denom = max(np.linalg.norm(a), np.linalg.norm(n), floor)
    return float(np.linalg.norm(a - n) / denom)
