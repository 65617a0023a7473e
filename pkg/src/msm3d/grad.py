"""Dense-tensor reverse-mode automatic differentiation.

Every numeric primitive used by the network, the trainer and the probes is
registered here as a (forward, backward) pair operating on float64 numpy
arrays.  Graphs are built define-by-run: each call to :func:`apply_primitive`
returns a fresh :class:`Tensor` that remembers its inputs, and
:func:`backward` walks the graph in reverse topological order.

Broadcasting rules
------------------
``add``/``sub``/``mul`` follow numpy broadcasting; the backward pass sums the
incoming gradient over the broadcast axes.  ``matmul`` takes ``(..., k)`` on
the left and a 2-D ``(k, m)`` on the right.  Row primitives (``gather_rows``,
``scatter_add_rows``) index the leading axis.  Everything else is shape
preserving or documented on the primitive.
"""

from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Mapping

import numpy as np
import scipy.sparse as sp
from scipy.special import ndtr

from .errors import ContractError, NumericError, ShapeError

_ids = itertools.count()
_state = threading.local()

_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    """Disable graph recording inside the block (teacher and inference passes)."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    """A value in the differentiation graph (also the graph node)."""

    __slots__ = ("data", "grad", "requires_grad", "op", "inputs", "attrs", "id")

    def __init__(self, data, requires_grad: bool = False, op: str | None = None,
                 inputs: tuple = (), attrs: dict | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self.op = op
        self.inputs = inputs
        self.attrs = attrs or {}
        self.id = next(_ids)

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def value(self) -> np.ndarray:
        return self.data

    @property
    def op_kind(self) -> str:
        return self.op or "leaf"

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op_kind}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return mul(self, -1.0)


def constant(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    t = Tensor(x, requires_grad=False)
    if not np.isfinite(t.data).all():
        raise NumericError("non-finite constant")
    return t


def leaf(x) -> Tensor:
    return Tensor(np.array(x, dtype=np.float64), requires_grad=True)


class RowIndex:
    """Integer row index with a cached sparse scatter matrix.

    Sparse convolutions reuse one neighbor table for several layers; caching
    the transpose operator avoids rebuilding it in every backward pass.
    """

    __slots__ = ("array", "_scatter")

    def __init__(self, array):
        self.array = np.ascontiguousarray(array, dtype=np.int64).reshape(-1)
        self._scatter = {}

    def __len__(self) -> int:
        return self.array.shape[0]

    def scatter_matrix(self, n_rows: int) -> sp.csr_matrix:
        mat = self._scatter.get(n_rows)
        if mat is None:
            m = self.array.shape[0]
            mat = sp.csr_matrix((np.ones(m), (self.array, np.arange(m))), shape=(n_rows, m))
            self._scatter[n_rows] = mat
        return mat


def as_row_index(index) -> RowIndex:
    return index if isinstance(index, RowIndex) else RowIndex(index)


def _scatter_rows(x: np.ndarray, index: RowIndex, n_rows: int) -> np.ndarray:
    if len(index) and (index.array.min() < 0 or index.array.max() >= n_rows):
        raise ShapeError(f"row index out of range for {n_rows} rows")
    flat = x.reshape(x.shape[0], -1)
    out = index.scatter_matrix(n_rows) @ flat
    return np.asarray(out).reshape((n_rows,) + x.shape[1:])


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g.reshape(shape)


@dataclass(frozen=True)
class Primitive:
    name: str
    forward: Callable
    backward: Callable
    moves_only: bool = False


PRIMITIVES: dict[str, Primitive] = {}


# primitives whose outputs only copy input entries (or zeros) cannot create
# non-finite values from finite inputs, so their output check is skipped
_MOVES_ONLY = {"gather_rows", "concat", "slice", "reshape"}


def _register(name: str, forward: Callable, backward: Callable) -> None:
    PRIMITIVES[name] = Primitive(name, forward, backward, name in _MOVES_ONLY)


def apply_primitive(kind: str, inputs, **attrs) -> Tensor:
    """Run primitive ``kind`` on ``inputs`` and record it for backward."""
    try:
        prim = PRIMITIVES[kind]
    except KeyError:
        raise ContractError(f"unknown primitive {kind!r}") from None
    inputs = tuple(constant(x) for x in inputs)
    arrays = [t.data for t in inputs]
    try:
        out = prim.forward(*arrays, **attrs)
    except (ValueError, IndexError) as exc:
        if isinstance(exc, (ShapeError, NumericError)):
            raise
        raise ShapeError(f"{kind}: {exc}") from exc
    # a finite sum implies finite entries; only overflow of the sum needs the full check
    if not prim.moves_only and not np.isfinite(out.sum()) and not np.isfinite(out).all():
        raise NumericError(f"{kind} produced non-finite values")
    track = grad_enabled() and any(t.requires_grad for t in inputs)
    if not track:
        return Tensor(out)
    return Tensor(out, requires_grad=True, op=kind, inputs=inputs, attrs=attrs)


# ----------------------------------------------------------------------------
# primitive definitions

def _f_add(a, b):
    return a + b


def _b_add(g, out, a, b):
    return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)


def _f_sub(a, b):
    return a - b


def _b_sub(g, out, a, b):
    return _unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)


def _f_mul(a, b):
    return a * b


def _b_mul(g, out, a, b):
    return _unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)


def _f_matmul(a, b):
    if b.ndim != 2 or a.ndim < 1 or a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul shapes {a.shape} @ {b.shape}")
    # one 2-D GEMM instead of a batched loop over the leading axes
    return (a.reshape(-1, a.shape[-1]) @ b).reshape(a.shape[:-1] + (b.shape[1],))


def _b_matmul(g, out, a, b):
    da = (g.reshape(-1, g.shape[-1]) @ b.T).reshape(a.shape)
    db = a.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
    return da, db


def _gelu_cdf(x):
    # ndtr keeps full relative precision in the far negative tail, where 1 + erf cancels
    return ndtr(x)


def _f_gelu(x):
    return x * _gelu_cdf(x)


def _gelu_grad(x):
    return _gelu_cdf(x) + x * _INV_SQRT_2PI * np.exp(-0.5 * x * x)


def _b_gelu(g, out, x):
    return (g * _gelu_grad(x),)


def _f_geglu(x):
    if x.shape[-1] % 2:
        raise ShapeError("geglu needs an even last dimension")
    h = x.shape[-1] // 2
    return x[..., :h] * _f_gelu(x[..., h:])


def _b_geglu(g, out, x):
    h = x.shape[-1] // 2
    a, b = x[..., :h], x[..., h:]
    return (np.concatenate([g * _f_gelu(b), g * a * _gelu_grad(b)], axis=-1),)


def _f_rmsnorm(x, gain, eps=1e-6):
    if gain.shape != x.shape[-1:]:
        raise ShapeError(f"rmsnorm gain {gain.shape} vs input {x.shape}")
    r = 1.0 / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + eps)
    return x * r * gain


def _b_rmsnorm(g, out, x, gain, eps=1e-6):
    r = 1.0 / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + eps)
    u = g * gain
    dx = r * u - x * (r ** 3) * np.mean(u * x, axis=-1, keepdims=True)
    dgain = (g * x * r).reshape(-1, x.shape[-1]).sum(axis=0)
    return dx, dgain


def _f_softmax(x, axis=-1):
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def _b_softmax(g, out, x, axis=-1):
    return (out * (g - np.sum(g * out, axis=axis, keepdims=True)),)


def _f_log_softmax(x, axis=-1):
    z = x - x.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def _b_log_softmax(g, out, x, axis=-1):
    return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)


def _f_gather(x, index):
    return np.take(x, index.array, axis=0)


def _b_gather(g, out, x, index):
    return (_scatter_rows(g, index, x.shape[0]),)


def _f_scatter(x, index, n_rows):
    if len(index) != x.shape[0]:
        raise ShapeError(f"scatter index length {len(index)} vs {x.shape[0]} rows")
    return _scatter_rows(x, index, n_rows)


def _b_scatter(g, out, x, index, n_rows):
    return (g[index.array],)


def _f_sum(x, axis=None, keepdims=False):
    return np.sum(x, axis=axis, keepdims=keepdims)


def _expand(g, x, axis, keepdims):
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, x.shape)


def _b_sum(g, out, x, axis=None, keepdims=False):
    return (np.array(_expand(g, x, axis, keepdims)),)


def _f_mean(x, axis=None, keepdims=False):
    return np.mean(x, axis=axis, keepdims=keepdims)


def _b_mean(g, out, x, axis=None, keepdims=False):
    count = x.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return (np.array(_expand(g, x, axis, keepdims)) / count,)


def _f_abs(x):
    return np.abs(x)


def _b_abs(g, out, x):
    # np.sign(0) == 0: symmetric subgradient at the kink
    return (g * np.sign(x),)


def _f_concat(*xs, axis=-1):
    return np.concatenate(xs, axis=axis)


def _b_concat(g, out, *xs, axis=-1):
    bounds = np.cumsum([x.shape[axis] for x in xs])[:-1]
    return tuple(np.split(g, bounds, axis=axis))


def _f_slice(x, key):
    return np.array(x[key])


def _b_slice(g, out, x, key):
    dx = np.zeros_like(x)
    dx[key] = g
    return (dx,)


def _f_reshape(x, shape):
    return x.reshape(shape)


def _b_reshape(g, out, x, shape):
    return (g.reshape(x.shape),)


def _attn_probs(q, k, index, width, bias, heads):
    n, c = q.shape
    dh = c // heads
    kg = np.take(k, index.array, axis=0).reshape(n, width, heads, dh)
    s = np.einsum("nhd,nwhd->nwh", q.reshape(n, heads, dh), kg) * (1.0 / np.sqrt(dh)) + bias
    s -= s.max(axis=1, keepdims=True)
    p = np.exp(s)
    p /= p.sum(axis=1, keepdims=True)
    return p, kg


def _f_window_attention(q, k, v, index, width, bias, heads):
    n, c = q.shape
    if c % heads or k.shape != q.shape or v.shape != q.shape:
        raise ShapeError(f"attention shapes q{q.shape} k{k.shape} v{v.shape} with {heads} heads")
    if len(index) != n * width:
        raise ShapeError("window table does not match the query rows")
    p, _ = _attn_probs(q, k, index, width, bias, heads)
    vg = np.take(v, index.array, axis=0).reshape(n, width, heads, c // heads)
    return np.einsum("nwh,nwhd->nhd", p, vg).reshape(n, c)


def _b_window_attention(g, out, q, k, v, index, width, bias, heads):
    n, c = q.shape
    dh = c // heads
    scale = 1.0 / np.sqrt(dh)
    p, kg = _attn_probs(q, k, index, width, bias, heads)
    vg = np.take(v, index.array, axis=0).reshape(n, width, heads, dh)
    go = g.reshape(n, heads, dh)
    dp = np.einsum("nhd,nwhd->nwh", go, vg)
    ds = p * (dp - np.sum(dp * p, axis=1, keepdims=True)) * scale
    dq = np.einsum("nwh,nwhd->nhd", ds, kg).reshape(n, c)
    dkg = np.einsum("nwh,nhd->nwhd", ds, q.reshape(n, heads, dh)).reshape(n * width, c)
    dvg = np.einsum("nwh,nhd->nwhd", p, go).reshape(n * width, c)
    return dq, _scatter_rows(dkg, index, n), _scatter_rows(dvg, index, n)


for _name, _fw, _bw in [
    ("add", _f_add, _b_add),
    ("sub", _f_sub, _b_sub),
    ("mul", _f_mul, _b_mul),
    ("matmul", _f_matmul, _b_matmul),
    ("gelu", _f_gelu, _b_gelu),
    ("geglu", _f_geglu, _b_geglu),
    ("rmsnorm", _f_rmsnorm, _b_rmsnorm),
    ("softmax", _f_softmax, _b_softmax),
    ("log_softmax", _f_log_softmax, _b_log_softmax),
    ("gather_rows", _f_gather, _b_gather),
    ("scatter_add_rows", _f_scatter, _b_scatter),
    ("sum", _f_sum, _b_sum),
    ("mean", _f_mean, _b_mean),
    ("abs", _f_abs, _b_abs),
    ("concat", _f_concat, _b_concat),
    ("slice", _f_slice, _b_slice),
    ("reshape", _f_reshape, _b_reshape),
    ("window_attention", _f_window_attention, _b_window_attention),
]:
    _register(_name, _fw, _bw)


# ----------------------------------------------------------------------------
# functional front-end

def add(a, b) -> Tensor:
    return apply_primitive("add", [a, b])


def sub(a, b) -> Tensor:
    return apply_primitive("sub", [a, b])


def mul(a, b) -> Tensor:
    return apply_primitive("mul", [a, b])


def matmul(a, b) -> Tensor:
    return apply_primitive("matmul", [a, b])


def gelu(x) -> Tensor:
    return apply_primitive("gelu", [x])


def geglu(x) -> Tensor:
    return apply_primitive("geglu", [x])


def rmsnorm(x, gain, eps: float = 1e-6) -> Tensor:
    return apply_primitive("rmsnorm", [x, gain], eps=eps)


def softmax(x, axis: int = -1) -> Tensor:
    return apply_primitive("softmax", [x], axis=axis)


def log_softmax(x, axis: int = -1) -> Tensor:
    return apply_primitive("log_softmax", [x], axis=axis)


def gather_rows(x, index) -> Tensor:
    return apply_primitive("gather_rows", [x], index=as_row_index(index))


def scatter_add_rows(x, index, n_rows: int) -> Tensor:
    return apply_primitive("scatter_add_rows", [x], index=as_row_index(index), n_rows=int(n_rows))


def reduce_sum(x, axis=None, keepdims: bool = False) -> Tensor:
    return apply_primitive("sum", [x], axis=axis, keepdims=keepdims)


def reduce_mean(x, axis=None, keepdims: bool = False) -> Tensor:
    return apply_primitive("mean", [x], axis=axis, keepdims=keepdims)


def absolute(x) -> Tensor:
    return apply_primitive("abs", [x])


def concat(xs, axis: int = -1) -> Tensor:
    return apply_primitive("concat", list(xs), axis=axis)


def slice_(x, key) -> Tensor:
    return apply_primitive("slice", [x], key=key)


def window_attention(q, k, v, index, width: int, bias, heads: int) -> Tensor:
    """Multi-head attention of row i over the ``width`` key rows index[i*width:(i+1)*width].

    ``bias`` (N, width, 1) is added to the scaled scores; large negative
    entries switch slots off.
    """
    return apply_primitive("window_attention", (q, k, v), index=as_row_index(index), width=int(width),
                           bias=np.asarray(bias, dtype=np.float64), heads=int(heads))


def reshape(x, shape) -> Tensor:
    return apply_primitive("reshape", [x], shape=tuple(shape))


# ----------------------------------------------------------------------------
# parameters and backward

class ParamSet:
    """Named parameter values with a parallel map of accumulated gradients."""

    def __init__(self, values: Mapping[str, np.ndarray] | None = None):
        self.values: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self._bound: dict[str, Tensor] = {}
        for name, v in (values or {}).items():
            self.add(name, v)

    def add(self, name: str, value) -> None:
        if name in self.values:
            raise ContractError(f"duplicate parameter {name!r}")
        arr = np.array(value, dtype=np.float64)
        self.values[name] = arr
        self.grads[name] = np.zeros_like(arr)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.values[name]

    def __contains__(self, name: str) -> bool:
        return name in self.values

    def __iter__(self):
        return iter(self.values)

    def __len__(self) -> int:
        return len(self.values)

    def items(self):
        return self.values.items()

    def num_elements(self) -> int:
        return sum(v.size for v in self.values.values())

    def bind(self, requires_grad: bool = True) -> dict[str, Tensor]:
        """Wrap every value in a graph leaf for one forward pass."""
        bound = {k: Tensor(v, requires_grad=requires_grad) for k, v in self.values.items()}
        self._bound = bound if requires_grad else {}
        return bound

    def zero_grad(self) -> None:
        for g in self.grads.values():
            g.fill(0.0)

    def copy(self) -> "ParamSet":
        return ParamSet({k: v.copy() for k, v in self.values.items()})

    def same_shapes(self, other: "ParamSet") -> bool:
        return (self.values.keys() == other.values.keys()
                and all(v.shape == other.values[k].shape for k, v in self.values.items()))


def _topological(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if node.id in seen:
            continue
        seen.add(node.id)
        stack.append((node, True))
        for parent in node.inputs:
            if parent.requires_grad and parent.id not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor, params: ParamSet | None = None) -> None:
    """Back-propagate from a scalar ``loss``.

    Leaf tensors receive ``.grad``; when ``params`` is given, gradients of its
    currently bound leaves are added into ``params.grads`` (leaves the loss
    does not reach contribute zero).
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {}
    if loss.requires_grad:
        grads[loss.id] = np.ones_like(loss.data)
        for node in reversed(_topological(loss)):
            g = grads.pop(node.id, None)
            if g is None:
                continue
            if node.op is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            prim = PRIMITIVES[node.op]
            in_grads = prim.backward(g, node.data, *[t.data for t in node.inputs], **node.attrs)
            for parent, pg in zip(node.inputs, in_grads):
                if pg is None or not parent.requires_grad:
                    continue
                if parent.id in grads:
                    grads[parent.id] = grads[parent.id] + pg
                else:
                    grads[parent.id] = pg
    if params is not None:
        for name, t in params._bound.items():
            if t.grad is not None:
                params.grads[name] += t.grad


def check_gradients(builder: Callable[[dict[str, Tensor]], Tensor],
                    values: Mapping[str, np.ndarray], h: float = 1e-4,
                    max_elements: int | None = None, seed: int = 0) -> dict[str, float]:
    """Compare analytic gradients with central finite differences.

    Returns, per parameter, the max over checked elements of
    ``|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)``.  With
    ``max_elements`` set, larger tensors are checked on a random sample.
    """
    params = ParamSet(values)
    loss = builder(params.bind())
    backward(loss, params)
    rng = np.random.default_rng(seed)

    def evaluate() -> float:
        with no_grad():
            return builder(params.bind(requires_grad=False)).item()

    report = {}
    for name, value in params.values.items():
        flat = value.reshape(-1)
        if max_elements is None or flat.size <= max_elements:
            picks = np.arange(flat.size)
        else:
            picks = rng.choice(flat.size, size=max_elements, replace=False)
        analytic = params.grads[name].reshape(-1)
        worst = 0.0
        for i in picks:
            orig = flat[i]
            flat[i] = orig + h
            up = evaluate()
            flat[i] = orig - h
            down = evaluate()
            flat[i] = orig
            numeric = (up - down) / (2 * h)
            a = analytic[i]
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, err)
        report[name] = worst
    return report
