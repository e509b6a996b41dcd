"""Minimal reverse-mode automatic differentiation on 64-bit numpy arrays.

A Tape records operations in construction order (inputs always precede the
node that uses them), so backward is a single reverse sweep with no explicit
topological sort. Tensors are immutable value holders; everything runs in
float64 because the package exists to be verified against finite differences,
not to be fast on real workloads.

Gradient-stopping is expressed structurally: tensors without a node id are
constants, and `gather_rows` indices / `mask_multiply` masks never receive
gradients. Gradient flow through discrete selection is routed explicitly by
`straight_through`.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, DomainError, ShapeError
from .rng import SeededRng

_GELU_C0 = 0.7978845608028654  # sqrt(2/pi)
_GELU_C1 = 0.044715
_LN_EPS = 1e-5

_TAPE_STACK: list["Tape"] = []

# test instrumentation: ("op_kind", factor) scales that op's input gradients,
# letting the gradient checker prove it detects a wrong adjoint
_CORRUPT_VJP: tuple[str, float] | None = None


@contextlib.contextmanager
def corrupt_adjoint(kind: str, factor: float = 1.01):
    """Deliberately break one op's adjoint inside the context (tests only)."""
    global _CORRUPT_VJP
    _CORRUPT_VJP = (kind, factor)
    try:
        yield
    finally:
        _CORRUPT_VJP = None


class Tensor:
    """A dense float64 value, optionally recorded on the active tape."""

    __slots__ = ("data", "node_id")

    def __init__(self, data: np.ndarray, node_id: int | None = None):
        self.data = data
        self.node_id = node_id

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def requires_grad(self) -> bool:
        return self.node_id is not None

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        tag = "" if self.node_id is None else f", node={self.node_id}"
        return f"Tensor(shape={list(self.shape)}{tag})"


class Parameter:
    """A named, trainable array that outlives any single tape."""

    __slots__ = ("name", "value")

    def __init__(self, name: str, value: np.ndarray):
        self.name = name
        self.value = np.asarray(value, dtype=np.float64)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape


class Tape:
    """Append-only record of one forward computation plus its gradients."""

    def __init__(self):
        # node: (op kind, input node ids, vjp callable or None for leaves)
        self._nodes: list[tuple[str, tuple, Callable | None]] = []
        self._param_nodes: dict[int, Tensor] = {}
        self.gradients: dict[int, np.ndarray] = {}

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc) -> None:
        popped = _TAPE_STACK.pop()
        assert popped is self

    def __len__(self) -> int:
        return len(self._nodes)

    def _append(self, kind: str, input_ids: tuple, vjp: Callable | None) -> int:
        self._nodes.append((kind, input_ids, vjp))
        return len(self._nodes) - 1

    def leaf(self, value: np.ndarray, requires_grad: bool = True) -> Tensor:
        value = np.asarray(value, dtype=np.float64)
        if not requires_grad:
            return Tensor(value)
        return Tensor(value, self._append("leaf", (), None))

    def param(self, p: Parameter) -> Tensor:
        """Fetch the tape tensor for a parameter, registering it on first use.

        Memoized by identity so that reusing a parameter accumulates into one
        gradient slot.
        """
        t = self._param_nodes.get(id(p))
        if t is None:
            t = self.leaf(p.value, requires_grad=True)
            self._param_nodes[id(p)] = t
        return t

    def backward(self, loss: Tensor) -> dict[int, np.ndarray]:
        """Populate gradients of every recorded node reachable from `loss`."""
        if loss.data.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {}
        if loss.node_id is None:  # constant loss: nothing reachable, all grads zero
            self.gradients = grads
            return grads
        grads[loss.node_id] = np.ones_like(loss.data)
        for nid in range(loss.node_id, -1, -1):
            g = grads.get(nid)
            if g is None:
                continue
            kind, input_ids, vjp = self._nodes[nid]
            if vjp is None:
                continue
            input_grads = vjp(g)
            if _CORRUPT_VJP is not None and kind == _CORRUPT_VJP[0]:
                input_grads = tuple(
                    None if ig is None else ig * _CORRUPT_VJP[1] for ig in input_grads
                )
            for iid, ig in zip(input_ids, input_grads):
                if iid is None or ig is None:
                    continue
                acc = grads.get(iid)
                grads[iid] = ig if acc is None else acc + ig
        self.gradients = grads
        return grads

    def grad(self, ref: Tensor | Parameter) -> np.ndarray:
        """Gradient of the last backward wrt a tensor or parameter (zeros if unreached)."""
        if isinstance(ref, Parameter):
            t = self._param_nodes.get(id(ref))
            if t is None:
                return np.zeros_like(ref.value)
            ref = t
        g = self.gradients.get(ref.node_id) if ref.node_id is not None else None
        return np.zeros_like(ref.data) if g is None else g


def active_tape() -> Tape | None:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


# ---------------------------------------------------------------------------
# construction

def _check_shape(shape: Sequence[int]) -> tuple[int, ...]:
    shape = tuple(int(s) for s in shape)
    if len(shape) == 0 or any(s < 1 for s in shape):
        raise ShapeError(f"invalid tensor shape {list(shape)}")
    return shape


def zeros(shape: Sequence[int]) -> Tensor:
    return Tensor(np.zeros(_check_shape(shape)))


def full(shape: Sequence[int], value: float) -> Tensor:
    return Tensor(np.full(_check_shape(shape), float(value)))


def from_values(values: Iterable[float], shape: Sequence[int]) -> Tensor:
    shape = _check_shape(shape)
    data = np.asarray(list(values), dtype=np.float64)
    if data.size != int(np.prod(shape)):
        raise ShapeError(f"{data.size} values cannot fill shape {list(shape)}")
    return Tensor(data.reshape(shape))


def random_normal(shape: Sequence[int], mean: float, stddev: float, rng: SeededRng) -> Tensor:
    shape = _check_shape(shape)
    if stddev < 0:
        raise DomainError("stddev must be non-negative")
    return Tensor(rng.normals(int(np.prod(shape)), mean, stddev).reshape(shape))


def constant(array_like) -> Tensor:
    """Wrap a value as an off-tape constant tensor."""
    return Tensor(np.asarray(array_like, dtype=np.float64))


# ---------------------------------------------------------------------------
# primitive catalog

def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else constant(x)


def _record(kind: str, out: np.ndarray, inputs: tuple[Tensor, ...], vjp: Callable | None) -> Tensor:
    tape = active_tape()
    if tape is None or vjp is None:
        return Tensor(out)
    ids = tuple(t.node_id for t in inputs)
    if all(i is None for i in ids):
        return Tensor(out)
    return Tensor(out, tape._append(kind, ids, vjp))


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; also accepts a [m] bias against a [n, m] left operand."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape == b.shape:
        return _record("add", a.data + b.data, (a, b), lambda g: (g, g))
    if a.data.ndim == 2 and b.shape == (a.shape[1],):
        return _record("add", a.data + b.data, (a, b), lambda g: (g, g.sum(axis=0)))
    raise ShapeError(f"add: shapes {a.shape} and {b.shape} do not conform")


def subtract(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"subtract: shapes {a.shape} and {b.shape} differ")
    return _record("subtract", a.data - b.data, (a, b), lambda g: (g, -g))


def multiply(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"multiply: shapes {a.shape} and {b.shape} differ")
    ad, bd = a.data, b.data
    return _record("multiply", ad * bd, (a, b), lambda g: (g * bd, g * ad))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not conform")
    ad, bd = a.data, b.data
    return _record("matmul", ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def scale(x: Tensor, c: float) -> Tensor:
    x = _as_tensor(x)
    c = float(c)
    return _record("scale_by_constant", x.data * c, (x,), lambda g: (g * c,))


def log(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    if np.any(x.data <= 0.0):
        raise DomainError("natural_log of a non-positive value")
    xd = x.data
    return _record("natural_log", np.log(xd), (x,), lambda g: (g / xd,))


def exp(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    out = np.exp(x.data)
    return _record("exp", out, (x,), lambda g: (g * out,))


def square(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    xd = x.data
    return _record("square", xd * xd, (x,), lambda g: (g * (2.0 * xd),))


def gelu(x: Tensor) -> Tensor:
    """GELU with the tanh approximation."""
    x = _as_tensor(x)
    xd = x.data
    sq = xd * xd
    t = np.tanh(_GELU_C0 * (xd + _GELU_C1 * sq * xd))

    def vjp(g):
        d = 0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * _GELU_C0 * (1.0 + 3.0 * _GELU_C1 * sq)
        return (g * d,)

    return _record("gelu", 0.5 * xd * (1.0 + t), (x,), vjp)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor) -> Tensor:
    """Per-row normalization of a [n, d] tensor with learnable gain and bias."""
    x, gain, bias = _as_tensor(x), _as_tensor(gain), _as_tensor(bias)
    if x.data.ndim != 2:
        raise ShapeError(f"layer_norm expects a 2-dim input, got {x.shape}")
    d = x.shape[1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError("layer_norm gain/bias must match the row width")
    xd = x.data
    mu = xd.mean(axis=1, keepdims=True)
    xc = xd - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=1, keepdims=True) + _LN_EPS)
    xhat = xc * inv
    gd = gain.data

    def vjp(g):
        dxhat = g * gd
        dx = inv * (dxhat
                    - dxhat.mean(axis=1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=1, keepdims=True))
        return dx, (g * xhat).sum(axis=0), g.sum(axis=0)

    return _record("layer_norm", xhat * gd + bias.data, (x, gain, bias), vjp)


def concat_rows(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ShapeError(f"concat_rows: shapes {a.shape} and {b.shape} do not conform")
    na = a.shape[0]
    return _record("concat_rows", np.concatenate([a.data, b.data], axis=0), (a, b),
                   lambda g: (g[:na], g[na:]))


def gather_rows(x: Tensor, indices) -> Tensor:
    """Select rows by constant indices; backward scatter-adds into the source."""
    x = _as_tensor(x)
    if x.data.ndim != 2:
        raise ShapeError(f"gather_rows expects a 2-dim input, got {x.shape}")
    idx = np.asarray(indices, dtype=np.int64).reshape(-1)
    n = x.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise IndexError(f"gather_rows index out of range for {n} rows")
    shape = x.shape

    def vjp(g):
        out = np.zeros(shape)
        np.add.at(out, idx, g)
        return (out,)

    return _record("gather_rows", x.data[idx], (x,), vjp)


def mask_multiply(x: Tensor, mask) -> Tensor:
    """Elementwise product with a constant 0/1 (or float) mask."""
    x = _as_tensor(x)
    m = mask.data if isinstance(mask, Tensor) else np.asarray(mask, dtype=np.float64)
    if m.shape != x.shape:
        raise ShapeError(f"mask_multiply: mask shape {m.shape} != value shape {x.shape}")
    return _record("mask_multiply", x.data * m, (x,), lambda g: (g * m,))


def mean_all(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    size = x.data.size
    shape = x.shape
    return _record("mean_all", np.array([x.data.mean()]), (x,),
                   lambda g: (np.full(shape, g[0] / size),))


def transpose(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    if x.data.ndim != 2:
        raise ShapeError(f"transpose expects a 2-dim input, got {x.shape}")
    return _record("transpose", x.data.T.copy(), (x,), lambda g: (g.T,))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    x = _as_tensor(x)
    new = tuple(int(s) for s in shape)
    if int(np.prod(new)) != x.data.size:
        raise ShapeError(f"cannot reshape {x.shape} to {list(new)}")
    old = x.shape
    return _record("reshape", x.data.reshape(new), (x,), lambda g: (g.reshape(old),))


def scale_rows(x: Tensor, w: Tensor) -> Tensor:
    """Multiply row i of a [n, d] tensor by w[i]; both operands differentiable."""
    x, w = _as_tensor(x), _as_tensor(w)
    if x.data.ndim != 2 or w.shape != (x.shape[0],):
        raise ShapeError(f"scale_rows: shapes {x.shape} and {w.shape} do not conform")
    xd, wd = x.data, w.data
    return _record("scale_rows", xd * wd[:, None], (x, w),
                   lambda g: (g * wd[:, None], (g * xd).sum(axis=1)))


def straight_through(soft: Tensor, hard_values) -> Tensor:
    """Forward the hard values exactly; route gradients to the soft relaxation."""
    soft = _as_tensor(soft)
    hard = np.asarray(hard_values, dtype=np.float64)
    if hard.shape != soft.shape:
        raise ShapeError(f"straight_through: shapes {soft.shape} and {hard.shape} differ")
    return _record("straight_through", hard.copy(), (soft,), lambda g: (g,))


def softmax_with_temperature(x: Tensor, axis: int, tau: float) -> Tensor:
    """Numerically stable softmax of x / tau along `axis`."""
    x = _as_tensor(x)
    if tau <= 0:
        raise DomainError(f"softmax temperature must be positive, got {tau}")
    z = x.data / tau
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return ((y * (g - (g * y).sum(axis=axis, keepdims=True))) / tau,)

    return _record("softmax", y, (x,), vjp)


def cross_entropy_loss(logits: Tensor, target_class: int) -> Tensor:
    """-log softmax(logits)[target] for a 1-dim logit vector."""
    logits = _as_tensor(logits)
    if logits.data.ndim != 1:
        raise ShapeError(f"cross_entropy_loss expects 1-dim logits, got {logits.shape}")
    c = logits.data.size
    t = int(target_class)
    if not 0 <= t < c:
        raise IndexError(f"target class {t} out of range for {c} classes")
    z = logits.data
    m = z.max()
    lse = m + np.log(np.exp(z - m).sum())
    p = np.exp(z - lse)

    def vjp(g):
        d = p.copy()
        d[t] -= 1.0
        return (d * g[0],)

    return _record("cross_entropy", np.array([lse - z[t]]), (logits,), vjp)


def mean_squared_error(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"mean_squared_error: shapes {a.shape} and {b.shape} differ")
    return mean_all(square(subtract(a, b)))


# kinds exposed to the generic dispatcher / gradient checker
_PRIMITIVES = {
    "add": add,
    "subtract": subtract,
    "multiply_elementwise": multiply,
    "matmul": matmul,
    "scale_by_constant": scale,
    "natural_log": log,
    "exp": exp,
    "gelu": gelu,
    "layer_norm": layer_norm,
    "concat_rows": concat_rows,
    "gather_rows": gather_rows,
    "mask_multiply": mask_multiply,
    "mean_all": mean_all,
    "square": square,
    "transpose": transpose,
    "reshape": reshape,
    "scale_rows": scale_rows,
    "straight_through": straight_through,
}


def apply_primitive(kind: str, inputs: Sequence, **kwargs) -> Tensor:
    """Dispatch a catalog primitive by name."""
    fn = _PRIMITIVES.get(kind)
    if fn is None:
        raise KeyError(f"unknown primitive kind {kind!r}")
    return fn(*inputs, **kwargs)


def primitive_kinds() -> list[str]:
    return list(_PRIMITIVES)


# ---------------------------------------------------------------------------
# finite differences

def finite_difference_check(build_scalar: Callable[[Tensor], Tensor],
                            point: np.ndarray,
                            step: float = 1e-5) -> float:
    """Max relative error between tape gradients and central differences.

    `build_scalar` maps a leaf tensor to a scalar loss using tape operations
    and must be deterministic (freeze any noise before calling). The relative
    error denominator is max(|analytic|, |numeric|, 1e-8) per coordinate.
    """
    point = np.asarray(point, dtype=np.float64)
    with Tape() as tape:
        x = tape.leaf(point)
        loss = build_scalar(x)
        tape.backward(loss)
        analytic = tape.grad(x)

    def value_at(p: np.ndarray) -> float:
        return build_scalar(Tensor(p)).item()

    numeric = np.zeros_like(point)
    flat_num = numeric.reshape(-1)
    flat_pt = point.reshape(-1)
    for i in range(flat_pt.size):
        orig = flat_pt[i]
        flat_pt[i] = orig + step
        up = value_at(point)
        flat_pt[i] = orig - step
        down = value_at(point)
        flat_pt[i] = orig
        flat_num[i] = (up - down) / (2.0 * step)

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float((np.abs(analytic - numeric) / denom).max())
