"""Dense tensors with reverse-mode automatic differentiation on a linear tape.

Design notes:

* Values are numpy arrays, float64 by default (verification builds need the
  headroom for finite-difference gradient checks); float32 can be switched on
  globally for benchmark runs via ``set_default_dtype``.
* Operations record themselves on the thread-local active ``Tape``.  Recording
  order is execution order, which is already a topological order of the
  computation graph, so ``backward`` is a single reverse sweep over the tape.
  Gradients accumulate additively across fan-out and are never overwritten.
* Broadcasting is deliberately restricted: elementwise binary ops accept equal
  shapes, a scalar operand, or a trailing bias vector ``(d,)`` against
  ``(..., d)``.  Anything else raises ``ShapeError``.  Wider broadcasts must go
  through the explicit ``broadcast_to``.
* Every reduction uses a fixed order, so results are reproducible bit-for-bit
  for a fixed thread count.  ``sum_positions`` additionally sorts its addends,
  making it invariant to permutations of the summed axis at the bit level.

Tensors are immutable after construction except for the ``grad`` buffer and
optimizer updates to leaf parameters.  A tape is single-threaded; independent
tapes may live on different threads.
"""

from __future__ import annotations

import threading

import numpy as np

from .errors import ConfigError, ContractError, ShapeError

_DEFAULT_DTYPE = np.float64


def set_default_dtype(dtype) -> None:
    """Switch the global value dtype (float64 or float32)."""
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float64), np.dtype(np.float32)):
        raise ContractError(f"unsupported dtype {dtype}; use float64 or float32")
    _DEFAULT_DTYPE = dtype.type


def default_dtype():
    return _DEFAULT_DTYPE


class Tensor:
    """A dense n-dimensional value, optionally participating in a tape."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=_DEFAULT_DTYPE)
        self.requires_grad = bool(requires_grad)
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        """The underlying array. Treat as read-only."""
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar; all semantics live in the module-level functions
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

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p):
        return pow_scalar(self, p)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=_DEFAULT_DTYPE))


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=_DEFAULT_DTYPE), requires_grad)


def ones(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.ones(shape, dtype=_DEFAULT_DTYPE), requires_grad)


# --------------------------------------------------------------------------
# tape


class _Node:
    __slots__ = ("out", "inputs", "backward")

    def __init__(self, out, inputs, backward):
        self.out = out
        self.inputs = inputs
        self.backward = backward


_tls = threading.local()


def _tape_stack():
    stack = getattr(_tls, "stack", None)
    if stack is None:
        stack = []
        _tls.stack = stack
    return stack


def active_tape():
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tape:
    """Ordered record of operations, in execution (= topological) order."""

    __slots__ = ("_nodes",)

    def __init__(self):
        self._nodes = []

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        popped = _tape_stack().pop()
        assert popped is self
        return False

    def __len__(self):
        return len(self._nodes)

    def backward(self, loss: Tensor) -> None:
        backward(loss, self)


def backward(loss: Tensor, tape: Tape) -> None:
    """Populate ``grad`` on every ``requires_grad`` ancestor of ``loss``.

    The loss must be a scalar recorded on ``tape``.  Each recorded operation
    is visited exactly once, in reverse recording order; fan-out accumulates
    additively.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    loss.grad = np.ones_like(loss.data)
    for node in reversed(tape._nodes):
        g = node.out.grad
        if g is None:
            continue
        grads = node.backward(g)
        for inp, gi in zip(node.inputs, grads):
            if gi is None or not inp.requires_grad:
                continue
            if inp.grad is None:
                inp.grad = np.zeros_like(inp.data)
            inp.grad += gi


def _make_out(data, inputs, backward_fn):
    """Wrap an op result; record it if a tape is active and grads can flow."""
    tape = active_tape()
    track = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=track)
    if track:
        tape._nodes.append(_Node(out, inputs, backward_fn()))
    return out


# --------------------------------------------------------------------------
# elementwise binary ops with restricted broadcasting


def _pattern(a: Tensor, b: Tensor) -> str:
    if a.shape == b.shape:
        return "same"
    if b.ndim == 0 or (b.ndim == 1 and b.size == 1 and a.ndim != 1):
        return "b_scalar"
    if a.ndim == 0 or (a.ndim == 1 and a.size == 1 and b.ndim != 1):
        return "a_scalar"
    if b.ndim == 1 and a.ndim >= 2 and a.shape[-1] == b.shape[0]:
        return "b_bias"
    if a.ndim == 1 and b.ndim >= 2 and b.shape[-1] == a.shape[0]:
        return "a_bias"
    raise ShapeError(
        f"elementwise op on incompatible shapes {a.shape} and {b.shape} "
        "(allowed: equal shapes, scalar, trailing bias vector)"
    )


def _reduce_like(g: np.ndarray, pattern: str, side: str, shape) -> np.ndarray:
    """Collapse an output-shaped gradient back to an operand's shape."""
    if pattern == "same":
        return g
    if pattern == f"{side}_scalar":
        return g.sum().reshape(shape)
    if pattern == f"{side}_bias":
        lead = tuple(range(g.ndim - 1))
        return g.sum(axis=lead)
    return g


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    p = _pattern(a, b)
    data = a.data + b.data

    def bwd():
        def fn(g):
            return _reduce_like(g, p, "a", a.shape), _reduce_like(g, p, "b", b.shape)

        return fn

    return _make_out(data, (a, b), bwd)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    p = _pattern(a, b)
    data = a.data - b.data

    def bwd():
        def fn(g):
            return _reduce_like(g, p, "a", a.shape), _reduce_like(-g, p, "b", b.shape)

        return fn

    return _make_out(data, (a, b), bwd)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    p = _pattern(a, b)
    data = a.data * b.data

    def bwd():
        ad, bd = a.data, b.data

        def fn(g):
            return (
                _reduce_like(g * bd, p, "a", a.shape),
                _reduce_like(g * ad, p, "b", b.shape),
            )

        return fn

    return _make_out(data, (a, b), bwd)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    p = _pattern(a, b)
    data = a.data / b.data

    def bwd():
        ad, bd = a.data, b.data

        def fn(g):
            return (
                _reduce_like(g / bd, p, "a", a.shape),
                _reduce_like(-g * ad / (bd * bd), p, "b", b.shape),
            )

        return fn

    return _make_out(data, (a, b), bwd)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make_out(-a.data, (a,), lambda: lambda g: (-g,))


def pow_scalar(a, p) -> Tensor:
    a = as_tensor(a)
    p = float(p)
    data = a.data**p

    def bwd():
        ad = a.data

        def fn(g):
            return (g * p * ad ** (p - 1),)

        return fn

    return _make_out(data, (a,), bwd)


def where_mask(mask: np.ndarray, a, b) -> Tensor:
    """Elementwise select with a constant boolean mask (same-shape operands)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"where_mask operands differ: {a.shape} vs {b.shape}")
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), a.shape)
    data = np.where(mask, a.data, b.data)

    def bwd():
        def fn(g):
            return np.where(mask, g, 0.0), np.where(mask, 0.0, g)

        return fn

    return _make_out(data, (a, b), bwd)


# --------------------------------------------------------------------------
# unary / activations


def exp(a) -> Tensor:
    a = as_tensor(a)
    data = np.exp(a.data)

    def bwd():
        def fn(g):
            return (g * data,)

        return fn

    return _make_out(data, (a,), bwd)


def log(a) -> Tensor:
    a = as_tensor(a)

    def bwd():
        ad = a.data

        def fn(g):
            return (g / ad,)

        return fn

    return _make_out(np.log(a.data), (a,), bwd)


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    data = np.sqrt(a.data)

    def bwd():
        def fn(g):
            return (g * 0.5 / data,)

        return fn

    return _make_out(data, (a,), bwd)


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    # 1/(1+e^-x), stable on both tails
    data = np.empty_like(a.data)
    pos = a.data >= 0
    data[pos] = 1.0 / (1.0 + np.exp(-a.data[pos]))
    ex = np.exp(a.data[~pos])
    data[~pos] = ex / (1.0 + ex)

    def bwd():
        def fn(g):
            return (g * data * (1.0 - data),)

        return fn

    return _make_out(data, (a,), bwd)


def silu(a) -> Tensor:
    a = as_tensor(a)
    s = _sigmoid_np(a.data)
    data = a.data * s

    def bwd():
        ad = a.data

        def fn(g):
            return (g * (s + ad * s * (1.0 - s)),)

        return fn

    return _make_out(data, (a,), bwd)


def softplus(a) -> Tensor:
    a = as_tensor(a)
    # log(1+e^x) == logaddexp(0, x); exact asymptote for large x, no overflow
    data = np.logaddexp(0.0, a.data)

    def bwd():
        s = _sigmoid_np(a.data)

        def fn(g):
            return (g * s,)

        return fn

    return _make_out(data, (a,), bwd)


def relu(a) -> Tensor:
    a = as_tensor(a)
    data = np.maximum(a.data, 0.0)

    def bwd():
        mask = a.data > 0

        def fn(g):
            return (g * mask,)

        return fn

    return _make_out(data, (a,), bwd)


_ACTIVATIONS = {"silu": silu, "softplus": softplus, "sigmoid": sigmoid, "relu": relu}


def activation(a, kind: str) -> Tensor:
    try:
        fn = _ACTIVATIONS[kind]
    except KeyError:
        raise ContractError(f"unknown activation {kind!r}") from None
    return fn(a)


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


# --------------------------------------------------------------------------
# contractions


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner extents disagree: {a.shape} vs {b.shape}")
    data = a.data @ b.data

    def bwd():
        ad, bd = a.data, b.data

        def fn(g):
            return g @ bd.T, ad.T @ g

        return fn

    return _make_out(data, (a, b), bwd)


def einsum2(subscripts: str, a, b) -> Tensor:
    """Two-operand einsum whose gradient is again an einsum.

    Every index of each operand must appear in the output or in the other
    operand, so the adjoint contraction is well defined.
    """
    a, b = as_tensor(a), as_tensor(b)
    lhs, out_sub = subscripts.replace(" ", "").split("->")
    sa, sb = lhs.split(",")
    for name, sub, other in (("first", sa, sb), ("second", sb, sa)):
        missing = set(sub) - set(out_sub) - set(other)
        if missing:
            raise ShapeError(
                f"einsum2 {subscripts!r}: {name} operand index {missing} is "
                "summed without appearing elsewhere"
            )
    data = np.einsum(subscripts, a.data, b.data)

    def bwd():
        ad, bd = a.data, b.data

        def fn(g):
            ga = np.einsum(f"{out_sub},{sb}->{sa}", g, bd)
            gb = np.einsum(f"{out_sub},{sa}->{sb}", g, ad)
            return ga, gb

        return fn

    return _make_out(data, (a, b), bwd)


def linear(x, w, b=None) -> Tensor:
    """Affine map on the trailing axis: (..., d_in) @ (d_in, d_out) [+ bias]."""
    x, w = as_tensor(x), as_tensor(w)
    if x.shape[-1] != w.shape[0]:
        raise ShapeError(f"linear: input {x.shape} does not match weight {w.shape}")
    lead = x.shape[:-1]
    y = matmul(reshape(x, (-1, x.shape[-1])), w)
    y = reshape(y, lead + (w.shape[1],))
    if b is not None:
        y = add(y, b)
    return y


# --------------------------------------------------------------------------
# reductions


def _axis_tuple(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _axis_tuple(axis, a.ndim)
    data = a.data.sum(axis=axes, keepdims=keepdims)

    def bwd():
        shape = a.shape

        def fn(g):
            gg = g
            if not keepdims:
                for ax in sorted(axes):
                    gg = np.expand_dims(gg, ax)
            return (np.broadcast_to(gg, shape).copy(),)

        return fn

    return _make_out(data, (a,), bwd)


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _axis_tuple(axis, a.ndim)
    count = 1
    for ax in axes:
        count *= a.shape[ax]
    return mul(tsum(a, axis=axes, keepdims=keepdims), 1.0 / count)


def sum_positions(a, axis: int = 1) -> Tensor:
    """Sum along ``axis`` with value-sorted addend order.

    Bit-identical under any permutation of the summed axis: sorting makes the
    reduction a function of the addend multiset only.  Used where circular
    shifts of a token sequence must leave an aggregate exactly unchanged.
    """
    a = as_tensor(a)
    ax = axis % a.ndim
    data = np.sort(a.data, axis=ax).sum(axis=ax)

    def bwd():
        shape = a.shape

        def fn(g):
            return (np.broadcast_to(np.expand_dims(g, ax), shape).copy(),)

        return fn

    return _make_out(data, (a,), bwd)


def tmax(a, axis=None) -> Tensor:
    """Max reduction; subgradient routes to the first maximal element."""
    a = as_tensor(a)
    if axis is None:
        data = a.data.max()
        flat_idx = int(np.argmax(a.data))

        def bwd():
            shape = a.shape

            def fn(g):
                out = np.zeros(shape)
                out.flat[flat_idx] = g
                return (out,)

            return fn

        return _make_out(data, (a,), bwd)

    ax = axis % a.ndim
    data = a.data.max(axis=ax)
    idx = np.argmax(a.data, axis=ax)

    def bwd():
        shape = a.shape

        def fn(g):
            out = np.zeros(shape)
            np.put_along_axis(
                out, np.expand_dims(idx, ax), np.expand_dims(g, ax), axis=ax
            )
            return (out,)

        return fn

    return _make_out(data, (a,), bwd)


def tmin(a, axis=None) -> Tensor:
    """Min reduction; subgradient routes to the first minimal element."""
    return neg(tmax(neg(a), axis=axis))


# --------------------------------------------------------------------------
# shape manipulation


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    data = a.data.reshape(shape)

    def bwd():
        orig = a.shape

        def fn(g):
            return (g.reshape(orig),)

        return fn

    return _make_out(data, (a,), bwd)


def transpose(a, axes) -> Tensor:
    a = as_tensor(a)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    data = a.data.transpose(axes)

    def bwd():
        def fn(g):
            return (g.transpose(inv),)

        return fn

    return _make_out(data, (a,), bwd)


def broadcast_to(a, shape) -> Tensor:
    a = as_tensor(a)
    shape = tuple(shape)
    data = np.broadcast_to(a.data, shape).copy()

    def bwd():
        orig = a.shape
        extra = len(shape) - len(orig)
        sum_axes = tuple(range(extra)) + tuple(
            i + extra for i, d in enumerate(orig) if d == 1 and shape[i + extra] != 1
        )

        def fn(g):
            return (g.sum(axis=sum_axes).reshape(orig),)

        return fn

    return _make_out(data, (a,), bwd)


def flip(a, axis: int) -> Tensor:
    a = as_tensor(a)
    data = np.flip(a.data, axis=axis).copy()

    def bwd():
        def fn(g):
            return (np.flip(g, axis=axis),)

        return fn

    return _make_out(data, (a,), bwd)


def roll(a, shift: int, axis: int) -> Tensor:
    a = as_tensor(a)
    data = np.roll(a.data, shift, axis=axis)

    def bwd():
        def fn(g):
            return (np.roll(g, -shift, axis=axis),)

        return fn

    return _make_out(data, (a,), bwd)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)

    def bwd():
        sizes = [t.shape[axis] for t in tensors]
        splits = np.cumsum(sizes)[:-1]

        def fn(g):
            return tuple(np.split(g, splits, axis=axis))

        return fn

    return _make_out(data, tuple(tensors), bwd)


def stack(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    data = np.stack([t.data for t in tensors], axis=axis)

    def bwd():
        n = len(tensors)

        def fn(g):
            return tuple(np.take(g, i, axis=axis) for i in range(n))

        return fn

    return _make_out(data, tuple(tensors), bwd)


def narrow(a, axis: int, start: int, length: int) -> Tensor:
    a = as_tensor(a)
    ax = axis % a.ndim
    sl = [slice(None)] * a.ndim
    sl[ax] = slice(start, start + length)
    sl = tuple(sl)
    data = a.data[sl].copy()

    def bwd():
        shape = a.shape

        def fn(g):
            out = np.zeros(shape)
            out[sl] = g
            return (out,)

        return fn

    return _make_out(data, (a,), bwd)


def stride2(a, axis: int, start: int) -> Tensor:
    """Every second element along ``axis`` beginning at ``start`` (0 or 1)."""
    a = as_tensor(a)
    ax = axis % a.ndim
    sl = [slice(None)] * a.ndim
    sl[ax] = slice(start, None, 2)
    sl = tuple(sl)
    data = a.data[sl].copy()

    def bwd():
        shape = a.shape

        def fn(g):
            out = np.zeros(shape)
            out[sl] = g
            return (out,)

        return fn

    return _make_out(data, (a,), bwd)


def interleave2(even, odd, axis: int) -> Tensor:
    """Inverse of the stride-2 split: out[0::2]=even, out[1::2]=odd."""
    even, odd = as_tensor(even), as_tensor(odd)
    ax = axis % even.ndim
    ne, no = even.shape[ax], odd.shape[ax]
    if ne - no not in (0, 1):
        raise ShapeError(f"interleave2: incompatible lengths {ne} and {no}")
    shape = list(even.shape)
    shape[ax] = ne + no
    sl_e = [slice(None)] * even.ndim
    sl_e[ax] = slice(0, None, 2)
    sl_o = [slice(None)] * even.ndim
    sl_o[ax] = slice(1, None, 2)
    sl_e, sl_o = tuple(sl_e), tuple(sl_o)
    data = np.empty(shape)
    data[sl_e] = even.data
    data[sl_o] = odd.data

    def bwd():
        def fn(g):
            return g[sl_e].copy(), g[sl_o].copy()

        return fn

    return _make_out(data, (even, odd), bwd)


# --------------------------------------------------------------------------
# structured kernels


def conv_vertical(x, w, stride_h: int = 1) -> Tensor:
    """Height-only convolution: ``(B,C,H,W) * (O,C,k,1) -> (B,O,H',W)``.

    Width extent is untouched and output column j depends only on input
    column j, which is what keeps the backbone exactly shift-equivariant
    along the width axis.
    """
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv_vertical expects 4-d operands, got {x.shape}, {w.shape}")
    if w.shape[3] != 1:
        raise ShapeError(f"conv_vertical kernel width must be 1, got {w.shape}")
    if w.shape[1] != x.shape[1]:
        raise ShapeError(f"channel mismatch: input {x.shape} vs kernel {w.shape}")
    k = w.shape[2]
    h = x.shape[2]
    if k > h:
        raise ConfigError(f"kernel height {k} exceeds input height {h}")
    h_out = (h - k) // stride_h + 1
    span = stride_h * (h_out - 1) + 1
    wk = w.data[:, :, :, 0]
    data = np.zeros((x.shape[0], w.shape[0], h_out, x.shape[3]))
    for j in range(k):
        data += np.einsum(
            "oc,bchw->bohw", wk[:, :, j], x.data[:, :, j : j + span : stride_h, :]
        )

    def bwd():
        xd = x.data

        def fn(g):
            gw = np.zeros(w.shape)
            gx = np.zeros(xd.shape)
            for j in range(k):
                sl = slice(j, j + span, stride_h)
                gw[:, :, j, 0] = np.einsum("bohw,bchw->oc", g, xd[:, :, sl, :])
                gx[:, :, sl, :] += np.einsum("oc,bohw->bchw", wk[:, :, j], g)
            return gx, gw

        return fn

    return _make_out(data, (x, w), bwd)


def conv1d_circular(x, w) -> Tensor:
    """Circular 1-d convolution: ``(B,C,M) * (O,C,k) -> (B,O,M)``, k odd.

    True convolution (kernel flipped): y[m] = sum_j w[j] x[(m + r - j) mod M]
    with r = (k-1)/2, so a one-hot kernel at j=0 shifts the signal forward.
    """
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 3 or w.ndim != 3:
        raise ShapeError(f"conv1d_circular expects 3-d operands, got {x.shape}, {w.shape}")
    if w.shape[1] != x.shape[1]:
        raise ShapeError(f"channel mismatch: input {x.shape} vs kernel {w.shape}")
    k = w.shape[2]
    if k % 2 == 0:
        raise ConfigError(f"conv1d_circular kernel length must be odd, got {k}")
    m = x.shape[2]
    r = (k - 1) // 2
    xpad = _wrap_pad(x.data, r)
    data = np.zeros((x.shape[0], w.shape[0], m))
    for j in range(k):
        data += np.einsum("oc,bcm->bom", w.data[:, :, j], xpad[:, :, 2 * r - j : 2 * r - j + m])

    def bwd():
        wd = w.data

        def fn(g):
            gpad = _wrap_pad(g, r)
            gw = np.zeros(w.shape)
            gx = np.zeros(x.shape)
            for j in range(k):
                gw[:, :, j] = np.einsum(
                    "bom,bcm->oc", g, xpad[:, :, 2 * r - j : 2 * r - j + m]
                )
                gx += np.einsum("oc,bom->bcm", wd[:, :, j], gpad[:, :, j : j + m])
            return gx, gw

        return fn

    return _make_out(data, (x, w), bwd)


def _wrap_pad(x: np.ndarray, r: int) -> np.ndarray:
    if r == 0:
        return x
    return np.concatenate([x[..., -r:], x, x[..., :r]], axis=-1)


def maxpool1d_circular(x, k: int) -> Tensor:
    """Same-length circular max pooling along the last axis, window k (odd).

    Ties route the subgradient to the smallest window offset, fixed order.
    """
    x = as_tensor(x)
    if k % 2 == 0:
        raise ConfigError(f"maxpool1d_circular window must be odd, got {k}")
    r = (k - 1) // 2
    shifted = np.stack([np.roll(x.data, -d, axis=-1) for d in range(-r, r + 1)])
    data = shifted.max(axis=0)

    def bwd():
        winner = np.argmax(shifted, axis=0)

        def fn(g):
            gx = np.zeros(x.shape)
            for i, d in enumerate(range(-r, r + 1)):
                gx += np.roll(np.where(winner == i, g, 0.0), d, axis=-1)
            return (gx,)

        return fn

    return _make_out(data, (x,), bwd)


def layer_norm(x, gain, bias, eps: float = 1e-6) -> Tensor:
    """Per-position normalization over the trailing axis with learned affine."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm affine must be ({d},), got {gain.shape}/{bias.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    data = xhat * gain.data + bias.data

    def bwd():
        gd = gain.data

        def fn(g):
            lead = tuple(range(g.ndim - 1))
            gbias = g.sum(axis=lead)
            ggain = (g * xhat).sum(axis=lead)
            gxh = g * gd
            gx = inv * (
                gxh
                - gxh.mean(axis=-1, keepdims=True)
                - xhat * (gxh * xhat).mean(axis=-1, keepdims=True)
            )
            return gx, ggain, gbias

        return fn

    return _make_out(data, (x, gain, bias), bwd)


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    data = e / e.sum(axis=axis, keepdims=True)

    def bwd():
        def fn(g):
            dot = (g * data).sum(axis=axis, keepdims=True)
            return (data * (g - dot),)

        return fn

    return _make_out(data, (x,), bwd)


def l2_normalize(x, axis: int = -1) -> Tensor:
    """Scale to unit L2 norm along ``axis``; exactly-zero slices stay zero."""
    x = as_tensor(x)
    norm = np.sqrt((x.data**2).sum(axis=axis, keepdims=True))
    nonzero = norm > 0.0
    safe = np.where(nonzero, norm, 1.0)
    data = np.where(nonzero, x.data / safe, 0.0)

    def bwd():
        def fn(g):
            dot = (g * data).sum(axis=axis, keepdims=True)
            gx = np.where(nonzero, (g - data * dot) / safe, 0.0)
            return (gx,)

        return fn

    return _make_out(data, (x,), bwd)
