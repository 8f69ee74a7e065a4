"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every layer and loss in this package is assembled from the primitives
defined here, so any composite can be differentiated by the same
machinery and cross-checked against central finite differences.  Local
backward rules are themselves expressed with these primitives, which
makes gradients-of-gradients available (needed for the critic's
input-gradient penalty).

Single-threaded per graph; independent graphs may live on independent
threads.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "Tensor",
    "TapeNode",
    "DimensionError",
    "DomainError",
    "ContractError",
    "no_grad",
    "tensor",
    "constant",
    "zeros",
    "ones",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "matmul",
    "concat",
    "stack",
    "getitem",
    "reshape",
    "swapaxes",
    "tsum",
    "tmean",
    "tanh",
    "sigmoid",
    "relu",
    "leaky_relu",
    "exp",
    "log",
    "tabs",
    "tpow",
    "sqrt",
    "softmax",
    "layernorm",
    "l1norm",
    "l2norm",
    "where_const",
    "dropout",
    "huber",
    "apply",
    "gradients",
    "backward",
    "grad_check",
]


class DimensionError(ValueError):
    """Operand shapes do not conform to the operation."""


class DomainError(ValueError):
    """Operand values lie outside the operation's mathematical domain."""


class ContractError(RuntimeError):
    """An operation was invoked outside its stated contract."""


_GRAD_ENABLED = True


class no_grad:
    """Context manager that suppresses tape recording."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


class TapeNode:
    """Backward-graph record: the parent tensors and the local rule.

    ``rule(out_grad)`` returns one gradient tensor (or None) per parent.
    """

    __slots__ = ("op", "parents", "rule")

    def __init__(self, op, parents, rule):
        self.op = op
        self.parents = parents
        self.rule = rule


class Tensor:
    """Row-major float64 array with optional gradient tracking."""

    __slots__ = ("data", "requires_grad", "grad", "node")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.node = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self):
        """Copy of the value with no graph attached."""
        return Tensor(self.data.copy())

    def backward(self):
        backward(self)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar; all graph building happens in the module functions
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

    def __truediv__(self, other):
        return div(self, _as_tensor(other))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, _as_tensor(other))

    def __getitem__(self, key):
        return getitem(self, key)


def tensor(data, requires_grad=False):
    return Tensor(data, requires_grad=requires_grad)


def constant(data):
    return Tensor(data)


def zeros(shape):
    return Tensor(np.zeros(shape))


def ones(shape):
    return Tensor(np.ones(shape))


def zeros_like(t):
    return Tensor(np.zeros(t.shape))


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, op, parents, rule):
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.node = TapeNode(op, tuple(parents), rule)
    return out


def _unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` (adjoint of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = tsum(g, axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = tsum(g, axis=axes, keepdims=True)
    if g.shape != shape:
        g = reshape(g, shape)
    return g


def _check_broadcast(a, b, op):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast")


# ---------------------------------------------------------------------------
# primitives


def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "add")
    return _make(
        a.data + b.data,
        "add",
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "sub")
    return _make(
        a.data - b.data,
        "sub",
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(neg(g), b.shape)),
    )


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "mul")
    return _make(
        a.data * b.data,
        "mul",
        (a, b),
        lambda g: (_unbroadcast(mul(g, b), a.shape), _unbroadcast(mul(g, a), b.shape)),
    )


def div(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "div")
    if np.any(b.data == 0.0):
        raise DomainError("div: zero divisor")

    def rule(g):
        ga = _unbroadcast(div(g, b), a.shape)
        gb = _unbroadcast(neg(div(mul(g, a), mul(b, b))), b.shape)
        return ga, gb

    return _make(a.data / b.data, "div", (a, b), rule)


def neg(a):
    a = _as_tensor(a)
    return _make(-a.data, "neg", (a,), lambda g: (neg(g),))


def matmul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(
            f"matmul: operands must be at least 2-D, got {a.shape} @ {b.shape}"
        )
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: inner dims differ, {a.shape} @ {b.shape}")
    try:
        data = np.matmul(a.data, b.data)
    except ValueError:
        raise DimensionError(f"matmul: batch dims differ, {a.shape} @ {b.shape}")

    def rule(g):
        ga = _unbroadcast(matmul(g, swapaxes(b, -1, -2)), a.shape)
        gb = _unbroadcast(matmul(swapaxes(a, -1, -2), g), b.shape)
        return ga, gb

    return _make(data, "matmul", (a, b), rule)


def concat(parts, axis=0):
    parts = [_as_tensor(p) for p in parts]
    if not parts:
        raise DimensionError("concat: no operands")
    try:
        data = np.concatenate([p.data for p in parts], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"concat: {exc}")
    sizes = [p.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def rule(g):
        grads = []
        for i in range(len(parts)):
            key = [slice(None)] * g.ndim
            key[axis] = slice(int(offsets[i]), int(offsets[i + 1]))
            grads.append(getitem(g, tuple(key)))
        return tuple(grads)

    return _make(data, "concat", tuple(parts), rule)


def stack(parts, axis=0):
    pieces = []
    for p in parts:
        p = _as_tensor(p)
        pieces.append(reshape(p, p.shape[:axis] + (1,) + p.shape[axis:]))
    return concat(pieces, axis=axis)


def getitem(x, key):
    x = _as_tensor(x)
    try:
        data = np.array(x.data[key])
    except IndexError as exc:
        raise DimensionError(f"slice: {exc}")
    shape = x.shape
    return _make(data, "slice", (x,), lambda g: (_scatter(g, key, shape),))


def _scatter(g, key, shape):
    """Adjoint of getitem: place ``g`` at ``key`` inside zeros(shape)."""
    g = _as_tensor(g)
    buf = np.zeros(shape)
    np.add.at(buf, key, g.data)
    return _make(buf, "scatter", (g,), lambda gg: (getitem(gg, key),))


def reshape(x, shape):
    x = _as_tensor(x)
    if int(np.prod(shape)) != x.size and -1 not in tuple(np.atleast_1d(shape)):
        raise DimensionError(f"reshape: cannot view {x.shape} as {shape}")
    old = x.shape
    return _make(
        x.data.reshape(shape), "reshape", (x,), lambda g: (reshape(g, old),)
    )


def swapaxes(x, a1, a2):
    x = _as_tensor(x)
    return _make(
        np.swapaxes(x.data, a1, a2).copy(),
        "swapaxes",
        (x,),
        lambda g: (swapaxes(g, a1, a2),),
    )


def tsum(x, axis=None, keepdims=False):
    x = _as_tensor(x)
    data = np.sum(x.data, axis=axis, keepdims=keepdims)
    shape = x.shape

    def rule(g):
        if axis is None:
            return (mul(reshape(g, (1,) * len(shape)) if shape else g, ones(shape)),)
        axes = axis if isinstance(axis, tuple) else (axis,)
        axes = tuple(a % len(shape) for a in axes)
        if keepdims:
            gk = g
        else:
            kshape = tuple(1 if i in axes else n for i, n in enumerate(shape))
            gk = reshape(g, kshape)
        return (mul(gk, ones(shape)),)

    return _make(data, "sum", (x,), rule)


def tmean(x, axis=None, keepdims=False):
    x = _as_tensor(x)
    if axis is None:
        count = x.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([x.shape[a % x.ndim] for a in axes]))
    return mul(tsum(x, axis=axis, keepdims=keepdims), constant(1.0 / count))


def tanh(x):
    x = _as_tensor(x)
    out_data = np.tanh(x.data)
    out = _make(out_data, "tanh", (x,), None)
    if out.node is not None:
        out.node.rule = lambda g: (mul(g, sub(constant(1.0), mul(out, out))),)
    return out


def sigmoid(x):
    x = _as_tensor(x)
    d = x.data
    out_data = np.where(d >= 0, 1.0 / (1.0 + np.exp(-np.abs(d))),
                        np.exp(-np.abs(d)) / (1.0 + np.exp(-np.abs(d))))
    out = _make(out_data, "sigmoid", (x,), None)
    if out.node is not None:
        out.node.rule = lambda g: (mul(g, mul(out, sub(constant(1.0), out))),)
    return out


def relu(x):
    x = _as_tensor(x)
    mask = (x.data > 0).astype(np.float64)
    return _make(
        np.maximum(x.data, 0.0), "relu", (x,), lambda g: (mul(g, constant(mask)),)
    )


def leaky_relu(x, slope=0.2):
    x = _as_tensor(x)
    mask = np.where(x.data > 0, 1.0, slope)
    return _make(
        x.data * mask, "leaky_relu", (x,), lambda g: (mul(g, constant(mask)),)
    )


def exp(x):
    x = _as_tensor(x)
    out = _make(np.exp(x.data), "exp", (x,), None)
    if out.node is not None:
        out.node.rule = lambda g: (mul(g, out),)
    return out


def log(x):
    x = _as_tensor(x)
    if np.any(x.data <= 0.0):
        raise DomainError("log: non-positive operand")
    return _make(np.log(x.data), "log", (x,), lambda g: (div(g, x),))


def tabs(x):
    x = _as_tensor(x)
    sign = np.sign(x.data)
    return _make(
        np.abs(x.data), "abs", (x,), lambda g: (mul(g, constant(sign)),)
    )


def tpow(x, exponent):
    x = _as_tensor(x)
    e = float(exponent)
    if e != int(e) and np.any(x.data < 0.0):
        raise DomainError("pow: negative base with non-integer exponent")
    if e < 0 and np.any(x.data == 0.0):
        raise DomainError("pow: zero base with negative exponent")

    def rule(g):
        if e == 0.0:
            return (mul(g, constant(np.zeros(x.shape))),)
        return (mul(g, mul(constant(e), tpow(x, e - 1.0))),)

    return _make(np.power(x.data, e), "pow", (x,), rule)


def sqrt(x):
    return tpow(x, 0.5)


def where_const(mask, a, b):
    """Elementwise select by a constant boolean mask (piecewise glue)."""
    a, b = _as_tensor(a), _as_tensor(b)
    mask = np.asarray(mask, dtype=bool)
    m = mask.astype(np.float64)
    data = np.where(mask, a.data, b.data)

    def rule(g):
        ga = _unbroadcast(mul(g, constant(m)), a.shape)
        gb = _unbroadcast(mul(g, constant(1.0 - m)), b.shape)
        return ga, gb

    return _make(data, "where", (a, b), rule)


def dropout(x, p, rng):
    """Inverted dropout with a seeded mask; identity when p == 0."""
    if p <= 0.0:
        return x
    if p >= 1.0:
        raise ContractError("dropout: probability must be < 1")
    x = _as_tensor(x)
    keep = (rng.random(x.shape) >= p).astype(np.float64) / (1.0 - p)
    return mul(x, constant(keep))


# ---------------------------------------------------------------------------
# composites


def softmax(x, axis=-1):
    x = _as_tensor(x)
    m = constant(np.max(x.data, axis=axis, keepdims=True))
    e = exp(sub(x, m))
    return div(e, tsum(e, axis=axis, keepdims=True))


def layernorm(x, gain=None, bias=None, axis=-1, eps=1e-5):
    """Normalize to zero mean / unit variance along ``axis``, then affine."""
    x = _as_tensor(x)
    mu = tmean(x, axis=axis, keepdims=True)
    xc = sub(x, mu)
    var = tmean(mul(xc, xc), axis=axis, keepdims=True)
    y = div(xc, sqrt(add(var, constant(eps))))
    if gain is not None:
        y = mul(y, gain)
    if bias is not None:
        y = add(y, bias)
    return y


def l1norm(x):
    return tsum(tabs(x))


def l2norm(x):
    return sqrt(tsum(mul(x, x)))


def huber(a, b, threshold=1.0):
    """Mean Huber penalty of (a - b); quadratic inside ``threshold``."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"huber: shapes {a.shape} and {b.shape} differ")
    if threshold <= 0:
        raise ContractError("huber: threshold must be positive")
    d = sub(a, b)
    ad = tabs(d)
    quad = mul(constant(0.5), mul(d, d))
    lin = mul(constant(threshold), sub(ad, constant(0.5 * threshold)))
    return tmean(where_const(ad.data <= threshold, quad, lin))


_APPLY_TABLE = {
    "matmul": matmul,
    "add": add,
    "sub": sub,
    "mul": mul,
    "concat": lambda *ops, axis=0: concat(list(ops), axis=axis),
    "slice": lambda x, key: getitem(x, key),
    "mean": tmean,
    "sum": tsum,
    "tanh": tanh,
    "sigmoid": sigmoid,
    "relu": relu,
    "softmax": softmax,
    "layernorm": layernorm,
    "exp": exp,
    "log": log,
    "abs": tabs,
    "pow": tpow,
    "l1norm": l1norm,
    "l2norm": l2norm,
}


def apply(op_kind, *operands, **kwargs):
    """Dispatch a primitive by name; the functional surface of the engine."""
    try:
        fn = _APPLY_TABLE[op_kind]
    except KeyError:
        raise ContractError(f"apply: unknown op kind {op_kind!r}")
    return fn(*operands, **kwargs)


# ---------------------------------------------------------------------------
# reverse pass


def _topo_order(root):
    """Iterative post-order over the backward graph (acyclic by build)."""
    order, visited, stack = [], set(), [(root, False)]
    while stack:
        t, expanded = stack.pop()
        if expanded:
            order.append(t)
            continue
        if id(t) in visited:
            continue
        visited.add(id(t))
        stack.append((t, True))
        if t.node is not None:
            for p in t.node.parents:
                if id(p) not in visited:
                    stack.append((p, False))
    return order


def gradients(output, wrt, create_graph=False):
    """Gradients of a scalar ``output`` w.r.t. each tensor in ``wrt``.

    Untouched entries get zeros.  With ``create_graph`` the returned
    tensors are themselves differentiable.
    """
    output = _as_tensor(output)
    if output.size != 1:
        raise ContractError(f"gradients: output must be scalar, got {output.shape}")
    order = _topo_order(output)
    gmap = {id(output): Tensor(np.ones(output.shape))}
    ctx = no_grad() if not create_graph else _NullCtx()
    with ctx:
        for t in reversed(order):
            g = gmap.get(id(t))
            if g is None or t.node is None:
                continue
            parent_grads = t.node.rule(g)
            for p, pg in zip(t.node.parents, parent_grads):
                if pg is None or not p.requires_grad:
                    continue
                acc = gmap.get(id(p))
                gmap[id(p)] = pg if acc is None else add(acc, pg)
    return [gmap.get(id(w)) if gmap.get(id(w)) is not None else zeros_like(w)
            for w in wrt]


class _NullCtx:
    def __enter__(self):
        return self

    def __exit__(self, *exc):
        return False


def backward(loss, params=None):
    """Reverse pass from a scalar loss; fills ``.grad`` on tracked leaves.

    Returns a map from leaf tensor to its gradient; when ``params`` is
    given, every listed parameter appears in the map (zeros if the loss
    never touched it).
    """
    loss = _as_tensor(loss)
    if loss.size != 1:
        raise ContractError(f"backward: loss must be scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("backward: loss does not track gradients")
    leaves = [t for t in _topo_order(loss) if t.node is None and t.requires_grad]
    wrt = list(params) if params is not None else leaves
    grads = gradients(loss, wrt)
    out = {}
    for t, g in zip(wrt, grads):
        t.grad = g
        out[id(t)] = (t, g)
    return {t: g for t, g in out.values()}


def grad_check(f, params, epsilon=1e-5):
    """Max relative error between backward() and central differences.

    ``f`` must be a deterministic closure returning a scalar tensor;
    ``params`` maps names to leaf tensors that ``f`` reads.  Error is
    |analytic - numeric| / max(1, |analytic|), maximized over every
    coordinate of every parameter.
    """
    if not (1e-7 <= epsilon <= 1e-3):
        raise ContractError("grad_check: epsilon outside [1e-7, 1e-3]")
    items = list(params.items()) if isinstance(params, dict) else list(params)
    loss = f()
    analytic = gradients(loss, [p for _, p in items])
    worst = 0.0
    for (name, p), g in zip(items, analytic):
        ga = g.data
        if not np.all(np.isfinite(ga)):
            raise DomainError(f"grad_check: non-finite analytic gradient for {name!r}")
        flat = p.data
        for i in range(flat.size):
            orig = float(flat.flat[i])
            flat.flat[i] = orig + epsilon
            f_plus = f().item()
            flat.flat[i] = orig - epsilon
            f_minus = f().item()
            flat.flat[i] = orig
            if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                raise DomainError(
                    f"grad_check: non-finite evaluation perturbing {name!r}[{i}]"
                )
            numeric = (f_plus - f_minus) / (2.0 * epsilon)
            a = float(ga.flat[i])
            err = abs(a - numeric) / max(1.0, abs(a))
            if err > worst:
                worst = err
    return worst
