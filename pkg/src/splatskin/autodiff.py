"""Reverse-mode autodiff on a flat tape of dense float64 tensors.

Every trainable part of the pipeline records onto a Tape: each primitive
appends one node holding the op name, the ids of its inputs and the forward
value. backward() walks the nodes once in reverse order and accumulates
vector-Jacobian products into per-node adjoint buffers. Tapes recorded with
concrete leaf values are define-by-run (values are computed eagerly);
tapes built from placeholders stay symbolic until eval() is called.

All math is float64. Recorded tapes are immutable for replay purposes:
eval() never mutates the tape, so a recorded tape may be replayed from
several threads concurrently.
"""

import numpy as np

_DEBUG_CHECKS = False


def set_debug_checks(flag):
    """Enable per-op finiteness checks (slow; meant for tests)."""
    global _DEBUG_CHECKS
    _DEBUG_CHECKS = bool(flag)


class TapeError(Exception):
    """Structured tape failure; message names the offending node."""


# ---------------------------------------------------------------------------
# op registry
# ---------------------------------------------------------------------------

# name -> (forward, vjp)
#   forward(values, **kw) -> ndarray
#   vjp(grad, out_value, values, **kw) -> list of grads aligned with inputs
#     (None for inputs that receive no gradient)
_OPS = {}


def register_op(name, forward, vjp):
    if name in _OPS:
        raise ValueError(f"op {name!r} already registered")
    _OPS[name] = (forward, vjp)


def _unbroadcast(grad, shape):
    """Sum a broadcast gradient back down to `shape`."""
    if grad.shape == tuple(shape):
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _reg_binary(name, fwd, vjp_pair):
    def forward(vals):
        return fwd(vals[0], vals[1])

    def vjp(g, out, vals):
        ga, gb = vjp_pair(g, out, vals[0], vals[1])
        return [_unbroadcast(ga, vals[0].shape) if ga is not None else None,
                _unbroadcast(gb, vals[1].shape) if gb is not None else None]

    register_op(name, forward, vjp)


_reg_binary("add", lambda a, b: a + b, lambda g, o, a, b: (g, g))
_reg_binary("sub", lambda a, b: a - b, lambda g, o, a, b: (g, -g))
_reg_binary("mul", lambda a, b: a * b, lambda g, o, a, b: (g * b, g * a))
_reg_binary("div", lambda a, b: a / b,
             lambda g, o, a, b: (g / b, -g * a / (b * b)))

register_op("neg", lambda v: -v[0], lambda g, o, v: [-g])
register_op("exp", lambda v: np.exp(v[0]), lambda g, o, v: [g * o])
register_op("log", lambda v: np.log(v[0]), lambda g, o, v: [g / v[0]])
register_op("sqrt", lambda v: np.sqrt(v[0]), lambda g, o, v: [g * 0.5 / o])
register_op("tanh", lambda v: np.tanh(v[0]), lambda g, o, v: [g * (1.0 - o * o)])
register_op("sin", lambda v: np.sin(v[0]), lambda g, o, v: [g * np.cos(v[0])])
register_op("cos", lambda v: np.cos(v[0]), lambda g, o, v: [-g * np.sin(v[0])])


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


register_op("sigmoid", lambda v: _sigmoid(v[0]),
            lambda g, o, v: [g * o * (1.0 - o)])
register_op("softplus",
            lambda v: np.maximum(v[0], 0.0) + np.log1p(np.exp(-np.abs(v[0]))),
            lambda g, o, v: [g * _sigmoid(v[0])])
register_op("pow_const", lambda v, p: v[0] ** p,
            lambda g, o, v, p: [g * p * v[0] ** (p - 1.0)])
register_op("maximum_const", lambda v, c: np.maximum(v[0], c),
            lambda g, o, v, c: [g * (v[0] > c)])
register_op("minimum_const", lambda v, c: np.minimum(v[0], c),
            lambda g, o, v, c: [g * (v[0] < c)])


def _matmul_fwd(vals):
    a, b = vals
    if a.ndim < 2 or b.ndim < 2:
        raise TapeError("matmul requires operands with ndim >= 2")
    return np.matmul(a, b)


def _matmul_vjp(g, out, vals):
    a, b = vals
    ga = np.matmul(g, np.swapaxes(b, -1, -2))
    gb = np.matmul(np.swapaxes(a, -1, -2), g)
    return [_unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)]


register_op("matmul", _matmul_fwd, _matmul_vjp)

register_op("reshape", lambda v, shape: v[0].reshape(shape),
            lambda g, o, v, shape: [g.reshape(v[0].shape)])
register_op("transpose", lambda v, axes: np.transpose(v[0], axes),
            lambda g, o, v, axes: [np.transpose(g, np.argsort(axes))])


def _sum_fwd(vals, axis, keepdims):
    return vals[0].sum(axis=axis, keepdims=keepdims)


def _expand_reduced(g, x_shape, axis, keepdims):
    if axis is None:
        return np.broadcast_to(g, x_shape)
    if not keepdims:
        axes = axis if isinstance(axis, tuple) else (axis,)
        axes = tuple(a % len(x_shape) for a in axes)
        shp = [1 if i in axes else s for i, s in enumerate(x_shape)]
        g = g.reshape(shp)
    return np.broadcast_to(g, x_shape)


register_op("sum", _sum_fwd,
            lambda g, o, v, axis, keepdims:
            [_expand_reduced(np.asarray(g), v[0].shape, axis, keepdims).copy()])


def _mean_count(shape, axis):
    if axis is None:
        return int(np.prod(shape)) if shape else 1
    axes = axis if isinstance(axis, tuple) else (axis,)
    n = 1
    for a in axes:
        n *= shape[a % len(shape)]
    return n


register_op("mean", lambda v, axis, keepdims: v[0].mean(axis=axis, keepdims=keepdims),
            lambda g, o, v, axis, keepdims:
            [_expand_reduced(np.asarray(g), v[0].shape, axis, keepdims).copy()
             / _mean_count(v[0].shape, axis)])


def _l2norm_fwd(vals, axis, keepdims):
    return np.sqrt((vals[0] * vals[0]).sum(axis=axis, keepdims=keepdims))


def _l2norm_vjp(g, out, vals, axis, keepdims):
    x = vals[0]
    n = _expand_reduced(np.asarray(out), x.shape, axis, keepdims)
    gg = _expand_reduced(np.asarray(g), x.shape, axis, keepdims)
    return [gg * x / np.maximum(n, 1e-300)]


register_op("l2norm", _l2norm_fwd, _l2norm_vjp)


def _softmax_fwd(vals, axis):
    x = vals[0]
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


register_op("softmax", _softmax_fwd,
            lambda g, o, v, axis: [o * (g - (g * o).sum(axis=axis, keepdims=True))])


def _concat_vjp(g, out, vals, axis):
    grads, start = [], 0
    for x in vals:
        n = x.shape[axis]
        sl = [slice(None)] * g.ndim
        sl[axis] = slice(start, start + n)
        grads.append(g[tuple(sl)])
        start += n
    return grads


register_op("concat", lambda vals, axis: np.concatenate(vals, axis=axis), _concat_vjp)


def _getitem_vjp(g, out, vals, key):
    gx = np.zeros_like(vals[0])
    np.add.at(gx, key, g)
    return [gx]


register_op("getitem", lambda v, key: v[0][key], _getitem_vjp)


def _take_vjp(g, out, vals, indices):
    gx = np.zeros_like(vals[0])
    np.add.at(gx, np.asarray(indices), g)
    return [gx]


register_op("take", lambda v, indices: v[0][np.asarray(indices)], _take_vjp)


def _unfold_fwd(vals, kh, kw, stride):
    x = vals[0]
    h, w, c = x.shape
    oh = (h - kh) // stride + 1
    ow = (w - kw) // stride + 1
    win = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(0, 1))
    win = win[::stride, ::stride]                      # (oh, ow, c, kh, kw)
    win = np.transpose(win, (0, 1, 3, 4, 2))           # (oh, ow, kh, kw, c)
    return np.ascontiguousarray(win.reshape(oh * ow, kh * kw * c))


def _unfold_vjp(g, out, vals, kh, kw, stride):
    x = vals[0]
    h, w, c = x.shape
    oh = (h - kh) // stride + 1
    ow = (w - kw) // stride + 1
    g = g.reshape(oh, ow, kh, kw, c)
    gx = np.zeros_like(x)
    for i in range(kh):
        for j in range(kw):
            gx[i:i + stride * oh:stride, j:j + stride * ow:stride] += g[:, :, i, j]
    return [gx]


register_op("unfold", _unfold_fwd, _unfold_vjp)


# ---------------------------------------------------------------------------
# tape and tensors
# ---------------------------------------------------------------------------

class _Node:
    __slots__ = ("op", "inputs", "kwargs", "name")

    def __init__(self, op, inputs, kwargs, name=None):
        self.op = op
        self.inputs = inputs
        self.kwargs = kwargs
        self.name = name


class Tensor:
    """Handle to one node of a tape."""

    __slots__ = ("tape", "idx")

    # keep numpy from consuming us elementwise; reflected ops must run here
    __array_ufunc__ = None

    def __init__(self, tape, idx):
        self.tape = tape
        self.idx = idx

    @property
    def value(self):
        v = self.tape.values[self.idx]
        if v is None:
            raise TapeError(f"node {self.idx} has no value; call eval() first")
        return v

    @property
    def shape(self):
        return self.tape.shapes[self.idx]

    # arithmetic sugar; non-tensor operands are lifted to constants
    def __add__(self, other):
        return apply_op("add", self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return apply_op("sub", self, other)

    def __rsub__(self, other):
        return apply_op("sub", self.tape.constant(other), self)

    def __mul__(self, other):
        return apply_op("mul", self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return apply_op("div", self, other)

    def __rtruediv__(self, other):
        return apply_op("div", self.tape.constant(other), self)

    def __neg__(self):
        return apply_op("neg", self)

    def __pow__(self, p):
        return apply_op("pow_const", self, p=float(p))

    def __matmul__(self, other):
        return apply_op("matmul", self, other)

    def __getitem__(self, key):
        return apply_op("getitem", self, key=key)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return apply_op("reshape", self, shape=shape)

    def sum(self, axis=None, keepdims=False):
        return apply_op("sum", self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return apply_op("mean", self, axis=axis, keepdims=keepdims)

    @property
    def T(self):
        if len(self.shape) != 2:
            raise TapeError("T is defined for 2-D tensors only")
        return apply_op("transpose", self, axes=(1, 0))


class Tape:
    """Recorded computation: nodes reference strictly earlier nodes."""

    def __init__(self):
        self.nodes = []
        self.values = []
        self.shapes = []
        self.output_ids = []

    def _append(self, node, value, shape):
        self.nodes.append(node)
        self.values.append(value)
        self.shapes.append(shape)
        return Tensor(self, len(self.nodes) - 1)

    def leaf(self, name, value):
        """Named differentiable leaf with a concrete value."""
        value = np.asarray(value, dtype=np.float64)
        if not np.all(np.isfinite(value)):
            raise TapeError(f"leaf {name!r} contains non-finite entries")
        return self._append(_Node("leaf", (), {}, name), value, value.shape)

    def placeholder(self, name, shape):
        """Named leaf without a value; fill it via eval()."""
        return self._append(_Node("leaf", (), {}, name), None, tuple(shape))

    def constant(self, value):
        if isinstance(value, Tensor):
            return value
        value = np.asarray(value, dtype=np.float64)
        return self._append(_Node("const", (), {}), value, value.shape)

    def mark_output(self, tensor):
        self.output_ids.append(tensor.idx)
        return tensor

    def leaf_names(self):
        return [n.name for n in self.nodes if n.op == "leaf"]


def apply_op(op, *args, **kwargs):
    """Record one primitive. Tensor args must share a tape; scalars and
    arrays are lifted to constants on that tape."""
    tape = None
    for a in args:
        if isinstance(a, Tensor):
            tape = a.tape
            break
    if tape is None:
        raise TapeError(f"op {op!r} needs at least one Tensor argument")
    ids, vals, symbolic = [], [], False
    for a in args:
        if not isinstance(a, Tensor):
            a = tape.constant(a)
        elif a.tape is not tape:
            raise TapeError(f"op {op!r} mixes tensors from different tapes")
        ids.append(a.idx)
        v = tape.values[a.idx]
        vals.append(v)
        symbolic = symbolic or v is None
    forward, _ = _OPS[op]
    if symbolic:
        # shape inference by running the op on zeros of the input shapes
        probe = [np.zeros(tape.shapes[i]) for i in ids]
        shape = np.asarray(forward(probe, **kwargs)).shape
        value = None
    else:
        value = np.asarray(forward(vals, **kwargs))
        shape = value.shape
        if _DEBUG_CHECKS and not np.all(np.isfinite(value)):
            raise TapeError(f"op {op!r} produced non-finite values "
                            f"(node {len(tape.nodes)})")
    return tape._append(_Node(op, tuple(ids), kwargs), value, shape)


# ---------------------------------------------------------------------------
# evaluation and differentiation
# ---------------------------------------------------------------------------

def eval_tape(tape, inputs=None):
    """Replay a tape with fresh leaf values; returns the marked outputs
    (or the last node's value). The tape itself is not mutated, so replay
    is safe to run concurrently. Re-evaluation with identical inputs is
    bit-identical because the recorded op order is fixed."""
    inputs = dict(inputs or {})
    values = [None] * len(tape.nodes)
    for i, node in enumerate(tape.nodes):
        if node.op == "leaf":
            if node.name in inputs:
                v = np.asarray(inputs.pop(node.name), dtype=np.float64)
            else:
                v = tape.values[i]
            if v is None:
                raise TapeError(f"node {i}: leaf {node.name!r} has no value")
            if v.shape != tape.shapes[i]:
                raise TapeError(
                    f"node {i}: leaf {node.name!r} expects shape "
                    f"{tape.shapes[i]}, got {v.shape}")
            if not np.all(np.isfinite(v)):
                raise TapeError(f"node {i}: leaf {node.name!r} is non-finite")
            values[i] = v
        elif node.op == "const":
            values[i] = tape.values[i]
        else:
            forward, _ = _OPS[node.op]
            try:
                values[i] = np.asarray(
                    forward([values[j] for j in node.inputs], **node.kwargs))
            except Exception as exc:  # re-raise with node context
                raise TapeError(f"node {i} ({node.op}): {exc}") from exc
    if inputs:
        raise TapeError(f"unknown input names: {sorted(inputs)}")
    out_ids = tape.output_ids or [len(tape.nodes) - 1]
    return [values[i] for i in out_ids], values


def backward(tape, output, seed=None, values=None):
    """Accumulate vector-Jacobian products from `output` back to every leaf.

    Returns {leaf name: gradient}. `seed` defaults to ones of the output
    shape and must match it otherwise. Each node is visited exactly once,
    in reverse recording order.
    """
    if values is None:
        values = tape.values
    out_idx = output.idx if isinstance(output, Tensor) else int(output)
    if values[out_idx] is None:
        raise TapeError("backward before forward: run eval() first")
    out_val = values[out_idx]
    if seed is None:
        seed = np.ones_like(out_val)
    else:
        seed = np.asarray(seed, dtype=np.float64)
        if seed.shape != out_val.shape:
            raise TapeError(f"seed shape {seed.shape} does not match output "
                            f"shape {out_val.shape}")
    adjoints = [None] * len(tape.nodes)
    adjoints[out_idx] = seed
    grads = {}
    for i in range(out_idx, -1, -1):
        g = adjoints[i]
        adjoints[i] = None  # free as we go
        if g is None:
            continue
        node = tape.nodes[i]
        if node.op == "leaf":
            if node.name in grads:
                grads[node.name] = grads[node.name] + g
            else:
                grads[node.name] = g
            continue
        if node.op == "const":
            continue
        _, vjp = _OPS[node.op]
        in_vals = [values[j] for j in node.inputs]
        in_grads = vjp(g, values[i], in_vals, **node.kwargs)
        for j, gj in zip(node.inputs, in_grads):
            if gj is None:
                continue
            if adjoints[j] is None:
                adjoints[j] = np.asarray(gj, dtype=np.float64)
            else:
                adjoints[j] = adjoints[j] + gj
    return grads


def grad_check(fn, point, step=1e-5, coords=None):
    """Max relative error between the tape gradient of a scalar function
    and central finite differences.

    `fn(x)` gets a leaf Tensor named "x" and must return a scalar Tensor.
    Error per coordinate is |analytic - fd| / max(1, |analytic|); the max
    over the checked coordinates is returned. `coords` restricts the check
    to a subset of flat indices (all coordinates by default).
    """
    point = np.asarray(point, dtype=np.float64)

    def run(p):
        tape = Tape()
        x = tape.leaf("x", p)
        out = fn(x)
        v = out.value
        if v.size != 1:
            raise TapeError("grad_check needs a scalar-valued function")
        return tape, out, float(v.item())

    tape, out, f0 = run(point)
    if not np.isfinite(f0):
        raise TapeError("grad_check: non-finite function value")
    analytic = backward(tape, out)["x"].reshape(-1)
    flat = point.reshape(-1)
    if coords is None:
        coords = range(flat.size)
    worst = 0.0
    for i in coords:
        p = flat.copy()
        p[i] += step
        _, _, fp = run(p.reshape(point.shape))
        p[i] -= 2 * step
        _, _, fm = run(p.reshape(point.shape))
        fd = (fp - fm) / (2 * step)
        err = abs(analytic[i] - fd) / max(1.0, abs(analytic[i]))
        worst = max(worst, err)
    return worst


# ---------------------------------------------------------------------------
# functional wrappers
# ---------------------------------------------------------------------------

def exp(x):
    return apply_op("exp", x)


def log(x):
    return apply_op("log", x)


def sqrt(x):
    return apply_op("sqrt", x)


def tanh(x):
    return apply_op("tanh", x)


def sin(x):
    return apply_op("sin", x)


def cos(x):
    return apply_op("cos", x)


def sigmoid(x):
    return apply_op("sigmoid", x)


def softplus(x):
    return apply_op("softplus", x)


def square(x):
    return apply_op("pow_const", x, p=2.0)


def clamp_min(x, c):
    return apply_op("maximum_const", x, c=float(c))


def clamp_max(x, c):
    return apply_op("minimum_const", x, c=float(c))


def clamp(x, lo, hi):
    return clamp_max(clamp_min(x, lo), hi)


def matmul(a, b):
    return apply_op("matmul", a, b)


def transpose(x, axes):
    return apply_op("transpose", x, axes=tuple(axes))


def concat(tensors, axis=0):
    return apply_op("concat", *tensors, axis=axis)


def softmax(x, axis=-1):
    return apply_op("softmax", x, axis=axis)


def take(x, indices):
    return apply_op("take", x, indices=np.asarray(indices, dtype=np.intp))


def unfold(x, kh, kw, stride):
    return apply_op("unfold", x, kh=kh, kw=kw, stride=stride)


def l2norm(x, axis=-1, keepdims=False):
    return apply_op("l2norm", x, axis=axis, keepdims=keepdims)


def normalize(x, axis=-1):
    """x / ||x||; the norm is floored at 1e-30 so the zero vector maps to 0
    instead of NaN (callers that require unit output must check)."""
    n = l2norm(x, axis=axis, keepdims=True)
    return x / clamp_min(n, 1e-30)


def attention(q, k, v):
    """Scaled dot-product attention block: softmax(q kᵀ / sqrt(dk)) v."""
    dk = k.shape[-1]
    scores = matmul(q, transpose(k, _swap_last(k))) * (1.0 / np.sqrt(dk))
    return matmul(softmax(scores, axis=-1), v)


def _swap_last(t):
    n = len(t.shape)
    axes = list(range(n))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return tuple(axes)


# ---------------------------------------------------------------------------
# quaternions
# ---------------------------------------------------------------------------

def quat_to_rotmat(q):
    """Unit-quaternion (w, x, y, z) to a 3x3 rotation matrix (numpy path).

    Normalizes defensively; a zero-norm quaternion is an error. Accepts a
    single quaternion (4,) or a batch (N, 4).
    """
    q = np.asarray(q, dtype=np.float64)
    single = q.ndim == 1
    q = np.atleast_2d(q)
    n = np.linalg.norm(q, axis=-1, keepdims=True)
    if np.any(n < 1e-12):
        raise ValueError("zero-norm quaternion")
    w, x, y, z = (q / n).T
    R = np.empty(q.shape[:-1] + (3, 3))
    R[..., 0, 0] = 1 - 2 * (y * y + z * z)
    R[..., 0, 1] = 2 * (x * y - w * z)
    R[..., 0, 2] = 2 * (x * z + w * y)
    R[..., 1, 0] = 2 * (x * y + w * z)
    R[..., 1, 1] = 1 - 2 * (x * x + z * z)
    R[..., 1, 2] = 2 * (y * z - w * x)
    R[..., 2, 0] = 2 * (x * z - w * y)
    R[..., 2, 1] = 2 * (y * z + w * x)
    R[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return R[0] if single else R


def quat_to_rotmat_t(q):
    """Differentiable batched quaternion (N, 4) -> rotation matrices (N, 3, 3).

    Same convention as quat_to_rotmat, with defensive normalization on the
    tape so optimizer updates that break unit norm stay safe.
    """
    q = normalize(q, axis=-1)
    w, x, y, z = (q[:, 0:1], q[:, 1:2], q[:, 2:3], q[:, 3:4])
    one = 1.0
    rows = [
        one - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y),
        2.0 * (x * y + w * z), one - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x),
        2.0 * (x * z - w * y), 2.0 * (y * z + w * x), one - 2.0 * (x * x + y * y),
    ]
    flat = concat(rows, axis=1)  # (N, 9)
    return flat.reshape(flat.shape[0], 3, 3)
