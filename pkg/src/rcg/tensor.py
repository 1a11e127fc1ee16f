"""Dense tensors with reverse-mode automatic differentiation.

Every trainable piece of the system runs on this module: values are numpy
arrays, operations are recorded on an explicit Tape, and backward() replays
the tape in reverse to accumulate gradients into Parameters.  Training uses
float32; gradient checking uses float64 (finite-difference noise at 32-bit
masks real bugs).
"""
from __future__ import annotations

import numpy as np

DEFAULT_DTYPE = np.float32

_tape_stack: list["Tape"] = []


def active_tape():
    """The innermost open Tape, or None when recording is off."""
    return _tape_stack[-1] if _tape_stack else None


class Tape:
    """Ordered record of operations; every node's inputs precede it."""

    def __init__(self):
        self.nodes = []

    def __enter__(self):
        _tape_stack.append(self)
        return self

    def __exit__(self, *exc):
        _tape_stack.pop()
        return False


class _Node:
    __slots__ = ("out", "inputs", "vjp", "kind")

    def __init__(self, out, inputs, vjp, kind):
        self.out = out
        self.inputs = inputs
        self.vjp = vjp
        self.kind = kind


class Tensor:
    """A dense row-major array value, optionally tracked for gradients."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, dtype=None, requires_grad=False):
        if dtype is None:
            if isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64):
                dtype = data.dtype
            else:
                dtype = DEFAULT_DTYPE
        self.data = np.asarray(data, dtype=dtype)
        self.grad = None
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    def item(self):
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype.name})"

    # operator sugar over apply()
    def __add__(self, other):
        return apply("add", self, _as_tensor(other, self))

    def __sub__(self, other):
        return apply("sub", self, _as_tensor(other, self))

    def __mul__(self, other):
        return apply("mul", self, _as_tensor(other, self))

    def __neg__(self):
        return apply("neg", self)

    def __matmul__(self, other):
        return apply("matmul", self, other)

    def sum(self, axis=None, keepdims=False):
        return apply("sum", self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return apply("mean", self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return apply("reshape", self, shape=shape)

    def transpose(self):
        return apply("transpose", self)


class Parameter(Tensor):
    """Named leaf tensor with a persistent gradient slot."""

    __slots__ = ("name",)

    def __init__(self, name, data, dtype=None):
        super().__init__(data, dtype=dtype, requires_grad=True)
        self.name = name
        self.grad = np.zeros_like(self.data)

    def zero_grad(self):
        self.grad[...] = 0.0

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.data.shape})"


def _as_tensor(x, like):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


def constant(data, dtype=DEFAULT_DTYPE):
    """Wrap raw data as an untracked tensor."""
    return Tensor(np.asarray(data, dtype=dtype))


# ---------------------------------------------------------------------------
# op registry: each op maps input arrays -> (output array, vjp)
# vjp(g) returns one cotangent per input (None where no gradient flows)
# ---------------------------------------------------------------------------

def _unbroadcast(g, shape):
    """Sum g back down to `shape` after numpy broadcasting."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, size in enumerate(shape):
        if size == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _op_add(inputs, attrs):
    a, b = inputs
    out = a + b

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return out, vjp


def _op_sub(inputs, attrs):
    a, b = inputs
    out = a - b

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return out, vjp


def _op_mul(inputs, attrs):
    a, b = inputs
    out = a * b

    def vjp(g):
        return _unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)

    return out, vjp


def _op_neg(inputs, attrs):
    (a,) = inputs
    return -a, lambda g: (-g,)


def _op_matmul(inputs, attrs):
    a, b = inputs
    if b.ndim == 2:
        if a.shape[-1] != b.shape[0]:
            raise ValueError(f"inner dims differ: {a.shape} vs {b.shape}")
        out = a @ b

        def vjp(g):
            ga = g @ b.T
            a2 = a.reshape(-1, a.shape[-1])
            g2 = g.reshape(-1, b.shape[1])
            return ga, a2.T @ g2

        return out, vjp
    if b.ndim == 1:
        if a.shape[-1] != b.shape[0]:
            raise ValueError(f"inner dims differ: {a.shape} vs {b.shape}")
        out = a @ b

        def vjp(g):
            ga = g[..., None] * b
            a2 = a.reshape(-1, a.shape[-1])
            return ga, a2.T @ g.reshape(-1)

        return out, vjp
    raise ValueError(f"right operand must be rank 1 or 2, got {b.shape}")


def _op_concat(inputs, attrs):
    ref = inputs[0]
    for x in inputs[1:]:
        if x.shape[:-1] != ref.shape[:-1]:
            raise ValueError(f"leading dims differ: {[i.shape for i in inputs]}")
    out = np.concatenate(inputs, axis=-1)
    sizes = [x.shape[-1] for x in inputs]

    def vjp(g):
        grads, start = [], 0
        for size in sizes:
            grads.append(g[..., start:start + size])
            start += size
        return tuple(grads)

    return out, vjp


def _op_sigmoid(inputs, attrs):
    (x,) = inputs
    out = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                   np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    out = out.astype(x.dtype)

    def vjp(g):
        return (g * out * (1.0 - out),)

    return out, vjp


def _op_tanh(inputs, attrs):
    (x,) = inputs
    out = np.tanh(x)

    def vjp(g):
        return (g * (1.0 - out * out),)

    return out, vjp


def _op_relu(inputs, attrs):
    (x,) = inputs
    out = np.maximum(x, 0.0)

    def vjp(g):
        return (g * (x > 0),)

    return out, vjp


def _op_softmax(inputs, attrs):
    (x,) = inputs
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        dot = (g * out).sum(axis=-1, keepdims=True)
        return (out * (g - dot),)

    return out, vjp


def _op_log(inputs, attrs):
    (x,) = inputs
    out = np.log(x)

    def vjp(g):
        return (g / x,)

    return out, vjp


def _norm_axis(axis, ndim):
    if axis is None:
        return None
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def _op_sum(inputs, attrs):
    (x,) = inputs
    axis = _norm_axis(attrs.get("axis"), x.ndim)
    keepdims = attrs.get("keepdims", False)
    out = x.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, x.shape).astype(x.dtype, copy=True),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, x.shape).astype(x.dtype, copy=True),)

    return out, vjp


def _op_mean(inputs, attrs):
    (x,) = inputs
    axis = _norm_axis(attrs.get("axis"), x.ndim)
    keepdims = attrs.get("keepdims", False)
    out = x.mean(axis=axis, keepdims=keepdims)
    count = x.size if axis is None else int(np.prod([x.shape[a] for a in axis]))

    def vjp(g):
        if axis is None:
            gg = np.broadcast_to(g, x.shape)
        else:
            gg = g if keepdims else np.expand_dims(g, axis)
            gg = np.broadcast_to(gg, x.shape)
        return ((gg / count).astype(x.dtype),)

    return out, vjp


def _op_max_last(inputs, attrs):
    (x,) = inputs
    idx = x.argmax(axis=-1)
    out = np.take_along_axis(x, idx[..., None], axis=-1)[..., 0]

    def vjp(g):
        gx = np.zeros_like(x)
        np.put_along_axis(gx, idx[..., None], g[..., None], axis=-1)
        return (gx,)

    return out, vjp


def _op_l2_normalize(inputs, attrs):
    (x,) = inputs
    norm = np.sqrt((x * x).sum(axis=-1, keepdims=True))
    if np.any(norm == 0.0):
        raise ValueError("cannot normalize a zero vector")
    out = x / norm

    def vjp(g):
        dot = (g * x).sum(axis=-1, keepdims=True)
        return (g / norm - x * (dot / norm ** 3),)

    return out, vjp


def _op_scatter_add(inputs, attrs):
    (values,) = inputs
    index = np.asarray(attrs["index"], dtype=np.int64)
    size = int(attrs["size"])
    if index.shape != values.shape:
        raise ValueError(f"index shape {index.shape} != values shape {values.shape}")
    if index.min() < 0 or index.max() >= size:
        raise ValueError(f"index out of range for size {size}")
    lead = values.shape[:-1]
    v2 = values.reshape(-1, values.shape[-1])
    i2 = index.reshape(-1, values.shape[-1])
    out2 = np.zeros((v2.shape[0], size), dtype=values.dtype)
    rows = np.repeat(np.arange(v2.shape[0]), v2.shape[1])
    # duplicate target indices accumulate
    np.add.at(out2, (rows, i2.reshape(-1)), v2.reshape(-1))
    out = out2.reshape(lead + (size,))

    def vjp(g):
        g2 = g.reshape(-1, size)
        gv = g2[rows, i2.reshape(-1)].reshape(values.shape)
        return (gv,)

    return out, vjp


def _op_gather_rows(inputs, attrs):
    (table,) = inputs
    ids = np.asarray(attrs["ids"], dtype=np.int64)
    if table.ndim != 2:
        raise ValueError(f"table must be rank 2, got {table.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ValueError(f"row id out of range for table with {table.shape[0]} rows")
    out = table[ids]

    def vjp(g):
        gt = np.zeros_like(table)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (gt,)

    return out, vjp


def _op_gather_last(inputs, attrs):
    (x,) = inputs
    ids = np.asarray(attrs["ids"], dtype=np.int64)
    if ids.shape != x.shape[:-1]:
        raise ValueError(f"ids shape {ids.shape} != leading shape {x.shape[:-1]}")
    out = np.take_along_axis(x, ids[..., None], axis=-1)[..., 0]

    def vjp(g):
        gx = np.zeros_like(x)
        g2 = gx.reshape(-1, x.shape[-1])
        rows = np.arange(g2.shape[0])
        np.add.at(g2, (rows, ids.reshape(-1)), g.reshape(-1))
        return (g2.reshape(x.shape),)

    return out, vjp


def _op_masked_fill(inputs, attrs):
    (x,) = inputs
    mask = np.broadcast_to(np.asarray(attrs["mask"], dtype=bool), x.shape)
    value = attrs["value"]
    out = np.where(mask, np.asarray(value, dtype=x.dtype), x)

    def vjp(g):
        return (g * ~mask,)

    return out, vjp


def _op_slice_last(inputs, attrs):
    (x,) = inputs
    start, stop = attrs["start"], attrs["stop"]
    out = x[..., start:stop]

    def vjp(g):
        gx = np.zeros_like(x)
        gx[..., start:stop] = g
        return (gx,)

    return out, vjp


def _op_clamp_min(inputs, attrs):
    (x,) = inputs
    value = attrs["value"]
    out = np.maximum(x, value)

    def vjp(g):
        return (g * (x >= value),)

    return out, vjp


def _op_reshape(inputs, attrs):
    (x,) = inputs
    shape = attrs["shape"]
    out = x.reshape(shape)

    def vjp(g):
        return (g.reshape(x.shape),)

    return out, vjp


def _op_transpose(inputs, attrs):
    (x,) = inputs
    if x.ndim != 2:
        raise ValueError(f"transpose expects rank 2, got {x.shape}")
    out = x.T.copy()

    def vjp(g):
        return (g.T,)

    return out, vjp


def _op_repeat_rows(inputs, attrs):
    (x,) = inputs
    times = int(attrs["times"])
    out = np.repeat(x, times, axis=0)

    def vjp(g):
        return (g.reshape((x.shape[0], times) + x.shape[1:]).sum(axis=1),)

    return out, vjp


_OPS = {
    "add": _op_add,
    "sub": _op_sub,
    "mul": _op_mul,
    "neg": _op_neg,
    "matmul": _op_matmul,
    "concat-last-axis": _op_concat,
    "sigmoid": _op_sigmoid,
    "tanh": _op_tanh,
    "relu": _op_relu,
    "softmax-last-axis": _op_softmax,
    "log": _op_log,
    "sum": _op_sum,
    "mean": _op_mean,
    "max-last-axis": _op_max_last,
    "l2-normalize-last-axis": _op_l2_normalize,
    "scatter-add": _op_scatter_add,
    "gather-rows": _op_gather_rows,
    "gather-last": _op_gather_last,
    "masked-fill": _op_masked_fill,
    "slice-last-axis": _op_slice_last,
    "clamp-min": _op_clamp_min,
    "reshape": _op_reshape,
    "transpose": _op_transpose,
    "repeat-rows": _op_repeat_rows,
}


def apply(kind, *inputs, **attrs):
    """Run one op forward and record it on the active tape.

    Inputs are Tensors; structural arguments (indices, masks, sizes) go in
    attrs as plain arrays/ints and receive no gradient.
    """
    if kind not in _OPS:
        raise ValueError(f"unknown op kind {kind!r}")
    datas = tuple(x.data for x in inputs)
    try:
        out_data, vjp = _OPS[kind](datas, attrs)
    except ValueError as e:
        shapes = [d.shape for d in datas]
        raise ValueError(f"{kind}: {e} (input shapes {shapes})") from None
    out = Tensor(out_data, dtype=out_data.dtype)
    out.requires_grad = any(x.requires_grad for x in inputs)
    tape = active_tape()
    if tape is not None and out.requires_grad:
        tape.nodes.append(_Node(out, inputs, vjp, kind))
    return out


def backward(tape, loss):
    """Accumulate d(loss)/d(input) into every tensor reachable from loss."""
    if loss.data.size != 1:
        raise ValueError(f"loss must be scalar, got shape {loss.data.shape}")
    loss.grad = np.ones_like(loss.data)
    for node in reversed(tape.nodes):
        g = node.out.grad
        if g is None:
            continue
        grads = node.vjp(g)
        for tensor, grad in zip(node.inputs, grads):
            if grad is None or not tensor.requires_grad:
                continue
            if tensor.grad is None:
                tensor.grad = np.zeros_like(tensor.data)
            tensor.grad += grad.astype(tensor.data.dtype, copy=False)


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

def grad_check(build_loss, params, tolerance=1e-4, eps=1e-5):
    """Compare tape gradients against central finite differences.

    build_loss() must reconstruct the scalar loss from the current values of
    `params`.  Relative error uses |a-n| / max(1e-8, |a|+|n|).  Returns a
    report dict with the worst offender; report["passed"] is the verdict.
    """
    for p in params:
        p.zero_grad()
    with Tape() as tape:
        loss = build_loss()
    if loss.data.size != 1:
        raise ValueError("grad_check requires a scalar loss")
    backward(tape, loss)
    analytic = [p.grad.copy() for p in params]

    report = {"max_rel_err": 0.0, "worst_param": None, "worst_index": None,
              "passed": True, "elements": 0}
    for p, ana in zip(params, analytic):
        flat = p.data.reshape(-1)
        ana_flat = ana.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = float(build_loss().data)
            flat[i] = orig - eps
            f_minus = float(build_loss().data)
            flat[i] = orig
            num = (f_plus - f_minus) / (2.0 * eps)
            a = float(ana_flat[i])
            if not (np.isfinite(a) and np.isfinite(num)):
                report.update(max_rel_err=np.inf, worst_param=p.name,
                              worst_index=i, passed=False)
                return report
            rel = abs(a - num) / max(1e-8, abs(a) + abs(num))
            report["elements"] += 1
            if rel > report["max_rel_err"]:
                report.update(max_rel_err=rel, worst_param=p.name, worst_index=i)
    report["passed"] = report["max_rel_err"] <= tolerance
    return report


# ---------------------------------------------------------------------------
# optimization
# ---------------------------------------------------------------------------

class Adam:
    """Adam with bias correction; moments persist per parameter."""

    def __init__(self, params, lr=2e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def step(self, lr=None):
        lr = self.lr if lr is None else lr
        self.t += 1
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            if not np.all(np.isfinite(g)):
                raise FloatingPointError(f"non-finite gradient in {p.name!r}")
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            m_hat = m / (1.0 - self.beta1 ** self.t)
            v_hat = v / (1.0 - self.beta2 ** self.t)
            p.data -= (lr * m_hat / (np.sqrt(v_hat) + self.eps)).astype(p.data.dtype)

    def state_arrays(self, names):
        """Moment arrays keyed for checkpointing; names align with params."""
        out = {"adam.t": np.array([float(self.t)], dtype=np.float64)}
        for name, m, v in zip(names, self.m, self.v):
            out[f"adam.m.{name}"] = m
            out[f"adam.v.{name}"] = v
        return out

    def load_state_arrays(self, names, arrays):
        self.t = int(arrays["adam.t"][0])
        for i, name in enumerate(names):
            self.m[i] = arrays[f"adam.m.{name}"].astype(self.m[i].dtype)
            self.v[i] = arrays[f"adam.v.{name}"].astype(self.v[i].dtype)


def adam_step(params, lr, beta1=0.9, beta2=0.999, eps=1e-8, state=None):
    """One functional Adam update; returns the optimizer holding the moments."""
    if state is None:
        state = Adam(params, lr=lr, beta1=beta1, beta2=beta2, eps=eps)
    state.step(lr=lr)
    return state


def clip_global_norm(params, max_norm):
    """Scale all gradients so their joint L2 norm is at most max_norm."""
    total = 0.0
    for p in params:
        total += float((p.grad.astype(np.float64) ** 2).sum())
    norm = np.sqrt(total)
    if norm > max_norm and norm > 0.0:
        scale = max_norm / norm
        for p in params:
            p.grad *= scale
    return norm


# ---------------------------------------------------------------------------
# initialization
# ---------------------------------------------------------------------------

def xavier_uniform(rng, shape, dtype=DEFAULT_DTYPE):
    """Uniform in +/- sqrt(6/(fan_in+fan_out)); vectors count fan_out=1."""
    if len(shape) >= 2:
        fan_in, fan_out = shape[0], shape[1]
    else:
        fan_in, fan_out = shape[0], 1
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape).astype(dtype)
