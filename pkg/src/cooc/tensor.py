"""Dense tensors with reverse-mode differentiation on a recording tape.

Everything is backed by contiguous numpy arrays (f32 or f64). Operations
record themselves on the active tape; ``backward`` replays the tape in
reverse. ``stop_gradient`` cuts the tape, which is how the target network
branch of the training loss is kept gradient-free.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "tape",
    "no_grad",
    "is_recording",
    "add",
    "sub",
    "neg",
    "mul",
    "div",
    "pow_scalar",
    "sqrt",
    "exp",
    "matmul",
    "repeat_rows",
    "relu",
    "reshape",
    "transpose",
    "pad2d",
    "tensor_sum",
    "tensor_mean",
    "conv2d",
    "batch_norm",
    "BatchNormState",
    "max_pool2d",
    "avg_pool2d",
    "global_avg_pool",
    "pool",
    "log_softmax",
    "cosine_similarity",
    "stop_gradient",
    "backward",
    "gradient_check",
]


class Tensor:
    """A dense n-d array with an optional gradient slot."""

    __slots__ = ("data", "requires_grad", "grad", "_node")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._node = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else None

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return stop_gradient(self)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"

    # convenience arithmetic (kept thin; the module functions do the work)
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


class _Node:
    __slots__ = ("out", "parents", "backward_fn", "tape")

    def __init__(self, out, parents, backward_fn, tape_):
        self.out = out
        self.parents = parents
        self.backward_fn = backward_fn
        self.tape = tape_


class Tape:
    """Ordered record of primitive applications within one execution stream."""

    def __init__(self):
        self.nodes = []

    def __len__(self):
        return len(self.nodes)

    def __enter__(self):
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc):
        popped = _TAPE_STACK.pop()
        assert popped is self


_TAPE_STACK: list = []


def tape():
    """Open a fresh recording tape (context manager)."""
    return Tape()


class _NoGrad:
    def __enter__(self):
        _TAPE_STACK.append(None)
        return self

    def __exit__(self, *exc):
        _TAPE_STACK.pop()


def no_grad():
    """Suspend recording; ops inside produce constants."""
    return _NoGrad()


def is_recording():
    return bool(_TAPE_STACK) and _TAPE_STACK[-1] is not None


def _active_tape():
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def _as_tensor(x, like=None):
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _record(out_data, parents, backward_fn):
    t = _active_tape()
    track = t is not None and any(p.requires_grad for p in parents)
    out = Tensor(out_data, requires_grad=track)
    if track:
        node = _Node(out, parents, backward_fn, t)
        out._node = node
        t.nodes.append(node)
    return out


def _unbroadcast(grad, shape):
    """Reduce ``grad`` back to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise / reduction primitives
# ---------------------------------------------------------------------------

def add(a, b):
    a, b = _as_tensor(a, b if isinstance(b, Tensor) else None), _as_tensor(b, a if isinstance(a, Tensor) else None)
    out_data = a.data + b.data

    def bwd(gy, acc):
        acc(a, _unbroadcast(gy, a.data.shape))
        acc(b, _unbroadcast(gy, b.data.shape))

    return _record(out_data, [a, b], bwd)


def sub(a, b):
    a, b = _as_tensor(a, b if isinstance(b, Tensor) else None), _as_tensor(b, a if isinstance(a, Tensor) else None)
    out_data = a.data - b.data

    def bwd(gy, acc):
        acc(a, _unbroadcast(gy, a.data.shape))
        acc(b, _unbroadcast(-gy, b.data.shape))

    return _record(out_data, [a, b], bwd)


def neg(a):
    a = _as_tensor(a)

    def bwd(gy, acc):
        acc(a, -gy)

    return _record(-a.data, [a], bwd)


def mul(a, b):
    a, b = _as_tensor(a, b if isinstance(b, Tensor) else None), _as_tensor(b, a if isinstance(a, Tensor) else None)
    out_data = a.data * b.data

    def bwd(gy, acc):
        acc(a, _unbroadcast(gy * b.data, a.data.shape))
        acc(b, _unbroadcast(gy * a.data, b.data.shape))

    return _record(out_data, [a, b], bwd)


def div(a, b):
    a, b = _as_tensor(a, b if isinstance(b, Tensor) else None), _as_tensor(b, a if isinstance(a, Tensor) else None)
    out_data = a.data / b.data

    def bwd(gy, acc):
        acc(a, _unbroadcast(gy / b.data, a.data.shape))
        acc(b, _unbroadcast(-gy * a.data / (b.data * b.data), b.data.shape))

    return _record(out_data, [a, b], bwd)


def pow_scalar(a, p):
    a = _as_tensor(a)
    p = float(p)
    out_data = a.data ** p

    def bwd(gy, acc):
        acc(a, gy * p * a.data ** (p - 1.0))

    return _record(out_data, [a], bwd)


def sqrt(a):
    a = _as_tensor(a)
    out_data = np.sqrt(a.data)

    def bwd(gy, acc):
        # zero subgradient at sqrt(0); keeps zero-norm cosine rows finite
        denom = 2.0 * out_data
        with np.errstate(divide="ignore", invalid="ignore"):
            g = np.where(denom == 0.0, 0.0, gy / denom)
        acc(a, g)

    return _record(out_data, [a], bwd)


def exp(a):
    a = _as_tensor(a)
    out_data = np.exp(a.data)

    def bwd(gy, acc):
        acc(a, gy * out_data)

    return _record(out_data, [a], bwd)


def relu(a):
    a = _as_tensor(a)
    out_data = np.maximum(a.data, 0)

    def bwd(gy, acc):
        acc(a, gy * (a.data > 0))

    return _record(out_data, [a], bwd)


def reshape(a, shape):
    a = _as_tensor(a)
    shape = tuple(shape)
    old = a.data.shape

    def bwd(gy, acc):
        acc(a, gy.reshape(old))

    return _record(a.data.reshape(shape), [a], bwd)


def transpose(a, axes):
    a = _as_tensor(a)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def bwd(gy, acc):
        acc(a, np.ascontiguousarray(gy.transpose(inv)))

    return _record(np.ascontiguousarray(a.data.transpose(axes)), [a], bwd)


def tensor_sum(a, axis=None, keepdims=False):
    a = _as_tensor(a)
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def bwd(gy, acc):
        g = np.asarray(gy)
        if axis is not None and not keepdims:
            ax = axis if isinstance(axis, tuple) else (axis,)
            ax = tuple(x % a.data.ndim for x in ax)
            shape = [1 if i in ax else s for i, s in enumerate(a.data.shape)]
            g = g.reshape(shape)
        acc(a, np.broadcast_to(g, a.data.shape).astype(a.data.dtype, copy=False))

    return _record(out_data, [a], bwd)


def tensor_mean(a, axis=None, keepdims=False):
    a = _as_tensor(a)
    if axis is None:
        n = a.data.size
    else:
        ax = axis if isinstance(axis, tuple) else (axis,)
        n = int(np.prod([a.data.shape[i % a.data.ndim] for i in ax]))
    return mul(tensor_sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def repeat_rows(a, k):
    """Repeat each row of an (N, D) matrix k times, giving (N*k, D)."""
    a = _as_tensor(a)
    n, d = a.data.shape
    out_data = np.repeat(a.data, k, axis=0)

    def bwd(gy, acc):
        acc(a, gy.reshape(n, k, d).sum(axis=1))

    return _record(out_data, [a], bwd)


def matmul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ValueError(f"matmul expects 2-d operands, got {a.data.shape} @ {b.data.shape}")
    out_data = a.data @ b.data

    def bwd(gy, acc):
        acc(a, gy @ b.data.T)
        acc(b, a.data.T @ gy)

    return _record(out_data, [a, b], bwd)


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------

def _im2col(xp, kh, kw, stride, ho, wo):
    n, c, _, _ = xp.shape
    sn, sc, sh, sw = xp.strides
    windows = np.lib.stride_tricks.as_strided(
        xp,
        shape=(n, c, kh, kw, ho, wo),
        strides=(sn, sc, sh, sw, sh * stride, sw * stride),
        writeable=False,
    )
    return np.ascontiguousarray(windows.reshape(n, c * kh * kw, ho * wo))


def conv2d(x, weight, bias=None, stride=1, padding=0):
    """2-d cross-correlation over NCHW input with an OIKK kernel."""
    x, weight = _as_tensor(x), _as_tensor(weight)
    if bias is not None:
        bias = _as_tensor(bias)
    if x.data.ndim != 4:
        raise ValueError(f"conv2d input must be NCHW, got shape {x.data.shape}")
    if weight.data.ndim != 4:
        raise ValueError(f"conv2d weight must be OIKK, got shape {weight.data.shape}")
    n, c, h, w = x.data.shape
    o, ci, kh, kw = weight.data.shape
    if ci != c:
        raise ValueError(f"conv2d channel mismatch: input has {c}, weight expects {ci}")
    if stride < 1:
        raise ValueError(f"conv2d stride must be >= 1, got {stride}")
    if padding < 0:
        raise ValueError(f"conv2d padding must be >= 0, got {padding}")
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise ValueError(
            f"conv2d kernel {kh}x{kw} does not fit input {h}x{w} with padding {padding}"
        )

    if padding:
        xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    else:
        xp = x.data
    cols = _im2col(xp, kh, kw, stride, ho, wo)  # (n, c*kh*kw, ho*wo)
    wf = weight.data.reshape(o, c * kh * kw)
    out = np.matmul(wf[None], cols)  # (n, o, ho*wo)
    if bias is not None:
        out = out + bias.data.reshape(1, o, 1)
    out = out.reshape(n, o, ho, wo)

    parents = [x, weight] + ([bias] if bias is not None else [])

    def bwd(gy, acc):
        g = gy.reshape(n, o, ho * wo)
        if bias is not None:
            acc(bias, g.sum(axis=(0, 2)))
        if weight.requires_grad:
            dw = np.einsum("nol,ncl->oc", g, cols).reshape(weight.data.shape)
            acc(weight, dw)
        if x.requires_grad:
            dcols = np.matmul(wf.T[None], g)  # (n, c*kh*kw, ho*wo)
            dcols = dcols.reshape(n, c, kh, kw, ho, wo)
            dxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i : i + ho * stride : stride, j : j + wo * stride : stride] += dcols[:, :, i, j]
            if padding:
                dxp = dxp[:, :, padding : padding + h, padding : padding + w]
            acc(x, dxp)

    return _record(out, parents, bwd)


# ---------------------------------------------------------------------------
# batch normalization
# ---------------------------------------------------------------------------

class BatchNormState:
    """Running mean/var for one batch-norm layer."""

    def __init__(self, channels, dtype=np.float32, momentum=0.9):
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.momentum = momentum
        # array-backed so checkpoint restore can write it in place
        self.init_flag = np.zeros(1, dtype=np.int64)

    @property
    def initialized(self):
        return bool(self.init_flag[0])

    @initialized.setter
    def initialized(self, value):
        self.init_flag[0] = 1 if value else 0

    def set_identity(self):
        self.running_mean[:] = 0.0
        self.running_var[:] = 1.0
        self.initialized = True


def batch_norm(x, gamma, beta, state, mode="train", eps=1e-5):
    """Per-channel normalization over (N, H, W) of an NCHW tensor."""
    x, gamma, beta = _as_tensor(x), _as_tensor(gamma), _as_tensor(beta)
    if eps <= 0:
        raise ValueError("batch_norm eps must be positive")
    n, c, h, w = x.data.shape
    if gamma.data.shape != (c,) or beta.data.shape != (c,):
        raise ValueError(f"batch_norm affine parameters must have shape ({c},)")
    if mode not in ("train", "eval"):
        raise ValueError(f"unknown batch_norm mode {mode!r}")

    if mode == "eval":
        if not state.initialized:
            raise RuntimeError("batch_norm eval mode requires initialized running statistics")
        inv_std = 1.0 / np.sqrt(state.running_var + eps)
        xhat = (x.data - state.running_mean.reshape(1, c, 1, 1)) * inv_std.reshape(1, c, 1, 1)
        out = gamma.data.reshape(1, c, 1, 1) * xhat + beta.data.reshape(1, c, 1, 1)

        def bwd_eval(gy, acc):
            acc(gamma, (gy * xhat).sum(axis=(0, 2, 3)))
            acc(beta, gy.sum(axis=(0, 2, 3)))
            acc(x, gy * (gamma.data * inv_std).reshape(1, c, 1, 1))

        return _record(out, [x, gamma, beta], bwd_eval)

    cnt = n * h * w
    mean = x.data.mean(axis=(0, 2, 3))
    var = x.data.var(axis=(0, 2, 3))  # biased, used for normalization
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean.reshape(1, c, 1, 1)) * inv_std.reshape(1, c, 1, 1)
    out = gamma.data.reshape(1, c, 1, 1) * xhat + beta.data.reshape(1, c, 1, 1)

    m = state.momentum if state.initialized else 0.0
    unbiased = var * cnt / max(cnt - 1, 1)
    state.running_mean *= m
    state.running_mean += (1.0 - m) * mean.astype(state.running_mean.dtype)
    state.running_var *= m
    state.running_var += (1.0 - m) * unbiased.astype(state.running_var.dtype)
    state.initialized = True

    def bwd(gy, acc):
        acc(gamma, (gy * xhat).sum(axis=(0, 2, 3)))
        acc(beta, gy.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            dxhat = gy * gamma.data.reshape(1, c, 1, 1)
            s1 = dxhat.sum(axis=(0, 2, 3), keepdims=True)
            s2 = (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
            dx = (dxhat - s1 / cnt - xhat * s2 / cnt) * inv_std.reshape(1, c, 1, 1)
            acc(x, dx)

    return _record(out, [x, gamma, beta], bwd)


# ---------------------------------------------------------------------------
# pooling
# ---------------------------------------------------------------------------

def max_pool2d(x, kernel, stride):
    x = _as_tensor(x)
    n, c, h, w = x.data.shape
    if kernel < 1 or stride < 1:
        raise ValueError("max_pool2d kernel and stride must be >= 1")
    if kernel > h or kernel > w:
        raise ValueError(f"max_pool2d kernel {kernel} larger than input {h}x{w}")
    ho = (h - kernel) // stride + 1
    wo = (w - kernel) // stride + 1
    sn, sc, sh, sw = x.data.strides
    windows = np.lib.stride_tricks.as_strided(
        x.data,
        shape=(n, c, ho, wo, kernel, kernel),
        strides=(sn, sc, sh * stride, sw * stride, sh, sw),
        writeable=False,
    )
    flat = windows.reshape(n, c, ho, wo, kernel * kernel)
    arg = flat.argmax(axis=4)
    out = np.take_along_axis(flat, arg[..., None], axis=4)[..., 0]

    def bwd(gy, acc):
        dx = np.zeros_like(x.data)
        ki, kj = np.divmod(arg, kernel)
        ii = (np.arange(ho) * stride).reshape(1, 1, ho, 1) + ki
        jj = (np.arange(wo) * stride).reshape(1, 1, 1, wo) + kj
        nn = np.arange(n).reshape(n, 1, 1, 1)
        cc = np.arange(c).reshape(1, c, 1, 1)
        np.add.at(dx, (np.broadcast_to(nn, arg.shape), np.broadcast_to(cc, arg.shape), ii, jj), gy)
        acc(x, dx)

    return _record(np.ascontiguousarray(out), [x], bwd)


def avg_pool2d(x, kernel, stride=None):
    x = _as_tensor(x)
    stride = kernel if stride is None else stride
    n, c, h, w = x.data.shape
    if kernel > h or kernel > w:
        raise ValueError(f"avg_pool2d kernel {kernel} larger than input {h}x{w}")
    ho = (h - kernel) // stride + 1
    wo = (w - kernel) // stride + 1
    sn, sc, sh, sw = x.data.strides
    windows = np.lib.stride_tricks.as_strided(
        x.data,
        shape=(n, c, ho, wo, kernel, kernel),
        strides=(sn, sc, sh * stride, sw * stride, sh, sw),
        writeable=False,
    )
    out = windows.mean(axis=(4, 5))
    inv = 1.0 / (kernel * kernel)

    def bwd(gy, acc):
        dx = np.zeros_like(x.data)
        g = gy * inv
        for i in range(kernel):
            for j in range(kernel):
                dx[:, :, i : i + ho * stride : stride, j : j + wo * stride : stride] += g
        acc(x, dx)

    return _record(np.ascontiguousarray(out), [x], bwd)


def pad2d(x, pad, value=0.0):
    """Constant-pad the two trailing spatial dims of an NCHW tensor."""
    x = _as_tensor(x)
    if pad == 0:
        return x
    n, c, h, w = x.data.shape
    out = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad)), constant_values=value)

    def bwd(gy, acc):
        acc(x, gy[:, :, pad : pad + h, pad : pad + w])

    return _record(out, [x], bwd)


def global_avg_pool(x):
    """Spatial mean of an NCHW tensor, returning N x C."""
    x = _as_tensor(x)
    n, c, h, w = x.data.shape
    return reshape(tensor_mean(x, axis=(2, 3)), (n, c))


def pool(x, kind, kernel=None, stride=None):
    """Spec-level pooling entry point: kind is 'max' or 'global_avg'."""
    if kind == "global_avg":
        return global_avg_pool(x)
    if kind == "max":
        if kernel is None:
            raise ValueError("max pooling requires a kernel size")
        return max_pool2d(x, kernel, stride if stride is not None else kernel)
    raise ValueError(f"unknown pooling kind {kind!r}")


# ---------------------------------------------------------------------------
# classification / similarity helpers
# ---------------------------------------------------------------------------

def log_softmax(x):
    x = _as_tensor(x)
    shifted = x.data - x.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    out = shifted - lse
    soft = np.exp(out)

    def bwd(gy, acc):
        acc(x, gy - soft * gy.sum(axis=1, keepdims=True))

    return _record(out, [x], bwd)


def cosine_similarity(a, b, eps=1e-8):
    """Per-row cosine between two matrices of row vectors."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.shape[-1] != b.data.shape[-1]:
        raise ValueError(
            f"cosine_similarity trailing dimension mismatch: {a.data.shape} vs {b.data.shape}"
        )
    dot = tensor_sum(mul(a, b), axis=-1)
    na = sqrt(tensor_sum(mul(a, a), axis=-1))
    nb = sqrt(tensor_sum(mul(b, b), axis=-1))
    return div(dot, mul(add(na, eps), add(nb, eps)))


def stop_gradient(x):
    """Tape cut: the returned tensor carries the same values, no history."""
    x = _as_tensor(x)
    return Tensor(x.data.copy(), requires_grad=False)


# ---------------------------------------------------------------------------
# backward pass and the finite-difference oracle
# ---------------------------------------------------------------------------

def backward(loss):
    """Populate grad slots of every requires_grad tensor reachable from ``loss``."""
    if not isinstance(loss, Tensor):
        raise TypeError("backward expects a Tensor")
    if loss.data.size != 1:
        raise ValueError(f"backward expects a scalar loss, got shape {loss.data.shape}")
    if loss._node is None:
        raise RuntimeError("backward called on a tensor that is not on the tape")
    t = loss._node.tape
    grads = {id(loss): np.ones_like(loss.data)}

    def acc_into(tensor_, g):
        if not tensor_.requires_grad:
            return
        key = id(tensor_)
        g = np.asarray(g, dtype=tensor_.data.dtype)
        if key in grads:
            grads[key] = grads[key] + g
        else:
            grads[key] = g.copy() if g.base is not None else g
        if tensor_._node is None:  # leaf
            tensor_.grad = Tensor(grads[key])

    start = t.nodes.index(loss._node)
    for node in reversed(t.nodes[: start + 1]):
        gy = grads.pop(id(node.out), None)
        if gy is None:
            continue
        node.backward_fn(gy, acc_into)


def gradient_check(f, inputs, h=1e-5, max_samples=50, rng=None):
    """Max relative error between analytic gradients of ``f`` and central differences.

    ``f`` takes the given tensors and returns a scalar Tensor. Inputs should
    be f64 for the oracle to be meaningful.
    """
    rng = rng or np.random.default_rng(0)
    inputs = list(inputs)
    for t_ in inputs:
        t_.requires_grad = True
        t_.grad = None
    with tape():
        out = f(*inputs)
        if not isinstance(out, Tensor) or out.data.size != 1:
            raise ValueError("gradient_check requires a scalar-valued function")
        backward(out)
    analytic = [
        t_.grad.data.copy() if t_.grad is not None else np.zeros_like(t_.data)
        for t_ in inputs
    ]

    def eval_f():
        with no_grad():
            return float(f(*inputs).data.reshape(()))

    worst = 0.0
    for t_, ga in zip(inputs, analytic):
        flat = t_.data.reshape(-1)
        n = flat.size
        idxs = np.arange(n) if n <= max_samples else rng.choice(n, size=max_samples, replace=False)
        for i in idxs:
            orig = flat[i]
            flat[i] = orig + h
            fp = eval_f()
            flat[i] = orig - h
            fm = eval_f()
            flat[i] = orig
            cd = (fp - fm) / (2.0 * h)
            an = float(ga.reshape(-1)[i])
            # resolution limit of the central difference itself; differences
            # below it are roundoff, not disagreement
            noise = 16.0 * np.finfo(np.float64).eps * max(abs(fp), abs(fm), 1.0) / (2.0 * h)
            if abs(an - cd) <= noise:
                continue
            rel = abs(an - cd) / max(abs(an), abs(cd), 1e-8)
            worst = max(worst, rel)
    return worst
