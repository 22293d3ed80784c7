"""Dense-tensor numeric core with reverse-mode automatic differentiation.

Feature maps use the NCHW layout.  Every operation records its tensor
inputs and a backward closure on its output; calling ``backward()`` on a
scalar replays the recording in reverse topological order.  Gradient
accumulation order is fixed by the graph structure, so identical inputs
produce bitwise-identical gradients across runs.

Training uses single precision, verification double; ops keep the dtype
of their inputs and refuse to mix the two.
"""

import contextlib

import numpy as np

from .errors import ConfigurationError, ContractViolation, NumericError

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference, finite differences)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled():
    return _grad_enabled


class Tensor:
    """A dense real array plus the bookkeeping needed for backprop."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_prev", "_backward")

    def __init__(self, data, requires_grad=False, name=None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._prev = ()
        self._backward = None

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
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{tag})"

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data, requires_grad=False)

    def backward(self):
        """Backpropagate from a scalar through the recorded graph."""
        if self.data.size != 1:
            raise ContractViolation(
                f"backward requires a scalar loss, got shape {self.data.shape}"
            )
        topo = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._prev:
                stack.append((parent, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None:
                node._backward(node.grad)
        # intermediate grads are not needed after the sweep; free them
        for node in reversed(topo):
            if node._backward is not None:
                node.grad = None
                node._prev = ()
                node._backward = None

    # operator sugar, scalars allowed on either side
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other, self.dtype)))

    def __rsub__(self, other):
        return add(neg(self), _as_tensor(other, self.dtype))

    def __neg__(self):
        return neg(self)


def _as_tensor(x, dtype):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _record(out, inputs, backward_fn):
    if _grad_enabled and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._prev = tuple(inputs)
        out._backward = backward_fn
    return out


def _accum(t, g):
    if t.requires_grad:
        if t.grad is None:
            t.grad = np.zeros_like(t.data)
        t.grad += g


def _check_dtypes(*tensors):
    dt = tensors[0].dtype
    for t in tensors[1:]:
        if t.dtype != dt:
            raise ContractViolation(f"mixed precisions {dt} and {t.dtype}")
    return dt


def _check_broadcast(sa, sb):
    # equal rank, each axis equal or 1 — no implicit rank promotion
    if len(sa) != len(sb):
        raise ContractViolation(f"rank mismatch for broadcast: {sa} vs {sb}")
    for a, b in zip(sa, sb):
        if a != b and a != 1 and b != 1:
            raise ContractViolation(f"shapes {sa} and {sb} are not broadcastable")


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, sd in enumerate(shape) if sd == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def add(a, b):
    if not isinstance(a, Tensor):
        a = _as_tensor(a, b.dtype)
    b = _as_tensor(b, a.dtype)
    _check_dtypes(a, b)
    if a.shape != b.shape and a.size != 1 and b.size != 1:
        _check_broadcast(a.shape, b.shape)
    out = Tensor(a.data + b.data)

    def backward(g):
        _accum(a, _unbroadcast(g, a.data.shape) if a.data.shape != g.shape else g)
        _accum(b, _unbroadcast(g, b.data.shape) if b.data.shape != g.shape else g)

    return _record(out, (a, b), backward)


def mul(a, b):
    a = a if isinstance(a, Tensor) else None or _as_tensor(a, b.dtype)
    b = _as_tensor(b, a.dtype)
    _check_dtypes(a, b)
    if a.shape != b.shape and a.size != 1 and b.size != 1:
        _check_broadcast(a.shape, b.shape)
    out = Tensor(a.data * b.data)

    def backward(g):
        ga = g * b.data
        gb = g * a.data
        _accum(a, _unbroadcast(ga, a.data.shape) if a.data.shape != ga.shape else ga)
        _accum(b, _unbroadcast(gb, b.data.shape) if b.data.shape != gb.shape else gb)

    return _record(out, (a, b), backward)


def neg(x):
    out = Tensor(-x.data)

    def backward(g):
        _accum(x, -g)

    return _record(out, (x,), backward)


def broadcast_mul_add(a, b, c, d):
    """a*b + c*d elementwise, broadcasting on size-1 axes only."""
    return add(mul(a, b), mul(c, d))


def relu(x):
    out = Tensor(np.maximum(x.data, 0))

    def backward(g):
        _accum(x, g * (x.data > 0))

    return _record(out, (x,), backward)


def sigmoid(x):
    """Numerically stable logistic, clamped into the open interval (0, 1)."""
    v = x.data
    out_data = np.empty_like(v)
    pos = v >= 0
    out_data[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ev = np.exp(v[~pos])
    out_data[~pos] = ev / (1.0 + ev)
    fi = np.finfo(v.dtype)
    np.clip(out_data, fi.tiny, np.nextafter(v.dtype.type(1), v.dtype.type(0)), out=out_data)
    out = Tensor(out_data)

    def backward(g):
        _accum(x, g * out_data * (1.0 - out_data))

    return _record(out, (x,), backward)


def log(x):
    out = Tensor(np.log(x.data))

    def backward(g):
        _accum(x, g / x.data)

    return _record(out, (x,), backward)


def clip(x, lo, hi):
    """Clamp values; gradient passes through inside [lo, hi], zero outside."""
    out = Tensor(np.clip(x.data, lo, hi))

    def backward(g):
        _accum(x, g * ((x.data >= lo) & (x.data <= hi)))

    return _record(out, (x,), backward)


def sum_all(x):
    out = Tensor(np.asarray(x.data.sum(), dtype=x.dtype))

    def backward(g):
        _accum(x, np.broadcast_to(g, x.data.shape))

    return _record(out, (x,), backward)


def log_softmax(x, axis=1):
    m = x.data.max(axis=axis, keepdims=True)
    shifted = x.data - m
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out_data = shifted - lse
    out = Tensor(out_data)

    def backward(g):
        _accum(x, g - np.exp(out_data) * g.sum(axis=axis, keepdims=True))

    return _record(out, (x,), backward)


def _conv_out_size(n, k, stride, padding):
    return (n + 2 * padding - k) // stride + 1


def _windows(xp, k, stride, out_h, out_w):
    n, c, _, _ = xp.shape
    sn, sc, sh, sw = xp.strides
    return np.lib.stride_tricks.as_strided(
        xp,
        (n, c, out_h, out_w, k, k),
        (sn, sc, sh * stride, sw * stride, sh, sw),
        writeable=False,
    )


def conv2d(x, weight, bias, stride=1, padding=0):
    """2-D cross-correlation plus bias over NCHW input.

    weight is (Cout, Cin, k, k) with odd k; zero padding; output size
    floor((H + 2p - k)/stride) + 1.
    """
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise ContractViolation("conv2d expects 4-D input and weight")
    n, cin, h, w = x.shape
    cout, cin_w, kh, kw = weight.shape
    if kh != kw:
        raise ConfigurationError(f"conv2d kernel must be square, got {kh}x{kw}")
    k = kh
    if k % 2 == 0:
        raise ConfigurationError(f"conv2d kernel size must be odd, got {k}")
    if cin != cin_w:
        raise ContractViolation(f"conv2d channel mismatch: input {cin}, weight {cin_w}")
    if bias.shape != (cout,):
        raise ContractViolation(f"conv2d bias shape {bias.shape} != ({cout},)")
    if h + 2 * padding < k or w + 2 * padding < k:
        raise ContractViolation("conv2d input smaller than kernel after padding")
    _check_dtypes(x, weight, bias)

    out_h = _conv_out_size(h, k, stride, padding)
    out_w = _conv_out_size(w, k, stride, padding)
    if padding > 0:
        xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    else:
        xp = x.data
    win = _windows(xp, k, stride, out_h, out_w)
    # (N,H',W',Cout) <- contract (Cin,k,k)
    out_data = np.tensordot(win, weight.data, axes=([1, 4, 5], [1, 2, 3]))
    out_data = np.ascontiguousarray(out_data.transpose(0, 3, 1, 2))
    out_data += bias.data.reshape(1, cout, 1, 1)
    out = Tensor(out_data)

    def backward(g):
        if bias.requires_grad:
            _accum(bias, g.sum(axis=(0, 2, 3)))
        if weight.requires_grad:
            gw = np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))
            _accum(weight, gw)
        if x.requires_grad:
            # full correlation of the stride-dilated output grad with the
            # flipped kernel, then crop padding and the leftover edge
            hd = (out_h - 1) * stride + 1
            wd = (out_w - 1) * stride + 1
            gd = np.zeros((n, cout, hd + 2 * (k - 1), wd + 2 * (k - 1)), dtype=g.dtype)
            gd[:, :, k - 1 : k - 1 + hd : stride, k - 1 : k - 1 + wd : stride] = g
            gwin = _windows(gd, k, 1, hd + k - 1, wd + k - 1)
            wflip = weight.data[:, :, ::-1, ::-1]
            dxp = np.tensordot(gwin, wflip, axes=([1, 4, 5], [0, 2, 3]))
            dxp = dxp.transpose(0, 3, 1, 2)
            full = np.zeros((n, cin, h + 2 * padding, w + 2 * padding), dtype=g.dtype)
            full[:, :, : hd + k - 1, : wd + k - 1] = dxp
            if padding > 0:
                full = full[:, :, padding : padding + h, padding : padding + w]
            _accum(x, full)

    return _record(out, (x, weight, bias), backward)


class RunningStats:
    """Per-channel running mean/var used by channel_norm in inference mode."""

    def __init__(self, channels, dtype=np.float32):
        self.mean = np.zeros(channels, dtype=dtype)
        self.var = np.ones(channels, dtype=dtype)

    def astype(self, dtype):
        out = RunningStats(self.mean.shape[0], dtype)
        out.mean = self.mean.astype(dtype)
        out.var = self.var.astype(dtype)
        return out


def channel_norm(x, gain, shift, eps=1e-5, mode="train", running=None, momentum=0.1):
    """Per-channel normalization over (N, H, W) with affine gain/shift.

    Train mode normalizes with batch statistics and, when ``running`` is
    given, folds them into the running estimates (biased variance).
    Inference mode normalizes with the stored running statistics.
    """
    if eps <= 0:
        raise ContractViolation(f"channel_norm eps must be > 0, got {eps}")
    n, c, h, w = x.shape
    if gain.shape != (c,) or shift.shape != (c,):
        raise ContractViolation(
            f"channel_norm affine shape mismatch: C={c}, gain {gain.shape}, shift {shift.shape}"
        )
    _check_dtypes(x, gain, shift)
    if mode == "train":
        m = x.data.mean(axis=(0, 2, 3))
        v = x.data.var(axis=(0, 2, 3))
        if running is not None:
            running.mean += momentum * (m - running.mean)
            running.var += momentum * (v - running.var)
    elif mode == "infer":
        if running is None:
            raise ContractViolation("channel_norm inference mode needs running statistics")
        m = running.mean.astype(x.dtype)
        v = running.var.astype(x.dtype)
    else:
        raise ContractViolation(f"channel_norm mode must be train or infer, got {mode!r}")

    inv = 1.0 / np.sqrt(v + np.asarray(eps, dtype=x.dtype))
    xhat = (x.data - m.reshape(1, c, 1, 1)) * inv.reshape(1, c, 1, 1)
    out = Tensor(xhat * gain.data.reshape(1, c, 1, 1) + shift.data.reshape(1, c, 1, 1))
    batch_mode = mode == "train"

    def backward(g):
        if shift.requires_grad:
            _accum(shift, g.sum(axis=(0, 2, 3)))
        if gain.requires_grad:
            _accum(gain, (g * xhat).sum(axis=(0, 2, 3)))
        if x.requires_grad:
            gi = gain.data.reshape(1, c, 1, 1) * inv.reshape(1, c, 1, 1)
            if batch_mode:
                cnt = n * h * w
                gm = g.sum(axis=(0, 2, 3), keepdims=True) / cnt
                gx = (g * xhat).sum(axis=(0, 2, 3), keepdims=True) / cnt
                _accum(x, gi * (g - gm - xhat * gx))
            else:
                _accum(x, gi * g)

    return _record(out, (x, gain, shift), backward)


_resize_weight_cache = {}


def _resize_matrix(n_in, n_out, dtype):
    """Row-interpolation matrix for align-corners=false bilinear resize."""
    key = (n_in, n_out, np.dtype(dtype).str)
    mat = _resize_weight_cache.get(key)
    if mat is None:
        mat = np.zeros((n_out, n_in), dtype=dtype)
        scale = n_in / n_out
        for o in range(n_out):
            src = (o + 0.5) * scale - 0.5
            if src < 0:
                mat[o, 0] = 1.0
                continue
            i0 = min(int(np.floor(src)), n_in - 1)
            i1 = min(i0 + 1, n_in - 1)
            frac = src - i0
            mat[o, i0] += 1.0 - frac
            mat[o, i1] += frac
        _resize_weight_cache[key] = mat
    return mat


def bilinear_resize(x, out_h, out_w):
    """Bilinear interpolation to (out_h, out_w), align-corners=false.

    Same-size resize returns the input unchanged (bitwise identity).
    """
    if out_h < 1 or out_w < 1:
        raise ContractViolation(f"bilinear_resize target must be >= 1, got {out_h}x{out_w}")
    n, c, h, w = x.shape
    if out_h == h and out_w == w:
        return x
    wh = _resize_matrix(h, out_h, x.dtype)
    ww = _resize_matrix(w, out_w, x.dtype)
    # (N,C,H,W) -> (N,C,W,outH) -> (N,C,outH,outW)
    tmp = np.tensordot(x.data, wh, axes=([2], [1]))
    out_data = np.tensordot(tmp, ww, axes=([2], [1]))
    out = Tensor(np.ascontiguousarray(out_data))

    def backward(g):
        t = np.tensordot(g, wh, axes=([2], [0]))  # (N,C,outW,H)
        gx = np.tensordot(t, ww, axes=([2], [0]))  # (N,C,H,W)
        _accum(x, np.ascontiguousarray(gx))

    return _record(out, (x,), backward)


def check_finite(t, where):
    """Raise NumericError naming ``where`` if the tensor has NaN/Inf entries."""
    if not np.isfinite(t.data).all():
        raise NumericError(f"non-finite values in {where}")
    return t


def grad_check(f, params, eps=1e-4, max_samples=64, seed=0):
    """Compare tape gradients of scalar f() against central finite differences.

    For each parameter, up to ``max_samples`` elements (all of them when
    the tensor is small) are perturbed by +/- eps; the relative error uses
    max(|analytic|, |numeric|, 1e-8) as denominator.  Returns a dict
    mapping parameter name (or index) to its max relative error.
    """
    if not (1e-6 <= eps <= 1e-3):
        raise ContractViolation(f"grad_check eps must be in [1e-6, 1e-3], got {eps}")
    for p in params:
        p.zero_grad()
    out = f()
    if not np.isfinite(out.data).all():
        raise NumericError("non-finite loss in grad_check forward")
    out.backward()
    analytic = []
    for i, p in enumerate(params):
        if p.grad is None:
            p.grad = np.zeros_like(p.data)
        analytic.append(p.grad.copy())

    rng = np.random.default_rng(seed)
    results = {}
    with no_grad():
        for i, p in enumerate(params):
            flat = p.data.reshape(-1)
            size = flat.size
            if size <= max_samples:
                idxs = np.arange(size)
            else:
                idxs = rng.choice(size, size=max_samples, replace=False)
            worst = 0.0
            for idx in idxs:
                orig = flat[idx]
                flat[idx] = orig + eps
                hi = float(f().data)
                flat[idx] = orig - eps
                lo = float(f().data)
                flat[idx] = orig
                if not (np.isfinite(hi) and np.isfinite(lo)):
                    raise NumericError(
                        f"non-finite intermediate while perturbing parameter {p.name or i}"
                    )
                numeric = (hi - lo) / (2.0 * eps)
                a = float(analytic[i].reshape(-1)[idx])
                rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
                worst = max(worst, rel)
            results[p.name or str(i)] = worst
    return results
