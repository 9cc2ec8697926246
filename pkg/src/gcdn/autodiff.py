"""Minimal dense-tensor engine with tape-based reverse-mode gradients.

Only the operations the denoiser needs are implemented. Forward ops are pure
numpy; each op records a backward closure on the currently active GradTape.
Training runs in float32, all gradient verification in float64.
"""

from __future__ import annotations

import functools

import numpy as np
import scipy.sparse as sp

TRAIN_DTYPE = np.float32
VERIFY_DTYPE = np.float64


class Tensor:
    """Dense real-valued array plus an accumulated gradient slot."""

    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad=False, name=None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(TRAIN_DTYPE if dtype is None else dtype)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.name = name

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

    def assert_finite(self):
        if not np.all(np.isfinite(self.data)):
            raise FloatingPointError(
                f"non-finite values in tensor {self.name or '<unnamed>'}"
            )

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, name={self.name})"

    # arithmetic sugar; constants (scalars/ndarrays) do not receive gradients
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis, keepdims)


def parameter(data, name=None, dtype=None):
    return Tensor(data, requires_grad=True, name=name, dtype=dtype)


# ---------------------------------------------------------------------------
# tape

_TAPE_STACK = []


class GradTape:
    """Ordered record of executed ops; replaying it in reverse runs backprop.

    Single-writer: one forward/backward cycle records and replays on one
    logical thread. Gradients accumulate additively at fan-out points.
    """

    def __init__(self):
        self._ops = []  # (out, inputs, backward)

    def __enter__(self):
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _TAPE_STACK.pop()
        return False

    def _record(self, out, inputs, backward):
        self._ops.append((out, inputs, backward))

    def __len__(self):
        return len(self._ops)

    def backward(self, loss, wrt=None):
        """Backprop from a scalar loss; returns grads for `wrt` if given.

        Tensors disconnected from the loss get a zero gradient. The tape is
        consumed: a second backward needs a fresh forward pass.
        """
        if loss.size != 1:
            raise ValueError(f"loss must be scalar, got shape {loss.shape}")
        for out, inputs, _ in self._ops:
            out.grad = None
            for t in inputs:
                t.grad = None
        loss.grad = np.ones_like(loss.data)
        for out, inputs, backward_fn in reversed(self._ops):
            if out.grad is None:
                continue
            grads = backward_fn(out.grad)
            for t, g in zip(inputs, grads):
                if g is None or not t.requires_grad:
                    continue
                t.grad = g if t.grad is None else t.grad + g
        self._ops.clear()
        if wrt is not None:
            return [
                t.grad if t.grad is not None else np.zeros_like(t.data) for t in wrt
            ]
        return None


def backward(tape, loss, wrt=None):
    return tape.backward(loss, wrt)


def active_tape():
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def apply_op(out_data, inputs, backward):
    """Build an op output and record `backward(grad_out) -> per-input grads`.

    This is the extension point custom ops (circulant heads, edge einsums)
    are built on; `backward` must return one gradient (or None) per input.
    """
    out = Tensor(out_data, requires_grad=any(t.requires_grad for t in inputs))
    tape = active_tape()
    if tape is not None and out.requires_grad:
        tape._record(out, inputs, backward)
    return out


def _as_const(x, like):
    if isinstance(x, Tensor):
        raise TypeError("expected a constant, got a Tensor")
    return np.asarray(x, dtype=like.dtype)


def _unbroadcast(grad, shape):
    # reduce a broadcasted gradient back to the original operand shape
    if grad.shape == tuple(shape):
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise / structural ops


def add(a, b):
    if not isinstance(a, Tensor):
        a, b = b, a
    if isinstance(b, Tensor):
        out = a.data + b.data
        return apply_op(
            out,
            (a, b),
            lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
        )
    c = _as_const(b, a)
    return apply_op(a.data + c, (a,), lambda g: (_unbroadcast(g, a.shape),))


def sub(a, b):
    if isinstance(a, Tensor) and isinstance(b, Tensor):
        return apply_op(
            a.data - b.data,
            (a, b),
            lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)),
        )
    if isinstance(a, Tensor):
        c = _as_const(b, a)
        return apply_op(a.data - c, (a,), lambda g: (_unbroadcast(g, a.shape),))
    c = _as_const(a, b)
    return apply_op(c - b.data, (b,), lambda g: (-_unbroadcast(g, b.shape),))


def mul(a, b):
    if not isinstance(a, Tensor):
        a, b = b, a
    if isinstance(b, Tensor):
        out = a.data * b.data
        ad, bd = a.data, b.data
        return apply_op(
            out,
            (a, b),
            lambda g: (_unbroadcast(g * bd, a.shape), _unbroadcast(g * ad, b.shape)),
        )
    c = _as_const(b, a)
    return apply_op(a.data * c, (a,), lambda g: (_unbroadcast(g * c, a.shape),))


def neg(a):
    return apply_op(-a.data, (a,), lambda g: (-g,))


def exp(a):
    out = np.exp(a.data)
    return apply_op(out, (a,), lambda g: (g * out,))


def power_const(a, p):
    """a**p elementwise for a constant exponent; a must stay positive for p<1."""
    out = a.data**p
    ad = a.data
    return apply_op(out, (a,), lambda g: (g * p * ad ** (p - 1),))


def leaky_relu(a, slope=0.2):
    """Elementwise x if x >= 0 else slope*x; slope in (0, 1)."""
    if not 0.0 < slope < 1.0:
        raise ValueError(f"leaky_relu slope must be in (0,1), got {slope}")
    ad = a.data
    out = np.where(ad >= 0, ad, ad * np.asarray(slope, ad.dtype))
    scale = np.where(ad >= 0, ad.dtype.type(1.0), ad.dtype.type(slope))
    return apply_op(out, (a,), lambda g: (g * scale,))


def reshape(a, shape):
    old = a.shape
    return apply_op(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def concat(tensors, axis=-1):
    datas = [t.data for t in tensors]
    out = np.concatenate(datas, axis=axis)
    sizes = [d.shape[axis] for d in datas]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.split(g, splits, axis=axis))

    tape = active_tape()
    res = Tensor(out, requires_grad=any(t.requires_grad for t in tensors))
    if tape is not None and res.requires_grad:
        tape._record(res, tuple(tensors), bwd)
    return res


def reduce_sum(a, axis=None, keepdims=False):
    ashape = a.shape
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, ashape).copy(),)

    return apply_op(out, (a,), bwd)


def reduce_mean(a, axis=None, keepdims=False):
    ashape = a.shape
    out = a.data.mean(axis=axis, keepdims=keepdims)
    denom = a.size / max(out.size, 1)

    def bwd(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / g.dtype.type(denom), ashape).copy(),)

    return apply_op(out, (a,), bwd)


def matmul(a, b):
    ad, bd = a.data, b.data
    if ad.ndim != 2 or bd.ndim != 2:
        raise ValueError("matmul supports 2-D operands only")
    return apply_op(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def linear(x, w, b=None):
    """x @ w + b for 2-D x; fused to keep the tape short on hot paths."""
    xd, wd = x.data, w.data
    out = xd @ wd
    if b is not None:
        out += b.data

    def bwd(g):
        g = np.ascontiguousarray(g)
        if b is not None:
            return (g @ wd.T, xd.T @ g, g.sum(axis=0))
        return (g @ wd.T, xd.T @ g)

    return apply_op(out, (x, w) if b is None else (x, w, b), bwd)


# ---------------------------------------------------------------------------
# gather / scatter over row indices (graph edges, neighbor features)


@functools.lru_cache(maxsize=128)
def _incidence_cached(idx_bytes, n_rows, n_idx, dtype_str):
    idx = np.frombuffer(idx_bytes, dtype=np.int64)
    return sp.csr_matrix(
        (np.ones(n_idx, dtype=np.dtype(dtype_str)), (idx, np.arange(n_idx))),
        shape=(n_rows, n_idx),
    )


def incidence(idx, n_rows, dtype=np.float64):
    """Sparse (n_rows, len(idx)) selector with S[idx[e], e] = 1."""
    idx = np.ascontiguousarray(idx, dtype=np.int64)
    return _incidence_cached(idx.tobytes(), int(n_rows), len(idx), np.dtype(dtype).str)


def gather_rows(x, idx, scatter=None):
    """out[e] = x[idx[e]] for 2-D x; backward scatter-adds grads into rows."""
    n = x.shape[0]
    if scatter is None:
        scatter = incidence(idx, n, x.dtype)

    def bwd(g):
        return ((scatter @ g).astype(g.dtype, copy=False),)

    return apply_op(x.data[idx], (x,), bwd)


def scatter_sum(x, idx, n_rows, scatter=None):
    """out[i] = sum of x rows e with idx[e] == i; backward gathers by idx."""
    if scatter is None:
        scatter = incidence(idx, n_rows, x.dtype)
    out = (scatter @ x.data).astype(x.dtype, copy=False)
    return apply_op(out, (x,), lambda g: (g[idx],))


# ---------------------------------------------------------------------------
# 2-D convolution with reflection padding


@functools.lru_cache(maxsize=64)
def _conv_index_map(h, w, kh, kw):
    # flat source index per (pixel, tap); reflection handled by padding the
    # index image itself (edge-inclusive mirror, defined while pad <= dim)
    ph, pw = (kh - 1) // 2, (kw - 1) // 2
    idx = np.arange(h * w, dtype=np.int64).reshape(h, w)
    padded = np.pad(idx, ((ph, ph), (pw, pw)), mode="symmetric")
    taps = []
    for dy in range(kh):
        for dx in range(kw):
            taps.append(padded[dy : dy + h, dx : dx + w].reshape(-1))
    gmap = np.stack(taps, axis=1).reshape(-1)  # (h*w*kh*kw,)
    return gmap


@functools.lru_cache(maxsize=64)
def _conv_scatter(h, w, kh, kw, dtype_str):
    gmap = _conv_index_map(h, w, kh, kw)
    n = h * w
    return sp.csr_matrix(
        (
            np.ones(len(gmap), dtype=np.dtype(dtype_str)),
            (gmap, np.arange(len(gmap))),
        ),
        shape=(n, len(gmap)),
    )


def conv2d(x, kernel, bias=None):
    """Cross-correlate (B,H,W,Cin) with (kh,kw,Cin,Cout); same spatial size.

    Reflection padding (edge-inclusive mirror) keeps output size equal to
    input size; requires odd kernel extents no larger than 2*dim+1.
    """
    B, H, W, Cin = x.shape
    kh, kw, kcin, cout = kernel.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError(f"kernel extents must be odd, got {kh}x{kw}")
    if kcin != Cin:
        raise ValueError(f"channel mismatch: input has {Cin}, kernel expects {kcin}")
    if kh > 2 * H + 1 or kw > 2 * W + 1:
        raise ValueError(
            f"kernel {kh}x{kw} exceeds 2*dim+1 for input {H}x{W}; reflection undefined"
        )
    n = H * W
    gmap = _conv_index_map(H, W, kh, kw)
    xf = x.data.reshape(B, n, Cin)
    cols = xf[:, gmap, :].reshape(B * n, kh * kw * Cin)
    k2 = kernel.data.reshape(kh * kw * Cin, cout)
    out = cols @ k2
    if bias is not None:
        out = out + bias.data
    out = out.reshape(B, H, W, cout)

    def bwd(g):
        g2 = g.reshape(B * n, cout)
        dkernel = (cols.T @ g2).reshape(kernel.shape)
        dbias = g2.sum(axis=0) if bias is not None else None
        dcols = (g2 @ k2.T).reshape(B, n * kh * kw, Cin)
        scat = _conv_scatter(H, W, kh, kw, np.dtype(g.dtype).str)
        stacked = dcols.transpose(1, 0, 2).reshape(n * kh * kw, B * Cin)
        dx = (scat @ stacked).astype(g.dtype, copy=False)
        dx = dx.reshape(n, B, Cin).transpose(1, 0, 2).reshape(B, H, W, Cin)
        if bias is not None:
            return (dx, dkernel, dbias)
        return (dx, dkernel)

    inputs = (x, kernel) if bias is None else (x, kernel, bias)
    return apply_op(out, inputs, bwd)


# ---------------------------------------------------------------------------
# batch normalization


def batch_norm(x, gamma, beta, running_mean, running_var, mode, eps=1e-5):
    """Per-channel standardization over all leading axes of a (..., C) map.

    Train mode normalizes by batch statistics and returns them so the caller
    can update its running buffers; infer mode uses the stored running stats.
    Zero-variance channels are handled by eps, never a crash.
    """
    if mode not in ("train", "infer"):
        raise ValueError(f"unknown batch_norm mode {mode!r}")
    axes = tuple(range(x.data.ndim - 1))
    dt = x.dtype.type
    if mode == "train":
        count = int(np.prod([x.shape[i] for i in axes])) if axes else 1
        if count < 2:
            raise ValueError(f"train-mode batch norm needs >= 2 samples, got {count}")
        mu = x.data.mean(axis=axes)
        xc = x.data - mu
        var = (xc * xc).mean(axis=axes)
        ivar = 1.0 / np.sqrt(var + dt(eps))
        xhat = xc * ivar
        out = xhat * gamma.data + beta.data
        m = dt(count)

        def bwd(g):
            dgamma = (g * xhat).sum(axis=axes)
            dbeta = g.sum(axis=axes)
            dxhat = g * gamma.data
            dx = (
                ivar
                * (
                    dxhat
                    - dxhat.mean(axis=axes)
                    - xhat * (dxhat * xhat).sum(axis=axes) / m
                )
            ).astype(g.dtype, copy=False)
            return (dx, dgamma, dbeta)

        res = apply_op(out, (x, gamma, beta), bwd)
        return res, mu, var
    irv = 1.0 / np.sqrt(running_var + dt(eps))
    xc = x.data - running_mean
    out = xc * irv * gamma.data + beta.data

    def bwd_i(g):
        dgamma = (g * xc * irv).sum(axis=axes)
        dbeta = g.sum(axis=axes)
        dx = (g * gamma.data * irv).astype(g.dtype, copy=False)
        return (dx, dgamma, dbeta)

    return apply_op(out, (x, gamma, beta), bwd_i), running_mean, running_var


def mse(a, b):
    d = sub(a, b)
    return reduce_mean(mul(d, d))


# ---------------------------------------------------------------------------
# Adam


class AdamState:
    """First/second moment estimates and step counter for one parameter."""

    __slots__ = ("m", "v", "t")

    def __init__(self, shape, dtype=TRAIN_DTYPE):
        self.m = np.zeros(shape, dtype=dtype)
        self.v = np.zeros(shape, dtype=dtype)
        self.t = 0


def adam_step(param, grad, state, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """Standard Adam update with bias correction, in place on param.data."""
    if lr <= 0:
        raise ValueError(f"lr must be positive, got {lr}")
    if grad is None:
        grad = np.zeros_like(param.data)
    if not np.all(np.isfinite(grad)):
        raise FloatingPointError(
            f"non-finite gradient for parameter {param.name or '<unnamed>'}"
        )
    if grad.shape != param.data.shape:
        raise ValueError(
            f"gradient shape {grad.shape} does not match parameter {param.data.shape}"
        )
    state.t += 1
    dt = param.data.dtype.type
    b1, b2 = dt(beta1), dt(beta2)
    state.m = b1 * state.m + (1 - b1) * grad.astype(param.data.dtype, copy=False)
    state.v = b2 * state.v + (1 - b2) * np.square(
        grad.astype(param.data.dtype, copy=False)
    )
    mhat = state.m / (1 - b1**state.t)
    vhat = state.v / (1 - b2**state.t)
    param.data -= dt(lr) * mhat / (np.sqrt(vhat) + dt(eps))


# ---------------------------------------------------------------------------
# gradient verification


def grad_check(fn, inputs, eps=1e-5, floor=1e-5, max_coords_per_tensor=None, seed=0):
    """Worst relative error between reverse-mode and central-difference grads.

    `fn(*inputs)` must return a scalar Tensor. Run in float64; float32 noise
    swamps the comparison. Coordinates can be subsampled for large models.
    """
    with GradTape() as tape:
        loss = fn(*inputs)
        if not np.all(np.isfinite(loss.data)):
            raise FloatingPointError("non-finite function output in grad_check")
        analytic = tape.backward(loss, wrt=list(inputs))
    rng = np.random.default_rng(seed)
    worst = 0.0
    for t, a in zip(inputs, analytic):
        if not t.data.flags.c_contiguous:
            t.data = np.ascontiguousarray(t.data)
        flat = t.data.reshape(-1)  # view; perturbations hit t.data in place
        coords = np.arange(flat.size)
        if max_coords_per_tensor is not None and flat.size > max_coords_per_tensor:
            coords = rng.choice(flat.size, size=max_coords_per_tensor, replace=False)
        aflat = a.reshape(-1)
        for c in coords:
            orig = flat[c]
            flat[c] = orig + eps
            fp = float(fn(*inputs).data)
            flat[c] = orig - eps
            fm = float(fn(*inputs).data)
            flat[c] = orig
            num = (fp - fm) / (2 * eps)
            err = abs(aflat[c] - num) / max(abs(aflat[c]), abs(num), floor)
            worst = max(worst, err)
    return worst
