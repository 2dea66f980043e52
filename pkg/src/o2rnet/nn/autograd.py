"""Minimal reverse-mode autodiff over numpy arrays.

Just enough machinery for this detector: elementwise ops, matmul, conv2d,
bilinear up-sampling, RoI pooling, and the two fused loss heads. Tensors are
float64 throughout so finite-difference checks are meaningful.
"""

from __future__ import annotations

import numpy as np

from .. import kernels


class Tensor:
    __slots__ = ("data", "grad", "_parents", "_backward", "requires_grad")

    def __init__(self, data, parents=(), backward=None, requires_grad=True):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self._parents = parents
        self._backward = backward
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.data.shape})"

    def backward(self, grad=None):
        """Reverse-accumulate gradients from this (normally scalar) tensor."""
        topo: list[Tensor] = []
        seen = set()

        def visit(t):
            if id(t) in seen:
                return
            seen.add(id(t))
            for p in t._parents:
                visit(p)
            topo.append(t)

        visit(self)
        for t in topo:
            t.grad = None
        self.grad = np.ones_like(self.data) if grad is None else np.asarray(grad, dtype=np.float64)
        for t in reversed(topo):
            if t._backward is not None and t.grad is not None:
                t._backward(t.grad)

    # sugar used sparingly in model code
    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, requires_grad=False)


def _accum(t: Tensor, g: np.ndarray):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a broadcast gradient back to `shape`."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data + b.data

    def backward(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(g, b.data.shape))

    return Tensor(out_data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data * b.data

    def backward(g):
        _accum(a, _unbroadcast(g * b.data, a.data.shape))
        _accum(b, _unbroadcast(g * a.data, b.data.shape))

    return Tensor(out_data, (a, b), backward)


def scale(a, s: float) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        _accum(a, g * s)

    return Tensor(a.data * s, (a,), backward)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data @ b.data

    def backward(g):
        _accum(a, g @ b.data.T)
        _accum(b, a.data.T @ g)

    return Tensor(out_data, (a, b), backward)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        _accum(a, g.reshape(a.data.shape))

    return Tensor(a.data.reshape(shape), (a,), backward)


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0

    def backward(g):
        _accum(a, g * mask)

    return Tensor(a.data * mask, (a,), backward)


def tensor_sum(a) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        _accum(a, np.full(a.data.shape, g))

    return Tensor(a.data.sum(), (a,), backward)


def repeat_rows(a, reps: int) -> Tensor:
    """(N, ...) -> (N*reps, ...) by repeating each row `reps` times."""
    a = as_tensor(a)
    out_data = np.repeat(a.data, reps, axis=0)

    def backward(g):
        _accum(a, g.reshape((a.data.shape[0], reps) + a.data.shape[1:]).sum(axis=1))

    return Tensor(out_data, (a,), backward)


def conv2d(x, w, b, stride: int = 1, pad: int = 1) -> Tensor:
    """2D convolution on an (H,W,Cin) image with an (kh,kw,Cin,Cout) kernel."""
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    kh, kw, cin, cout = w.data.shape
    xp = np.pad(x.data, ((pad, pad), (pad, pad), (0, 0)))
    hp, wp, _ = xp.shape
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    s0, s1, s2 = xp.strides
    patches = np.lib.stride_tricks.as_strided(
        xp, shape=(ho, wo, kh, kw, cin),
        strides=(s0 * stride, s1 * stride, s0, s1, s2))
    cols = patches.reshape(ho * wo, kh * kw * cin)
    wmat = w.data.reshape(kh * kw * cin, cout)
    out_data = (cols @ wmat + b.data).reshape(ho, wo, cout)

    def backward(g):
        gm = g.reshape(ho * wo, cout)
        _accum(w, (cols.T @ gm).reshape(w.data.shape))
        _accum(b, gm.sum(axis=0))
        if x.requires_grad or x._parents:
            dcols = (gm @ wmat.T).reshape(ho, wo, kh, kw, cin)
            dxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    dxp[i:i + ho * stride:stride, j:j + wo * stride:stride] += dcols[:, :, i, j]
            dx = dxp[pad:hp - pad, pad:wp - pad] if pad else dxp
            _accum(x, dx)

    return Tensor(out_data, (x, w, b), backward)


def bilinear_upsample(x, out_hw: tuple[int, int]) -> Tensor:
    """Resize an (h,w,C) map to (H,W,C) with align-corners=False bilinear."""
    x = as_tensor(x)
    h, w, c = x.data.shape
    ho, wo = out_hw

    def axis_weights(n_in, n_out):
        coords = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        coords = np.clip(coords, 0, n_in - 1)
        lo = np.floor(coords).astype(int)
        hi = np.minimum(lo + 1, n_in - 1)
        frac = coords - lo
        return lo, hi, 1.0 - frac, frac

    ylo, yhi, wy0, wy1 = axis_weights(h, ho)
    xlo, xhi, wx0, wx1 = axis_weights(w, wo)
    out_data = (
        wy0[:, None, None] * (wx0[None, :, None] * x.data[ylo][:, xlo]
                              + wx1[None, :, None] * x.data[ylo][:, xhi])
        + wy1[:, None, None] * (wx0[None, :, None] * x.data[yhi][:, xlo]
                                + wx1[None, :, None] * x.data[yhi][:, xhi])
    )

    def backward(g):
        dx = np.zeros_like(x.data)
        for oy in range(ho):
            for ox in range(wo):
                gv = g[oy, ox]
                dx[ylo[oy], xlo[ox]] += wy0[oy] * wx0[ox] * gv
                dx[ylo[oy], xhi[ox]] += wy0[oy] * wx1[ox] * gv
                dx[yhi[oy], xlo[ox]] += wy1[oy] * wx0[ox] * gv
                dx[yhi[oy], xhi[ox]] += wy1[oy] * wx1[ox] * gv
        _accum(x, dx)

    return Tensor(out_data, (x,), backward)


def roi_align(features, boxes: np.ndarray, pool: int, stride: float) -> Tensor:
    """Pool (H,W,C) features over (N,4) image-space boxes to (N,P,P,C).

    Differentiable w.r.t. features only; box coordinates are fixed inputs.
    """
    features = as_tensor(features)
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    h, w, _ = features.data.shape
    out_data = kernels.roi_align_forward(features.data, boxes, pool, stride)

    def backward(g):
        _accum(features, kernels.roi_align_backward(g, boxes, h, w, stride))

    return Tensor(out_data, (features,), backward)


def softmax_cross_entropy(logits, targets: np.ndarray,
                          row_weights: np.ndarray) -> Tensor:
    """Weighted-row cross entropy over (N,K) logits with int targets.

    Returns sum_i row_weights[i] * CE_i; pass weights of 1/n for a mean.
    """
    logits = as_tensor(logits)
    targets = np.asarray(targets, dtype=np.int64)
    wts = np.asarray(row_weights, dtype=np.float64)
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    ez = np.exp(z)
    probs = ez / ez.sum(axis=1, keepdims=True)
    n = logits.data.shape[0]
    ce = -np.log(np.maximum(probs[np.arange(n), targets], 1e-300))
    out_data = np.array((wts * ce).sum())

    def backward(g):
        dlogits = probs.copy()
        dlogits[np.arange(n), targets] -= 1.0
        _accum(logits, g * dlogits * wts[:, None])

    return Tensor(out_data, (logits,), backward)


def smooth_l1(pred, target: np.ndarray, row_weights: np.ndarray,
              beta: float = 1.0) -> Tensor:
    """Weighted-row smooth-L1 over (N,D) predictions against fixed targets."""
    pred = as_tensor(pred)
    target = np.asarray(target, dtype=np.float64)
    wts = np.asarray(row_weights, dtype=np.float64)
    diff = pred.data - target
    absd = np.abs(diff)
    quad = absd < beta
    per = np.where(quad, 0.5 * diff * diff / beta, absd - 0.5 * beta)
    out_data = np.array((per.sum(axis=1) * wts).sum())

    def backward(g):
        dd = np.where(quad, diff / beta, np.sign(diff))
        _accum(pred, g * dd * wts[:, None])

    return Tensor(out_data, (pred,), backward)


def softmax(logits: np.ndarray) -> np.ndarray:
    """Plain numpy softmax for inference paths."""
    z = logits - logits.max(axis=-1, keepdims=True)
    ez = np.exp(z)
    return ez / ez.sum(axis=-1, keepdims=True)


def sigmoid(x: np.ndarray) -> np.ndarray:
    return 1.0 / (1.0 + np.exp(-x))


def bce_with_logits(logits, targets: np.ndarray,
                    row_weights: np.ndarray) -> Tensor:
    """Weighted binary cross entropy on (N,) logits with 0/1 targets."""
    logits = as_tensor(logits)
    targets = np.asarray(targets, dtype=np.float64)
    wts = np.asarray(row_weights, dtype=np.float64)
    x = logits.data
    # log(1+exp(-|x|)) formulation for stability
    per = np.maximum(x, 0) - x * targets + np.log1p(np.exp(-np.abs(x)))
    out_data = np.array((per * wts).sum())

    def backward(g):
        _accum(logits, g * (sigmoid(x) - targets) * wts)

    return Tensor(out_data, (logits,), backward)
