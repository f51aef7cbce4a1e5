"""Minimal reverse-mode automatic differentiation over numpy arrays.

Only the operators needed by the reconstruction network are provided:
elementwise arithmetic with broadcasting, reductions, ELU, sigmoid, 2-D
cross-correlation ("conv2d"), 2x2 max pooling, fixed bilinear upsampling,
batch normalization and channel concatenation.

Every op records its parents and a backward closure on the output tensor.
``backward(loss)`` topologically sorts the subgraph reachable from the loss
and runs the closures in reverse, accumulating adjoints into ``.grad``.
Gradients of intermediate (non-leaf) tensors are reset at the start of each
backward pass; leaf gradients accumulate additively across passes until the
caller clears them.

Backward closures must hand freshly allocated (or never-mutated) arrays to
``_accumulate``; nothing in this module writes into a gradient buffer in
place after it has been stored.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "Tensor",
    "backward",
    "concat_channels",
    "conv2d",
    "batchnorm2d",
    "elu",
    "gradient_check",
    "maxpool2d",
    "sigmoid",
    "upsample_bilinear",
]


class Tensor:
    """N-dimensional real array participating in a differentiation graph."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._backward_fn = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _reject_item(self)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    # -- arithmetic ---------------------------------------------------------

    def __add__(self, other):
        return _add(self, _as_tensor(other))

    def __radd__(self, other):
        return _add(_as_tensor(other), self)

    def __neg__(self):
        return _neg(self)

    def __sub__(self, other):
        return _sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return _sub(_as_tensor(other), self)

    def __mul__(self, other):
        return _mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return _mul(_as_tensor(other), self)

    def __truediv__(self, other):
        return _div(self, _as_tensor(other))

    def __rtruediv__(self, other):
        return _div(_as_tensor(other), self)

    def sum(self):
        return _sum(self)

    def mean(self, axis=None, keepdims: bool = False):
        return _mean(self, axis=axis, keepdims=keepdims)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def _reject_item(t: Tensor):
    raise ValueError(f"item() needs a single-element tensor, got shape {t.shape}")


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _from_op(data: np.ndarray, parents, backward_fn) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward_fn = backward_fn
    return out


def _accumulate(t: Tensor, g: np.ndarray):
    if not t.requires_grad:
        return
    t.grad = g if t.grad is None else t.grad + g


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum g over the axes numpy broadcasting expanded, back to ``shape``."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# -- elementwise ops --------------------------------------------------------


def _add(a: Tensor, b: Tensor) -> Tensor:
    out_data = a.data + b.data

    def bwd(g):
        _accumulate(a, _unbroadcast(g, a.data.shape))
        _accumulate(b, _unbroadcast(g, b.data.shape))

    return _from_op(out_data, (a, b), bwd)


def _neg(a: Tensor) -> Tensor:
    def bwd(g):
        _accumulate(a, -g)

    return _from_op(-a.data, (a,), bwd)


def _sub(a: Tensor, b: Tensor) -> Tensor:
    out_data = a.data - b.data

    def bwd(g):
        _accumulate(a, _unbroadcast(g, a.data.shape))
        _accumulate(b, _unbroadcast(-g, b.data.shape))

    return _from_op(out_data, (a, b), bwd)


def _mul(a: Tensor, b: Tensor) -> Tensor:
    out_data = a.data * b.data

    def bwd(g):
        _accumulate(a, _unbroadcast(g * b.data, a.data.shape))
        _accumulate(b, _unbroadcast(g * a.data, b.data.shape))

    return _from_op(out_data, (a, b), bwd)


def _div(a: Tensor, b: Tensor) -> Tensor:
    out_data = a.data / b.data

    def bwd(g):
        _accumulate(a, _unbroadcast(g / b.data, a.data.shape))
        _accumulate(b, _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return _from_op(out_data, (a, b), bwd)


def _sum(a: Tensor) -> Tensor:
    shape = a.data.shape

    def bwd(g):
        _accumulate(a, np.broadcast_to(g, shape))

    return _from_op(np.sum(a.data), (a,), bwd)


def _mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        axes = tuple(range(a.data.ndim))
    elif isinstance(axis, int):
        axes = (axis,)
    else:
        axes = tuple(axis)
    count = 1
    for ax in axes:
        count *= a.data.shape[ax]
    out_data = a.data.mean(axis=axes, keepdims=keepdims)

    def bwd(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        _accumulate(a, np.broadcast_to(g, a.data.shape) / count)

    return _from_op(out_data, (a,), bwd)


def sigmoid(x: Tensor) -> Tensor:
    """Numerically stable logistic squashing to (0, 1)."""
    d = x.data
    out_data = np.empty_like(d)
    pos = d >= 0
    out_data[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    e = np.exp(d[~pos])
    out_data[~pos] = e / (1.0 + e)

    def bwd(g):
        _accumulate(x, g * out_data * (1.0 - out_data))

    return _from_op(out_data, (x,), bwd)


def elu(x: Tensor, alpha: float = 1.0) -> Tensor:
    """x for x > 0, alpha * (exp(x) - 1) for x <= 0."""
    d = x.data
    neg = d <= 0
    out_data = np.where(neg, alpha * np.expm1(np.minimum(d, 0.0)), d)

    def bwd(g):
        # derivative is alpha * exp(x) = out + alpha on the non-positive side
        _accumulate(x, g * np.where(neg, out_data + alpha, 1.0))

    return _from_op(out_data, (x,), bwd)


# -- structural ops ---------------------------------------------------------


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    """Stack b's channels after a's; backward splits the adjoint."""
    if a.data.ndim != 4 or b.data.ndim != 4:
        raise ValueError("concat_channels expects 4-D (B, C, H, W) tensors")
    if a.data.shape[0] != b.data.shape[0] or a.data.shape[2:] != b.data.shape[2:]:
        raise ValueError(
            f"concat_channels batch/spatial mismatch: {a.data.shape} vs {b.data.shape}"
        )
    ca = a.data.shape[1]
    out_data = np.concatenate([a.data, b.data], axis=1)

    def bwd(g):
        _accumulate(a, g[:, :ca].copy())
        _accumulate(b, g[:, ca:].copy())

    return _from_op(out_data, (a, b), bwd)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation (no kernel flip) with zero padding.

    x: (B, Cin, H, W), weight: (Cout, Cin, kh, kw), bias: (Cout,).
    Output spatial extents are (H + 2*padding - kh) // stride + 1 and the
    analogue for W. Gradients are defined for x, weight and bias.
    """
    B, cin, H, W = x.data.shape
    cout, cin_w, kh, kw = weight.data.shape
    if cin != cin_w:
        raise ValueError(
            f"conv2d channel mismatch: input has shape {x.data.shape} (Cin={cin}) "
            f"but weight has shape {weight.data.shape} (Cin={cin_w})"
        )
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError(f"conv2d kernel extents must be odd, got {kh}x{kw}")
    if bias.data.shape != (cout,):
        raise ValueError(f"conv2d bias shape {bias.data.shape} != ({cout},)")
    if stride < 1 or padding < 0:
        raise ValueError(f"conv2d needs stride >= 1 and padding >= 0, got {stride}, {padding}")
    if H + 2 * padding < kh or W + 2 * padding < kw:
        raise ValueError(
            f"conv2d input {H}x{W} with padding {padding} is smaller than kernel {kh}x{kw}"
        )

    if padding:
        xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    else:
        xp = x.data
    Hp, Wp = xp.shape[2], xp.shape[3]
    Ho = (Hp - kh) // stride + 1
    Wo = (Wp - kw) // stride + 1

    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]  # (B, Cin, Ho, Wo, kh, kw)
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(B * Ho * Wo, cin * kh * kw)
    wmat = weight.data.reshape(cout, cin * kh * kw)
    out_flat = cols @ wmat.T + bias.data
    out_data = out_flat.reshape(B, Ho, Wo, cout).transpose(0, 3, 1, 2)

    def bwd(g):
        g_flat = g.transpose(0, 2, 3, 1).reshape(B * Ho * Wo, cout)
        _accumulate(bias, g.sum(axis=(0, 2, 3)))
        _accumulate(weight, (g_flat.T @ cols).reshape(weight.data.shape))
        if x.requires_grad:
            dcols = (g_flat @ wmat).reshape(B, Ho, Wo, cin, kh, kw)
            dcols = dcols.transpose(0, 3, 1, 2, 4, 5)  # (B, Cin, Ho, Wo, kh, kw)
            dxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i : i + stride * Ho : stride, j : j + stride * Wo : stride] += (
                        dcols[:, :, :, :, i, j]
                    )
            if padding:
                dxp = dxp[:, :, padding : padding + H, padding : padding + W]
            _accumulate(x, dxp)

    return _from_op(out_data, (x, weight, bias), bwd)


def maxpool2d(x: Tensor, window: int = 2) -> Tensor:
    """Non-overlapping window max over (B, C, H, W); extents must divide.

    Backward routes the adjoint to the maximum element of each region only;
    on ties the first element in row-major order of the region wins.
    """
    B, C, H, W = x.data.shape
    if window < 1:
        raise ValueError(f"maxpool2d window must be positive, got {window}")
    if H % window or W % window:
        raise ValueError(
            f"maxpool2d needs spatial extents divisible by {window}, got {H}x{W}"
        )
    h, w = H // window, W // window
    regions = (
        x.data.reshape(B, C, h, window, w, window)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(B, C, h, w, window * window)
    )
    am = regions.argmax(axis=-1)  # first max in row-major region order
    out_data = np.take_along_axis(regions, am[..., None], axis=-1)[..., 0]

    def bwd(g):
        dreg = np.zeros_like(regions)
        np.put_along_axis(dreg, am[..., None], g[..., None], axis=-1)
        dx = (
            dreg.reshape(B, C, h, w, window, window)
            .transpose(0, 1, 2, 4, 3, 5)
            .reshape(B, C, H, W)
        )
        _accumulate(x, dx)

    return _from_op(out_data, (x,), bwd)


_RESAMPLE_CACHE: dict = {}


def _linear_resample_matrix(n_in: int, n_out: int, dtype) -> np.ndarray:
    """(n_out, n_in) bilinear interpolation weights, align-corners=false."""
    key = (n_in, n_out, np.dtype(dtype).str)
    cached = _RESAMPLE_CACHE.get(key)
    if cached is not None:
        return cached
    R = np.zeros((n_out, n_in), dtype=dtype)
    scale = n_in / n_out
    for i in range(n_out):
        src = (i + 0.5) * scale - 0.5
        src = min(max(src, 0.0), n_in - 1.0)
        i0 = int(np.floor(src))
        i1 = min(i0 + 1, n_in - 1)
        f = src - i0
        R[i, i0] += 1.0 - f
        R[i, i1] += f
    _RESAMPLE_CACHE[key] = R
    return R


def upsample_bilinear(x: Tensor, factor: int = 2) -> Tensor:
    """Fixed bilinear upsampling by an integer factor (align-corners=false)."""
    if factor < 1:
        raise ValueError(f"upsample factor must be positive, got {factor}")
    B, C, H, W = x.data.shape
    Rh = _linear_resample_matrix(H, factor * H, x.data.dtype)
    Rw = _linear_resample_matrix(W, factor * W, x.data.dtype)
    out_data = Rh @ x.data @ Rw.T

    def bwd(g):
        _accumulate(x, Rh.T @ g @ Rw)

    return _from_op(out_data, (x,), bwd)


def batchnorm2d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel batch normalization over (B, H, W).

    Train mode normalizes by the batch statistics (population variance) and
    updates the running buffers in place:
    ``running <- (1 - momentum) * running + momentum * batch``.
    Eval mode normalizes by the running buffers, which are then constants for
    differentiation.
    """
    B, C, H, W = x.data.shape
    if gamma.data.shape != (C,) or beta.data.shape != (C,):
        raise ValueError(
            f"batchnorm2d parameter shapes {gamma.data.shape}/{beta.data.shape} != ({C},)"
        )
    n = B * H * W
    if training and n < 2:
        raise ValueError(f"batchnorm2d train mode needs B*H*W >= 2, got {n}")

    if training:
        mean = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean
        running_var *= 1.0 - momentum
        running_var += momentum * var
    else:
        mean = running_mean
        var = running_var

    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean[None, :, None, None]) * inv_std[None, :, None, None]
    out_data = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]

    def bwd(g):
        _accumulate(beta, g.sum(axis=(0, 2, 3)))
        _accumulate(gamma, (g * xhat).sum(axis=(0, 2, 3)))
        if not x.requires_grad:
            return
        gs = gamma.data[None, :, None, None] * inv_std[None, :, None, None]
        if training:
            # account for the batch mean/variance depending on x
            g_mean = g.mean(axis=(0, 2, 3))[None, :, None, None]
            gx_mean = (g * xhat).mean(axis=(0, 2, 3))[None, :, None, None]
            _accumulate(x, gs * (g - g_mean - xhat * gx_mean))
        else:
            _accumulate(x, gs * g)

    return _from_op(out_data, (x, gamma, beta), bwd)


# -- backward pass ----------------------------------------------------------


def backward(loss: Tensor):
    """Populate ``.grad`` for every requires-grad tensor feeding ``loss``.

    The loss must be a scalar. A tensor consumed by several ops receives the
    sum of all branch adjoints. Leaf gradients accumulate additively across
    repeated calls; intermediate gradients are recomputed from scratch.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.data.shape}")

    topo: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, ready = stack.pop()
        if ready:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))

    for node in topo:
        if node._parents:
            node.grad = None
    seed = np.ones_like(loss.data)
    loss.grad = seed if loss.grad is None or loss._parents else loss.grad + seed
    for node in reversed(topo):
        if node._backward_fn is not None:
            node._backward_fn(node.grad)


def gradient_check(fn, inputs, step: float = 1e-3) -> float:
    """Compare analytic gradients of ``fn(*inputs)`` with central differences.

    ``fn`` must return a scalar Tensor and be deterministic. For each input
    tensor the analytic and numeric gradients are compared as vectors:
    |analytic - numeric| / max(|analytic|, |numeric|, 1e-8) with |.| the
    Euclidean norm; the max over all inputs is returned. Inputs should be
    contiguous float64 arrays for the comparison to be meaningful.
    """
    for t in inputs:
        t.grad = None
    backward(fn(*inputs))
    analytic = []
    for t in inputs:
        if t.grad is None:
            analytic.append(np.zeros_like(t.data))
        else:
            analytic.append(np.array(t.grad, dtype=t.data.dtype))

    worst = 0.0
    for t, ana in zip(inputs, analytic):
        flat = t.data.reshape(-1)
        num = np.zeros_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            hi = float(fn(*inputs).data)
            flat[i] = orig - step
            lo = float(fn(*inputs).data)
            flat[i] = orig
            num[i] = (hi - lo) / (2.0 * step)
        ana_flat = ana.reshape(-1)
        diff = float(np.linalg.norm(ana_flat - num))
        denom = max(float(np.linalg.norm(ana_flat)), float(np.linalg.norm(num)), 1e-8)
        worst = max(worst, diff / denom)
    return worst
