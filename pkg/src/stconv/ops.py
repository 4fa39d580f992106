"""Forward and backward kernels for the layers used by C3D and R(2+1)D.

All kernels take and return plain arrays in ``N x C x T x H x W`` layout
(``N x D`` for fully connected layers).  They preserve the input dtype so
gradient checks can run in float64; network code always feeds float32.

Convolution has two implementations: :func:`conv3d_naive` is a direct
nested-loop cross-correlation kept as the reference oracle, and
:func:`conv3d_forward` / :func:`conv3d_backward` use blocked im2col plus a
single GEMM per block.
"""
from __future__ import annotations

import math
from typing import NamedTuple, Sequence

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .errors import ConfigError, GeometryError, LabelError, ShapeError
from .parallel import map_items

Triple = tuple[int, int, int]

BN_EPS = 1e-5
BN_MOMENTUM = 0.9

# im2col column buffers are built in blocks of output frames up to this size
_COL_BUDGET_BYTES = 32 * 1024 * 1024


def triple(v: int | Sequence[int]) -> Triple:
    if isinstance(v, (int, np.integer)):
        return (int(v),) * 3
    t = tuple(int(x) for x in v)
    if len(t) != 3:
        raise GeometryError(f"expected 3 values, got {t}")
    return t  # type: ignore[return-value]


def out_extent(size: int, kernel: int, stride: int, pad: int) -> int:
    """Output length of one axis: floor((in + 2*pad - kernel) / stride) + 1."""
    if kernel < 1 or stride < 1 or pad < 0:
        raise GeometryError(f"bad geometry kernel={kernel} stride={stride} pad={pad}")
    span = size + 2 * pad - kernel
    if span < 0:
        raise GeometryError(
            f"kernel {kernel} does not fit input {size} with padding {pad}")
    return span // stride + 1


def out_shape3(spatial: Sequence[int], kernel: Triple, stride: Triple,
               padding: Triple) -> Triple:
    return tuple(out_extent(s, k, st, p)
                 for s, k, st, p in zip(spatial, kernel, stride, padding))  # type: ignore[return-value]


def _check5(x: np.ndarray, what: str) -> None:
    if x.ndim != 5:
        raise ShapeError(f"{what}: expected N x C x T x H x W input, got shape {x.shape}")


def _pad5(x: np.ndarray, padding: Triple, value: float = 0.0) -> np.ndarray:
    pt, ph, pw = padding
    if pt == ph == pw == 0:
        return np.ascontiguousarray(x)
    return np.pad(x, ((0, 0), (0, 0), (pt, pt), (ph, ph), (pw, pw)),
                  constant_values=value)


# ----------------------------------------------------------------- conv3d


def _conv_geometry(x: np.ndarray, weight: np.ndarray, stride, padding):
    _check5(x, "conv3d")
    if weight.ndim != 5:
        raise ShapeError(f"conv3d weight must be 5-D, got {weight.shape}")
    if x.shape[1] != weight.shape[1]:
        raise ShapeError(
            f"conv3d: input has {x.shape[1]} channels, weights expect {weight.shape[1]}")
    stride, padding = triple(stride), triple(padding)
    outs = out_shape3(x.shape[2:], weight.shape[2:], stride, padding)
    return stride, padding, outs


def conv3d_naive(x: np.ndarray, weight: np.ndarray, bias: np.ndarray | None,
                 stride=1, padding=0) -> np.ndarray:
    """Reference cross-correlation by explicit loops, accumulated in float64."""
    stride, padding, (To, Ho, Wo) = _conv_geometry(x, weight, stride, padding)
    N, C, T, H, W = x.shape
    Co, _, kt, kh, kw = weight.shape
    st, sh, sw = stride
    pt, ph, pw = padding
    xs = x.astype(np.float64).tolist()
    ws = weight.astype(np.float64).tolist()
    out = np.zeros((N, Co, To, Ho, Wo), dtype=np.float64)
    for n in range(N):
        for co in range(Co):
            b = float(bias[co]) if bias is not None else 0.0
            wco = ws[co]
            for to in range(To):
                for ho in range(Ho):
                    for wo in range(Wo):
                        acc = b
                        for ci in range(C):
                            xc, wc = xs[n][ci], wco[ci]
                            for a in range(kt):
                                ti = to * st + a - pt
                                if ti < 0 or ti >= T:
                                    continue
                                for i in range(kh):
                                    hi = ho * sh + i - ph
                                    if hi < 0 or hi >= H:
                                        continue
                                    for j in range(kw):
                                        wi = wo * sw + j - pw
                                        if 0 <= wi < W:
                                            acc += xc[ti][hi][wi] * wc[a][i][j]
                        out[n, co, to, ho, wo] = acc
    return out.astype(np.result_type(x, weight))


def _frame_blocks(rows: int, To: int, Ho: int, Wo: int, itemsize: int) -> list[tuple[int, int]]:
    per_frame = max(1, rows * Ho * Wo * itemsize)
    step = max(1, min(To, _COL_BUDGET_BYTES // per_frame))
    return [(t0, min(To, t0 + step)) for t0 in range(0, To, step)]


def _im2col(xp: np.ndarray, kernel: Triple, stride: Triple, t0: int, t1: int,
            Ho: int, Wo: int) -> np.ndarray:
    """Columns for output frames [t0, t1) of one padded item ``C x Tp x Hp x Wp``."""
    C = xp.shape[0]
    kt, kh, kw = kernel
    st, sh, sw = stride
    base = xp[:, t0 * st:]
    s0, s1, s2, s3 = base.strides
    view = as_strided(base, shape=(C, kt, kh, kw, t1 - t0, Ho, Wo),
                      strides=(s0, s1, s2, s3, s1 * st, s2 * sh, s3 * sw),
                      writeable=False)
    return view.reshape(C * kt * kh * kw, (t1 - t0) * Ho * Wo)


def conv3d_forward(x: np.ndarray, weight: np.ndarray, bias: np.ndarray | None,
                   stride=1, padding=0) -> np.ndarray:
    stride, padding, (To, Ho, Wo) = _conv_geometry(x, weight, stride, padding)
    N = x.shape[0]
    Co = weight.shape[0]
    kernel = weight.shape[2:]
    dtype = np.result_type(x, weight)
    xp = _pad5(x.astype(dtype, copy=False), padding)
    w2 = weight.reshape(Co, -1).astype(dtype, copy=False)
    blocks = _frame_blocks(w2.shape[1], To, Ho, Wo, xp.itemsize)
    out = np.empty((N, Co, To, Ho * Wo), dtype=dtype)

    def item(n: int) -> None:
        for t0, t1 in blocks:
            cols = _im2col(xp[n], kernel, stride, t0, t1, Ho, Wo)
            res = w2 @ cols
            if bias is not None:
                res += bias.astype(dtype, copy=False)[:, None]
            out[n, :, t0:t1] = res.reshape(Co, t1 - t0, Ho * Wo)

    map_items(item, N)
    return out.reshape(N, Co, To, Ho, Wo)


class ConvGrads(NamedTuple):
    grad_input: np.ndarray
    grad_weight: np.ndarray
    grad_bias: np.ndarray


def conv3d_backward(x: np.ndarray, weight: np.ndarray, grad_out: np.ndarray,
                    stride=1, padding=0) -> ConvGrads:
    stride, padding, (To, Ho, Wo) = _conv_geometry(x, weight, stride, padding)
    N, C, T, H, W = x.shape
    Co = weight.shape[0]
    if grad_out.shape != (N, Co, To, Ho, Wo):
        raise ShapeError(
            f"conv3d backward: grad_out {grad_out.shape} != output {(N, Co, To, Ho, Wo)}")
    kt, kh, kw = kernel = weight.shape[2:]
    st, sh, sw = stride
    pt, ph, pw = padding
    dtype = np.result_type(x, weight, grad_out)
    xp = _pad5(x.astype(dtype, copy=False), padding)
    w2 = weight.reshape(Co, -1).astype(dtype, copy=False)
    g = grad_out.astype(dtype, copy=False).reshape(N, Co, To, Ho * Wo)
    blocks = _frame_blocks(w2.shape[1], To, Ho, Wo, xp.itemsize)
    grad_x = np.empty((N, C, T, H, W), dtype=dtype)

    def item(n: int) -> np.ndarray:
        gw = np.zeros_like(w2)
        gxp = np.zeros(xp.shape[1:], dtype=dtype)
        for t0, t1 in blocks:
            tb = t1 - t0
            cols = _im2col(xp[n], kernel, stride, t0, t1, Ho, Wo)
            gblk = g[n, :, t0:t1].reshape(Co, tb * Ho * Wo)
            gw += gblk @ cols.T
            dcols = (w2.T @ gblk).reshape(C, kt, kh, kw, tb, Ho, Wo)
            for a in range(kt):
                ta = t0 * st + a
                for i in range(kh):
                    for j in range(kw):
                        gxp[:, ta:ta + st * (tb - 1) + 1:st,
                            i:i + sh * (Ho - 1) + 1:sh,
                            j:j + sw * (Wo - 1) + 1:sw] += dcols[:, a, i, j]
        grad_x[n] = gxp[:, pt:pt + T, ph:ph + H, pw:pw + W]
        return gw

    partial = map_items(item, N)
    gw = partial[0]
    for p in partial[1:]:
        gw = gw + p
    grad_b = g.sum(axis=(0, 2, 3))
    return ConvGrads(grad_x, gw.reshape(weight.shape), grad_b)


# --------------------------------------------------------------- max pool


class PoolCache(NamedTuple):
    input_shape: tuple[int, ...]
    padded_shape: tuple[int, ...]
    flat_index: np.ndarray


def maxpool3d_forward(x: np.ndarray, kernel, stride, padding=0) -> tuple[np.ndarray, PoolCache]:
    _check5(x, "maxpool3d")
    kernel, stride, padding = triple(kernel), triple(stride), triple(padding)
    if any(p >= k for p, k in zip(padding, kernel)):
        raise GeometryError(f"pool padding {padding} must be smaller than kernel {kernel}")
    To, Ho, Wo = out_shape3(x.shape[2:], kernel, stride, padding)
    N, C = x.shape[:2]
    xp = _pad5(x, padding, value=-np.inf)
    s = xp.strides
    kt, kh, kw = kernel
    st, sh, sw = stride
    windows = as_strided(
        xp, shape=(N, C, To, Ho, Wo, kt, kh, kw),
        strides=(s[0], s[1], s[2] * st, s[3] * sh, s[4] * sw, s[2], s[3], s[4]),
        writeable=False).reshape(N, C, To, Ho, Wo, kt * kh * kw)
    local = windows.argmax(axis=-1)
    out = np.take_along_axis(windows, local[..., None], axis=-1)[..., 0]
    a, i, j = np.unravel_index(local, kernel)
    Tp, Hp, Wp = xp.shape[2:]
    tt = np.arange(To).reshape(To, 1, 1) * st + a
    hh = np.arange(Ho).reshape(1, Ho, 1) * sh + i
    ww = np.arange(Wo).reshape(1, 1, Wo) * sw + j
    nc = np.arange(N * C).reshape(N, C, 1, 1, 1)
    flat = ((nc * Tp + tt) * Hp + hh) * Wp + ww
    return np.ascontiguousarray(out), PoolCache(x.shape, xp.shape, flat)


def maxpool3d_backward(grad_out: np.ndarray, cache: PoolCache) -> np.ndarray:
    if grad_out.shape != cache.flat_index.shape:
        raise ShapeError(f"maxpool backward: grad shape {grad_out.shape} mismatch")
    size = int(np.prod(cache.padded_shape))
    gp = np.bincount(cache.flat_index.ravel(), weights=grad_out.ravel().astype(np.float64),
                     minlength=size).astype(grad_out.dtype).reshape(cache.padded_shape)
    N, C, T, H, W = cache.input_shape
    pt = (cache.padded_shape[2] - T) // 2
    ph = (cache.padded_shape[3] - H) // 2
    pw = (cache.padded_shape[4] - W) // 2
    return np.ascontiguousarray(gp[:, :, pt:pt + T, ph:ph + H, pw:pw + W])


# ------------------------------------------------------------------- relu


def relu_forward(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0).astype(x.dtype, copy=False)


def relu_backward(x: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    return np.where(x > 0, grad_out, 0).astype(grad_out.dtype, copy=False)


# -------------------------------------------------------------- batchnorm


class BnCache(NamedTuple):
    xhat: np.ndarray
    inv_std: np.ndarray
    gamma: np.ndarray
    train: bool


def _bn_axes(x: np.ndarray) -> tuple[int, ...]:
    if x.ndim < 2:
        raise ShapeError(f"batchnorm needs at least 2-D input, got {x.shape}")
    return (0,) + tuple(range(2, x.ndim))


def _per_channel(v: np.ndarray, ndim: int) -> np.ndarray:
    return v.reshape((1, -1) + (1,) * (ndim - 2))


def batchnorm_forward(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray,
                      running_mean: np.ndarray, running_var: np.ndarray,
                      mode: str = "train", eps: float = BN_EPS,
                      momentum: float = BN_MOMENTUM) -> tuple[np.ndarray, BnCache]:
    """Per-channel normalization over every axis but C.

    In ``train`` mode the running statistics are updated in place as
    ``running = momentum * running + (1 - momentum) * batch`` (unbiased
    variance for the running estimate).
    """
    if eps <= 0:
        raise ConfigError(f"batchnorm eps must be > 0, got {eps}")
    if mode not in ("train", "infer"):
        raise ConfigError(f"batchnorm mode must be train or infer, got {mode!r}")
    axes = _bn_axes(x)
    C = x.shape[1]
    if gamma.shape != (C,) or beta.shape != (C,):
        raise ShapeError(f"batchnorm: gamma/beta must have length {C}")
    dtype = x.dtype
    if mode == "train":
        count = x.size // C
        mean = x.mean(axis=axes, dtype=np.float64)
        var = x.var(axis=axes, dtype=np.float64)
        unbiased = var * count / max(count - 1, 1)
        running_mean *= momentum
        running_mean += ((1 - momentum) * mean).astype(running_mean.dtype)
        running_var *= momentum
        running_var += ((1 - momentum) * unbiased).astype(running_var.dtype)
    else:
        mean = running_mean.astype(np.float64)
        var = running_var.astype(np.float64)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = ((x - _per_channel(mean, x.ndim)) * _per_channel(inv_std, x.ndim)).astype(dtype)
    y = xhat * _per_channel(gamma.astype(dtype), x.ndim) + _per_channel(beta.astype(dtype), x.ndim)
    return y.astype(dtype, copy=False), BnCache(xhat, inv_std.astype(dtype), gamma, mode == "train")


def batchnorm_backward(grad_out: np.ndarray, cache: BnCache):
    axes = _bn_axes(grad_out)
    nd = grad_out.ndim
    xhat, inv_std, gamma, train = cache
    grad_gamma = (grad_out * xhat).sum(axis=axes)
    grad_beta = grad_out.sum(axis=axes)
    dxhat = grad_out * _per_channel(gamma.astype(grad_out.dtype), nd)
    if train:
        m = grad_out.size // grad_out.shape[1]
        grad_x = (_per_channel(inv_std, nd) / m) * (
            m * dxhat
            - _per_channel(dxhat.sum(axis=axes), nd)
            - xhat * _per_channel((dxhat * xhat).sum(axis=axes), nd))
    else:
        grad_x = dxhat * _per_channel(inv_std, nd)
    return grad_x.astype(grad_out.dtype, copy=False), grad_gamma, grad_beta


# --------------------------------------------------------- fully connected


def fully_connected_forward(x: np.ndarray, weight: np.ndarray, bias: np.ndarray | None) -> np.ndarray:
    """Affine map ``x @ weight + bias`` with ``weight`` stored as ``D x K``."""
    x2 = x.reshape(x.shape[0], -1)
    if x2.shape[1] != weight.shape[0]:
        raise ShapeError(f"fc: input width {x2.shape[1]} != weight rows {weight.shape[0]}")
    y = x2 @ weight
    if bias is not None:
        if bias.shape != (weight.shape[1],):
            raise ShapeError(f"fc: bias shape {bias.shape} != ({weight.shape[1]},)")
        y = y + bias
    return y


def fully_connected_backward(x: np.ndarray, weight: np.ndarray, grad_out: np.ndarray):
    x2 = x.reshape(x.shape[0], -1)
    if grad_out.shape != (x2.shape[0], weight.shape[1]):
        raise ShapeError(f"fc backward: grad shape {grad_out.shape} mismatch")
    grad_x = (grad_out @ weight.T).reshape(x.shape)
    return grad_x, x2.T @ grad_out, grad_out.sum(axis=0)


# ---------------------------------------------------- global average pool


def global_avg_pool_forward(x: np.ndarray) -> np.ndarray:
    _check5(x, "global_avg_pool")
    return x.mean(axis=(2, 3, 4), dtype=np.float64).astype(x.dtype)


def global_avg_pool_backward(input_shape: Sequence[int], grad_out: np.ndarray) -> np.ndarray:
    N, C, T, H, W = input_shape
    g = grad_out.reshape(N, C, 1, 1, 1) / (T * H * W)
    return np.broadcast_to(g, tuple(input_shape)).astype(grad_out.dtype)


# ------------------------------------------------------- softmax & losses


def softmax(x: np.ndarray) -> np.ndarray:
    if x.ndim != 2 or x.shape[1] < 1:
        raise ShapeError(f"softmax expects N x K input, got {x.shape}")
    z = x.astype(np.float64) - x.max(axis=1, keepdims=True)
    e = np.exp(z)
    return (e / e.sum(axis=1, keepdims=True)).astype(x.dtype)


def softmax_backward(probs: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    inner = (grad_out * probs).sum(axis=1, keepdims=True)
    return probs * (grad_out - inner)


def _check_labels(labels: np.ndarray, n: int, k: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise LabelError(f"expected {n} labels, got shape {labels.shape}")
    if np.any(labels < 0) or np.any(labels >= k) or not np.all(labels == np.floor(labels)):
        raise LabelError(f"labels must be integers in [0, {k})")
    return labels.astype(np.int64)


def cross_entropy_loss(probs: np.ndarray, labels) -> float:
    """Mean negative log-likelihood of the true class."""
    n, k = probs.shape
    labels = _check_labels(labels, n, k)
    p = probs[np.arange(n), labels].astype(np.float64)
    return float(-np.log(np.maximum(p, np.finfo(np.float64).tiny)).mean()) + 0.0


def cross_entropy_grad_logits(probs: np.ndarray, labels) -> np.ndarray:
    """Gradient of the mean cross-entropy with respect to the softmax logits."""
    n, k = probs.shape
    labels = _check_labels(labels, n, k)
    g = probs.astype(np.float64).copy()
    g[np.arange(n), labels] -= 1.0
    return (g / n).astype(probs.dtype)


def hinge_loss(scores, labels, l2: float, weights) -> float:
    """Mean hinge loss ``max(0, 1 - y*f)`` plus ``(l2/2) * ||w||^2``; labels in {-1, +1}."""
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel()
    if labels.shape != scores.shape:
        raise LabelError("one label per score required")
    if not np.all(np.isin(labels, (-1, 1))):
        raise LabelError("hinge labels must be -1 or +1")
    w = np.asarray(weights, dtype=np.float64).ravel()
    margin = np.maximum(0.0, 1.0 - labels * scores)
    return float(margin.mean() + 0.5 * l2 * float(w @ w)) + 0.0


def conv_flops(in_channels: int, out_channels: int, kernel: Triple, out_positions: int) -> int:
    """2 * multiply-accumulates for one conv layer."""
    return 2 * in_channels * out_channels * math.prod(kernel) * out_positions
