"""Forward and backward passes for the layers used by the feature network.

Activations are channel-last and batched: ``(N, D, H, W, C)``. A 4-D
``(D, H, W, C)`` array is accepted wherever a single sample makes sense and
is returned in the same rank. Convolution weights keep the conventional
``(C_out, C_in, k, k, k)`` layout.
"""

from __future__ import annotations

import functools

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def _as_batch(x):
    x = np.asarray(x)
    if x.ndim == 4:
        return x[None], True
    if x.ndim != 5:
        raise ValueError(f"expected (N, D, H, W, C) or (D, H, W, C), got {x.shape}")
    return x, False


def _unbatch(y, single):
    return y[0] if single else y


# ---------------------------------------------------------------------------
# convolution

def _check_conv(x, weight, bias):
    if weight.ndim != 5 or weight.shape[2:] not in ((3, 3, 3), (1, 1, 1)):
        raise ValueError(f"unsupported kernel shape {weight.shape}")
    if x.shape[-1] != weight.shape[1]:
        raise ValueError(
            f"channel mismatch: input has {x.shape[-1]}, kernel expects {weight.shape[1]}")
    if bias.shape != (weight.shape[0],):
        raise ValueError(f"bias shape {bias.shape} != ({weight.shape[0]},)")


def im2col(x: np.ndarray) -> np.ndarray:
    """Zero-padded 3x3x3 neighbourhoods as rows, column order (i, j, k, c)."""
    n, d, h, w, c = x.shape
    xp = np.zeros((n, d + 2, h + 2, w + 2, c), dtype=x.dtype)
    xp[:, 1:-1, 1:-1, 1:-1] = x
    win = sliding_window_view(xp, (3, 3, 3), axis=(1, 2, 3))
    return np.ascontiguousarray(win.transpose(0, 1, 2, 3, 5, 6, 7, 4)).reshape(n * d * h * w, 27 * c)


def _kernel_matrix(weight):
    return weight.transpose(2, 3, 4, 1, 0).reshape(-1, weight.shape[0])


def conv3d_forward(x, weight, bias, return_cols=False):
    """Stride-1 cross-correlation; 3^3 kernels use zero padding of 1.

    With ``return_cols`` the im2col matrix is returned as well so the
    backward pass can skip rebuilding it.
    """
    x, single = _as_batch(x)
    _check_conv(x, weight, bias)
    n, d, h, w, c = x.shape
    if weight.shape[2] == 1:
        cols = x.reshape(-1, c)
        out = cols @ weight.reshape(weight.shape[0], c).T
    else:
        cols = im2col(x)
        out = cols @ _kernel_matrix(weight)
    out += bias
    out = _unbatch(out.reshape(n, d, h, w, -1), single)
    return (out, cols) if return_cols else out


def conv3d_backward(x, weight, grad_out, cols=None, input_grad=True):
    """Gradients of :func:`conv3d_forward` w.r.t. input, weights and bias.

    ``grad_input`` is ``None`` when ``input_grad`` is false.
    """
    x, single = _as_batch(x)
    g, _ = _as_batch(grad_out)
    o = weight.shape[0]
    if g.shape[:4] != x.shape[:4] or g.shape[-1] != o or x.shape[-1] != weight.shape[1]:
        raise ValueError(f"shape mismatch: input {x.shape}, grad {g.shape}, kernel {weight.shape}")
    g2 = g.reshape(-1, o)
    grad_bias = g2.sum(axis=0)
    if weight.shape[2] == 1:
        if cols is None:
            cols = x.reshape(-1, x.shape[-1])
        grad_w = (g2.T @ cols).reshape(weight.shape)
        grad_x = (g2 @ weight.reshape(o, -1)).reshape(x.shape) if input_grad else None
    else:
        if cols is None:
            cols = im2col(x)
        gw = cols.T @ g2
        grad_w = gw.reshape(3, 3, 3, -1, o).transpose(4, 3, 0, 1, 2)
        # input gradient is a correlation of grad_out with the flipped,
        # channel-swapped kernel
        grad_x = None
        if input_grad:
            flipped = weight[:, :, ::-1, ::-1, ::-1].transpose(1, 0, 2, 3, 4)
            grad_x = conv3d_forward(g, np.ascontiguousarray(flipped),
                                    np.zeros(weight.shape[1], dtype=g.dtype))
    if grad_x is not None:
        grad_x = _unbatch(grad_x, single)
    return grad_x, np.ascontiguousarray(grad_w), grad_bias


# ---------------------------------------------------------------------------
# pointwise and resampling

def relu_forward(x):
    return np.maximum(x, 0)


def relu_backward(x, grad_out):
    return grad_out * (x > 0)


def maxpool2_forward(x):
    """2x2x2 max-pool, stride 2. Returns the pooled array and argmax indices.

    Ties go to the first voxel in (z, y, x) scan order within each block.
    """
    x, single = _as_batch(x)
    n, d, h, w, c = x.shape
    if d % 2 or h % 2 or w % 2:
        raise ValueError(f"max-pool needs even spatial dims, got {(d, h, w)}")
    blocks = (x.reshape(n, d // 2, 2, h // 2, 2, w // 2, 2, c)
               .transpose(0, 1, 3, 5, 7, 2, 4, 6)
               .reshape(n, d // 2, h // 2, w // 2, c, 8))
    idx = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]
    return _unbatch(out, single), _unbatch(idx, single)


def maxpool2_backward(grad_out, idx):
    g, single = _as_batch(grad_out)
    idx = idx[None] if single else idx
    n, d, h, w, c = g.shape
    blocks = np.zeros((n, d, h, w, c, 8), dtype=g.dtype)
    np.put_along_axis(blocks, idx[..., None], g[..., None], axis=-1)
    grad = (blocks.reshape(n, d, h, w, c, 2, 2, 2)
                  .transpose(0, 1, 5, 2, 6, 3, 7, 4)
                  .reshape(n, 2 * d, 2 * h, 2 * w, c))
    return _unbatch(grad, single)


@functools.lru_cache(maxsize=None)
def upsample_matrix(n: int) -> np.ndarray:
    """Linear x2 interpolation along one axis as a ``(2n, n)`` matrix.

    Output index ``i`` samples source coordinate ``(i + 0.5) / 2 - 0.5``,
    clamped to ``[0, n - 1]``.
    """
    u = np.zeros((2 * n, n))
    for i in range(2 * n):
        src = min(max((i + 0.5) / 2.0 - 0.5, 0.0), n - 1.0)
        lo = int(np.floor(src))
        hi = min(lo + 1, n - 1)
        frac = src - lo
        u[i, lo] += 1.0 - frac
        u[i, hi] += frac
    u.setflags(write=False)
    return u


def _apply_axes(x, transpose):
    for axis in (1, 2, 3):
        u = upsample_matrix(x.shape[axis] // 2 if transpose else x.shape[axis])
        u = (u.T if transpose else u).astype(x.dtype)
        x = np.moveaxis(np.tensordot(u, x, axes=(1, axis)), 0, axis)
    return np.ascontiguousarray(x)


def trilinear_up2_forward(x):
    x, single = _as_batch(x)
    return _unbatch(_apply_axes(x, transpose=False), single)


def trilinear_up2_backward(grad_out):
    g, single = _as_batch(grad_out)
    if any(s % 2 for s in g.shape[1:4]):
        raise ValueError(f"upsample gradient needs even dims, got {g.shape[1:4]}")
    return _unbatch(_apply_axes(g, transpose=True), single)


# ---------------------------------------------------------------------------
# pooling, head, loss

def _mask_batch(features, mask):
    f, single = _as_batch(features)
    m = np.asarray(mask, dtype=bool)
    if single:
        m = m[None]
    if m.shape != f.shape[:4]:
        raise ValueError(f"mask dims {m.shape[1:]} != feature dims {f.shape[1:4]}")
    counts = m.sum(axis=(1, 2, 3))
    if np.any(counts == 0):
        raise ValueError("mask is empty")
    return f, m, counts, single


def masked_avg_pool(features, mask):
    """Per-channel mean of ``features`` over voxels where ``mask`` is set."""
    f, m, counts, single = _mask_batch(features, mask)
    pooled = np.einsum("ndhwc,ndhw->nc", f, m.astype(f.dtype)) / counts[:, None].astype(f.dtype)
    return _unbatch(pooled, single)


def masked_avg_pool_backward(grad_pooled, mask, dtype=None):
    g = np.asarray(grad_pooled)
    single = g.ndim == 1
    g = g[None] if single else g
    m = np.asarray(mask, dtype=bool)
    m = m[None] if single else m
    counts = m.sum(axis=(1, 2, 3)).astype(g.dtype)
    scaled = g / counts[:, None]
    grad = m[..., None].astype(dtype or g.dtype) * scaled[:, None, None, None, :]
    return _unbatch(grad, single)


def head_apply(weight, bias, pooled):
    """Affine map of feature vectors (any leading shape) to k logits."""
    pooled = np.asarray(pooled)
    w2 = weight.reshape(weight.shape[0], -1)
    if pooled.shape[-1] != w2.shape[1]:
        raise ValueError(f"feature length {pooled.shape[-1]} != head input {w2.shape[1]}")
    return pooled @ w2.T + bias


def head_backward(weight, pooled, grad_logits):
    """Gradients of :func:`head_apply` for a batch ``(N, F)`` of inputs."""
    w2 = weight.reshape(weight.shape[0], -1)
    p = np.atleast_2d(pooled)
    g = np.atleast_2d(grad_logits)
    grad_pooled = (g @ w2).reshape(np.shape(pooled))
    return grad_pooled, (g.T @ p).reshape(weight.shape), g.sum(axis=0)


def softmax_xent(logits, labels):
    """Multinomial logistic loss with max subtraction.

    For a 1-D ``logits`` and an int label returns the loss and its gradient.
    For ``(N, k)`` logits returns the batch mean and the gradient of that
    mean.
    """
    z = np.asarray(logits, dtype=np.result_type(logits, np.float32))
    single = z.ndim == 1
    z = np.atleast_2d(z)
    y = np.atleast_1d(np.asarray(labels))
    k = z.shape[1]
    if y.shape != (z.shape[0],):
        raise ValueError("one label per row of logits required")
    if np.any((y < 0) | (y >= k)):
        raise ValueError(f"label out of range [0, {k})")
    shifted = z - z.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(len(y))
    losses = logsum - shifted[rows, y]
    grad = np.exp(shifted - logsum[:, None])
    grad[rows, y] -= 1.0
    if single:
        return float(losses[0]), grad[0]
    return float(losses.mean()), grad / len(y)


def sgd_step(params: dict, grads: dict, lr: float, momentum: float, velocity: dict):
    """In-place momentum SGD: ``v = momentum * v + g``; ``p -= lr * v``."""
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"{name}: gradient shape {g.shape} != parameter shape {p.shape}")
        v = velocity.get(name)
        if v is None:
            v = velocity[name] = np.zeros_like(p)
        v *= momentum
        v += g
        p -= (lr * v).astype(p.dtype)
    return params, velocity
