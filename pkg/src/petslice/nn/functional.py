"""
Forward/backward kernels for the classifier's layers.

Every forward returns ``(out, cache)``; the matching backward takes the
upstream gradient plus that cache and returns the input gradient together
with any parameter gradients. Tensors are NCHW numpy arrays; the dtype of
the input is preserved so the same kernels serve float32 training and
float64 gradient checks.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    """Raised when tensor dimensions are inconsistent for an operation."""


def _check_4d(x, name="input"):
    if x.ndim != 4:
        raise ShapeError(f"{name} must be 4-D (N, C, H, W), got shape {x.shape}")


def conv_output_size(size, kernel, stride, padding):
    return (size + 2 * padding - kernel) // stride + 1


# ---------------------------------------------------------------------------
# Convolution
# ---------------------------------------------------------------------------

def _im2col(xp, kh, kw, stride, ho, wo):
    n, c = xp.shape[:2]
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, : stride * (ho - 1) + 1 : stride, : stride * (wo - 1) + 1 : stride]
    # (N, Ho, Wo, C, kh, kw) -> rows are output pixels
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)


def conv2d_forward(x, weight, bias=None, stride=1, padding=0):
    """2-D cross-correlation.

    Args:
        x: input of shape (N, C, H, W).
        weight: kernels of shape (O, C, kH, kW).
        bias: optional (O,) vector.
        stride: positive step between output samples.
        padding: zero padding added on every spatial border.

    Returns:
        out of shape (N, O, Ho, Wo) with Ho = (H + 2*padding - kH) // stride + 1,
        and the cache needed by :func:`conv2d_backward`.
    """
    _check_4d(x)
    if weight.ndim != 4:
        raise ShapeError(f"weight must be 4-D (O, C, kH, kW), got shape {weight.shape}")
    if stride < 1 or padding < 0:
        raise ShapeError(f"stride must be >= 1 and padding >= 0, got stride={stride}, padding={padding}")
    n, c, h, w = x.shape
    o, wc, kh, kw = weight.shape
    if wc != c:
        raise ShapeError(
            f"channel mismatch: input has C={c} (shape {x.shape}) but weight expects "
            f"C={wc} (shape {weight.shape})"
        )
    if bias is not None and bias.shape != (o,):
        raise ShapeError(f"bias must have shape ({o},), got {bias.shape}")
    hp, wp = h + 2 * padding, w + 2 * padding
    if kh > hp or kw > wp:
        raise ShapeError(
            f"kernel {kh}x{kw} larger than padded input {hp}x{wp} "
            f"(input {h}x{w}, padding {padding})"
        )
    ho = conv_output_size(h, kh, stride, padding)
    wo = conv_output_size(w, kw, stride, padding)

    if padding:
        xp = np.zeros((n, c, hp, wp), dtype=x.dtype)
        xp[:, :, padding : padding + h, padding : padding + w] = x
    else:
        xp = x
    cols = _im2col(xp, kh, kw, stride, ho, wo)
    wmat = weight.reshape(o, -1)
    out = cols @ wmat.T
    if bias is not None:
        out += bias
    out = np.ascontiguousarray(out.reshape(n, ho, wo, o).transpose(0, 3, 1, 2))
    cache = (x.shape, cols, weight, stride, padding, bias is not None)
    return out, cache


def conv2d_backward(dout, cache):
    """Returns (dx, dweight, dbias); dbias is None for bias-free convs."""
    (n, c, h, w), cols, weight, stride, padding, has_bias = cache
    o, _, kh, kw = weight.shape
    ho, wo = dout.shape[2:]
    d2 = dout.transpose(0, 2, 3, 1).reshape(-1, o)
    dweight = (d2.T @ cols).reshape(weight.shape)
    dbias = d2.sum(axis=0) if has_bias else None

    dcols = (d2 @ weight.reshape(o, -1)).reshape(n, ho, wo, c, kh, kw)
    dxp = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=dout.dtype)
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += (
                dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            )
    dx = dxp[:, :, padding : padding + h, padding : padding + w] if padding else dxp
    return np.ascontiguousarray(dx), dweight, dbias


# ---------------------------------------------------------------------------
# Batch normalization
# ---------------------------------------------------------------------------

def batchnorm2d_forward(x, gamma, beta, running_mean, running_var, training,
                        momentum=0.1, eps=1e-5):
    """Per-channel batch normalization.

    In training mode the batch statistics are used and ``running_mean`` /
    ``running_var`` are updated in place with an exponential moving average
    (the running variance uses the unbiased estimate). In eval mode the
    running statistics are used and nothing is mutated.
    """
    _check_4d(x)
    n, c, h, w = x.shape
    if gamma.shape != (c,):
        raise ShapeError(f"batchnorm expects {gamma.shape[0]} channels, input has {c}")
    if training:
        if n < 2:
            raise ShapeError(
                "batchnorm in train mode needs batch size >= 2; "
                f"got input shape {x.shape}"
            )
        mean = x.mean(axis=(0, 2, 3))
        xc = x - mean[None, :, None, None]
        var = (xc * xc).mean(axis=(0, 2, 3))
        m = n * h * w
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean
        running_var *= 1.0 - momentum
        running_var += momentum * var * (m / (m - 1))
    else:
        mean = running_mean.astype(x.dtype, copy=False)
        var = running_var.astype(x.dtype, copy=False)
        xc = x - mean[None, :, None, None]
    inv_std = (1.0 / np.sqrt(var + eps)).astype(x.dtype, copy=False)
    xhat = xc * inv_std[None, :, None, None]
    out = xhat * gamma[None, :, None, None] + beta[None, :, None, None]
    return out, (xhat, inv_std, gamma, training)


def batchnorm2d_backward(dout, cache):
    xhat, inv_std, gamma, training = cache
    dgamma = (dout * xhat).sum(axis=(0, 2, 3))
    dbeta = dout.sum(axis=(0, 2, 3))
    dxhat = dout * gamma[None, :, None, None]
    if not training:
        return dxhat * inv_std[None, :, None, None], dgamma, dbeta
    m = dout.shape[0] * dout.shape[2] * dout.shape[3]
    # dx = inv_std/m * (m*dxhat - sum(dxhat) - xhat*sum(dxhat*xhat))
    s1 = dxhat.sum(axis=(0, 2, 3))[None, :, None, None]
    s2 = (dxhat * xhat).sum(axis=(0, 2, 3))[None, :, None, None]
    dx = (inv_std[None, :, None, None] / m) * (m * dxhat - s1 - xhat * s2)
    return dx, dgamma, dbeta


# ---------------------------------------------------------------------------
# Elementwise
# ---------------------------------------------------------------------------

def relu_forward(x):
    mask = x > 0
    return x * mask, mask


def relu_backward(dout, mask):
    # subgradient at exactly 0 is 0
    return dout * mask


def sigmoid(z):
    """Logistic function, stable for large |z| (branches on the sign)."""
    z = np.asarray(z)
    if not np.issubdtype(z.dtype, np.floating):
        z = z.astype(np.float64)
    ez = np.exp(-np.abs(z))
    out = np.where(z >= 0, 1.0 / (1.0 + ez), ez / (1.0 + ez))
    return out[()] if out.ndim == 0 else out


# ---------------------------------------------------------------------------
# Pooling
# ---------------------------------------------------------------------------

def maxpool2d_forward(x, window=2, stride=2):
    _check_4d(x)
    n, c, h, w = x.shape
    if window > h or window > w:
        raise ShapeError(f"pool window {window} larger than input {h}x{w}")
    ho = (h - window) // stride + 1
    wo = (w - window) // stride + 1
    win = sliding_window_view(x, (window, window), axis=(2, 3))
    win = win[:, :, : stride * (ho - 1) + 1 : stride, : stride * (wo - 1) + 1 : stride]
    flat = win.reshape(n, c, ho, wo, window * window)
    # argmax returns the first maximal index: row-major first tie wins
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    di, dj = np.divmod(arg, window)
    rows = np.arange(ho)[None, None, :, None] * stride + di
    cols = np.arange(wo)[None, None, None, :] * stride + dj
    plane = (np.arange(n)[:, None, None, None] * c + np.arange(c)[None, :, None, None])
    src = (plane * h + rows) * w + cols
    return np.ascontiguousarray(out), (x.shape, src)


def maxpool2d_backward(dout, cache):
    shape, src = cache
    size = int(np.prod(shape))
    dx = np.bincount(src.ravel(), weights=dout.ravel(), minlength=size)
    return dx.astype(dout.dtype, copy=False).reshape(shape)


def global_avgpool_forward(x):
    _check_4d(x)
    return x.mean(axis=(2, 3), keepdims=True), x.shape


def global_avgpool_backward(dout, shape):
    h, w = shape[2:]
    return np.broadcast_to(dout / (h * w), shape).copy()


# ---------------------------------------------------------------------------
# Fully connected
# ---------------------------------------------------------------------------

def linear_forward(x, weight, bias=None):
    if x.ndim != 2:
        raise ShapeError(f"linear input must be 2-D (N, F), got shape {x.shape}")
    if weight.ndim != 2 or weight.shape[1] != x.shape[1]:
        raise ShapeError(
            f"linear dimension mismatch: input has F={x.shape[1]} (shape {x.shape}), "
            f"weight has shape {weight.shape} (expected (G, {x.shape[1]}))"
        )
    out = x @ weight.T
    if bias is not None:
        out = out + bias
    return out, (x, weight, bias is not None)


def linear_backward(dout, cache):
    x, weight, has_bias = cache
    dx = dout @ weight
    dweight = dout.T @ x
    dbias = dout.sum(axis=0) if has_bias else None
    return dx, dweight, dbias
