"""Minimal 1-D neural network layers with hand-written backpropagation.

Everything is float64 and functional: forward passes return (output, cache)
and backward passes consume (grad_output, cache).  Shapes are
(batch, channels, length) for convolutional tensors.
"""

from __future__ import annotations

import io

import numpy as np

from .errors import ValidationError

# --- convolution ------------------------------------------------------------


def conv1d_forward(x, w, b, stride: int = 1):
    """Same-padded 1-D convolution. x: (n, c_in, L); w: (c_out, c_in, K)."""
    n, c_in, length = x.shape
    c_out, _, k = w.shape
    pad = k // 2
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad)))
    l_out = (length + 2 * pad - k) // stride + 1
    y = np.broadcast_to(b[None, :, None], (n, c_out, l_out)).copy()
    for tap in range(k):
        xs = xp[:, :, tap : tap + stride * (l_out - 1) + 1 : stride]
        y += np.matmul(w[:, :, tap], xs)
    return y, (x.shape, xp, w, stride)


def conv1d_backward(dy, cache):
    x_shape, xp, w, stride = cache
    n, _, length = x_shape
    c_out, c_in, k = w.shape
    pad = k // 2
    l_out = dy.shape[2]
    dw = np.empty_like(w)
    db = dy.sum(axis=(0, 2))
    dxp = np.zeros_like(xp)
    dy_flat = np.ascontiguousarray(dy.transpose(1, 0, 2)).reshape(c_out, n * l_out)
    for tap in range(k):
        sl = slice(tap, tap + stride * (l_out - 1) + 1, stride)
        xs = xp[:, :, sl]
        xs_flat = np.ascontiguousarray(xs.transpose(1, 0, 2)).reshape(c_in, n * l_out)
        dw[:, :, tap] = dy_flat @ xs_flat.T
        dxp[:, :, sl] += np.matmul(w[:, :, tap].T, dy)
    dx = dxp[:, :, pad : pad + length] if pad else dxp
    return dx, dw, db


# --- per-channel normalization ----------------------------------------------


def channel_norm_forward(x, gain, bias, eps: float = 1e-5):
    """Normalize each (sample, channel) series over time; batch-free, so the
    forward pass is deterministic per sample."""
    mu = x.mean(axis=2, keepdims=True)
    var = x.var(axis=2, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu) * inv
    y = gain[None, :, None] * xhat + bias[None, :, None]
    return y, (xhat, inv, gain)


def channel_norm_backward(dy, cache):
    xhat, inv, gain = cache
    dgain = (dy * xhat).sum(axis=(0, 2))
    dbias = dy.sum(axis=(0, 2))
    dxhat = dy * gain[None, :, None]
    dx = inv * (
        dxhat
        - dxhat.mean(axis=2, keepdims=True)
        - xhat * (dxhat * xhat).mean(axis=2, keepdims=True)
    )
    return dx, dgain, dbias


# --- pointwise / pooling ------------------------------------------------------


def relu_forward(x):
    return np.maximum(x, 0.0), (x > 0.0)


def relu_backward(dy, cache):
    return dy * cache


def gap_forward(x):
    """Global average pooling over time: (n, c, L) -> (n, c)."""
    return x.mean(axis=2), x.shape


def gap_backward(dy, cache):
    n, c, length = cache
    return np.broadcast_to(dy[:, :, None] / length, (n, c, length)).copy()


def linear_forward(x, w, b):
    """x: (n, d); w: (out, d)."""
    return x @ w.T + b, x


def linear_backward(dy, cache, w):
    x = cache
    return dy @ w, dy.T @ x, dy.sum(axis=0)


def dropout_forward(x, rate: float, rng: np.random.Generator):
    if rate <= 0.0:
        return x, None
    mask = (rng.uniform(size=x.shape) >= rate) / (1.0 - rate)
    return x * mask, mask


def dropout_backward(dy, mask):
    if mask is None:
        return dy
    return dy * mask


# --- parameter serialization --------------------------------------------------

_WEIGHTS_MAGIC = "pulse-encoder-weights v1"


def save_params(path, params: dict[str, np.ndarray]) -> None:
    """Text header (names, shapes) followed by little-endian float64 data."""
    buf = io.BytesIO()
    buf.write((_WEIGHTS_MAGIC + "\n").encode())
    for name, tensor in params.items():
        shape = ",".join(str(d) for d in tensor.shape)
        buf.write(f"tensor {name} {shape}\n".encode())
    buf.write(b"end_header\n")
    for tensor in params.values():
        buf.write(np.ascontiguousarray(tensor, dtype="<f8").tobytes())
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_params(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        data = fh.read()
    header_end = data.find(b"end_header\n")
    if header_end < 0:
        raise ValidationError(f"{path}: missing end_header marker")
    lines = data[:header_end].decode().splitlines()
    if not lines or lines[0] != _WEIGHTS_MAGIC:
        raise ValidationError(f"{path}: not a weights file")
    specs = []
    for line in lines[1:]:
        _, name, shape = line.split(" ")
        dims = tuple(int(d) for d in shape.split(",") if d)
        specs.append((name, dims))
    blob = data[header_end + len(b"end_header\n") :]
    params: dict[str, np.ndarray] = {}
    offset = 0
    for name, dims in specs:
        count = int(np.prod(dims)) if dims else 1
        chunk = np.frombuffer(blob, dtype="<f8", count=count, offset=offset)
        params[name] = chunk.reshape(dims).astype(np.float64)
        offset += count * 8
    return params
