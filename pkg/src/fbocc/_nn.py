"""Small numpy forward-pass kernels shared by the encoder and the head.

Convolutions are evaluated as a fixed-order sum over kernel taps so results
do not depend on scheduling.
"""
import numpy as np


def relu(x):
    return np.maximum(x, 0.0)


def softmax(x, axis=0):
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(x, axis=0):
    z = x - x.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def _conv_nd(x, w, b):
    nd = x.ndim - 1
    cout, cin = w.shape[:2]
    ks = w.shape[2:]
    if x.shape[0] != cin:
        raise ValueError(f"conv expects {cin} input channels, got {x.shape[0]}")
    pad = [(0, 0)] + [(k // 2, k // 2) for k in ks]
    xp = np.pad(x, pad)
    spatial = x.shape[1:]
    out = np.zeros((cout,) + spatial)
    for tap in np.ndindex(*ks):
        window = xp[(slice(None),) + tuple(slice(t, t + n) for t, n in zip(tap, spatial))]
        out += np.tensordot(w[(slice(None), slice(None)) + tap], window, axes=(1, 0))
    if b is not None:
        out += np.asarray(b).reshape((cout,) + (1,) * nd)
    return out


def conv2d(x, w, b=None):
    """Same-padded 2D convolution (cross-correlation), ``x`` is ``C x H x W``."""
    return _conv_nd(x, w, b)


def conv3d(x, w, b=None):
    """Same-padded 3D convolution, ``x`` is ``C x X x Y x Z``."""
    return _conv_nd(x, w, b)


def pointwise(x, w, b=None):
    """Per-location linear map ``C_in -> C_out`` over the leading axis."""
    out = np.tensordot(w, x, axes=(1, 0))
    if b is not None:
        out += np.asarray(b).reshape((-1,) + (1,) * (x.ndim - 1))
    return out


def check_shape(name, arr, expected):
    if tuple(arr.shape) != tuple(expected):
        raise ValueError(f"{name}: expected shape {tuple(expected)}, got {tuple(arr.shape)}")
