"""Deterministic float64 kernels for toy SSM / attention inference.

Every reduction here runs sequentially along its axis (``np.cumsum`` or an
explicit accumulation loop) instead of going through BLAS or numpy's pairwise
summation. Results therefore do not depend on thread count, and a row of a
batched call is bit-identical to the same row computed alone. That second
property is what makes the causal-prefix checks in the model tests exact.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "as_tensor",
    "seq_sum",
    "matmul",
    "linear",
    "softmax",
    "log_softmax",
    "silu",
    "softplus",
    "rmsnorm",
    "causal_conv1d",
    "selective_scan",
]


def as_tensor(x) -> np.ndarray:
    """Return ``x`` as a C-contiguous float64 array."""
    return np.ascontiguousarray(x, dtype=np.float64)


def seq_sum(x: np.ndarray, axis: int = -1, keepdims: bool = False) -> np.ndarray:
    """Left-to-right sum along ``axis``.

    ``np.sum`` uses pairwise blocking whose grouping depends on the axis
    length; ``cumsum`` is strictly sequential.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape[axis] == 0:
        return np.sum(x, axis=axis, keepdims=keepdims)
    out = np.take(np.cumsum(x, axis=axis), -1, axis=axis)
    if keepdims:
        out = np.expand_dims(out, axis)
    return out


def matmul(a, b) -> np.ndarray:
    """``a @ b`` for ``a[..., m, k]`` and ``b[..., k, n]``, summed sequentially over k.

    Batch dimensions broadcast. Each output element is accumulated in index
    order ``k = 0, 1, ...`` so rows never influence one another.

    Raises:
        ValueError: if the inner dimensions differ.
    """
    a = as_tensor(a)
    b = as_tensor(b)
    if a.ndim < 1 or b.ndim < 2:
        raise ValueError(f"matmul expects a[..., k] and b[..., k, n], got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul inner dimension mismatch: {a.shape} x {b.shape}")
    k = a.shape[-1]
    if k == 0:
        return np.zeros(np.broadcast_shapes(a.shape[:-1] + (1,), b.shape[:-2] + (1, b.shape[-1])))
    out = a[..., 0:1] * b[..., 0:1, :]
    for i in range(1, k):
        out = out + a[..., i : i + 1] * b[..., i : i + 1, :]
    return out


def linear(x, weight, bias=None) -> np.ndarray:
    """Apply a ``[out, in]`` weight to the trailing axis of ``x``."""
    y = matmul(x, as_tensor(weight).T)
    if bias is not None:
        y = y + bias
    return y


def softmax(logits) -> np.ndarray:
    z = as_tensor(logits)
    e = np.exp(z - np.max(z, axis=-1, keepdims=True))
    return e / seq_sum(e, keepdims=True)


def log_softmax(logits) -> np.ndarray:
    """``logits - max - log(sum(exp(logits - max)))`` along the last axis."""
    z = as_tensor(logits)
    shifted = z - np.max(z, axis=-1, keepdims=True)
    return shifted - np.log(seq_sum(np.exp(shifted), keepdims=True))


def silu(x) -> np.ndarray:
    x = as_tensor(x)
    return x / (1.0 + np.exp(-x))


def softplus(x) -> np.ndarray:
    x = as_tensor(x)
    return np.logaddexp(0.0, x)


def rmsnorm(x, gain, eps: float = 1e-6) -> np.ndarray:
    x = as_tensor(x)
    ms = seq_sum(x * x, keepdims=True) / x.shape[-1]
    return x / np.sqrt(ms + eps) * gain


def causal_conv1d(x, kernel, bias=None) -> np.ndarray:
    """Depthwise causal convolution over time.

    Args:
        x: ``[..., T, D]`` input.
        kernel: ``[D, K]`` per-channel taps; tap ``K-1`` multiplies the
            current step, tap ``0`` the step ``K-1`` positions back.
        bias: optional ``[D]``.

    Returns:
        ``[..., T, D]``; the input is left-padded with ``K-1`` zeros.
    """
    x = as_tensor(x)
    kernel = as_tensor(kernel)
    if kernel.ndim != 2 or kernel.shape[0] != x.shape[-1]:
        raise ValueError(f"kernel shape {kernel.shape} incompatible with input {x.shape}")
    t = x.shape[-2]
    k = kernel.shape[1]
    pad = [(0, 0)] * (x.ndim - 2) + [(k - 1, 0), (0, 0)]
    xp = np.pad(x, pad)
    out = np.zeros_like(x)
    for j in range(k):
        out += xp[..., j : j + t, :] * kernel[:, j]
    if bias is not None:
        out = out + bias
    return out


def selective_scan(x, A, B, C, dt) -> np.ndarray:
    """Diagonal selective-scan recurrence.

    ``h_t = exp(dt_t * A) * h_{t-1} + dt_t * B_t * x_t`` and ``y_t = C_t . h_t``
    with ``h_0 = 0``; each of the D channels carries its own N-dim state.

    Args:
        x: ``[..., T, D]`` input.
        A: ``[D, N]`` strictly negative diagonal transition rates.
        B: ``[..., T, N]`` input projections.
        C: ``[..., T, N]`` output projections.
        dt: ``[..., T, D]`` positive step sizes.

    Raises:
        ValueError: on shape mismatch, ``A >= 0`` or ``dt <= 0``.
    """
    x, A, B, C, dt = (as_tensor(v) for v in (x, A, B, C, dt))
    if np.any(A >= 0):
        raise ValueError("selective_scan requires strictly negative A (unstable state)")
    if np.any(dt <= 0):
        raise ValueError("selective_scan requires dt > 0")
    if dt.shape != x.shape or B.shape != C.shape or B.shape[:-1] != x.shape[:-1]:
        raise ValueError(
            f"selective_scan shape mismatch: x{x.shape} dt{dt.shape} B{B.shape} C{C.shape}"
        )
    if A.shape != (x.shape[-1], B.shape[-1]):
        raise ValueError(f"A shape {A.shape} != (D, N) = {(x.shape[-1], B.shape[-1])}")

    lead = x.shape[:-2]
    t_len, d = x.shape[-2:]
    n = A.shape[1]
    h = np.zeros(lead + (d, n))
    y = np.empty_like(x)
    for t in range(t_len):
        dt_t = dt[..., t, :, None]
        h = np.exp(dt_t * A) * h + dt_t * B[..., t, None, :] * x[..., t, :, None]
        acc = h[..., 0] * C[..., t, None, 0]
        for j in range(1, n):
            acc = acc + h[..., j] * C[..., t, None, j]
        y[..., t, :] = acc
    return y
