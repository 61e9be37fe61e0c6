"""
Functional Ops - Convolutions, normalisation, activations and losses on Tensors

Layout convention throughout: batch axis 0, channel axis 1, row-major.
"""
import logging
from dataclasses import dataclass, field
from typing import Literal, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from app.core.exceptions import ShapeError
from app.core.tensor import Tensor, matmul

logger = logging.getLogger(__name__)

Mode = Literal["train", "eval"]
Padding = Union[int, Tuple[int, int]]

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


def same_padding(kt: int) -> Tuple[int, int]:
    """Symmetric zero-padding keeping the temporal length; odd remainder goes last."""
    lead = (kt - 1) // 2
    return lead, kt - 1 - lead


def _pad_pair(padding: Padding) -> Tuple[int, int]:
    if isinstance(padding, int):
        return padding, padding
    return int(padding[0]), int(padding[1])


# ============================================
# CONVOLUTIONS
# ============================================

def conv3d(
    x: Tensor,
    kernels: Tensor,
    bias: Optional[Tensor] = None,
    spatial_stride: int = 1,
    temporal_padding: Padding = 0,
) -> Tensor:
    """
    Strided spatio-temporal convolution.

    x: B x Cin x M1 x M2 x T, kernels: Cout x Cin x km x km' x kt.
    No spatial padding; zero padding on the time axis only.
    """
    if spatial_stride <= 0:
        raise ShapeError(f"conv3d: stride must be positive, got {spatial_stride}")
    if x.ndim != 5 or kernels.ndim != 5:
        raise ShapeError(f"conv3d: expected 5-D input and kernels, got {x.shape} and {kernels.shape}")
    batch, c_in, m1, m2, t = x.shape
    c_out, k_in, km, km2, kt = kernels.shape
    if k_in != c_in:
        raise ShapeError(f"conv3d: kernel expects {k_in} input channels, input has {c_in}")
    if km > m1 or km2 > m2:
        raise ShapeError(f"conv3d: spatial kernel {km}x{km2} larger than mesh {m1}x{m2}")
    if bias is not None and bias.shape != (c_out,):
        raise ShapeError(f"conv3d: bias shape {bias.shape} does not match {c_out} kernels")
    pad_lo, pad_hi = _pad_pair(temporal_padding)
    if kt > t + pad_lo + pad_hi:
        raise ShapeError(f"conv3d: temporal kernel {kt} longer than padded input")

    s = spatial_stride
    xp = np.pad(x.data, ((0, 0), (0, 0), (0, 0), (0, 0), (pad_lo, pad_hi)))
    windows = sliding_window_view(xp, (km, km2, kt), axis=(2, 3, 4))[:, :, ::s, ::s, :]
    out_m1, out_m2, out_t = windows.shape[2:5]
    out = np.tensordot(windows, kernels.data, axes=([1, 5, 6, 7], [1, 2, 3, 4]))
    out = out.transpose(0, 4, 1, 2, 3)
    if bias is not None:
        out = out + bias.data.reshape(1, c_out, 1, 1, 1)

    def backward(g: np.ndarray):
        gk = np.tensordot(g, windows, axes=([0, 2, 3, 4], [0, 2, 3, 4]))
        gb = g.sum(axis=(0, 2, 3, 4)) if bias is not None else None
        gx = None
        if x.requires_grad:
            # cols: B x M1' x M2' x T' x Cin x km x km' x kt
            cols = np.tensordot(g, kernels.data, axes=([1], [0]))
            gxp = np.zeros_like(xp)
            span1 = s * (out_m1 - 1) + 1
            span2 = s * (out_m2 - 1) + 1
            for h in range(km):
                for w in range(km2):
                    for r in range(kt):
                        gxp[:, :, h:h + span1:s, w:w + span2:s, r:r + out_t] += cols[..., h, w, r].transpose(0, 4, 1, 2, 3)
            gx = gxp[..., pad_lo:pad_lo + t]
        return (gx, gk, gb) if bias is not None else (gx, gk)

    parents = (x, kernels, bias) if bias is not None else (x, kernels)
    return Tensor.from_op(np.ascontiguousarray(out), parents, backward, "conv3d")


def conv_temporal(
    x: Tensor,
    kernels: Tensor,
    bias: Optional[Tensor] = None,
    temporal_padding: Padding = 0,
) -> Tensor:
    """
    Per-patch temporal convolution across all input channels.

    x: B x Cin x P x T, kernels: Cout x Cin x 1 x kt. With kt=1 and no bias
    this is the point-wise projection used by the attention heads.
    """
    if x.ndim != 4 or kernels.ndim != 4 or kernels.shape[2] != 1:
        raise ShapeError(f"conv_temporal: expected B x C x P x T input and Cout x Cin x 1 x kt kernels, got {x.shape} and {kernels.shape}")
    batch, c_in, patches, t = x.shape
    c_out, k_in, _, kt = kernels.shape
    if k_in != c_in:
        raise ShapeError(f"conv_temporal: kernel expects {k_in} input channels, input has {c_in}")
    if bias is not None and bias.shape != (c_out,):
        raise ShapeError(f"conv_temporal: bias shape {bias.shape} does not match {c_out} kernels")
    pad_lo, pad_hi = _pad_pair(temporal_padding)
    if kt > t + pad_lo + pad_hi:
        raise ShapeError(f"conv_temporal: kernel length {kt} exceeds padded length {t + pad_lo + pad_hi}")

    k2 = kernels.data[:, :, 0, :]
    xp = np.pad(x.data, ((0, 0), (0, 0), (0, 0), (pad_lo, pad_hi))) if pad_lo or pad_hi else x.data
    windows = sliding_window_view(xp, kt, axis=3)
    out_t = windows.shape[3]
    out = np.tensordot(windows, k2, axes=([1, 4], [1, 2])).transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + bias.data.reshape(1, c_out, 1, 1)

    def backward(g: np.ndarray):
        gk = np.tensordot(g, windows, axes=([0, 2, 3], [0, 2, 3]))[:, :, None, :]
        gb = g.sum(axis=(0, 2, 3)) if bias is not None else None
        gx = None
        if x.requires_grad:
            cols = np.tensordot(g, k2, axes=([1], [0]))  # B x P x T' x Cin x kt
            gxp = np.zeros(xp.shape, dtype=xp.dtype)
            for r in range(kt):
                gxp[:, :, :, r:r + out_t] += cols[..., r].transpose(0, 3, 1, 2)
            gx = gxp[..., pad_lo:pad_lo + t]
        return (gx, gk, gb) if bias is not None else (gx, gk)

    parents = (x, kernels, bias) if bias is not None else (x, kernels)
    return Tensor.from_op(np.ascontiguousarray(out), parents, backward, "conv_temporal")


# ============================================
# ATTENTION PRIMITIVES
# ============================================

def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Max-subtracted softmax along ``axis``."""
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"softmax: axis {axis} out of range for {x.ndim}-D input")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g: np.ndarray):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return Tensor.from_op(y, (x,), backward, "softmax")


# ============================================
# BATCH NORMALISATION
# ============================================

@dataclass
class BatchNormState:
    """Learnable affine pair plus running statistics for one BatchNorm layer."""

    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = BN_MOMENTUM
    eps: float = BN_EPS
    mode: Mode = "train"

    @classmethod
    def create(cls, channels: int, dtype=np.float32, name: str = "bn") -> "BatchNormState":
        return cls(
            gamma=Tensor(np.ones(channels, dtype=dtype), requires_grad=True, name=f"{name}.gamma"),
            beta=Tensor(np.zeros(channels, dtype=dtype), requires_grad=True, name=f"{name}.beta"),
            running_mean=np.zeros(channels, dtype=dtype),
            running_var=np.ones(channels, dtype=dtype),
        )

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]


def batchnorm(x: Tensor, state: BatchNormState) -> Tensor:
    """
    Per-channel normalisation over every axis except axis 1.

    Eval mode before any training step uses the default statistics
    (mean 0, variance 1).
    """
    if x.ndim < 2 or x.shape[1] != state.channels:
        raise ShapeError(f"batchnorm: expected {state.channels} channels on axis 1, got shape {x.shape}")
    axes = tuple(a for a in range(x.ndim) if a != 1)
    bshape = [1] * x.ndim
    bshape[1] = state.channels
    gamma = state.gamma.data.reshape(bshape)
    beta = state.beta.data.reshape(bshape)
    count = x.size // state.channels

    if state.mode == "train":
        if count < 2:
            raise ShapeError("batchnorm: training mode needs at least 2 values per channel")
        mean = x.data.mean(axis=axes, keepdims=True)
        var = x.data.var(axis=axes, keepdims=True)
        m = state.momentum
        state.running_mean = ((1 - m) * state.running_mean + m * mean.reshape(-1)).astype(state.running_mean.dtype)
        state.running_var = ((1 - m) * state.running_var + m * var.reshape(-1) * count / (count - 1)).astype(state.running_var.dtype)
    elif state.mode == "eval":
        mean = state.running_mean.reshape(bshape)
        var = state.running_var.reshape(bshape)
    else:
        raise ValueError(f"batchnorm: unknown mode {state.mode!r}")

    inv_std = 1.0 / np.sqrt(var + state.eps)
    xhat = (x.data - mean) * inv_std
    out = gamma * xhat + beta
    training = state.mode == "train"

    def backward(g: np.ndarray):
        g_gamma = (g * xhat).sum(axis=axes)
        g_beta = g.sum(axis=axes)
        dxhat = g * gamma
        if training:
            gx = inv_std / count * (
                count * dxhat
                - dxhat.sum(axis=axes, keepdims=True)
                - xhat * (dxhat * xhat).sum(axis=axes, keepdims=True)
            )
        else:
            gx = dxhat * inv_std
        return gx, g_gamma, g_beta

    return Tensor.from_op(out.astype(x.dtype), (x, state.gamma, state.beta), backward, "batchnorm")


# ============================================
# ACTIVATIONS AND REGULARISATION
# ============================================

def elu(x: Tensor) -> Tensor:
    positive = x.data >= 0
    out = np.where(positive, x.data, np.expm1(np.minimum(x.data, 0)))
    return Tensor.from_op(out, (x,), lambda g: (g * np.where(positive, 1.0, out + 1.0),), "elu")


def relu(x: Tensor) -> Tensor:
    positive = x.data > 0
    return Tensor.from_op(np.where(positive, x.data, 0).astype(x.dtype), (x,), lambda g: (g * positive,), "relu")


def dropout_generator(seed: int, layer_id: int, step: int) -> np.random.Generator:
    """Counter-based stream keyed by (seed, layer id, step) so runs replay exactly."""
    key = ((seed & 0xFFFFFFFFFFFFFFFF) << 64) | (layer_id & 0xFFFFFFFFFFFFFFFF)
    counter = (step & 0xFFFFFFFFFFFFFFFF) << 192
    return np.random.Generator(np.random.Philox(key=key, counter=counter))


def dropout(x: Tensor, prob: float, mode: Mode, rng: Optional[np.random.Generator] = None) -> Tensor:
    """Inverted dropout; identity in eval mode."""
    if not 0.0 <= prob < 1.0:
        raise ValueError(f"dropout: probability must be in [0, 1), got {prob}")
    if mode == "eval" or prob == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout: training mode needs a random generator")
    keep = (rng.random(x.shape) >= prob).astype(x.dtype) / (1.0 - prob)
    return Tensor.from_op(x.data * keep, (x,), lambda g: (g * keep,), "dropout")


# ============================================
# CLASSIFIER HEAD
# ============================================

def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """x: B x n, weight: n x m, bias: m."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise ShapeError(f"linear: cannot apply {weight.shape} weights to input {x.shape}")
    out = matmul(x, weight)
    return out + bias if bias is not None else out


def cross_entropy(logits: Tensor, targets: Sequence[int]) -> Tensor:
    """Mean negative log-likelihood of ``targets`` under softmax(logits)."""
    targets = np.asarray(targets, dtype=np.int64)
    if logits.ndim != 2 or targets.shape != (logits.shape[0],):
        raise ShapeError(f"cross_entropy: logits {logits.shape} do not match {targets.shape[0]} targets")
    batch, classes = logits.shape
    if targets.min(initial=0) < 0 or targets.max(initial=0) >= classes:
        raise ValueError(f"cross_entropy: labels must lie in [0, {classes})")

    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_probs = shifted - log_norm
    rows = np.arange(batch)
    loss = -log_probs[rows, targets].mean()

    def backward(g: np.ndarray):
        grad = np.exp(log_probs)
        grad[rows, targets] -= 1.0
        return (grad * (g / batch),)

    return Tensor.from_op(np.asarray(loss, dtype=logits.dtype), (logits,), backward, "cross_entropy")
