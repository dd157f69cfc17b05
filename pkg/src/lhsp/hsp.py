"""Holistic structure preserving sub-network and the multi-task objective.

One padded convolution maps the LSP output to two planes: the HR estimate
(channel 0) and a boundary-strength estimate (channel 1). Training fits
``[y, alpha * b]`` with a squared loss restricted to valid pixels.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import ConvSpec, ShapeError, conv2d, conv2d_backward


@dataclass
class HspParams:
    """Final convolution; 2 output maps, or 1 for the single-task baseline."""

    conv: ConvSpec

    def __post_init__(self):
        k = self.conv.kernel.shape
        if k[0] not in (1, 2) or k[1] != 1:
            raise ShapeError(f"HSP kernel must be (2, 1, kh, kw) or (1, 1, kh, kw), got {k}")
        if k[2] % 2 == 0 or k[3] % 2 == 0:
            raise ShapeError(f"HSP kernel needs odd spatial size to preserve shape, got {k}")
        if self.conv.stride != 1 or self.conv.padding != k[2] // 2 or k[2] != k[3]:
            raise ValueError("HSP convolution must be square, stride 1, 'same' padded")

    @property
    def has_boundary_head(self) -> bool:
        return self.conv.out_channels == 2

    def named_tensors(self) -> dict[str, np.ndarray]:
        return {"hsp.conv.kernel": self.conv.kernel, "hsp.conv.bias": self.conv.bias}

    def copy(self) -> "HspParams":
        return HspParams(self.conv.copy())


def same_conv(kernel: np.ndarray, bias=None) -> ConvSpec:
    return ConvSpec(kernel, bias, stride=1, padding=kernel.shape[2] // 2)


def hsp_forward(h_lsp: np.ndarray, params: HspParams):
    """``(B, 1, H, W)`` -> (y_hat, b_hat), each ``(B, 1, H, W)``.

    ``b_hat`` is ``None`` for a single-task head.
    """
    if h_lsp.ndim != 4 or h_lsp.shape[1] != 1:
        raise ShapeError(f"HSP input must be (B, 1, H, W), got {h_lsp.shape}")
    out = conv2d(h_lsp, params.conv)
    if params.has_boundary_head:
        return out[:, :1], out[:, 1:]
    return out, None


def hsp_backward(h_lsp: np.ndarray, params: HspParams, grad_y: np.ndarray, grad_b=None):
    """Parameter gradients and the gradient w.r.t. the LSP output."""
    if params.has_boundary_head:
        if grad_b is None:
            grad_b = np.zeros_like(grad_y)
        g = np.concatenate([grad_y, grad_b], axis=1)
    else:
        g = grad_y
    g_in, g_k, g_b = conv2d_backward(h_lsp, params.conv, g)
    return {"hsp.conv.kernel": g_k, "hsp.conv.bias": g_b}, g_in


def multitask_loss(y_hat, b_hat, y, b, alpha: float, mask, reduction: str = "mean"):
    """Squared error against ``[y, alpha * b]`` on the masked pixels.

    ``reduction="mean"`` averages over every valid pixel of the batch;
    ``"sum"`` sums over the pixels of each sample and averages over samples.
    A missing boundary head (``b_hat is None``) gives the single-task loss.
    Returns ``(loss, grad_y_hat, grad_b_hat)``.
    """
    if alpha < 0:
        raise ValueError(f"alpha must be >= 0, got {alpha}")
    if y_hat.shape != y.shape or mask.shape != y.shape:
        raise ShapeError(f"shapes disagree: y_hat {y_hat.shape}, y {y.shape}, mask {mask.shape}")
    if b_hat is not None and (b_hat.shape != y.shape or b.shape != y.shape):
        raise ShapeError(f"boundary shapes disagree: b_hat {b_hat.shape}, b {b.shape}")
    count = int(mask.sum())
    if count == 0:
        raise ValueError("no valid pixels in the loss mask")
    if reduction == "mean":
        denom = float(count)
    elif reduction == "sum":
        denom = float(y.shape[0])
    else:
        raise ValueError(f"unknown reduction {reduction!r}")

    r_y = np.where(mask, y_hat - y, 0.0)
    sq = r_y * r_y
    g_b = None
    if b_hat is not None:
        r_b = np.where(mask, b_hat - alpha * b, 0.0)
        sq = sq + r_b * r_b
        g_b = (2.0 / denom) * r_b
    loss = float(sq.sum()) / denom
    return loss, (2.0 / denom) * r_y, g_b
