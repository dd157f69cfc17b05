"""Dense float64 tensor numerics with hand-derived gradients.

Tensors are plain ``numpy.ndarray`` objects in batch x channel x height x
width layout. Every layer used by the network has a forward function and a
matching backward function here; there is no autodiff graph.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

Tensor = np.ndarray


class ShapeError(ValueError):
    """Raised when tensor shapes are incompatible with an operation."""


def as_tensor(x) -> Tensor:
    return np.ascontiguousarray(x, dtype=np.float64)


@dataclass
class ConvSpec:
    """Kernel, bias and geometry of a (transposed) convolution.

    ``kernel`` is ``(out_channels, in_channels, kh, kw)``. For a transposed
    convolution the stride is the upscale factor the layer implements.
    """

    kernel: Tensor
    bias: Tensor = None
    stride: int = 1
    padding: int = 0
    transposed: bool = False

    def __post_init__(self):
        self.kernel = as_tensor(self.kernel)
        if self.kernel.ndim != 4:
            raise ShapeError(f"kernel must be rank 4, got shape {self.kernel.shape}")
        if self.bias is None:
            self.bias = np.zeros(self.kernel.shape[0])
        self.bias = as_tensor(self.bias)
        if self.bias.shape != (self.kernel.shape[0],):
            raise ShapeError(
                f"bias shape {self.bias.shape} does not match kernel {self.kernel.shape}"
            )
        if self.kernel.shape[2] < 1 or self.kernel.shape[3] < 1:
            raise ShapeError(f"empty kernel {self.kernel.shape}")
        if self.stride < 1:
            raise ValueError(f"stride must be >= 1, got {self.stride}")
        if self.padding < 0:
            raise ValueError(f"padding must be >= 0, got {self.padding}")

    @property
    def out_channels(self) -> int:
        return self.kernel.shape[0]

    @property
    def in_channels(self) -> int:
        return self.kernel.shape[1]

    def adjoint(self) -> "ConvSpec":
        """Spec whose transposed/plain counterpart is the adjoint map (zero bias)."""
        kernel = self.kernel.transpose(1, 0, 2, 3).copy()
        return ConvSpec(kernel, None, self.stride, self.padding, not self.transposed)

    def copy(self) -> "ConvSpec":
        return replace(self, kernel=self.kernel.copy(), bias=self.bias.copy())


def _check_input(x: Tensor, spec: ConvSpec, transposed: bool) -> None:
    if x.ndim != 4:
        raise ShapeError(f"input must be rank 4 (B, C, H, W), got shape {x.shape}")
    if x.shape[1] != spec.in_channels:
        raise ShapeError(
            f"input shape {x.shape} has {x.shape[1]} channels but kernel shape "
            f"{spec.kernel.shape} expects {spec.in_channels}"
        )
    if spec.transposed != transposed:
        kind = "transposed" if transposed else "plain"
        raise ValueError(f"{kind} convolution called with transposed={spec.transposed} spec")


def conv_output_size(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


def transposed_output_size(size: int, k: int, stride: int, padding: int) -> int:
    return (size - 1) * stride - 2 * padding + k


def _tap(ky: int, kx: int, n_y: int, n_x: int, stride: int):
    """Index of the strided window slice that kernel tap (ky, kx) touches."""
    return (
        slice(None),
        slice(None),
        slice(ky, ky + (n_y - 1) * stride + 1, stride),
        slice(kx, kx + (n_x - 1) * stride + 1, stride),
    )


def _pad(x: Tensor, p: int) -> Tensor:
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def _crop(x: Tensor, p: int, h: int, w: int) -> Tensor:
    return x[:, :, p : p + h, p : p + w]


# Every convolution below loops over kernel taps and contracts channels with
# one tensordot per tap, so memory stays O(batch x channels x pixels)
# regardless of kernel size. The tap order is fixed, so results are
# bit-reproducible.


def conv2d(x: Tensor, spec: ConvSpec) -> Tensor:
    """Strided, zero-padded 2-D cross-correlation plus bias."""
    x = as_tensor(x)
    _check_input(x, spec, transposed=False)
    b = x.shape[0]
    o, _, kh, kw = spec.kernel.shape
    ho = conv_output_size(x.shape[2], kh, spec.stride, spec.padding)
    wo = conv_output_size(x.shape[3], kw, spec.stride, spec.padding)
    if ho < 1 or wo < 1:
        raise ShapeError(
            f"input shape {x.shape} with kernel shape {spec.kernel.shape} "
            f"(stride {spec.stride}, padding {spec.padding}) gives an empty output"
        )
    xp = _pad(x, spec.padding)
    out = np.zeros((b, ho, wo, o))
    for ky in range(kh):
        for kx in range(kw):
            patch = xp[_tap(ky, kx, ho, wo, spec.stride)]
            out += np.tensordot(patch, spec.kernel[:, :, ky, kx], axes=([1], [1]))
    out = out.transpose(0, 3, 1, 2) + spec.bias[None, :, None, None]
    return np.ascontiguousarray(out)


def conv2d_backward(x: Tensor, spec: ConvSpec, grad_out: Tensor):
    """Gradients of ``conv2d`` w.r.t. input, kernel and bias."""
    x = as_tensor(x)
    _check_input(x, spec, transposed=False)
    b, c, h, w = x.shape
    o, _, kh, kw = spec.kernel.shape
    ho = conv_output_size(h, kh, spec.stride, spec.padding)
    wo = conv_output_size(w, kw, spec.stride, spec.padding)
    if grad_out.shape != (b, o, ho, wo):
        raise ShapeError(
            f"upstream gradient shape {grad_out.shape} != forward output shape {(b, o, ho, wo)}"
        )
    p = spec.padding
    xp = _pad(x, p)
    grad_xp = np.zeros((b, h + 2 * p, w + 2 * p, c))
    grad_kernel = np.zeros_like(spec.kernel)
    g = np.ascontiguousarray(grad_out.transpose(0, 2, 3, 1))  # B, ho, wo, O
    # one reduction per output channel, so a channel's kernel gradient does not
    # depend on how many other channels share the layer
    g_rows = np.ascontiguousarray(grad_out.transpose(1, 0, 2, 3)).reshape(o, -1)
    for ky in range(kh):
        for kx in range(kw):
            idx = _tap(ky, kx, ho, wo, spec.stride)
            patch = np.ascontiguousarray(xp[idx].transpose(1, 0, 2, 3)).reshape(c, -1)
            for oc in range(o):
                grad_kernel[oc, :, ky, kx] = patch @ g_rows[oc]
            grad_xp[idx[0], idx[2], idx[3]] += g @ spec.kernel[:, :, ky, kx]
    grad_in = _crop(grad_xp.transpose(0, 3, 1, 2), p, h, w)
    grad_bias = np.array([g_rows[oc].sum() for oc in range(o)])
    return np.ascontiguousarray(grad_in), grad_kernel, grad_bias


def transposed_conv2d(x: Tensor, spec: ConvSpec) -> Tensor:
    """Scatter-accumulate of kernel copies: the adjoint of strided ``conv2d``."""
    x = as_tensor(x)
    _check_input(x, spec, transposed=True)
    b, _, h, w = x.shape
    o, _, kh, kw = spec.kernel.shape
    ho = transposed_output_size(h, kh, spec.stride, spec.padding)
    wo = transposed_output_size(w, kw, spec.stride, spec.padding)
    if ho < 1 or wo < 1:
        raise ShapeError(
            f"input shape {x.shape} with kernel shape {spec.kernel.shape} "
            f"(stride {spec.stride}, padding {spec.padding}) gives an empty output"
        )
    s = spec.stride
    full = np.zeros((b, (h - 1) * s + kh, (w - 1) * s + kw, o))
    xl = np.ascontiguousarray(x.transpose(0, 2, 3, 1))  # B, h, w, C
    for ky in range(kh):
        for kx in range(kw):
            idx = _tap(ky, kx, h, w, s)
            full[idx[0], idx[2], idx[3]] += xl @ spec.kernel[:, :, ky, kx].T
    out = _crop(full.transpose(0, 3, 1, 2), spec.padding, ho, wo) + spec.bias[None, :, None, None]
    return np.ascontiguousarray(out)


def transposed_conv2d_backward(x: Tensor, spec: ConvSpec, grad_out: Tensor):
    """Gradients of ``transposed_conv2d`` w.r.t. input, kernel and bias."""
    x = as_tensor(x)
    _check_input(x, spec, transposed=True)
    b, c, h, w = x.shape
    o, _, kh, kw = spec.kernel.shape
    ho = transposed_output_size(h, kh, spec.stride, spec.padding)
    wo = transposed_output_size(w, kw, spec.stride, spec.padding)
    if grad_out.shape != (b, o, ho, wo):
        raise ShapeError(
            f"upstream gradient shape {grad_out.shape} != forward output shape {(b, o, ho, wo)}"
        )
    gp = _pad(grad_out, spec.padding)
    grad_in = np.zeros((b, h, w, c))
    grad_kernel = np.zeros_like(spec.kernel)
    for ky in range(kh):
        for kx in range(kw):
            patch = gp[_tap(ky, kx, h, w, spec.stride)]  # B, O, h, w
            grad_in += np.tensordot(patch, spec.kernel[:, :, ky, kx], axes=([1], [0]))
            grad_kernel[:, :, ky, kx] = np.tensordot(patch, x, axes=([0, 2, 3], [0, 2, 3]))
    grad_in = grad_in.transpose(0, 3, 1, 2)
    return np.ascontiguousarray(grad_in), grad_kernel, grad_out.sum(axis=(0, 2, 3))


def relu(x: Tensor) -> Tensor:
    return np.maximum(x, 0.0)


def relu_backward(x: Tensor, grad_out: Tensor) -> Tensor:
    return np.where(x > 0, grad_out, 0.0)


def elementwise_div(num: Tensor, den: Tensor, epsilon: float) -> Tensor:
    """``num / (den + epsilon)`` elementwise."""
    if num.shape != den.shape:
        raise ShapeError(f"numerator shape {num.shape} != denominator shape {den.shape}")
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    return num / (den + epsilon)


def elementwise_div_backward(num: Tensor, den: Tensor, epsilon: float, grad_out: Tensor):
    if num.shape != den.shape or grad_out.shape != num.shape:
        raise ShapeError(
            f"shapes differ: num {num.shape}, den {den.shape}, grad {grad_out.shape}"
        )
    shifted = den + epsilon
    grad_num = grad_out / shifted
    grad_den = -grad_out * num / (shifted * shifted)
    return grad_num, grad_den


def sgd_step(params: Sequence[Tensor], grads: Sequence[Tensor], lr: float) -> None:
    """In-place ``p -= lr * g`` for every pair."""
    if lr <= 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    if len(params) != len(grads):
        raise ShapeError(f"{len(params)} parameters but {len(grads)} gradients")
    for p, g in zip(params, grads):
        if p.shape != g.shape:
            raise ShapeError(f"parameter shape {p.shape} != gradient shape {g.shape}")
    for p, g in zip(params, grads):
        p -= lr * g
