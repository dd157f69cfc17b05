"""The full LSP + HSP network: configuration, initialization, batched
forward/backward and single-image prediction."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from typing import Optional

import numpy as np

from . import hsp, lsp
from .hsp import HspParams, same_conv
from .lsp import LspParams


@dataclass
class NetConfig:
    scale: int = 2
    features: int = 32
    conv1_size: int = 5
    deconv_size: Optional[int] = None
    hsp_size: int = 5
    use_conv1: bool = True
    boundary_head: bool = True
    lam: float = 0.3
    max_disp: Optional[float] = None
    disp_sigma: float = 1.0
    eps: float = lsp.SHEPARD_EPS

    def __post_init__(self):
        if self.scale not in (2, 3, 4):
            raise ValueError(f"scale must be 2, 3 or 4, got {self.scale}")
        if self.deconv_size is None:
            self.deconv_size = lsp.default_kernel_size(self.scale)
        if self.max_disp is None:
            self.max_disp = 0.45 * self.scale

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "NetConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


@dataclass
class Model:
    config: NetConfig
    lsp: LspParams
    hsp: HspParams

    def named_tensors(self) -> dict[str, np.ndarray]:
        return {**self.lsp.named_tensors(), **self.hsp.named_tensors()}

    def copy(self) -> "Model":
        return Model(NetConfig.from_dict(self.config.to_dict()), self.lsp.copy(), self.hsp.copy())


def _delta(out_ch: int, in_ch: int, size: int) -> np.ndarray:
    k = np.zeros((out_ch, in_ch, size, size))
    k[0, 0, size // 2, size // 2] = 1.0
    return k


def build_model(config: NetConfig, tensors: dict[str, np.ndarray]) -> Model:
    """Assemble a model from named tensors (as produced by ``named_tensors``)."""
    s = config.scale
    deconv = lsp.deconv_spec(tensors["lsp.deconv.kernel"], s)
    conv1 = project = None
    if "lsp.conv1.kernel" in tensors:
        conv1 = same_conv(tensors["lsp.conv1.kernel"], tensors["lsp.conv1.bias"])
        project = same_conv(tensors["lsp.project.kernel"], tensors["lsp.project.bias"])
    head = HspParams(same_conv(tensors["hsp.conv.kernel"], tensors["hsp.conv.bias"]))
    return Model(config, LspParams(s, deconv, conv1, project), head)


def init_model(config: NetConfig, mode: str = "interpolation-identity", seed: int = 0,
               kernel_method: str = "bilinear") -> Model:
    """Fresh parameters.

    ``random``: zero-mean Gaussian weights with std ``0.01 / sqrt(fan_in)``
    and zero biases (the deconvolution kernel takes absolute values so the
    Shepard denominator starts positive).
    ``interpolation-identity``: the untrained network is exactly classical
    interpolation. conv1 passes the input through channel 0 and the
    projection reads only that channel; the other feature channels get He
    initialization so they carry signal once the projection learns to use
    them. The HSP copies its input to channel 0 and outputs zero boundary.
    """
    rng = np.random.default_rng(seed)
    c = config
    out_ch = 2 if c.boundary_head else 1
    t: dict[str, np.ndarray] = {}

    def gauss(shape, std):
        return rng.normal(0.0, std, size=shape)

    if mode == "random":
        t["lsp.deconv.kernel"] = np.abs(gauss((1, 1, c.deconv_size, c.deconv_size),
                                               0.01 / c.deconv_size))
        if c.use_conv1:
            t["lsp.conv1.kernel"] = gauss((c.features, 1, c.conv1_size, c.conv1_size),
                                          0.01 / c.conv1_size)
            t["lsp.conv1.bias"] = np.zeros(c.features)
            t["lsp.project.kernel"] = gauss((1, c.features, 1, 1), 0.01 / math.sqrt(c.features))
            t["lsp.project.bias"] = np.zeros(1)
        t["hsp.conv.kernel"] = gauss((out_ch, 1, c.hsp_size, c.hsp_size), 0.01 / c.hsp_size)
        t["hsp.conv.bias"] = np.zeros(out_ch)
    elif mode == "interpolation-identity":
        t["lsp.deconv.kernel"] = lsp.interpolation_kernel(c.scale, c.deconv_size, kernel_method)
        if c.use_conv1:
            k1 = _delta(c.features, 1, c.conv1_size)
            k1[1:] = gauss((c.features - 1, 1, c.conv1_size, c.conv1_size),
                           math.sqrt(2.0) / c.conv1_size)
            t["lsp.conv1.kernel"] = k1
            t["lsp.conv1.bias"] = np.zeros(c.features)
            t["lsp.project.kernel"] = _delta(1, c.features, 1)
            t["lsp.project.bias"] = np.zeros(1)
        t["hsp.conv.kernel"] = _delta(out_ch, 1, c.hsp_size)
        t["hsp.conv.bias"] = np.zeros(out_ch)
    else:
        raise ValueError(f"unknown init mode {mode!r}")
    return build_model(c, t)


def displacement(model: Model, lr: np.ndarray) -> np.ndarray:
    """Frozen placement displacements for a ``(B, 1, h, w)`` batch."""
    c = model.config
    return lsp.batch_displacement(lr, c.scale, c.lam, c.max_disp, c.disp_sigma)


def forward(model: Model, lr: np.ndarray, disp: Optional[np.ndarray]):
    """Returns ``(y_hat, b_hat, mask, state)``; ``state`` feeds ``backward``."""
    h, mask, cache = lsp.lsp_forward(lr, model.lsp, disp, model.config.eps)
    y_hat, b_hat = hsp.hsp_forward(h, model.hsp)
    return y_hat, b_hat, mask, (h, cache)


def backward(model: Model, state, grad_y, grad_b) -> dict[str, np.ndarray]:
    h, cache = state
    grads, g_h = hsp.hsp_backward(h, model.hsp, grad_y, grad_b)
    lsp_grads, _ = lsp.lsp_backward(cache, model.lsp, g_h)
    grads.update(lsp_grads)
    return grads


def predict(model: Model, lr: np.ndarray, scale: Optional[int] = None):
    """Super-resolve one LR plane; returns ``(hr, boundary_or_None)``.

    ``hr`` is clamped to [0, 1]; ``boundary`` is the raw second head.
    """
    if scale is not None and scale != model.config.scale:
        raise ValueError(f"model trained for scale {model.config.scale}, asked for {scale}")
    x = np.asarray(lr, dtype=np.float64)[None, None]
    y_hat, b_hat, _, _ = forward(model, x, displacement(model, x))
    hr = np.clip(y_hat[0, 0], 0.0, 1.0)
    return hr, (None if b_hat is None else b_hat[0, 0])
