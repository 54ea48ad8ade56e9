"""Shape arithmetic and a reference forward pass for the deconvolution head.

A stride-``backbone_stride`` feature map is upsampled by ``n_deconv_layers``
stride-2 transposed convolutions. Padding per kernel size is chosen so that
each layer doubles the spatial size exactly.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .errors import InvalidConfig, ShapeMismatch

# kernel -> (padding, output_padding) giving exact x2 upsampling at stride 2
DECONV_PADDING = {4: (1, 0), 3: (1, 1), 2: (0, 0)}


@dataclass(frozen=True)
class HeadConfig:
    input_h: int = 256
    input_w: int = 192
    n_joints: int = 17
    backbone_stride: int = 32
    n_deconv_layers: int = 3
    deconv_kernel: int = 4
    deconv_stride: int = 2
    n_filters: int = 256

    def validate(self) -> None:
        if self.deconv_stride != 2:
            raise InvalidConfig(f"deconv stride must be 2, got {self.deconv_stride}")
        if self.deconv_kernel not in DECONV_PADDING:
            raise InvalidConfig(f"deconv kernel must be one of {sorted(DECONV_PADDING)}, got {self.deconv_kernel}")
        if self.backbone_stride <= 0 or self.n_deconv_layers < 0:
            raise InvalidConfig("backbone stride must be positive and layer count non-negative")
        if self.input_h <= 0 or self.input_w <= 0:
            raise InvalidConfig("input size must be positive")
        if self.input_h % self.backbone_stride or self.input_w % self.backbone_stride:
            raise InvalidConfig(
                f"input {self.input_h}x{self.input_w} not divisible by backbone stride {self.backbone_stride}"
            )
        if self.n_joints <= 0 or self.n_filters <= 0:
            raise InvalidConfig("joint and filter counts must be positive")


def deconv_out_size(n: int, kernel: int, stride: int, padding: int, output_padding: int) -> int:
    return stride * (n - 1) + kernel - 2 * padding + output_padding


def layer_shapes(cfg: HeadConfig) -> List[Tuple[int, int]]:
    """Spatial size of the backbone map followed by each deconv output."""
    cfg.validate()
    p, op = DECONV_PADDING[cfg.deconv_kernel]
    h, w = cfg.input_h // cfg.backbone_stride, cfg.input_w // cfg.backbone_stride
    shapes = [(h, w)]
    for _ in range(cfg.n_deconv_layers):
        h = deconv_out_size(h, cfg.deconv_kernel, cfg.deconv_stride, p, op)
        w = deconv_out_size(w, cfg.deconv_kernel, cfg.deconv_stride, p, op)
        shapes.append((h, w))
    return shapes


def output_shape(cfg: HeadConfig) -> Tuple[int, int]:
    """Heatmap (height, width) produced by the head."""
    return layer_shapes(cfg)[-1]


def deconv_forward(x: np.ndarray, weights: np.ndarray, stride: int = 2, padding: int = 0,
                   output_padding: int = 0, bias: Optional[np.ndarray] = None) -> np.ndarray:
    """Transposed convolution by scatter-accumulate.

    ``x`` is ``(C_in, H, W)``, ``weights`` is ``(C_in, C_out, k, k)``.
    Each input cell adds ``x[ci, i, j] * weights[ci]`` into the output at
    offset ``(i * stride - padding, j * stride - padding)``.
    """
    x = np.asarray(x, dtype=float)
    weights = np.asarray(weights, dtype=float)
    if x.ndim != 3 or weights.ndim != 4:
        raise ShapeMismatch(f"expected (C,H,W) input and (Cin,Cout,k,k) weights, got {x.shape}, {weights.shape}")
    c_in, h, w = x.shape
    if weights.shape[0] != c_in:
        raise ShapeMismatch(f"input has {c_in} channels, weights expect {weights.shape[0]}")
    _, c_out, kh, kw = weights.shape
    if kh != kw:
        raise ShapeMismatch("only square kernels are supported")
    k = kh
    if stride < 1 or padding < 0 or not 0 <= output_padding < stride:
        raise InvalidConfig(f"bad stride/padding/output_padding: {stride}, {padding}, {output_padding}")
    out_h = deconv_out_size(h, k, stride, padding, output_padding)
    out_w = deconv_out_size(w, k, stride, padding, output_padding)
    if out_h <= 0 or out_w <= 0:
        raise ShapeMismatch(f"transposed convolution yields empty output {out_h}x{out_w}")

    full_h = stride * (h - 1) + k + output_padding
    full_w = stride * (w - 1) + k + output_padding
    full = np.zeros((c_out, full_h, full_w))
    # fixed accumulation order: kernel tap, then all input cells at once
    for ky in range(k):
        for kx in range(k):
            contrib = np.einsum("chw,co->ohw", x, weights[:, :, ky, kx])
            full[:, ky:ky + stride * (h - 1) + 1:stride, kx:kx + stride * (w - 1) + 1:stride] += contrib
    out = full[:, padding:padding + out_h, padding:padding + out_w]
    if bias is not None:
        out = out + np.asarray(bias, dtype=float)[:, None, None]
    return np.ascontiguousarray(out)


def init_weights(c_in: int, c_out: int, kernel: int, seed: int = 0, std: float = 0.001) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return rng.normal(0.0, std, size=(c_in, c_out, kernel, kernel))


def head_forward(cfg: HeadConfig, features: np.ndarray,
                 deconv_weights: Optional[Sequence[np.ndarray]] = None,
                 final_weights: Optional[np.ndarray] = None, seed: int = 0) -> np.ndarray:
    """Run the deconv stack then a 1x1 projection to ``n_joints`` maps.

    Batch norm and ReLU are not applied; this pass exists for shape and
    linearity checks. Missing weights are drawn from a seeded normal.
    """
    cfg.validate()
    features = np.asarray(features, dtype=float)
    expected = layer_shapes(cfg)[0]
    if features.shape[1:] != expected:
        raise ShapeMismatch(f"backbone map should be {expected}, got {features.shape[1:]}")
    p, op = DECONV_PADDING[cfg.deconv_kernel]
    y = features
    for layer in range(cfg.n_deconv_layers):
        if deconv_weights is not None:
            wt = deconv_weights[layer]
        else:
            wt = init_weights(y.shape[0], cfg.n_filters, cfg.deconv_kernel, seed=seed + layer)
        y = deconv_forward(y, wt, cfg.deconv_stride, p, op)
    if final_weights is None:
        final_weights = np.random.default_rng(seed + cfg.n_deconv_layers).normal(
            0.0, 0.001, size=(cfg.n_joints, y.shape[0]))
    final_weights = np.asarray(final_weights, dtype=float)
    if final_weights.shape != (cfg.n_joints, y.shape[0]):
        raise ShapeMismatch(f"1x1 projection must be ({cfg.n_joints}, {y.shape[0]}), got {final_weights.shape}")
    return np.einsum("jc,chw->jhw", final_weights, y)
