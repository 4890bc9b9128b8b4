"""Deterministic CNN layers, including the prediction-error constrained conv.

The constrained convolution is the forensic first layer: after every
projection each filter has its center pinned to -1 and its remaining
entries rescaled to sum to 1, so the layer computes a prediction residual
instead of image content.
"""

from __future__ import annotations

import numpy as np

from .tensor import Tensor, conv2d, dense, maxpool2d, relu, reshape, tanh

DEGENERATE_SUM = 1e-12


def constrained_project(kernel: np.ndarray) -> np.ndarray:
    """Project (F,1,kH,kW) filters onto the prediction-error constraint set.

    Center entry becomes -1; off-center entries are rescaled so they sum to
    1. If the pre-projection off-center sum is within ``DEGENERATE_SUM`` of
    zero the off-center mass falls back to the uniform 1/(kH*kW-1).
    """
    kernel = np.asarray(kernel, dtype=np.float64)
    if kernel.ndim != 4:
        raise ValueError(f"expected (F,1,kH,kW) kernel, got shape {kernel.shape}")
    F, C, kH, kW = kernel.shape
    if kH % 2 == 0 or kW % 2 == 0:
        raise ValueError(f"constrained kernels need odd spatial dims, got {kH}x{kW}")
    cy, cx = kH // 2, kW // 2
    out = kernel.copy()
    for f in range(F):
        for c in range(C):
            total = out[f, c].sum() - out[f, c, cy, cx]
            # already on the constraint set: keep bits, exact idempotence
            if out[f, c, cy, cx] == -1.0 and abs(total - 1.0) <= 1e-12:
                continue
            if abs(total) <= DEGENERATE_SUM:
                out[f, c].fill(1.0 / (kH * kW - 1))
            else:
                out[f, c] /= total
            out[f, c, cy, cx] = -1.0
    return out


class ConvLayer:
    def __init__(self, kernel: Tensor, bias: Tensor | None, stride: int = 1,
                 padding: str = "valid", constrained: bool = False):
        self.kernel = kernel
        self.bias = bias
        self.stride = stride
        self.padding = padding
        self.constrained = constrained

    def forward(self, x: Tensor, rng=None) -> Tensor:
        out = conv2d(x, self.kernel, stride=self.stride, padding=self.padding)
        if self.bias is not None:
            F = self.kernel.shape[0]
            out = out + reshape(self.bias, (1, F, 1, 1))
        return out

    def parameters(self):
        params = [("kernel", self.kernel)]
        if self.bias is not None:
            params.append(("bias", self.bias))
        return params

    def project(self) -> None:
        if self.constrained:
            self.kernel.data[...] = constrained_project(self.kernel.data)


class DenseLayer:
    def __init__(self, weight: Tensor, bias: Tensor):
        self.weight = weight
        self.bias = bias

    def forward(self, x: Tensor, rng=None) -> Tensor:
        return dense(x, self.weight, self.bias)

    def parameters(self):
        return [("weight", self.weight), ("bias", self.bias)]


class ReluLayer:
    def forward(self, x: Tensor, rng=None) -> Tensor:
        return relu(x)

    def parameters(self):
        return []


class TanhLayer:
    def forward(self, x: Tensor, rng=None) -> Tensor:
        return tanh(x)

    def parameters(self):
        return []


class MaxPoolLayer:
    def __init__(self, window: int, stride: int):
        self.window = window
        self.stride = stride

    def forward(self, x: Tensor, rng=None) -> Tensor:
        return maxpool2d(x, self.window, self.stride)

    def parameters(self):
        return []


class FlattenLayer:
    def forward(self, x: Tensor, rng=None) -> Tensor:
        n = x.shape[0]
        return reshape(x, (n, int(np.prod(x.shape[1:]))))

    def parameters(self):
        return []
