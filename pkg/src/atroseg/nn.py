# BSD 3-Clause License
#
# Copyright (c) 2025, Spill-Tea
#
# Redistribution and use in source and binary forms, with or without
# modification, are permitted provided that the following conditions are met:
#
# 1. Redistributions of source code must retain the above copyright notice, this
#    list of conditions and the following disclaimer.
#
# 2. Redistributions in binary form must reproduce the above copyright notice,
#    this list of conditions and the following disclaimer in the documentation
#    and/or other materials provided with the distribution.
#
# 3. Neither the name of the copyright holder nor the names of its
#    contributors may be used to endorse or promote products derived from
#    this software without specific prior written permission.
#
# THIS SOFTWARE IS PROVIDED BY THE COPYRIGHT HOLDERS AND CONTRIBUTORS "AS IS"
# AND ANY EXPRESS OR IMPLIED WARRANTIES, INCLUDING, BUT NOT LIMITED TO, THE
# IMPLIED WARRANTIES OF MERCHANTABILITY AND FITNESS FOR A PARTICULAR PURPOSE ARE
# DISCLAIMED. IN NO EVENT SHALL THE COPYRIGHT HOLDER OR CONTRIBUTORS BE LIABLE
# FOR ANY DIRECT, INDIRECT, INCIDENTAL, SPECIAL, EXEMPLARY, OR CONSEQUENTIAL
# DAMAGES (INCLUDING, BUT NOT LIMITED TO, PROCUREMENT OF SUBSTITUTE GOODS OR
# SERVICES; LOSS OF USE, DATA, OR PROFITS; OR BUSINESS INTERRUPTION) HOWEVER
# CAUSED AND ON ANY THEORY OF LIABILITY, WHETHER IN CONTRACT, STRICT LIABILITY,
# OR TORT (INCLUDING NEGLIGENCE OR OTHERWISE) ARISING IN ANY WAY OUT OF THE USE
# OF THIS SOFTWARE, EVEN IF ADVISED OF THE POSSIBILITY OF SUCH DAMAGE.

"""Forward and backward implementations of every layer of the segmentation network.

Convolution is cross-correlation with taps spaced ``rate`` pixels apart::

    y(i, j) = sum_m sum_n x(s*i + r*m - p, s*j + r*n - p) * k(m, n)

with stride ``s``, dilation rate ``r``, zero padding ``p`` and no kernel flip.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import ContractError
from .tensor import Array, Function, Tensor


__all__ = [
    "BatchNormState",
    "ConvSpec",
    "ResidualParams",
    "batch_norm",
    "bilinear_matrix",
    "bilinear_resize",
    "bilinear_resize_adjoint",
    "concat_channels",
    "conv2d",
    "conv2d_py",
    "relu",
    "residual_block",
    "softmax",
    "softmax_cross_entropy",
]

logger = logging.getLogger(__name__)

BN_EPSILON: float = 1e-5
BN_MOMENTUM: float = 0.9


@dataclass(frozen=True)
class ConvSpec:
    """Static description of a (possibly strided, possibly atrous) convolution.

    Args:
        in_channels (int): input channel count.
        out_channels (int): output channel count.
        kernel (int): odd kernel extent, ``2k + 1``.
        stride (int): output sampling step.
        rate (int): dilation, spacing between kernel taps.
        padding (int | None): zero padding on each border; None selects the "same"
            padding ``rate * (kernel - 1) // 2``.

    Raises:
        ContractError: when a field is out of range.

    """

    in_channels: int
    out_channels: int
    kernel: int = 3
    stride: int = 1
    rate: int = 1
    padding: Optional[int] = None

    def __post_init__(self) -> None:
        if self.in_channels < 1 or self.out_channels < 1:
            raise ContractError(f"channel counts must be positive: {self}")
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ContractError(f"kernel extent must be odd and positive: {self}")
        if self.stride < 1 or self.rate < 1:
            raise ContractError(f"stride and rate must be positive: {self}")
        if self.padding is not None and self.padding < 0:
            raise ContractError(f"padding must be non-negative: {self}")

    @property
    def pad(self) -> int:
        if self.padding is None:
            return self.rate * (self.kernel - 1) // 2
        return self.padding

    @property
    def effective_kernel(self) -> int:
        return self.rate * (self.kernel - 1) + 1

    @property
    def weight_shape(self) -> tuple[int, int, int, int]:
        return (self.out_channels, self.in_channels, self.kernel, self.kernel)

    def output_extent(self, extent: int) -> int:
        """Spatial output extent for an input extent, validated to be at least 1."""
        out: int = (extent + 2 * self.pad - self.effective_kernel) // self.stride + 1
        if extent + 2 * self.pad < self.effective_kernel or out < 1:
            raise ContractError(
                f"input extent {extent} too small for effective kernel "
                f"{self.effective_kernel} with padding {self.pad}"
            )
        return out


def _check_conv(x: Array, spec: ConvSpec, weights: Array) -> tuple[int, int]:
    if weights.shape != spec.weight_shape:
        raise ContractError(
            f"weights {weights.shape} do not match spec {spec.weight_shape}"
        )
    if x.shape[1] != spec.in_channels:
        raise ContractError(
            f"input has {x.shape[1]} channels, spec expects {spec.in_channels}"
        )
    return spec.output_extent(x.shape[2]), spec.output_extent(x.shape[3])


def _tap_slice(offset: int, stride: int, extent: int) -> slice:
    return slice(offset, offset + stride * (extent - 1) + 1, stride)


class Conv2d(Function):
    """Atrous convolution; taps are gathered per kernel offset then contracted."""

    def forward(  # type: ignore[override]
        self,
        x: Array,
        weights: Array,
        bias: Optional[Array],
        spec: ConvSpec,
    ) -> Array:
        out_h, out_w = _check_conv(x, spec, weights)
        pad: int = spec.pad
        padded: Array = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
        k: int = spec.kernel
        n, c = x.shape[:2]

        # columns: (N, C, K, K, Ho, Wo)
        cols: Array = np.empty((n, c, k, k, out_h, out_w), dtype=x.dtype)
        for m in range(k):
            rows: slice = _tap_slice(m * spec.rate, spec.stride, out_h)
            for j in range(k):
                cols[:, :, m, j] = padded[
                    :, :, rows, _tap_slice(j * spec.rate, spec.stride, out_w)
                ]

        out: Array = np.tensordot(weights, cols, axes=([1, 2, 3], [1, 2, 3]))
        out = np.ascontiguousarray(out.transpose(1, 0, 2, 3))
        if bias is not None:
            out += bias.reshape(1, -1, 1, 1)

        self.spec: ConvSpec = spec
        self.cols: Array = cols
        self.weights: Array = weights
        self.padded_shape: tuple[int, ...] = padded.shape
        self.has_bias: bool = bias is not None
        return out

    def backward(self, grad: Array) -> tuple[Optional[Array], ...]:
        spec: ConvSpec = self.spec
        need_x, need_w, need_b = self.needs_input_grad
        grad_x: Optional[Array] = None
        grad_w: Optional[Array] = None
        grad_b: Optional[Array] = None

        if need_w:
            grad_w = np.tensordot(grad, self.cols, axes=([0, 2, 3], [0, 4, 5]))
        if need_b:
            grad_b = grad.sum(axis=(0, 2, 3)).reshape(1, -1, 1, 1)
        if need_x:
            out_h, out_w = grad.shape[2:]
            # (C, K, K, N, Ho, Wo)
            grad_cols: Array = np.tensordot(self.weights, grad, axes=([0], [1]))
            padded: Array = np.zeros(self.padded_shape, dtype=grad.dtype)
            for m in range(spec.kernel):
                rows: slice = _tap_slice(m * spec.rate, spec.stride, out_h)
                for j in range(spec.kernel):
                    cols: slice = _tap_slice(j * spec.rate, spec.stride, out_w)
                    padded[:, :, rows, cols] += grad_cols[:, m, j].transpose(1, 0, 2, 3)
            pad: int = spec.pad
            height, width = padded.shape[2] - pad, padded.shape[3] - pad
            grad_x = np.ascontiguousarray(padded[:, :, pad:height, pad:width])

        return grad_x, grad_w, (grad_b if self.has_bias else None)


def conv2d(
    x: Tensor,
    spec: ConvSpec,
    weights: Tensor,
    bias: Optional[Tensor] = None,
) -> Tensor:
    """Atrous 2-D convolution with zero padding.

    Args:
        x (Tensor): input (N, C_in, H, W).
        spec (ConvSpec): layer description.
        weights (Tensor): kernel (C_out, C_in, K, K).
        bias (Tensor | None): per output channel offset shaped (1, C_out, 1, 1).

    Returns:
        (Tensor): output (N, C_out, H_out, W_out).

    Raises:
        ContractError: on channel or weight shape mismatch, or output extent below 1.

    Examples:
        .. code-block:: python

            # all-ones 5x5 input, all-ones 3x3 kernel, rate 2, no padding
            conv2d(ones((1, 1, 5, 5)), ConvSpec(1, 1, 3, rate=2, padding=0), ones)
            # -> [[[[9.0]]]]

    """
    if bias is not None and bias.shape != (1, spec.out_channels, 1, 1):
        raise ContractError(f"bias shape {bias.shape} does not match {spec}")
    return Conv2d.apply(x, weights, bias, spec=spec)


def conv2d_py(
    x: Array,
    spec: ConvSpec,
    weights: Array,
    bias: Optional[Array] = None,
) -> Array:
    """Direct evaluation of the atrous convolution sum with explicit loops.

    Reference implementation used to verify :func:`conv2d`. Slow.
    """
    out_h, out_w = _check_conv(x, spec, weights)
    n, c, h, w = x.shape
    pad: int = spec.pad
    out: Array = np.zeros((n, spec.out_channels, out_h, out_w), dtype=np.float64)

    for b in range(n):
        for o in range(spec.out_channels):
            for i in range(out_h):
                for j in range(out_w):
                    total: float = 0.0 if bias is None else float(bias.reshape(-1)[o])
                    for ch in range(c):
                        for m in range(spec.kernel):
                            row: int = i * spec.stride + m * spec.rate - pad
                            if row < 0 or row >= h:
                                continue
                            for q in range(spec.kernel):
                                col: int = j * spec.stride + q * spec.rate - pad
                                if 0 <= col < w:
                                    total += float(x[b, ch, row, col]) * float(
                                        weights[o, ch, m, q]
                                    )
                    out[b, o, i, j] = total

    return out


@dataclass
class BatchNormState:
    """Per channel affine parameters and running statistics of a batch norm layer.

    ``gamma`` and ``beta`` are trainable (1, C, 1, 1) tensors; the running statistics
    are non-trainable (1, C, 1, 1) tensors updated in training mode as
    ``running <- momentum * running + (1 - momentum) * batch`` (unbiased variance).
    """

    gamma: Tensor
    beta: Tensor
    running_mean: Tensor
    running_var: Tensor
    epsilon: float = BN_EPSILON
    momentum: float = BN_MOMENTUM
    training: bool = True

    @classmethod
    def create(cls, channels: int, **kwargs: float) -> "BatchNormState":
        """Neutral state: gamma 1, beta 0, running mean 0, running variance 1."""
        shape: tuple[int, int, int, int] = (1, channels, 1, 1)
        return cls(
            gamma=Tensor(np.ones(shape), requires_grad=True),
            beta=Tensor(np.zeros(shape), requires_grad=True),
            running_mean=Tensor(np.zeros(shape)),
            running_var=Tensor(np.ones(shape)),
            **kwargs,  # type: ignore[arg-type]
        )

    @property
    def channels(self) -> int:
        return self.gamma.shape[1]


class BatchNormTrain(Function):
    def forward(  # type: ignore[override]
        self, x: Array, gamma: Array, beta: Array, epsilon: float
    ) -> Array:
        mean: Array = x.mean(axis=(0, 2, 3), keepdims=True)
        centered: Array = x - mean
        var: Array = (centered * centered).mean(axis=(0, 2, 3), keepdims=True)
        inv_std: Array = 1.0 / np.sqrt(var + epsilon)
        xhat: Array = centered * inv_std

        self.batch_mean: Array = mean
        self.batch_var: Array = var
        self.xhat: Array = xhat
        self.inv_std: Array = inv_std
        self.gamma: Array = gamma
        return gamma * xhat + beta

    def backward(self, grad: Array) -> tuple[Optional[Array], ...]:
        axes: tuple[int, ...] = (0, 2, 3)
        grad_beta: Array = grad.sum(axis=axes, keepdims=True)
        grad_gamma: Array = (grad * self.xhat).sum(axis=axes, keepdims=True)
        grad_xhat: Array = grad * self.gamma
        grad_x: Array = self.inv_std * (
            grad_xhat
            - grad_xhat.mean(axis=axes, keepdims=True)
            - self.xhat * (grad_xhat * self.xhat).mean(axis=axes, keepdims=True)
        )
        return grad_x, grad_gamma, grad_beta


class BatchNormInference(Function):
    def forward(  # type: ignore[override]
        self,
        x: Array,
        gamma: Array,
        beta: Array,
        mean: Array,
        var: Array,
        epsilon: float,
    ) -> Array:
        self.inv_std: Array = 1.0 / np.sqrt(var + epsilon)
        self.xhat: Array = (x - mean) * self.inv_std
        self.gamma: Array = gamma
        return gamma * self.xhat + beta

    def backward(self, grad: Array) -> tuple[Optional[Array], ...]:
        axes: tuple[int, ...] = (0, 2, 3)
        return (
            grad * self.gamma * self.inv_std,
            (grad * self.xhat).sum(axis=axes, keepdims=True),
            grad.sum(axis=axes, keepdims=True),
            None,
            None,
        )


def batch_norm(x: Tensor, state: BatchNormState) -> Tensor:
    """Batch normalization over (N, H, W) per channel.

    In training mode the batch statistics normalize the input and the running
    statistics are updated; in inference mode only the running statistics are used.

    Args:
        x (Tensor): input (N, C, H, W).
        state (BatchNormState): parameters, running statistics and mode.

    Returns:
        (Tensor): normalized output.

    Raises:
        ContractError: on channel mismatch, or fewer than 2 values per channel in
            training mode.

    """
    if x.shape[1] != state.channels:
        raise ContractError(
            f"input has {x.shape[1]} channels, batch norm has {state.channels}"
        )

    if not state.training:
        return BatchNormInference.apply(
            x,
            state.gamma,
            state.beta,
            state.running_mean,
            state.running_var,
            epsilon=state.epsilon,
        )

    count: int = x.shape[0] * x.shape[2] * x.shape[3]
    if count < 2:
        raise ContractError("training mode batch norm needs N*H*W >= 2")

    function = BatchNormTrain()
    out: Tensor = function(x, state.gamma, state.beta, epsilon=state.epsilon)
    unbiased: Array = function.batch_var * (count / (count - 1))
    m: float = state.momentum
    state.running_mean.data = (
        m * state.running_mean.data + (1.0 - m) * function.batch_mean
    ).astype(state.running_mean.dtype)
    state.running_var.data = (m * state.running_var.data + (1.0 - m) * unbiased).astype(
        state.running_var.dtype
    )
    return out


class Relu(Function):
    def forward(self, x: Array) -> Array:  # type: ignore[override]
        self.mask: Array = x > 0
        return np.where(self.mask, x, 0).astype(x.dtype)

    def backward(self, grad: Array) -> tuple[Optional[Array], ...]:
        return (np.where(self.mask, grad, 0).astype(grad.dtype),)


def relu(x: Tensor) -> Tensor:
    """Rectified linear unit, gradient 0 at the kink."""
    return Relu.apply(x)


def bilinear_matrix(in_extent: int, out_extent: int, dtype: np.dtype) -> Array:
    """Interpolation matrix (out_extent, in_extent) along one axis.

    Half-pixel centers: source ``(dst + 0.5) * in / out - 0.5`` clamped to
    ``[0, in - 1]``, blended linearly between its two neighbors.

    Examples:
        .. code-block:: python

            bilinear_matrix(2, 4, np.float64) @ [0, 1]  # [0, 0.25, 0.75, 1]

    """
    if in_extent < 1 or out_extent < 1:
        raise ContractError(f"extents must be positive: {in_extent} -> {out_extent}")

    matrix: Array = np.zeros((out_extent, in_extent), dtype=np.float64)
    scale: float = in_extent / out_extent
    for dst in range(out_extent):
        src: float = min(max((dst + 0.5) * scale - 0.5, 0.0), in_extent - 1.0)
        low: int = math.floor(src)
        high: int = min(low + 1, in_extent - 1)
        frac: float = src - low
        matrix[dst, low] += 1.0 - frac
        matrix[dst, high] += frac

    return matrix.astype(dtype)


class BilinearResize(Function):
    def forward(  # type: ignore[override]
        self, x: Array, out_h: int, out_w: int
    ) -> Array:
        self.rows: Array = bilinear_matrix(x.shape[2], out_h, x.dtype)
        self.cols: Array = bilinear_matrix(x.shape[3], out_w, x.dtype)
        return np.einsum("ph,nchw,qw->ncpq", self.rows, x, self.cols, optimize=True)

    def backward(self, grad: Array) -> tuple[Optional[Array], ...]:
        grad_x: Array = np.einsum(
            "ph,ncpq,qw->nchw", self.rows, grad, self.cols, optimize=True
        )
        return (grad_x,)


def bilinear_resize(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Bilinear resize of the spatial axes with half-pixel centers and edge clamping.

    Args:
        x (Tensor): input (N, C, H, W).
        out_h (int): output height, at least 1.
        out_w (int): output width, at least 1.

    Returns:
        (Tensor): resized (N, C, out_h, out_w).

    Raises:
        ContractError: when an extent is below 1.

    """
    if out_h < 1 or out_w < 1:
        raise ContractError(f"output extent must be positive: {out_h}x{out_w}")
    if (out_h, out_w) == x.shape[2:]:
        return Identity.apply(x)
    return BilinearResize.apply(x, out_h=out_h, out_w=out_w)


def bilinear_resize_adjoint(grad: Array, in_h: int, in_w: int) -> Array:
    """Adjoint of :func:`bilinear_resize`: scatter ``grad`` back by blend weights."""
    rows: Array = bilinear_matrix(in_h, grad.shape[2], grad.dtype)
    cols: Array = bilinear_matrix(in_w, grad.shape[3], grad.dtype)
    return np.einsum("ph,ncpq,qw->nchw", rows, grad, cols, optimize=True)


class Identity(Function):
    def forward(self, x: Array) -> Array:  # type: ignore[override]
        return x.copy()

    def backward(self, grad: Array) -> tuple[Optional[Array], ...]:
        return (grad,)


class ConcatChannels(Function):
    def forward(self, a: Array, b: Array) -> Array:  # type: ignore[override]
        if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
            raise ContractError(f"cannot concatenate {a.shape} and {b.shape}")
        self.split: int = a.shape[1]
        return np.concatenate([a, b.astype(a.dtype)], axis=1)

    def backward(self, grad: Array) -> tuple[Optional[Array], ...]:
        return grad[:, : self.split].copy(), grad[:, self.split :].copy()


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    """Concatenate along channels, ``a`` first.

    Raises:
        ContractError: when batch or spatial extents differ.

    """
    return ConcatChannels.apply(a, b)


def softmax(logits: Array) -> Array:
    """Channel softmax of (N, C, H, W) logits, stabilized by max subtraction."""
    shifted: Array = logits - logits.max(axis=1, keepdims=True)
    exp: Array = np.exp(shifted)
    return exp / exp.sum(axis=1, keepdims=True)


class SoftmaxCrossEntropy(Function):
    def forward(  # type: ignore[override]
        self, logits: Array, target: Array
    ) -> Array:
        if logits.shape[1] != 2:
            raise ContractError(f"logits must have 2 classes, got {logits.shape}")
        expected: tuple[int, ...] = (logits.shape[0], 1, *logits.shape[2:])
        if target.shape != expected:
            raise ContractError(f"target {target.shape} does not match {expected}")
        if not np.all((target == 0) | (target == 1)):
            raise ContractError("target values must be class indices 0 or 1")

        index: Array = target.astype(np.intp)
        shifted: Array = logits - logits.max(axis=1, keepdims=True)
        log_norm: Array = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
        log_probs: Array = shifted - log_norm
        picked: Array = np.take_along_axis(log_probs, index, axis=1)

        self.count: int = picked.size
        self.index: Array = index
        self.probabilities: Array = np.exp(log_probs)
        loss = -np.sum(picked, dtype=logits.dtype) / self.count
        return np.asarray(loss, dtype=logits.dtype).reshape(1, 1, 1, 1)

    def backward(self, grad: Array) -> tuple[Optional[Array], ...]:
        onehot: Array = np.zeros_like(self.probabilities)
        np.put_along_axis(onehot, self.index, 1.0, axis=1)
        scale: Array = grad.reshape(()) / self.count
        return (self.probabilities - onehot) * scale, None


def softmax_cross_entropy(logits: Tensor, target: Tensor) -> tuple[Tensor, Tensor]:
    """Mean pixel-wise cross entropy of two-class logits.

    Args:
        logits (Tensor): (N, 2, H, W).
        target (Tensor): class index per pixel (N, 1, H, W), values 0 or 1.

    Returns:
        (tuple[Tensor, Tensor]): scalar loss and the class probabilities (N, 2, H, W).

    Raises:
        ContractError: on shape mismatch or targets outside {0, 1}.

    Examples:
        .. code-block:: python

            # logits (0, 1) at a pixel of class 1 -> loss ln(1 + e^-1) ~ 0.313262

    """
    function = SoftmaxCrossEntropy()
    loss: Tensor = function(logits, target)
    return loss, Tensor(function.probabilities, dtype=logits.dtype)


@dataclass
class ResidualParams:
    """Parameters of a residual block: two conv + batch norm units and a skip path.

    ``projection`` (1x1 convolution matching the first conv's stride, plus batch norm)
    is present when the first conv changes stride or channel count.
    """

    conv1: ConvSpec
    weight1: Tensor
    bn1: BatchNormState
    conv2: ConvSpec
    weight2: Tensor
    bn2: BatchNormState
    projection: Optional[ConvSpec] = None
    projection_weight: Optional[Tensor] = None
    projection_bn: Optional[BatchNormState] = None
    name: str = field(default="block")

    def __post_init__(self) -> None:
        reshapes: bool = (
            self.conv1.stride != 1 or self.conv1.in_channels != self.conv2.out_channels
        )
        if reshapes and self.projection is None:
            raise ContractError(f"{self.name}: changing shape requires a projection")
        if self.projection is not None and (
            self.projection_weight is None or self.projection_bn is None
        ):
            raise ContractError(f"{self.name}: projection is missing its parameters")


def residual_block(
    x: Tensor,
    params: ResidualParams,
    trace: Optional[list[str]] = None,
) -> Tensor:
    """``relu(F(x) + skip(x))`` with ``F = conv-bn-relu-conv-bn``.

    Args:
        x (Tensor): block input.
        params (ResidualParams): block parameters; batch norm modes decide training
            or inference behavior.
        trace (list[str] | None): receives the names of executed convolutions.

    Returns:
        (Tensor): block output.

    """
    h: Tensor = conv2d(x, params.conv1, params.weight1)
    h = relu(batch_norm(h, params.bn1))
    h = batch_norm(conv2d(h, params.conv2, params.weight2), params.bn2)

    skip: Tensor = x
    if params.projection is not None:
        assert params.projection_weight is not None
        assert params.projection_bn is not None
        skip = conv2d(x, params.projection, params.projection_weight)
        skip = batch_norm(skip, params.projection_bn)

    if trace is not None:
        trace.extend([f"{params.name}.conv1", f"{params.name}.conv2"])
        if params.projection is not None:
            trace.append(f"{params.name}.projection")

    return relu(h + skip)
