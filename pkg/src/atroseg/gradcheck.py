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

"""Central finite difference verification of analytic gradients.

The per layer suite runs in double precision. Each entry builds a small seeded problem,
reduces the layer output to a scalar with a fixed random projection and compares the
gradient of every differentiable input against central differences.
"""

import logging
from collections.abc import Callable, Iterator
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import nn
from .errors import ContractError, NonFiniteError
from .nn import BatchNormState, ConvSpec, ResidualParams
from .tensor import Array, Function, Graph, Tensor, default_dtype


__all__ = [
    "GradcheckResult",
    "LAYERS",
    "finite_diff_check",
    "run_gradcheck",
]

logger = logging.getLogger(__name__)

DEFAULT_STEP: float = 1e-5
DEFAULT_TOLERANCE: float = 1e-4
KINK_TOLERANCE: float = 1e-4

TensorFunction = Callable[[Tensor], Tensor]


def _evaluate(fn: TensorFunction, data: Array) -> float:
    value: Tensor = fn(Tensor(data, dtype=data.dtype))
    result: float = value.item()
    if not np.isfinite(result):
        raise NonFiniteError("finite difference evaluation")
    return result


def finite_diff_check(
    fn: TensorFunction,
    x: Tensor,
    step: float = DEFAULT_STEP,
    kinks: Optional[Callable[[Array], Array]] = None,
    detect_kinks: bool = False,
) -> float:
    """Maximum relative error between analytic and central difference gradients.

    For every coordinate ``e``::

        numeric = (fn(x + step * e) - fn(x - step * e)) / (2 * step)
        error = |analytic - numeric| / max(1e-8, |analytic| + |numeric|)

    Coordinates within ``step`` of a kink are skipped, either as flagged by ``kinks``
    (a boolean mask over ``x``) or, with ``detect_kinks``, where the one sided
    differences disagree by more than a relative ``1e-4``.

    Args:
        fn (Callable[[Tensor], Tensor]): deterministic map to a scalar tensor.
        x (Tensor): evaluation point.
        step (float): positive difference step.
        kinks (Callable | None): predicate marking coordinates to skip.
        detect_kinks (bool): skip coordinates whose one sided slopes disagree.

    Returns:
        (float): max relative error over the checked coordinates, 0 if none remain.

    Raises:
        ContractError: when step is not positive.
        NonFiniteError: when fn produces a non-finite value.

    """
    if step <= 0:
        raise ContractError(f"step must be positive: {step}")

    point: Array = np.array(x.data, copy=True)
    leaf = Tensor(point.copy(), requires_grad=True, dtype=point.dtype)
    with Graph() as graph:
        out: Tensor = fn(leaf)
    if not np.isfinite(out.item()):
        raise NonFiniteError("finite difference evaluation")
    graph.backward(out)
    analytic: Array = np.zeros_like(point) if leaf.grad is None else leaf.grad

    skip: Array = np.zeros(point.shape, dtype=bool)
    if kinks is not None:
        skip |= np.asarray(kinks(point), dtype=bool)
    center: float = _evaluate(fn, point) if detect_kinks else 0.0

    worst: float = 0.0
    skipped: int = 0
    flat: Array = point.reshape(-1)
    for index in range(flat.size):
        if skip.reshape(-1)[index]:
            skipped += 1
            continue
        original: float = float(flat[index])
        flat[index] = original + step
        upper: float = _evaluate(fn, point)
        flat[index] = original - step
        lower: float = _evaluate(fn, point)
        flat[index] = original

        if detect_kinks:
            forward_slope: float = (upper - center) / step
            backward_slope: float = (center - lower) / step
            spread: float = abs(forward_slope - backward_slope)
            if spread > KINK_TOLERANCE * (abs(forward_slope) + abs(backward_slope)):
                skipped += 1
                continue

        numeric: float = (upper - lower) / (2.0 * step)
        exact: float = float(analytic.reshape(-1)[index])
        error: float = abs(exact - numeric) / max(1e-8, abs(exact) + abs(numeric))
        worst = max(worst, error)

    logger.debug("checked %d coordinates, skipped %d", flat.size - skipped, skipped)
    return worst


@dataclass(frozen=True)
class GradcheckResult:
    """Worst relative error of one layer (over all of its checked inputs)."""

    layer: str
    error: float
    tolerance: float = DEFAULT_TOLERANCE

    @property
    def passed(self) -> bool:
        return self.error < self.tolerance


@contextmanager
def _corrupted(function: type[Function], factor: float = 1.5) -> Iterator[None]:
    """Scale every gradient a Function class returns; failure path test hook."""
    original = function.backward

    def backward(self: Function, grad: Array) -> tuple[Optional[Array], ...]:
        return tuple(
            None if g is None else g * factor for g in original(self, grad)
        )

    function.backward = backward  # type: ignore[method-assign]
    try:
        yield
    finally:
        function.backward = original  # type: ignore[method-assign]


def _projected(rng: np.random.Generator, shape: tuple[int, ...]) -> TensorFunction:
    weights = Tensor(rng.standard_normal(shape))

    def reduce(t: Tensor) -> Tensor:
        return (t * weights).sum()

    return reduce


def _leaf(
    rng: np.random.Generator, shape: tuple[int, ...], scale: float = 1.0
) -> Tensor:
    return Tensor(scale * rng.standard_normal(shape))


Check = Callable[[np.random.Generator], float]


def _conv_errors(rng: np.random.Generator, spec: ConvSpec) -> float:
    x: Tensor = _leaf(rng, (2, spec.in_channels, 7, 7))
    w: Tensor = _leaf(rng, spec.weight_shape, 0.5)
    b: Tensor = _leaf(rng, (1, spec.out_channels, 1, 1))
    reduce = _projected(rng, nn.conv2d(x, spec, w, b).shape)
    return max(
        finite_diff_check(lambda t: reduce(nn.conv2d(t, spec, w, b)), x),
        finite_diff_check(lambda t: reduce(nn.conv2d(x, spec, t, b)), w),
        finite_diff_check(lambda t: reduce(nn.conv2d(x, spec, w, t)), b),
    )


def _check_conv(rng: np.random.Generator) -> float:
    return max(
        _conv_errors(rng, ConvSpec(2, 3, 3)),
        _conv_errors(rng, ConvSpec(2, 3, 3, stride=2)),
        _conv_errors(rng, ConvSpec(2, 2, 3, rate=2)),
    )


def _check_batch_norm(rng: np.random.Generator) -> float:
    x: Tensor = _leaf(rng, (3, 2, 3, 3))
    gamma: Tensor = _leaf(rng, (1, 2, 1, 1))
    beta: Tensor = _leaf(rng, (1, 2, 1, 1))
    reduce = _projected(rng, x.shape)

    def run(t: Tensor, g: Tensor, b: Tensor, training: bool = True) -> Tensor:
        state = BatchNormState.create(2)
        state.gamma, state.beta, state.training = g, b, training
        return reduce(nn.batch_norm(t, state))

    return max(
        finite_diff_check(lambda t: run(t, gamma, beta), x),
        finite_diff_check(lambda t: run(x, t, beta), gamma),
        finite_diff_check(lambda t: run(x, gamma, t), beta),
        finite_diff_check(lambda t: run(t, gamma, beta, training=False), x),
    )


def _check_relu(rng: np.random.Generator) -> float:
    x: Tensor = _leaf(rng, (2, 2, 4, 4))
    reduce = _projected(rng, x.shape)
    return finite_diff_check(
        lambda t: reduce(nn.relu(t)),
        x,
        kinks=lambda a: np.abs(a) <= DEFAULT_STEP,
    )


def _check_bilinear(rng: np.random.Generator) -> float:
    x: Tensor = _leaf(rng, (1, 2, 3, 4))
    errors: list[float] = []
    for out_h, out_w in ((6, 8), (5, 7), (2, 3)):
        reduce = _projected(rng, (1, 2, out_h, out_w))
        errors.append(
            finite_diff_check(
                lambda t, h=out_h, w=out_w: reduce(nn.bilinear_resize(t, h, w)), x
            )
        )
    return max(errors)


def _check_concat(rng: np.random.Generator) -> float:
    a: Tensor = _leaf(rng, (2, 1, 3, 3))
    b: Tensor = _leaf(rng, (2, 2, 3, 3))
    reduce = _projected(rng, (2, 3, 3, 3))
    return max(
        finite_diff_check(lambda t: reduce(nn.concat_channels(t, b)), a),
        finite_diff_check(lambda t: reduce(nn.concat_channels(a, t)), b),
    )


def _check_softmax_cross_entropy(rng: np.random.Generator) -> float:
    logits: Tensor = _leaf(rng, (2, 2, 3, 3))
    target = Tensor(rng.integers(0, 2, size=(2, 1, 3, 3)))
    return finite_diff_check(lambda t: nn.softmax_cross_entropy(t, target)[0], logits)


def _residual(
    rng: np.random.Generator, in_channels: int, out_channels: int, stride: int
) -> ResidualParams:
    conv1 = ConvSpec(in_channels, out_channels, 3, stride)
    conv2 = ConvSpec(out_channels, out_channels, 3, 1, rate=2)
    projection: Optional[ConvSpec] = None
    if stride != 1 or in_channels != out_channels:
        projection = ConvSpec(in_channels, out_channels, 1, stride, padding=0)
    return ResidualParams(
        conv1=conv1,
        weight1=_leaf(rng, conv1.weight_shape, 0.5),
        bn1=BatchNormState.create(out_channels),
        conv2=conv2,
        weight2=_leaf(rng, conv2.weight_shape, 0.5),
        bn2=BatchNormState.create(out_channels),
        projection=projection,
        projection_weight=(
            None if projection is None else _leaf(rng, projection.weight_shape)
        ),
        projection_bn=(
            None if projection is None else BatchNormState.create(out_channels)
        ),
    )


def _check_residual_block(rng: np.random.Generator) -> float:
    errors: list[float] = []
    for in_channels, out_channels, stride in ((2, 2, 1), (2, 3, 2)):
        params: ResidualParams = _residual(rng, in_channels, out_channels, stride)
        x: Tensor = _leaf(rng, (2, in_channels, 6, 6))
        reduce = _projected(rng, nn.residual_block(x, params).shape)
        errors.append(
            finite_diff_check(
                lambda t, p=params: reduce(nn.residual_block(t, p)),
                x,
                detect_kinks=True,
            )
        )
    return max(errors)


def _check_composition(rng: np.random.Generator) -> float:
    """Three layer conv / batch norm / resize chain ending in cross entropy."""
    spec1 = ConvSpec(1, 3, 3)
    spec2 = ConvSpec(3, 3, 3, stride=2, rate=2)
    spec3 = ConvSpec(3, 2, 1)
    w1, w2, w3 = (_leaf(rng, s.weight_shape, 0.5) for s in (spec1, spec2, spec3))
    target = Tensor(rng.integers(0, 2, size=(2, 1, 8, 8)))
    x: Tensor = _leaf(rng, (2, 1, 8, 8))

    def net(t: Tensor) -> Tensor:
        state = BatchNormState.create(3)
        h: Tensor = nn.batch_norm(nn.conv2d(t, spec1, w1), state)
        h = nn.conv2d(h, spec2, w2)
        h = nn.bilinear_resize(nn.conv2d(h, spec3, w3), 8, 8)
        return nn.softmax_cross_entropy(h, target)[0]

    return finite_diff_check(net, x)


LAYERS: dict[str, tuple[Check, tuple[type[Function], ...]]] = {
    "conv2d": (_check_conv, (nn.Conv2d,)),
    "batch_norm": (_check_batch_norm, (nn.BatchNormTrain, nn.BatchNormInference)),
    "relu": (_check_relu, (nn.Relu,)),
    "bilinear_resize": (_check_bilinear, (nn.BilinearResize,)),
    "concat_channels": (_check_concat, (nn.ConcatChannels,)),
    "softmax_cross_entropy": (_check_softmax_cross_entropy, (nn.SoftmaxCrossEntropy,)),
    "residual_block": (_check_residual_block, (nn.Conv2d,)),
    "composition": (_check_composition, (nn.BatchNormTrain,)),
}


def run_gradcheck(
    seed: int = 0,
    corrupt: Optional[str] = None,
    tolerance: float = DEFAULT_TOLERANCE,
) -> list[GradcheckResult]:
    """Run the double precision finite difference suite over every layer type.

    Args:
        seed (int): seed of the problem generator; each layer draws from its own
            stream derived from (seed, layer index).
        corrupt (str | None): layer name whose analytic gradients are scaled by 1.5,
            to exercise the failure path.
        tolerance (float): pass threshold on the worst relative error.

    Returns:
        (list[GradcheckResult]): one result per layer, in suite order.

    Raises:
        ContractError: when ``corrupt`` does not name a layer.

    """
    if corrupt is not None and corrupt not in LAYERS:
        raise ContractError(f"unknown layer {corrupt!r}; choose from {sorted(LAYERS)}")

    results: list[GradcheckResult] = []
    with default_dtype(np.float64):
        for index, (layer, (check, functions)) in enumerate(LAYERS.items()):
            rng: np.random.Generator = np.random.default_rng([seed, index])
            if layer == corrupt:
                with _corrupted(functions[0]):
                    error: float = check(rng)
            else:
                error = check(rng)
            results.append(GradcheckResult(layer, error, tolerance))
            logger.info("gradcheck %-22s worst relative error %.3e", layer, error)

    return results
