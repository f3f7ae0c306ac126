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

"""Stochastic gradient descent with classical (heavy-ball) momentum."""

import logging
from collections.abc import Mapping
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import ContractError
from .tensor import Array, Tensor


__all__ = ["OptimizerState", "sgd_momentum_step"]

logger = logging.getLogger(__name__)


@dataclass
class OptimizerState:
    """Velocity buffers of every trainable parameter.

    Args:
        momentum (float): velocity decay, 0.9 for the lung segmentation recipe.
        learning_rate (float): step size, updated by the schedule each epoch.
        velocity (dict): one buffer per parameter name, shaped like the parameter.

    """

    momentum: float
    learning_rate: float
    velocity: dict[str, Array] = field(default_factory=dict)

    @classmethod
    def create(
        cls,
        params: Mapping[str, Tensor],
        momentum: float = 0.9,
        learning_rate: float = 0.1,
    ) -> "OptimizerState":
        """Create zeroed velocity buffers for every parameter requiring gradients."""
        velocity: dict[str, Array] = {
            name: np.zeros_like(p.data) for name, p in params.items() if p.requires_grad
        }
        return cls(momentum=momentum, learning_rate=learning_rate, velocity=velocity)


def sgd_momentum_step(
    params: Mapping[str, Tensor],
    grads: Optional[Mapping[str, Array]],
    state: OptimizerState,
) -> tuple[Mapping[str, Tensor], OptimizerState]:
    """Apply one classical momentum update in place.

    ``v <- momentum * v + grad`` followed by ``p <- p - learning_rate * v``.

    Args:
        params (Mapping[str, Tensor]): trainable parameters, updated in place.
        grads (Mapping[str, Array] | None): gradient per parameter name. When None, each
            parameter's own ``grad`` field is used.
        state (OptimizerState): velocity buffers, updated in place.

    Returns:
        (tuple): the same params mapping and state, for chaining.

    Raises:
        ContractError: on non-positive learning rate, missing velocity buffer or
            shape mismatch between parameter, gradient and velocity.

    Examples:
        .. code-block:: python

            # p=1.0, grad=0.5, lr=0.1, momentum=0.9
            # first step: v=0.5, p=0.95; second step: v=0.95, p=0.855

    """
    if state.learning_rate <= 0:
        raise ContractError(f"learning rate must be positive: {state.learning_rate}")
    if set(state.velocity) != {n for n, p in params.items() if p.requires_grad}:
        raise ContractError("velocity buffers do not match the trainable parameters")

    name: str
    for name, velocity in state.velocity.items():
        param: Tensor = params[name]
        grad: Optional[Array] = param.grad if grads is None else grads.get(name)
        if grad is None:
            grad = np.zeros_like(param.data)
        if not param.shape == grad.shape == velocity.shape:
            raise ContractError(
                f"{name}: parameter {param.shape}, gradient {grad.shape} and "
                f"velocity {velocity.shape} disagree"
            )
        velocity *= state.momentum
        velocity += grad
        param.data -= state.learning_rate * velocity

    return params, state
