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

"""Dense 4-D tensors and tape based reverse-mode differentiation.

Operations executed while a :class:`Graph` is active are recorded on it in execution
order, which is a valid topological order. :meth:`Graph.backward` walks the recorded
nodes once, in reverse, and assigns gradients to every leaf tensor that requires them.
Operations executed outside of a graph are plain numpy computations (inference).
"""

import logging
import threading
from collections.abc import Iterator, Sequence
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Any, Optional, Union

import numpy as np
import numpy.typing as npt

from .errors import ContractError, NonFiniteError


__all__ = [
    "Function",
    "Graph",
    "Node",
    "Tensor",
    "backward",
    "current_graph",
    "default_dtype",
    "get_default_dtype",
]

logger = logging.getLogger(__name__)

Array = npt.NDArray[np.floating[Any]]
ArrayLike = Union[npt.ArrayLike, Array]
SCALAR_SHAPE: tuple[int, int, int, int] = (1, 1, 1, 1)

_state = threading.local()


def get_default_dtype() -> np.dtype:
    """Return the floating point dtype new tensors are created with."""
    return getattr(_state, "dtype", np.dtype(np.float32))


@contextmanager
def default_dtype(dtype: npt.DTypeLike) -> Iterator[np.dtype]:
    """Temporarily change the dtype new tensors are created with.

    Training runs in single precision; gradient checking switches to double precision.

    Args:
        dtype (DTypeLike): one of float32 or float64.

    Yields:
        (np.dtype): the active dtype.

    Examples:
        .. code-block:: python

            with default_dtype(np.float64):
                x = Tensor(np.zeros((1, 1, 2, 2)))
            assert x.dtype == np.float64

    """
    previous: np.dtype = get_default_dtype()
    _state.dtype = np.dtype(dtype)
    try:
        yield _state.dtype
    finally:
        _state.dtype = previous


class Tensor:
    """Dense (batch, channel, height, width) array participating in differentiation.

    Args:
        data (ArrayLike): values, converted to the default dtype unless ``dtype`` is
            given. Must be 4 dimensional.
        requires_grad (bool): whether backward passes assign a gradient to this tensor.
        name (str): optional label, used in diagnostics.
        dtype (DTypeLike): explicit floating point dtype.

    Raises:
        ContractError: when data is not 4 dimensional.

    """

    __slots__ = ("_detached", "data", "grad", "name", "requires_grad")

    def __init__(
        self,
        data: ArrayLike,
        requires_grad: bool = False,
        name: Optional[str] = None,
        dtype: Optional[npt.DTypeLike] = None,
    ) -> None:
        array: Array = np.asarray(
            data, dtype=get_default_dtype() if dtype is None else dtype
        )
        if array.ndim != 4:
            raise ContractError(
                f"tensors are (N, C, H, W); got {array.ndim} dimensions {array.shape}"
            )
        self.data: Array = array
        self.requires_grad: bool = requires_grad
        self.grad: Optional[Array] = None
        self.name: Optional[str] = name
        self._detached: bool = False

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return self.data.shape  # type: ignore[return-value]

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def detached(self) -> bool:
        return self._detached

    def detach(self) -> "Tensor":
        """Return a copy of this tensor cut from any graph.

        A detached tensor must never be an input of an operation the loss depends on;
        backward raises :class:`ContractError` if it finds one.
        """
        out = Tensor(self.data.copy(), requires_grad=False, name=self.name)
        out._detached = True
        return out

    def item(self) -> float:
        """Return the single value of a scalar tensor."""
        if self.data.size != 1:
            raise ContractError(f"item() requires one element, tensor has {self.shape}")
        return float(self.data.reshape(-1)[0])

    def sum(self) -> "Tensor":
        """Sum of all elements as a (1, 1, 1, 1) tensor."""
        return Sum.apply(self)

    def __add__(self, other: "Tensor") -> "Tensor":
        return Add.apply(self, other)

    def __mul__(self, other: "Tensor") -> "Tensor":
        return Mul.apply(self, other)

    def __repr__(self) -> str:
        label: str = f", name={self.name!r}" if self.name else ""
        return (
            f"Tensor(shape={self.shape}, dtype={self.dtype}, "
            f"requires_grad={self.requires_grad}{label})"
        )

    @classmethod
    def zeros(cls, shape: Sequence[int], requires_grad: bool = False) -> "Tensor":
        return cls(np.zeros(tuple(shape)), requires_grad=requires_grad)

    @classmethod
    def scalar(cls, value: float, requires_grad: bool = False) -> "Tensor":
        return cls(np.full(SCALAR_SHAPE, value), requires_grad=requires_grad)


class Function:
    """A differentiable operation over tensors.

    Subclasses implement :meth:`forward` over numpy arrays, saving whatever context
    they need on ``self``, and :meth:`backward`, which maps the gradient of the output
    to one gradient (or None) per input. ``needs_input_grad`` is set before ``forward``
    runs so subclasses may skip work for inputs that do not require gradients.
    """

    needs_input_grad: tuple[bool, ...] = ()

    @property
    def name(self) -> str:
        return type(self).__name__

    def forward(self, *arrays: Optional[Array], **kwargs: Any) -> Array:
        raise NotImplementedError(f"{self.name} does not implement forward")

    def backward(self, grad: Array) -> tuple[Optional[Array], ...]:
        raise NotImplementedError(f"{self.name} does not implement backward")

    def __call__(self, *tensors: Optional[Tensor], **kwargs: Any) -> Tensor:
        self.needs_input_grad = tuple(
            t is not None and t.requires_grad for t in tensors
        )
        out: Array = self.forward(
            *(None if t is None else t.data for t in tensors), **kwargs
        )
        if not np.all(np.isfinite(out)):
            raise NonFiniteError(self.name)

        output = Tensor(out, requires_grad=any(self.needs_input_grad), dtype=out.dtype)
        graph: Optional[Graph] = current_graph()
        if graph is not None and output.requires_grad:
            graph.record(Node(self.name, tuple(tensors), output, self))

        return output

    @classmethod
    def apply(cls, *tensors: Optional[Tensor], **kwargs: Any) -> Tensor:
        """Construct the operation and apply it to the given tensors."""
        return cls()(*tensors, **kwargs)


@dataclass(frozen=True)
class Node:
    """One recorded operation: tag, inputs, output and the saved backward context."""

    op: str
    inputs: tuple[Optional[Tensor], ...]
    output: Tensor
    function: Function


def current_graph() -> Optional["Graph"]:
    """Return the innermost active graph of this thread, if any."""
    stack: list[Graph] = getattr(_state, "graphs", [])
    return stack[-1] if stack else None


class Graph:
    """Ordered record of operations, used as a context manager.

    Examples:
        .. code-block:: python

            x = Tensor(np.ones((1, 1, 2, 2)), requires_grad=True)
            with Graph() as graph:
                loss = (x * x).sum()
            graph.backward(loss)
            # x.grad == 2 * x.data

    """

    def __init__(self) -> None:
        self.nodes: list[Node] = []

    def __len__(self) -> int:
        return len(self.nodes)

    def __enter__(self) -> "Graph":
        if not hasattr(_state, "graphs"):
            _state.graphs = []
        _state.graphs.append(self)
        return self

    def __exit__(self, *exc: object) -> None:
        _state.graphs.remove(self)

    def record(self, node: Node) -> None:
        self.nodes.append(node)

    def backward(self, loss: Tensor) -> None:
        """Assign dLoss/dLeaf to every leaf tensor requiring a gradient.

        Leaf gradients are reset to zero at the start of every pass and summed over
        every use of the leaf. Intermediate gradients are discarded.

        Args:
            loss (Tensor): scalar (1, 1, 1, 1) output of an operation recorded here.

        Raises:
            ContractError: loss is not scalar, loss was not produced by this graph, or
                a detached tensor feeds an operation the loss depends on.

        """
        if loss.shape != SCALAR_SHAPE:
            raise ContractError(f"loss must be scalar {SCALAR_SHAPE}, got {loss.shape}")

        produced: set[int] = {id(node.output) for node in self.nodes}
        if id(loss) not in produced:
            raise ContractError("loss was not produced by this graph")

        leaves: dict[int, Tensor] = {}
        for node in self.nodes:
            for tensor in node.inputs:
                if tensor is not None and tensor.requires_grad:
                    if id(tensor) not in produced:
                        leaves[id(tensor)] = tensor
                        tensor.grad = np.zeros_like(tensor.data)

        grads: dict[int, Array] = {id(loss): np.ones_like(loss.data)}
        node: Node
        for node in reversed(self.nodes):
            grad: Optional[Array] = grads.pop(id(node.output), None)
            if grad is None:
                continue

            input_grads: tuple[Optional[Array], ...] = node.function.backward(grad)
            for tensor, input_grad in zip(node.inputs, input_grads, strict=True):
                if tensor is None:
                    continue
                if tensor.detached:
                    raise ContractError(
                        f"detached tensor {tensor.name or ''} reaches the loss "
                        f"through {node.op}"
                    )
                if input_grad is None or not tensor.requires_grad:
                    continue
                key: int = id(tensor)
                previous: Optional[Array] = grads.get(key)
                grads[key] = input_grad if previous is None else previous + input_grad

        for key, leaf in leaves.items():
            if key in grads:
                leaf.grad = np.asarray(grads[key], dtype=leaf.dtype).reshape(leaf.shape)

        logger.debug("backward over %d nodes, %d leaves", len(self.nodes), len(leaves))


def backward(graph: Graph, loss: Tensor) -> None:
    """Run :meth:`Graph.backward`; functional spelling of the same operation."""
    graph.backward(loss)


class Add(Function):
    """Elementwise sum of two equally shaped tensors."""

    def forward(self, x: Array, y: Array) -> Array:  # type: ignore[override]
        if x.shape != y.shape:
            raise ContractError(f"shape mismatch {x.shape} + {y.shape}")
        return x + y

    def backward(self, grad: Array) -> tuple[Optional[Array], ...]:
        return grad, grad


class Mul(Function):
    """Elementwise product of two equally shaped tensors."""

    def forward(self, x: Array, y: Array) -> Array:  # type: ignore[override]
        if x.shape != y.shape:
            raise ContractError(f"shape mismatch {x.shape} * {y.shape}")
        self.x: Array = x
        self.y: Array = y
        return x * y

    def backward(self, grad: Array) -> tuple[Optional[Array], ...]:
        return grad * self.y, grad * self.x


class Sum(Function):
    """Reduction of every element to a (1, 1, 1, 1) tensor."""

    def forward(self, x: Array) -> Array:  # type: ignore[override]
        self.shape: tuple[int, ...] = x.shape
        return np.sum(x, dtype=x.dtype).reshape(SCALAR_SHAPE)

    def backward(self, grad: Array) -> tuple[Optional[Array], ...]:
        return (np.broadcast_to(grad.reshape(()), self.shape).copy(),)
