"""Dense tensors and the recording tape behind reverse-mode differentiation."""

import logging
import threading
from typing import Callable, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from ..errors import ShapeError, TapeError

logger = logging.getLogger(__name__)

ArrayLike = Union[np.ndarray, float, int, Sequence[float], Sequence[Sequence[float]]]
BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]

_local = threading.local()


def _tape_stack() -> List["Tape"]:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = []
        _local.stack = stack
    return stack


def active_tape() -> Optional["Tape"]:
    """The innermost tape entered on this thread, if any."""
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """
    A float64 array with an optional gradient buffer.

    Leaves are created directly; non-leaf tensors are produced by the ops in
    `functional` while a `Tape` is active and carry the id of the node that
    produced them.
    """

    def __init__(self, data: ArrayLike, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.array(data, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.name = name
        self.node_id: Optional[int] = None
        self._tape: Optional["Tape"] = None

    @classmethod
    def wrap(cls, array: np.ndarray, requires_grad: bool = False) -> "Tensor":
        """Wrap an op result without copying it."""
        out = cls.__new__(cls)
        out.data = np.ascontiguousarray(array, dtype=np.float64)
        out.grad = None
        out.requires_grad = requires_grad
        out.name = None
        out.node_id = None
        out._tape = None
        return out

    @property
    def shape(self) -> Tuple[int, ...]:
        return tuple(self.data.shape)

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return self.node_id is None

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError("item", "only single-element tensors convert to a scalar", [self.shape])
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def accumulate_grad(self, grad: np.ndarray) -> None:
        if grad.shape != self.data.shape:
            raise ShapeError("accumulate_grad", "gradient shape differs from tensor shape",
                             [grad.shape, self.data.shape])
        if self.grad is None:
            self.grad = np.array(grad, dtype=np.float64)
        else:
            self.grad += grad

    def zero_grad(self) -> None:
        self.grad = None

    # Arithmetic sugar; the ops live in functional.

    def __add__(self, other: Union["Tensor", float]) -> "Tensor":
        from . import functional as F
        return F.add(self, other if isinstance(other, Tensor) else Tensor(other))

    __radd__ = __add__

    def __mul__(self, other: Union["Tensor", float]) -> "Tensor":
        from . import functional as F
        if isinstance(other, Tensor):
            return F.mul(self, other)
        return F.scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self) -> "Tensor":
        from . import functional as F
        return F.scale(self, -1.0)

    def __sub__(self, other: Union["Tensor", float]) -> "Tensor":
        return self + (-other if isinstance(other, Tensor) else -float(other))

    def __truediv__(self, other: float) -> "Tensor":
        from . import functional as F
        return F.scale(self, 1.0 / float(other))

    def sum(self) -> "Tensor":
        from . import functional as F
        return F.sum(self)

    def reshape(self, *shape: int) -> "Tensor":
        from . import functional as F
        return F.reshape(self, shape)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


class Node:
    """One recorded operation."""

    def __init__(self, op: str, inputs: Tuple[Tensor, ...], output: Tensor, backward_fn: BackwardFn):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn

    @property
    def input_ids(self) -> List[Optional[int]]:
        return [t.node_id for t in self.inputs]

    @property
    def output_id(self) -> int:
        return self.output.node_id


class Tape:
    """
    Ordered record of operations.

    Recording order is a topological order, so backward walks the nodes in
    exact reverse. A tape can run backward once; `reset()` re-arms it.

    Usage:
        with Tape() as tape:
            loss = model_loss(...)
            tape.backward(loss)
    """

    def __init__(self):
        self.nodes: List[Node] = []
        self.forward_passes = 0
        self.backward_passes = 0
        self._consumed = False

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, op: str, inputs: Iterable[Tensor], output: Tensor, backward_fn: BackwardFn) -> None:
        if self._consumed:
            raise TapeError("tape already ran backward; call reset() before recording again")
        output.node_id = len(self.nodes)
        output._tape = self
        self.nodes.append(Node(op, tuple(inputs), output, backward_fn))

    def mark_forward(self) -> None:
        self.forward_passes += 1

    def backward(self, loss: Tensor) -> None:
        """Populate `.grad` of every requires_grad leaf reachable from `loss`."""
        if self._consumed:
            raise TapeError("backward already ran on this tape; call reset() first")
        if loss.data.size != 1:
            raise TapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss._tape is not self:
            raise TapeError("loss was not recorded on this tape")

        grads = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            upstream = grads.pop(id(node.output), None)
            if upstream is None:
                continue
            for tensor, grad in zip(node.inputs, node.backward_fn(upstream)):
                if grad is None or not tensor.requires_grad:
                    continue
                if tensor._tape is self:
                    key = id(tensor)
                    grads[key] = grads[key] + grad if key in grads else grad
                else:
                    tensor.accumulate_grad(grad)

        self._consumed = True
        self.backward_passes += 1
        logger.debug(f"backward over {len(self.nodes)} nodes")

    def reset(self) -> None:
        """Forget recorded nodes and pass counts."""
        for node in self.nodes:
            node.output._tape = None
        self.nodes = []
        self.forward_passes = 0
        self.backward_passes = 0
        self._consumed = False


def backward(loss: Tensor) -> None:
    """Run backward on the tape that recorded `loss`."""
    if loss._tape is None:
        raise TapeError("loss has no recorded graph (was it computed inside a Tape?)")
    loss._tape.backward(loss)
