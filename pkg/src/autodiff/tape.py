"""
Tape-based Reverse-Mode Differentiation

A Tensor is an immutable float64 value. Operations on tensors that live on a
Tape are recorded as Nodes in execution order, which is always a valid
topological order. ``Tape.backward`` walks the nodes in reverse and
accumulates vector-Jacobian products into every leaf.

Tensors without a tape are constants: they flow through operations but never
receive gradients.
"""

from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np


class AutodiffError(Exception):
    """Base exception for the differentiation engine."""

    pass


class DimensionError(AutodiffError):
    """Raised when operand shapes are incompatible."""

    pass


class ContractError(AutodiffError):
    """Raised when an operation is used outside its documented contract."""

    pass


# vjp(grad_out, saved) -> one gradient (or None) per input
VJP = Callable[[np.ndarray, Tuple[Any, ...]], Tuple[Optional[np.ndarray], ...]]


class Tensor:
    """
    Immutable dense float64 tensor.

    Attributes:
        data: Read-only row-major payload
        tape: Owning tape, or None for constants
        node_id: Id of the node that produced this value on ``tape``
    """

    __slots__ = ("data", "tape", "node_id")

    def __init__(
        self,
        data: Any,
        tape: Optional["Tape"] = None,
        node_id: Optional[int] = None,
    ):
        array = np.array(data, dtype=np.float64)
        if array.ndim == 0:
            array = array.reshape(())
        array.flags.writeable = False
        self.data = array
        self.tape = tape
        self.node_id = node_id

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return int(self.data.size)

    def numpy(self) -> np.ndarray:
        """Return a writable copy of the payload."""
        return np.array(self.data, copy=True)

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() requires a single value, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        where = "const" if self.tape is None else f"node={self.node_id}"
        return f"Tensor(shape={self.shape}, {where})"


@dataclass
class Node:
    """One recorded operation on a tape."""

    op: str
    inputs: Tuple[int, ...]
    saved: Tuple[Any, ...]
    output: int
    shape: Tuple[int, ...]
    vjp: Optional[VJP] = None


@dataclass
class Tape:
    """
    Single-owner record of operations.

    Leaves are the differentiation targets (parameters and, when marked,
    inputs). A tape must not be shared across threads while recording.
    """

    nodes: List[Node] = field(default_factory=list)
    leaves: List[int] = field(default_factory=list)

    def leaf(self, value: Any, name: Optional[str] = None) -> Tensor:
        """
        Register a differentiation target.

        Args:
            value: Array-like or Tensor whose payload seeds the leaf
            name: Optional label kept on the node for debugging

        Returns:
            Tensor bound to this tape
        """
        data = value.data if isinstance(value, Tensor) else value
        tensor = Tensor(data)
        node_id = len(self.nodes)
        self.nodes.append(
            Node(
                op="leaf",
                inputs=(),
                saved=(name,),
                output=node_id,
                shape=tensor.shape,
            )
        )
        self.leaves.append(node_id)
        tensor.tape = self
        tensor.node_id = node_id
        return tensor

    def record(
        self,
        op: str,
        inputs: Sequence[Tensor],
        data: np.ndarray,
        vjp: VJP,
        saved: Tuple[Any, ...] = (),
    ) -> Tensor:
        """Append a node computed from ``inputs`` and return its output."""
        for tensor in inputs:
            if tensor.tape is not None and tensor.tape is not self:
                raise ContractError(
                    f"Operation '{op}' mixes tensors from different tapes"
                )

        input_ids = tuple(
            -1 if tensor.tape is None else tensor.node_id for tensor in inputs
        )
        node_id = len(self.nodes)
        out = Tensor(data)
        self.nodes.append(
            Node(
                op=op,
                inputs=input_ids,
                saved=saved,
                output=node_id,
                shape=out.shape,
                vjp=vjp,
            )
        )
        out.tape = self
        out.node_id = node_id
        return out

    def backward(self, root: Tensor) -> "Gradients":
        """
        Exact reverse-mode accumulation from a scalar root.

        Args:
            root: Scalar tensor recorded on this tape

        Returns:
            Gradients keyed by leaf node id; leaves the root does not depend
            on receive zeros

        Raises:
            ContractError: If root is not scalar or belongs to another tape
        """
        if root.tape is not self:
            raise ContractError("backward() root must be recorded on this tape")
        if root.data.size != 1:
            raise ContractError(
                f"backward() requires a scalar root, got shape {root.shape}"
            )

        grads: Dict[int, np.ndarray] = {root.node_id: np.ones(root.shape)}

        for node in reversed(self.nodes[: root.node_id + 1]):
            grad_out = grads.get(node.output)
            if grad_out is None or node.vjp is None:
                continue

            input_grads = node.vjp(grad_out, node.saved)
            for input_id, grad in zip(node.inputs, input_grads):
                if input_id < 0 or grad is None:
                    continue
                if input_id in grads:
                    grads[input_id] = grads[input_id] + grad
                else:
                    grads[input_id] = grad

        leaf_grads = {}
        for leaf_id in self.leaves:
            grad = grads.get(leaf_id)
            if grad is None:
                grad = np.zeros(self.nodes[leaf_id].shape)
            leaf_grads[leaf_id] = grad
        return Gradients(leaf_grads)


class Gradients:
    """Read-only mapping from leaf tensors to their gradients."""

    def __init__(self, by_node: Dict[int, np.ndarray]):
        self._by_node = by_node

    def __getitem__(self, leaf: Tensor) -> np.ndarray:
        if leaf.node_id not in self._by_node:
            raise ContractError(f"{leaf!r} is not a leaf of this tape")
        return self._by_node[leaf.node_id]

    def __len__(self) -> int:
        return len(self._by_node)


def constant(value: Any) -> Tensor:
    """Wrap a value as an untracked tensor."""
    if isinstance(value, Tensor):
        return Tensor(value.data)
    return Tensor(value)


def tape_of(*tensors: Tensor) -> Optional[Tape]:
    """Return the single tape shared by the operands, or None if all constant."""
    tape = None
    for tensor in tensors:
        if tensor.tape is None:
            continue
        if tape is None:
            tape = tensor.tape
        elif tensor.tape is not tape:
            raise ContractError("Operands belong to different tapes")
    return tape
