"""Central finite-difference helpers for the gradient tests."""

from typing import Callable, List, Optional, Sequence

import numpy as np

from lwdna.autodiff.tensor import Tape, Tensor

STEP = 1e-5


def numeric_grad(loss_fn: Callable[[], float], tensor: Tensor, index: tuple, h: float = STEP) -> float:
    original = tensor.data[index]
    tensor.data[index] = original + h
    up = loss_fn()
    tensor.data[index] = original - h
    down = loss_fn()
    tensor.data[index] = original
    return (up - down) / (2 * h)


def analytic_grads(build_loss: Callable[[], Tensor], tensors: Sequence[Tensor]) -> List[np.ndarray]:
    for t in tensors:
        t.zero_grad()
    with Tape() as tape:
        loss = build_loss()
        tape.backward(loss)
    return [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in tensors]


def max_relative_error(build_loss: Callable[[], Tensor], tensors: Sequence[Tensor],
                       indices: Optional[Sequence[Sequence[tuple]]] = None, atol: float = 1e-3) -> float:
    """Worst |analytic - numeric| / max(|analytic|, |numeric|, atol) over the chosen elements."""
    grads = analytic_grads(build_loss, tensors)

    def value() -> float:
        return build_loss().item()

    worst = 0.0
    for k, t in enumerate(tensors):
        chosen = indices[k] if indices is not None else list(np.ndindex(t.shape))
        for idx in chosen:
            a = grads[k][idx]
            n = numeric_grad(value, t, idx)
            worst = max(worst, abs(a - n) / max(abs(a), abs(n), atol))
    return worst
