"""Central finite-difference gradient checking in float64."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor


def numerical_grad(fn: Callable[..., Tensor], arrays: Sequence[np.ndarray], index: int,
                   h: float = 1e-3) -> np.ndarray:
    base = [np.array(a, dtype=np.float64) for a in arrays]
    target = base[index]
    grad = np.zeros_like(target)
    flat, gflat = target.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        plus = float(fn(*[Tensor(a) for a in base]).data.sum())
        flat[i] = orig - h
        minus = float(fn(*[Tensor(a) for a in base]).data.sum())
        flat[i] = orig
        gflat[i] = (plus - minus) / (2 * h)
    return grad


def analytic_grads(fn: Callable[..., Tensor], arrays: Sequence[np.ndarray]) -> list[np.ndarray]:
    inputs = [Tensor(np.array(a, dtype=np.float64), requires_grad=True) for a in arrays]
    out = fn(*inputs)
    out.sum().backward() if out.data.size != 1 else out.backward()
    return [t.grad if t.grad is not None else np.zeros_like(t.data) for t in inputs]


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)


def gradcheck(fn: Callable[..., Tensor], arrays: Sequence[np.ndarray], h: float = 1e-3,
              wrt: Sequence[int] | None = None) -> float:
    """Largest relative error between backward and central differences.

    ``fn`` maps Tensors to a Tensor; non-scalar outputs are summed.
    """
    analytic = analytic_grads(fn, arrays)
    worst = 0.0
    for i in (range(len(arrays)) if wrt is None else wrt):
        worst = max(worst, relative_error(analytic[i], numerical_grad(fn, arrays, i, h)))
    return worst
