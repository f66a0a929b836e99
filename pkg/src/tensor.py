"""Dense float64 tensor with an attached gradient slot."""

from dataclasses import dataclass
from typing import Callable, Optional, Tuple

import numpy as np

from .errors import NumericError, RejectedInputError


@dataclass
class Tensor:
    """A parameter or activation array plus its gradient."""
    data: np.ndarray
    grad: Optional[np.ndarray] = None
    name: str = ""

    def __post_init__(self) -> None:
        self.data = np.ascontiguousarray(self.data, dtype=np.float64)
        if self.data.ndim == 0 or any(d < 1 for d in self.data.shape):
            raise RejectedInputError(f"Tensor '{self.name}' needs positive dims, got {self.data.shape}")
        if self.grad is not None:
            self.grad = np.ascontiguousarray(self.grad, dtype=np.float64)
            if self.grad.shape != self.data.shape:
                raise RejectedInputError(
                    f"Gradient of '{self.name}' has shape {self.grad.shape}, expected {self.data.shape}"
                )

    @property
    def dims(self) -> Tuple[int, ...]:
        return tuple(int(d) for d in self.data.shape)

    @property
    def size(self) -> int:
        return int(self.data.size)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def accumulate(self, grad: np.ndarray) -> None:
        """Add ``grad`` into the gradient slot, allocating it on first use."""
        if grad.shape != self.data.shape:
            raise RejectedInputError(
                f"Gradient for '{self.name}' has shape {grad.shape}, expected {self.data.shape}"
            )
        if self.grad is None:
            self.grad = np.array(grad, dtype=np.float64, copy=True)
        else:
            self.grad += grad

    def assert_finite(self, step: Optional[int] = None) -> None:
        if not np.all(np.isfinite(self.data)):
            raise NumericError(f"tensor '{self.name}'", step)
        if self.grad is not None and not np.all(np.isfinite(self.grad)):
            raise NumericError(f"gradient of '{self.name}'", step)

    def copy(self) -> "Tensor":
        grad = None if self.grad is None else self.grad.copy()
        return Tensor(self.data.copy(), grad, self.name)


def numerical_gradient(f: Callable[[], float], array: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of the scalar ``f()`` with respect to ``array`` (perturbed in place)."""
    grad = np.zeros_like(array, dtype=np.float64)
    flat = array.reshape(-1)
    out = grad.reshape(-1)
    for k in range(flat.size):
        original = flat[k]
        flat[k] = original + h
        plus = f()
        flat[k] = original - h
        minus = f()
        flat[k] = original
        out[k] = (plus - minus) / (2.0 * h)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-7) -> float:
    """Max elementwise relative error with an absolute floor in the denominator."""
    denom = np.maximum(np.abs(analytic) + np.abs(numeric), floor)
    return float(np.max(np.abs(analytic - numeric) / denom))
