"""Adam optimizer with bias correction."""

import logging
from dataclasses import dataclass, field
from typing import List, Sequence

import numpy as np

from .errors import NumericError, RejectedInputError
from .tensor import Tensor

logger = logging.getLogger(__name__)


@dataclass
class AdamState:
    """Moments and step counter for one parameter list."""
    learning_rate: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step: int = 0
    first_moment: List[np.ndarray] = field(default_factory=list)
    second_moment: List[np.ndarray] = field(default_factory=list)
    scratch: List[np.ndarray] = field(default_factory=list, repr=False)

    def ensure(self, params: Sequence[np.ndarray]) -> None:
        """Allocate zero moments and one scratch buffer per parameter on first use."""
        if not self.first_moment:
            self.first_moment = [np.zeros_like(p, dtype=np.float64) for p in params]
            self.second_moment = [np.zeros_like(p, dtype=np.float64) for p in params]
        if len(self.scratch) != len(self.first_moment):
            self.scratch = [np.empty_like(m) for m in self.first_moment]
        if len(self.first_moment) != len(params) or any(
            m.shape != p.shape for m, p in zip(self.first_moment, params)
        ):
            raise RejectedInputError("Adam moments do not match the parameter list")


def adam_update(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], state: AdamState) -> None:
    """Apply one Adam step to ``params`` in place and advance ``state``."""
    if len(params) != len(grads):
        raise RejectedInputError(f"{len(params)} parameters but {len(grads)} gradients")
    for p, g in zip(params, grads):
        if p.shape != g.shape:
            raise RejectedInputError(f"Parameter {p.shape} and gradient {g.shape} differ")
    state.ensure(params)
    state.step += 1
    bc1 = 1.0 - state.beta1 ** state.step
    bc2 = 1.0 - state.beta2 ** state.step
    # Float ops write into m, v, p or the scratch buffer s: no float temporaries per parameter.
    for p, g, m, v, s in zip(params, grads, state.first_moment, state.second_moment, state.scratch):
        m *= state.beta1
        np.multiply(g, 1.0 - state.beta1, out=s)
        m += s
        v *= state.beta2
        np.multiply(g, g, out=s)
        s *= 1.0 - state.beta2
        v += s
        # s = lr / bc1 * m / (sqrt(v / bc2) + eps)
        np.divide(v, bc2, out=s)
        np.sqrt(s, out=s)
        s += state.epsilon
        np.divide(m, s, out=s)
        s *= state.learning_rate / bc1
        p -= s
        for array in (p, m, v):
            if not np.isfinite(array).all():
                raise NumericError("Adam parameters or moments", state.step)


class Adam:
    """Adam over a fixed list of Tensors; gradients are read from ``Tensor.grad``."""

    def __init__(self, params: Sequence[Tensor], learning_rate: float = 0.001,
                 beta1: float = 0.9, beta2: float = 0.999, epsilon: float = 1e-8):
        self.params = list(params)
        self.state = AdamState(learning_rate, beta1, beta2, epsilon)

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self) -> None:
        grads = []
        for p in self.params:
            if p.grad is None:
                p.zero_grad()
            grads.append(p.grad)
        adam_update([p.data for p in self.params], grads, self.state)
        logger.debug(f"Adam step {self.state.step} over {len(self.params)} tensors")
