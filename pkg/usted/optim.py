import logging
from typing import Dict, Mapping, Tuple

import numpy as np

from usted.numerics import NonFiniteError, Tensor
from usted.struct import structure

logger = logging.getLogger(__name__)


@structure
class AdamConfig:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: float = 5.0

    def __post_init__(self):
        if self.learning_rate <= 0 or self.eps <= 0 or self.clip_norm <= 0:
            raise ValueError("learning_rate, eps and clip_norm must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError(f"betas must lie in [0, 1), got ({self.beta1}, {self.beta2})")


def global_norm(grads: Mapping[str, np.ndarray]) -> float:
    return float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))


def clip_by_global_norm(
    grads: Mapping[str, np.ndarray], max_norm: float
) -> Tuple[Dict[str, np.ndarray], float, float]:
    """
    Scale every gradient by c = min(1, max_norm / norm).

    Returns the clipped gradients, the pre-clip global norm and c.
    """
    norm = global_norm(grads)
    if not np.isfinite(norm):
        raise NonFiniteError(f"gradient global norm is {norm}")
    factor = 1.0 if norm <= max_norm else max_norm / norm
    if factor == 1.0:
        return dict(grads), norm, factor
    return {name: g * factor for name, g in grads.items()}, norm, factor


class Adam:
    """
    Bias-corrected Adam over a named parameter set.

    Updates rebind `param.data` to a new array, so earlier snapshots of the
    arrays are never written to.
    """

    def __init__(self, params: Mapping[str, Tensor], config: AdamConfig = AdamConfig()):
        self.params = params
        self.config = config
        self.step_count = 0
        self.m = {name: np.zeros_like(p.data) for name, p in params.items()}
        self.v = {name: np.zeros_like(p.data) for name, p in params.items()}

    @property
    def lr(self) -> float:
        return self.config.learning_rate

    def step(self, grads: Mapping[str, np.ndarray]) -> None:
        c = self.config
        self.step_count += 1
        correction1 = 1.0 - c.beta1 ** self.step_count
        correction2 = 1.0 - c.beta2 ** self.step_count
        for name, p in self.params.items():
            g = grads[name]
            self.m[name] = c.beta1 * self.m[name] + (1.0 - c.beta1) * g
            self.v[name] = c.beta2 * self.v[name] + (1.0 - c.beta2) * (g * g)
            m_hat = self.m[name] / correction1
            v_hat = self.v[name] / correction2
            p.data = p.data - c.learning_rate * m_hat / (np.sqrt(v_hat) + c.eps)

    # ---- #  Persistence  # ---- #
    def state_dict(self) -> Dict[str, np.ndarray]:
        state = {f"adam.m.{name}": m.copy() for name, m in self.m.items()}
        state.update({f"adam.v.{name}": v.copy() for name, v in self.v.items()})
        return state

    def load_state_dict(self, state: Mapping[str, np.ndarray], step_count: int) -> None:
        for name, p in self.params.items():
            for prefix, slot in (("adam.m.", self.m), ("adam.v.", self.v)):
                key = prefix + name
                if key not in state:
                    raise KeyError(f"optimizer state is missing {key!r}")
                if state[key].shape != p.shape:
                    raise ValueError(f"optimizer state {key!r}: shape {state[key].shape} != {p.shape}")
                slot[name] = np.array(state[key], dtype=np.float64, copy=True)
        self.step_count = int(step_count)
