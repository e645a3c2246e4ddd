"""Adam with bias correction, and per-tensor gradient normalization."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .tensor import DTYPE, Tensor


@dataclass
class AdamState:
    lr: float = 2e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    @classmethod
    def for_params(cls, params, **hyper) -> "AdamState":
        st = cls(**hyper)
        st.m = [np.zeros(p.shape, dtype=DTYPE) for p in params]
        st.v = [np.zeros(p.shape, dtype=DTYPE) for p in params]
        return st


def adam_step(params: list[Tensor], grads: list[np.ndarray], state: AdamState, lr: float | None = None) -> None:
    """One in-place Adam update of ``params``. ``lr`` overrides ``state.lr`` for this step."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ConfigError(
            f"adam_step: {len(params)} params, {len(grads)} grads, {len(state.m)} moment buffers"
        )
    for p, g, m in zip(params, grads, state.m):
        if p.shape != g.shape or p.shape != m.shape:
            raise ConfigError(f"adam_step: shape mismatch {p.shape} / {g.shape} / {m.shape}")

    state.step_count += 1
    t = state.step_count
    lr = state.lr if lr is None else lr
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1**t
    bc2 = 1.0 - b2**t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= DTYPE(b1)
        m += DTYPE(1.0 - b1) * g
        v *= DTYPE(b2)
        v += DTYPE(1.0 - b2) * (g * g)
        m_hat = m / DTYPE(bc1)
        v_hat = v / DTYPE(bc2)
        p.data -= DTYPE(lr) * m_hat / (np.sqrt(v_hat) + DTYPE(state.eps))


def grad_normalize(grads: list[np.ndarray], eps: float = 1e-8) -> list[np.ndarray]:
    """Divide each gradient tensor by its own L2 norm (plus ``eps``)."""
    out = []
    for g in grads:
        norm = float(np.sqrt(np.sum(np.square(g, dtype=np.float64))))
        out.append((g / DTYPE(norm + eps)).astype(DTYPE))
    return out
