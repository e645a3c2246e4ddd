"""The cell rule, world-state updates and seed construction.

A world state is a ``(H, W, D)`` (or batched ``(B, H, W, D)``) tensor.
Channels 0-3 are RGBA, the remaining ``D - 4`` channels are latent.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, UsageError
from .tensor import DTYPE, Tensor

RGBA = 4
DEFAULT_DEPTH = 16
DEFAULT_HIDDEN = 128


def param_count(depth: int, hidden: int) -> int:
    return 9 * depth * hidden + hidden + hidden * depth + depth


@dataclass
class NcaParams:
    w_perc: Tensor  # (3, 3, D, F)
    b_perc: Tensor  # (F,)
    w_out: Tensor  # (F, D)
    b_out: Tensor  # (D,)

    NAMES = ("w_perc", "b_perc", "w_out", "b_out")

    @property
    def depth(self) -> int:
        return self.w_perc.shape[2]

    @property
    def hidden(self) -> int:
        return self.w_perc.shape[3]

    def tensors(self) -> list[Tensor]:
        return [self.w_perc, self.b_perc, self.w_out, self.b_out]

    def count(self) -> int:
        return sum(t.size for t in self.tensors())

    def frozen(self) -> "NcaParams":
        """Same values, no gradient tracking."""
        return NcaParams(*(Tensor(t.data) for t in self.tensors()))

    def copy(self, requires_grad: bool = True) -> "NcaParams":
        return NcaParams(*(Tensor(t.data.copy(), requires_grad) for t in self.tensors()))

    @classmethod
    def zeros(cls, depth: int = DEFAULT_DEPTH, hidden: int = DEFAULT_HIDDEN) -> "NcaParams":
        return cls.from_arrays(
            [
                np.zeros((3, 3, depth, hidden)),
                np.zeros(hidden),
                np.zeros((hidden, depth)),
                np.zeros(depth),
            ]
        )

    @classmethod
    def init(cls, rng: np.random.Generator, depth: int = DEFAULT_DEPTH, hidden: int = DEFAULT_HIDDEN) -> "NcaParams":
        """He-scaled perception weights and a zero output layer.

        A zero output layer makes the untrained rule the identity, so early
        rollouts cannot blow up.
        """
        if depth < RGBA + 1:
            raise ConfigError(f"depth must be >= 5, got {depth}")
        if hidden < 1:
            raise ConfigError(f"hidden width must be >= 1, got {hidden}")
        std = np.sqrt(2.0 / (9 * depth))
        return cls.from_arrays(
            [
                rng.normal(0.0, std, size=(3, 3, depth, hidden)),
                np.zeros(hidden),
                np.zeros((hidden, depth)),
                np.zeros(depth),
            ]
        )

    @classmethod
    def from_arrays(cls, arrays, requires_grad: bool = True) -> "NcaParams":
        p = cls(*(Tensor(a, requires_grad) for a in arrays))
        d, f = p.depth, p.hidden
        expected = [(3, 3, d, f), (f,), (f, d), (d,)]
        got = [t.shape for t in p.tensors()]
        if got != expected:
            raise ConfigError(f"NCA parameter shapes {got} do not match {expected}")
        return p


@dataclass
class RolloutTrace:
    """States of a rollout. With ``record=False`` only ``[S_0, S_N]`` are kept."""

    states: list[Tensor]
    iterations: int

    @property
    def final(self) -> Tensor:
        return self.states[-1]


def _check_depth(state: Tensor, params: NcaParams) -> None:
    if state.shape[-1] != params.depth:
        raise ConfigError(
            f"world state depth {state.shape[-1]} does not match NCA depth {params.depth}"
        )


def nca_step(state: Tensor, params: NcaParams) -> Tensor:
    """One synchronous update of every cell: a residual 3x3 -> ReLU -> 1x1 block."""
    state = state if isinstance(state, Tensor) else Tensor(state)
    _check_depth(state, params)
    hidden = T.relu(T.conv3x3(state, params.w_perc, params.b_perc))
    return T.add(state, T.conv1x1(hidden, params.w_out, params.b_out))


def nca_rollout(seed: Tensor, params: NcaParams, n: int, record: bool = False) -> RolloutTrace:
    if n < 1:
        raise UsageError(f"rollout needs n >= 1 iterations, got {n}")
    seed = seed if isinstance(seed, Tensor) else Tensor(seed)
    _check_depth(seed, params)
    states = [seed]
    s = seed
    for _ in range(n):
        s = nca_step(s, params)
        if record:
            states.append(s)
    if not record:
        states.append(s)
    return RolloutTrace(states, n)


def run(seed, params: NcaParams, n: int) -> np.ndarray:
    """Untracked rollout returning the final grid; ``n = 0`` returns the seed."""
    s = seed.data if isinstance(seed, Tensor) else np.asarray(seed, dtype=DTYPE)
    if n == 0:
        return s.copy()
    return nca_rollout(Tensor(s), params.frozen(), n).final.data


def sample_iterations(rng: np.random.Generator, lo: int, hi: int) -> int:
    if lo < 1 or lo > hi:
        raise ConfigError(f"iteration range must satisfy 1 <= lo <= hi, got [{lo}, {hi}]")
    return int(rng.integers(lo, hi + 1))


def build_seed(edge: np.ndarray, depth: int = DEFAULT_DEPTH) -> np.ndarray:
    """Write edge intensity into all four RGBA channels; latent channels start at zero."""
    if depth < RGBA + 1:
        raise ConfigError(f"depth must be >= 5, got {depth}")
    edge = np.asarray(edge, dtype=DTYPE)
    if edge.ndim != 2:
        raise ConfigError(f"edge image must be 2-D, got shape {edge.shape}")
    grid = np.zeros(edge.shape + (depth,), dtype=DTYPE)
    grid[..., :RGBA] = edge[..., None]
    return grid


def extract_rgba(state, clamp: bool = True) -> np.ndarray:
    """RGBA readout of a world state, clamped to [0, 1] unless ``clamp=False``."""
    grid = state.data if isinstance(state, Tensor) else np.asarray(state)
    rgba = grid[..., :RGBA]
    return np.clip(rgba, 0.0, 1.0) if clamp else rgba.copy()
