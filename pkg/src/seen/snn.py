"""Leaky integrate-and-fire dynamics with explicit, caller-owned state.

Per step::

    V[t] = alpha * V[t-1] * (1 - P[t-1]) + X[t]
    P[t] = h(V[t] - theta),   h(x) = 1 if x >= 0 else 0

The layer holds no learnable parameters. State is a small immutable record
handed back to the caller, so a sequence can be replayed or reset without
touching any layer object.
"""

from __future__ import annotations

from dataclasses import dataclass

from .autodiff import Tensor, as_tensor, lif_potential, surrogate_step


class LifStateError(RuntimeError):
    pass


@dataclass(frozen=True)
class LifConfig:
    theta: float = 0.3
    alpha: float = 0.2

    def __post_init__(self):
        if not self.theta > 0:
            raise ValueError(f"theta must be > 0, got {self.theta}")
        if not 0 <= self.alpha < 1:
            raise ValueError(f"alpha must lie in [0, 1), got {self.alpha}")


@dataclass(frozen=True)
class LifState:
    V: Tensor | None = None
    P: Tensor | None = None
    t: int = 0

    @property
    def fresh(self) -> bool:
        return self.t == 0


def reset(state: LifState | None = None) -> LifState:
    """Return a fresh state (V = 0, P = 0, t = 0)."""
    return LifState()


def lif_step(state: LifState, x, cfg: LifConfig, surrogate_width: float = 1.0) -> tuple[Tensor, LifState]:
    x = as_tensor(x)
    if state.fresh:
        # V[0] = 0 and P[0] = 0 make the leak term vanish.
        v = x
    else:
        if state.V.shape != x.shape:
            raise LifStateError(f"input shape {x.shape} does not match state shape {state.V.shape}")
        v = lif_potential(state.V, state.P, x, cfg.alpha)
    spikes = surrogate_step(v, surrogate_width, threshold=cfg.theta)
    return spikes, LifState(V=v, P=spikes, t=state.t + 1)


def membrane_readout(state: LifState) -> Tensor:
    """The potential V[t] computed by the most recent step (gradients flow through it)."""
    if state.fresh:
        raise LifStateError("membrane readout of a fresh state: take at least one lif_step first")
    return state.V
