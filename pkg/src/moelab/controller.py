"""Per-layer auxiliary-loss coefficients driven by observed token drop rates.

Each MoE layer keeps its own coefficient. After every optimizer step the
layer's drop rate ``d`` is mapped to a target ``min(xi * d, alpha_max)`` and
the coefficient moves toward it by an exponential moving average.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

from .errors import ParameterError


@dataclass(frozen=True)
class ControllerConfig:
    xi: float = 0.2
    alpha_max: float = 0.01
    beta: float = 0.99
    alpha_init: float | None = None  # None -> alpha_max

    def __post_init__(self):
        if not 0 < self.beta < 1:
            raise ParameterError(f"beta must lie in (0, 1), got {self.beta}")
        if self.alpha_max <= 0:
            raise ParameterError(f"alpha_max must be positive, got {self.alpha_max}")
        if self.xi <= 0:
            raise ParameterError(f"xi must be positive, got {self.xi}")
        if self.alpha_init is not None and self.alpha_init < 0:
            raise ParameterError(f"alpha_init must be non-negative, got {self.alpha_init}")

    @property
    def initial_alpha(self) -> float:
        return self.alpha_max if self.alpha_init is None else self.alpha_init

    @property
    def knee(self) -> float:
        return self.alpha_max / self.xi


@dataclass(frozen=True)
class ControllerState:
    alpha: tuple[float, ...]
    step: int = 0

    @classmethod
    def initial(cls, n_layers: int, cfg: ControllerConfig) -> "ControllerState":
        return cls(alpha=(cfg.initial_alpha,) * n_layers, step=0)

    def to_dict(self) -> dict:
        return {"alpha": list(self.alpha), "step": self.step}

    @classmethod
    def from_dict(cls, d: dict) -> "ControllerState":
        return cls(alpha=tuple(float(a) for a in d["alpha"]), step=int(d["step"]))


def f_target(d: float, cfg: ControllerConfig = ControllerConfig()) -> float:
    if not 0.0 <= d <= 1.0:
        raise ParameterError(f"drop rate must lie in [0, 1], got {d}")
    if d <= cfg.alpha_max / cfg.xi:
        return cfg.xi * d
    return cfg.alpha_max


def update(state: ControllerState, drop_rates, cfg: ControllerConfig = ControllerConfig()) -> ControllerState:
    drop_rates = list(drop_rates)
    if len(drop_rates) != len(state.alpha):
        raise ParameterError(
            f"controller tracks {len(state.alpha)} layers but got {len(drop_rates)} drop rates")
    alpha = tuple(cfg.beta * a + (1.0 - cfg.beta) * f_target(float(d), cfg)
                  for a, d in zip(state.alpha, drop_rates))
    return replace(state, alpha=alpha, step=state.step + 1)


def replay(drop_rate_history, cfg: ControllerConfig = ControllerConfig(), n_layers=None,
           initial: ControllerState | None = None) -> list[ControllerState]:
    """Run the controller over a sequence of per-step drop-rate vectors.

    Returns the state before each step followed by the final state.
    """
    history = [list(d) for d in drop_rate_history]
    if initial is None:
        n_layers = n_layers if n_layers is not None else len(history[0])
        initial = ControllerState.initial(n_layers, cfg)
    states = [initial]
    for d in history:
        states.append(update(states[-1], d, cfg))
    return states

