"""Dynamic self-paced regularizer, closed-form weight solver, lambda schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

INF = math.inf


def dynamic_q(t: int, total: int) -> float:
    """Exponent schedule q(t) = tan[(1 - t / (2(T+1))) * pi/2]; q > 1, decreasing."""
    if not 1 <= t <= total:
        raise ValueError(f"epoch t={t} outside [1, {total}]")
    return math.tan((1.0 - 0.5 * t / (total + 1)) * math.pi / 2.0)


def regularizer_value(v, lam: float, q: float) -> float:
    """Value of the dynamic regularizer lam * ((1/q) ||v||_2^q - sum v_i)."""
    if q <= 1:
        raise ValueError(f"q must be > 1, got {q}")
    if lam <= 0:
        raise ValueError(f"lambda must be > 0, got {lam}")
    for vi in v:
        if not 0.0 <= vi <= 1.0:
            raise ValueError(f"weight {vi} outside [0, 1]")
    norm2 = math.sqrt(sum(vi * vi for vi in v))
    return lam * ((norm2 ** q) / q - sum(v))


def optimal_weight(loss: float, lam: float, q: float) -> float:
    """Closed-form minimizer: (1 - l/lam)^(1/(q-1)) below the threshold, else 0.

    lam = +inf is the warm-start sentinel and short-circuits to weight 1.
    """
    if loss < 0:
        raise ValueError(f"loss must be >= 0, got {loss}")
    if q <= 1:
        raise ValueError(f"q must be > 1, got {q}")
    if lam == INF:
        return 1.0
    if lam <= 0:
        raise ValueError(f"lambda must be > 0 or +inf, got {lam}")
    if loss >= lam:
        return 0.0
    base = 1.0 - loss / lam
    if base <= 0.0:
        return 0.0
    try:
        return base ** (1.0 / (q - 1.0))
    except OverflowError:
        return 0.0


@dataclass
class SelfPacedState:
    """Age of the curriculum: epoch index, threshold, and recorded losses."""

    t: int = 1
    total: int = 1
    lam: float = INF
    recorded_losses: dict[str, float] = field(default_factory=dict)

    def q(self) -> float:
        return dynamic_q(self.t, self.total)

    def weight_for(self, loss: float) -> float:
        return optimal_weight(loss, self.lam, self.q())

    def record(self, sample_id: str, loss: float) -> None:
        self.recorded_losses[sample_id] = float(loss)

    def to_header(self) -> dict:
        return {
            "t": self.t,
            "total": self.total,
            "lambda": "inf" if self.lam == INF else self.lam,
            "n_recorded": len(self.recorded_losses),
            "max_recorded": max(self.recorded_losses.values()) if self.recorded_losses else None,
        }


def update_state(state: SelfPacedState, losses: dict[str, float] | None = None) -> SelfPacedState:
    """Advance one epoch: lambda becomes the max loss of the epoch just run."""
    losses = state.recorded_losses if losses is None else losses
    if not losses:
        raise ValueError("cannot advance self-paced state with no recorded losses")
    return SelfPacedState(
        t=state.t + 1,
        total=state.total,
        lam=max(losses.values()),
        recorded_losses=dict(losses),
    )
