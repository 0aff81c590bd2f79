"""Online descent-region detection and region-adaptive receive power."""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Callable


class Region(str, enum.Enum):
    NON_STATIONARY = "NonStationary"
    SADDLE = "Saddle"
    OPTIMUM = "Optimum"


@dataclass(frozen=True)
class DetectorConfig:
    epsilon: float
    f0: float
    n0: int
    f0_relative: bool = False  # threshold is f0 * F(W) at probation start

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError("epsilon must be > 0")
        if not self.f0 > 0:
            raise ValueError("f0 must be > 0")
        if self.n0 < 1:
            raise ValueError("n0 must be >= 1")


@dataclass
class DetectorState:
    """Mutable detector state; ``label`` is the region assigned to the next round."""

    config: DetectorConfig
    label: Region = Region.NON_STATIONARY
    probation_start: int | None = None
    threshold: float | None = None


def detect_region(state: DetectorState, grad_norm: float, f_history: Callable[[int], float], current_round: int) -> Region:
    """Advance the detector by one observation of the gradient norm at W_n.

    ``f_history(m)`` returns F(W_m). The returned label applies to round n+1.
    A saddle probation lasts n0 rounds; it is aborted if the gradient norm
    climbs back to epsilon or above.
    """
    cfg = state.config
    eps = cfg.epsilon
    n = current_round

    if grad_norm >= eps:
        state.probation_start = None
        state.label = Region.NON_STATIONARY
        return state.label

    if state.label is Region.OPTIMUM:
        return state.label

    if state.probation_start is None:
        state.probation_start = n
        state.threshold = cfg.f0 * f_history(n) if cfg.f0_relative else cfg.f0
        state.label = Region.SADDLE
        return state.label

    if n - state.probation_start >= cfg.n0:
        drop = f_history(n - cfg.n0) - f_history(n)
        state.probation_start = None
        if drop < state.threshold:
            state.label = Region.OPTIMUM
        else:
            # escape still under way: stay in the saddle region and re-arm next round
            state.label = Region.SADDLE
        return state.label

    state.label = Region.SADDLE
    return state.label


@dataclass(frozen=True)
class OneShot:
    pass


@dataclass(frozen=True)
class Gradual:
    q: float

    def __post_init__(self):
        if not 0 < self.q < 1:
            raise ValueError("q must lie in (0, 1)")


@dataclass
class PowerLedger:
    p_rx_min: float
    p_rx_max_avg: float
    scheme: OneShot | Gradual
    savings: float = 0.0
    spend_index: int = 0
    entry_savings: float = 0.0
    in_saddle: bool = False

    def __post_init__(self):
        if not 0 < self.p_rx_min < self.p_rx_max_avg:
            raise ValueError("need 0 < p_rx_min < p_rx_max_avg")


def power_for_round(ledger: PowerLedger, region: Region) -> float:
    """Receive power for the current round; mutates the ledger in place.

    Saddle rounds run at p_rx_min and bank the difference. The first
    non-saddle round after a saddle sojourn snapshots the bank, which is
    then spent all at once (OneShot) or along (1-q) q^j (Gradual).
    """
    if region is Region.SADDLE:
        ledger.savings += ledger.p_rx_max_avg - ledger.p_rx_min
        ledger.spend_index = 0
        ledger.in_saddle = True
        return ledger.p_rx_min

    if ledger.in_saddle:
        ledger.in_saddle = False
        ledger.entry_savings = ledger.savings
        ledger.spend_index = 0

    if isinstance(ledger.scheme, OneShot):
        spend = ledger.savings
    else:
        q = ledger.scheme.q
        spend = (1.0 - q) * q**ledger.spend_index * ledger.entry_savings
        spend = min(spend, ledger.savings)
    ledger.spend_index += 1
    ledger.savings = max(ledger.savings - spend, 0.0)
    return ledger.p_rx_max_avg + spend
