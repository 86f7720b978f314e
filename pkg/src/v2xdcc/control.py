"""Congestion-control math: LIMERIC update, demand-aware beta, tiered allocation.

Everything here is a pure value transformation. Priorities are integers where
a lower value means a more important service.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Optional

from .channel import ChannelParams, airtime_of


class ControllerMode(str, Enum):
    ADAPTIVE_DCC = "adaptive_dcc"
    DPA = "dpa"


@dataclass
class ControllerState:
    """Per-vehicle controller state.

    ``delta`` is the maximum fraction of time the vehicle may transmit.
    Setting a clamp to ``None`` disables it.
    """

    alpha: float = 0.016
    beta: float = 0.0012
    cbr_target: float = 0.68
    delta_min: Optional[float] = 0.0006
    delta_max: Optional[float] = 0.03
    gain_up_max: Optional[float] = 0.0005
    gain_down_max: Optional[float] = 0.00025
    mode: ControllerMode = ControllerMode.ADAPTIVE_DCC
    delta: Optional[float] = None
    clamp_reference_beta: Optional[float] = None  # scale offset clamps by beta/this when set

    def __post_init__(self) -> None:
        if not 0.0 < self.alpha < 1.0:
            raise ValueError(f"alpha must be in (0,1), got {self.alpha}")
        if self.beta <= 0.0:
            raise ValueError(f"beta must be > 0, got {self.beta}")
        if not 0.0 < self.cbr_target < 1.0:
            raise ValueError(f"cbr_target must be in (0,1), got {self.cbr_target}")
        lo, hi = self.lower_bound, self.upper_bound
        if not 0.0 <= lo <= hi <= 1.0:
            raise ValueError(f"delta bounds must satisfy 0 <= min <= max <= 1, got [{lo}, {hi}]")
        self.mode = ControllerMode(self.mode)
        if self.delta is None:
            self.delta = lo
        self.delta = min(max(self.delta, lo), hi)

    @property
    def lower_bound(self) -> float:
        return 0.0 if self.delta_min is None else self.delta_min

    @property
    def upper_bound(self) -> float:
        return 1.0 if self.delta_max is None else self.delta_max


def limeric_update(state: ControllerState, cbr_measured: float) -> float:
    """Advance ``state.delta`` by one LIMERIC step and return the new value."""
    offset = state.beta * (state.cbr_target - cbr_measured)
    scale = 1.0 if state.clamp_reference_beta is None else state.beta / state.clamp_reference_beta
    if state.gain_up_max is not None:
        offset = min(offset, state.gain_up_max * scale)
    if state.gain_down_max is not None:
        offset = max(offset, -state.gain_down_max * scale)
    delta = (1.0 - state.alpha) * state.delta + offset
    state.delta = min(max(delta, state.lower_bound), state.upper_bound)
    return state.delta


@dataclass(frozen=True)
class BetaPolicy:
    beta_base: float = 0.0012
    r_base: float = 17_000.0
    zero_demand_ratio: float = 0.01

    def __post_init__(self) -> None:
        if self.beta_base <= 0 or self.r_base <= 0:
            raise ValueError("beta_base and r_base must be positive")
        if self.zero_demand_ratio <= 0:
            raise ValueError("zero_demand_ratio must be positive")


@dataclass
class Demand:
    service_id: str
    priority: int
    required_rate: float = 0.0
    required_airtime: float = 0.0
    served_last_epoch: bool = True

    def __post_init__(self) -> None:
        if self.required_rate < 0 or self.required_airtime < 0:
            raise ValueError(f"negative demand for {self.service_id}")


class DemandSet(list):
    """Ordered list of :class:`Demand` entries, unique by ``service_id``."""

    def __init__(self, entries: Iterable[Demand] = ()):
        super().__init__(entries)
        ids = [d.service_id for d in self]
        if len(set(ids)) != len(ids):
            raise ValueError(f"duplicate service ids in demand set: {ids}")

    def by_id(self, service_id: str) -> Demand:
        for d in self:
            if d.service_id == service_id:
                return d
        raise KeyError(service_id)


def compute_beta(demands: DemandSet, policy: BetaPolicy) -> float:
    # services whose grant was zero last epoch do not count towards R_tot
    r_tot = sum(d.required_rate for d in demands if d.served_last_epoch)
    if r_tot <= 0.0:
        return policy.beta_base * policy.zero_demand_ratio
    return policy.beta_base * r_tot / policy.r_base


def airtime_budget(
    delta: float,
    demands: DemandSet,
    traffic: dict[str, tuple[float, float]],
    params: ChannelParams,
) -> tuple[float, dict[str, float]]:
    """Fill in ``required_airtime`` for every demand entry.

    ``traffic`` maps service id to (messages per second, mean payload bytes).
    Returns the allocator budget, which is simply ``delta``, and each
    service's airtime cost per bit/s of required rate so grants can be
    translated back into the rate domain.
    """
    factors: dict[str, float] = {}
    for d in demands:
        msgs, mean_size = traffic.get(d.service_id, (0.0, 0.0))
        if msgs <= 0 or mean_size <= 0 or d.required_rate <= 0:
            d.required_airtime = 0.0
            factors[d.service_id] = 0.0
            continue
        d.required_airtime = msgs * airtime_of(mean_size, params)
        factors[d.service_id] = d.required_airtime / d.required_rate
    return delta, factors


@dataclass
class Grant:
    granted_rate: float
    granted_airtime: float


@dataclass
class Allocation:
    per_service: dict[str, Grant] = field(default_factory=dict)
    override_applied: bool = False

    def fraction(self, demand: Demand) -> float:
        """Granted share of the requested rate, in [0, 1]."""
        if demand.required_rate <= 0:
            return 0.0
        return min(self.per_service[demand.service_id].granted_rate / demand.required_rate, 1.0)

    @property
    def total_airtime(self) -> float:
        return sum(g.granted_airtime for g in self.per_service.values())


def allocate_tiered(demands: DemandSet, budget: float) -> Allocation:
    """Proportional-fair allocation, highest-priority tier first.

    A tier that fits is served in full; a tier that does not fit gets the
    remaining budget split so every member receives the same fraction of its
    demand, and every lower tier gets nothing.
    """
    if budget < 0:
        raise ValueError(f"budget must be >= 0, got {budget}")
    alloc = Allocation({d.service_id: Grant(0.0, 0.0) for d in demands})
    remaining = budget
    for prio in sorted({d.priority for d in demands}):
        tier = [d for d in demands if d.priority == prio]
        tier_demand = sum(d.required_airtime for d in tier)
        if tier_demand <= 0:
            continue
        frac = 1.0 if tier_demand <= remaining else remaining / tier_demand
        for d in tier:
            alloc.per_service[d.service_id] = Grant(frac * d.required_rate, frac * d.required_airtime)
        remaining = max(remaining - frac * tier_demand, 0.0)
        if frac < 1.0:
            break
    return alloc


@dataclass
class PriorityObservation:
    """Most recent time each priority was heard from a neighbour.

    Only the latest timestamp per priority matters for the window query, so
    the ring of observations collapses to one entry per priority value.
    """

    window_length: float = 1.0
    last_heard: dict[int, float] = field(default_factory=dict)

    def record(self, time: float, priority: int) -> None:
        if time >= self.last_heard.get(priority, -math.inf):
            self.last_heard[priority] = time

    def evict(self, now: float) -> None:
        cutoff = now - self.window_length
        for prio in [p for p, t in self.last_heard.items() if t < cutoff]:
            del self.last_heard[prio]


def lowest_active_priority(obs: PriorityObservation, now: float) -> Optional[int]:
    obs.evict(now)
    active = [p for p, t in obs.last_heard.items() if t <= now]
    return max(active) if active else None


def apply_priority_override(
    alloc: Allocation, demands: DemandSet, observed_lowest: Optional[int]
) -> Allocation:
    """Let the top-priority service transmit in full while neighbours still
    carry less important traffic."""
    candidates = [d for d in demands if d.required_rate > 0]
    if not candidates or observed_lowest is None:
        return alloc
    head = min(candidates, key=lambda d: d.priority)  # first in order among ties
    grant = alloc.per_service[head.service_id]
    if grant.granted_rate >= head.required_rate or observed_lowest <= head.priority:
        return alloc
    per_service = dict(alloc.per_service)
    per_service[head.service_id] = Grant(head.required_rate, head.required_airtime)
    return Allocation(per_service, override_applied=True)
