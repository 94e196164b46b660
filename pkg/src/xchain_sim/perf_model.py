"""Analytical throughput model for crosschain transaction processing.

A node's rate is the reciprocal of the CPU time it spends per crosschain
transaction: base-rate transactions it executes (the Originating transaction
and the Signalling transaction on the originating chain) plus one BLS
verification time per group-signature check.

The non-coordinating originating node's count (two for Hotel-Train) is
back-solved from the published other-node rate:
1 / (2/375 + 2 * 0.005) = 65.2 tps.
"""
from __future__ import annotations

from dataclasses import dataclass
from decimal import ROUND_HALF_UP, Decimal
from enum import Enum


class Role(str, Enum):
    ORIGINATING_COORDINATOR = "OriginatingCoordinator"
    ORIGINATING_OTHER = "OriginatingOther"
    COORDINATION_CHAIN_NODE = "CoordinationChainNode"
    SUBORDINATE_COORDINATOR = "SubordinateCoordinator"
    SUBORDINATE_VIEW_SERVER = "SubordinateViewServer"


class Scenario(str, Enum):
    HOTEL_TRAIN = "HotelTrain"
    SUPPLY_CHAIN_PROVENANCE = "SupplyChainProvenance"
    ORACLE = "Oracle"


@dataclass(frozen=True)
class CostParams:
    base_tx_rate: float = 375.0
    bls_verify_time: float = 0.005

    def __post_init__(self):
        if self.base_tx_rate <= 0:
            raise ValueError("base_tx_rate must be positive")
        if self.bls_verify_time < 0:
            raise ValueError("bls_verify_time must not be negative")

    def cost(self, base_tx: int = 0, verifies: int = 0) -> float:
        return base_tx / self.base_tx_rate + verifies * self.bls_verify_time


@dataclass(frozen=True)
class ScenarioProfile:
    name: Scenario
    n_subordinate_tx: int
    n_subordinate_views: int

    def verify_count(self, role: Role) -> int:
        role = Role(role)
        remote = self.n_subordinate_tx + self.n_subordinate_views
        if role is Role.ORIGINATING_COORDINATOR:
            return remote + 2
        if role is Role.ORIGINATING_OTHER:
            return remote
        if role is Role.COORDINATION_CHAIN_NODE:
            return 2
        if role is Role.SUBORDINATE_COORDINATOR:
            return 1 if self.n_subordinate_tx else 0
        return 1 if self.n_subordinate_views else 0

    def base_tx_count(self, role: Role) -> int:
        role = Role(role)
        if role is Role.SUBORDINATE_VIEW_SERVER:
            return 0
        if role is Role.SUBORDINATE_COORDINATOR and not self.n_subordinate_tx:
            return 0
        # originating/subordinate chains: the part itself plus its signalling
        # transaction; coordination chain: the Start and Commit/Ignore calls
        return 2

    def roles(self) -> list[Role]:
        return [r for r in Role if r in (Role.ORIGINATING_COORDINATOR, Role.ORIGINATING_OTHER,
                                          Role.COORDINATION_CHAIN_NODE)
                or self.verify_count(r) > 0]


PROFILES: dict[Scenario, ScenarioProfile] = {
    Scenario.HOTEL_TRAIN: ScenarioProfile(Scenario.HOTEL_TRAIN, 2, 0),
    Scenario.SUPPLY_CHAIN_PROVENANCE: ScenarioProfile(Scenario.SUPPLY_CHAIN_PROVENANCE, 1, 0),
    Scenario.ORACLE: ScenarioProfile(Scenario.ORACLE, 0, 1),
}


def profile(scenario: Scenario | str) -> ScenarioProfile:
    return PROFILES[Scenario(scenario)]


def verify_count(scenario: Scenario | str, role: Role | str) -> int:
    return profile(scenario).verify_count(role)


def tx_rate(scenario: Scenario | str, role: Role | str, params: CostParams = CostParams()) -> float:
    p = profile(scenario)
    per_tx = params.cost(p.base_tx_count(role), p.verify_count(role))
    return 1.0 / per_tx if per_tx > 0 else float("inf")


def amortized_rate(scenario: Scenario | str, n_rotating_instigators: int,
                   params: CostParams = CostParams()) -> float:
    """Per-node rate when ``n`` originating nodes take turns coordinating."""
    if n_rotating_instigators < 1:
        raise ValueError("need at least one instigator")
    p = profile(scenario)
    other = p.verify_count(Role.ORIGINATING_OTHER)
    extra = p.verify_count(Role.ORIGINATING_COORDINATOR) - other
    per_tx = params.cost(p.base_tx_count(Role.ORIGINATING_OTHER), other) \
        + extra * params.bls_verify_time / n_rotating_instigators
    return 1.0 / per_tx


def round_half_up(x: float, places: int = 1) -> float:
    q = Decimal(1).scaleb(-places)
    return float(Decimal(repr(x)).quantize(q, rounding=ROUND_HALF_UP))


def table3(params: CostParams = CostParams()) -> dict[str, tuple[float, float]]:
    """Originating-chain rates per scenario: (coordinating node, other node)."""
    return {
        s.value: (round_half_up(tx_rate(s, Role.ORIGINATING_COORDINATOR, params)),
                  round_half_up(tx_rate(s, Role.ORIGINATING_OTHER, params)))
        for s in Scenario
    }


def _busy_time(events: list[dict], node: str, params: CostParams) -> float:
    busy = 0.0
    for e in events:
        if e["node"] == node:
            verifies = e.get("verifications_charged", 0) + e.get("share_verifications_charged", 0)
            busy += params.cost(e.get("base_tx_charged", 0), verifies)
    return busy


def compare_with_simulation(event_trace: list[dict], scenario: Scenario | str, role: Role | str,
                            params: CostParams = CostParams(), instigators: int = 1,
                            node: str | None = None) -> dict:
    """Compare a simulator trace against the analytical rate for ``role``.

    The measured rate is completed crosschain transactions divided by the
    busy time of ``node``, summed from the trace's charged costs. Without an
    explicit node, the one that played ``role`` most often is used.
    """
    if not event_trace:
        raise ValueError("empty event trace")
    role = Role(role)
    completed = sum(1 for e in event_trace if e["event"] == "tx_completed")
    if node is None:
        counts: dict[str, int] = {}
        for e in event_trace:
            if e.get("role") == role.value:
                counts[e["node"]] = counts.get(e["node"], 0) + 1
        if not counts:
            raise ValueError(f"no node played {role.value} in this trace")
        node = min(counts, key=lambda k: (-counts[k], k))
    busy = _busy_time(event_trace, node, params)
    measured = completed / busy if busy > 0 else float("inf")
    if role is Role.ORIGINATING_COORDINATOR and instigators > 1:
        analytical = amortized_rate(scenario, instigators, params)
    else:
        analytical = tx_rate(scenario, role, params)
    return {
        "node": node,
        "completed": completed,
        "busy_time": busy,
        "analytical": analytical,
        "measured": measured,
        "relative_error": abs(measured - analytical) / analytical,
    }
