"""Deterministic simulation driver: scenarios, fault injection, audit, reports.

A run builds a :class:`~xchain_sim.protocol.Network` for one scenario, keeps
``batch_size`` crosschain transactions in flight until ``tx_count`` have
completed, then audits every transaction for atomicity from the chains' lock
and signalling logs.
"""
from __future__ import annotations

import csv
import gc
import io
import json
import random
from dataclasses import asdict, dataclass, field, replace

import jsonschema

from .encoding import encode, sha256
from .ledger import Behavior, Outcome, dump_state
from .perf_model import CostParams, Scenario
from .protocol import (
    CallSpec,
    MessageKind,
    Network,
    ProtocolMessage,
    TxKind,
    TxRun,
    eoa_key,
    public_bytes,
    account_id,
    random_nonce,
)

FAULT_MODES = ("bad_share", "silent")
FAILURE_MODES = ("subordinate_failure", "param_tamper", "timeout")


class ConfigError(ValueError):
    pass


class ThresholdUnreachableConfig(ConfigError):
    pass


# -- configuration ----------------------------------------------------------------

@dataclass(frozen=True)
class ChainConfig:
    id: int
    n_validators: int = 4
    threshold_m: int = 3


@dataclass(frozen=True)
class ByzantineFault:
    chain: int
    validator_index: int
    mode: str = "bad_share"


@dataclass(frozen=True)
class FailureInjection:
    """Make every ``period``-th transaction fail on ``chain`` in the given way."""

    mode: str
    chain: int
    period: int = 1

    def hits(self, index: int) -> bool:
        return index % self.period == self.period - 1


@dataclass(frozen=True)
class SimConfig:
    scenario: str = Scenario.HOTEL_TRAIN.value
    chains: tuple[ChainConfig, ...] = ()
    coordination_chain: int = 0
    instigators: tuple[str, ...] = ("node1",)
    rotation: str = "fixed"
    byzantine: tuple[ByzantineFault, ...] = ()
    failures: tuple[FailureInjection, ...] = ()
    tx_count: int = 100
    batch_size: int = 4
    timeout_blocks: int = 5
    block_interval: float = 1.0
    network_delay: float = 0.0
    cost: CostParams = CostParams()
    seed: int = 0

    def chain(self, chain_id: int) -> ChainConfig:
        for c in self.chains:
            if c.id == chain_id:
                return c
        raise ConfigError(f"chain {chain_id} is not configured")

    def to_json(self) -> dict:
        d = asdict(self)
        d["chains"] = [asdict(c) for c in self.chains]
        d["byzantine"] = [asdict(b) for b in self.byzantine]
        d["failures"] = [asdict(f) for f in self.failures]
        d["instigators"] = list(self.instigators)
        return d

    @classmethod
    def from_json(cls, data: dict) -> SimConfig:
        data = dict(data)
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config fields: {sorted(unknown)}")
        try:
            if "chains" in data:
                data["chains"] = tuple(ChainConfig(**c) for c in data["chains"])
            if "byzantine" in data:
                data["byzantine"] = tuple(ByzantineFault(**b) for b in data["byzantine"])
            if "failures" in data:
                data["failures"] = tuple(FailureInjection(**f) for f in data["failures"])
            if "instigators" in data:
                data["instigators"] = tuple(data["instigators"])
            if "cost" in data:
                data["cost"] = CostParams(**data["cost"])
        except TypeError as e:
            raise ConfigError(str(e)) from e
        cfg = cls(**data)
        if not cfg.chains:
            cfg = replace(cfg, chains=default_chains(cfg.scenario))
        return cfg


def default_chains(scenario: str, n_validators: int = 4, threshold_m: int = 3) -> tuple[ChainConfig, ...]:
    ids = [0] + sorted(SCENARIOS[_scenario(scenario)].chain_ids.values())
    return tuple(ChainConfig(i, n_validators, threshold_m) for i in ids)


def default_config(scenario: str = Scenario.HOTEL_TRAIN.value, n_validators: int = 4, threshold_m: int = 3,
                   **overrides) -> SimConfig:
    cfg = SimConfig(scenario=_scenario(scenario).value,
                    chains=default_chains(scenario, n_validators, threshold_m))
    return replace(cfg, **overrides)


def _scenario(name) -> Scenario:
    try:
        return Scenario(name)
    except ValueError:
        raise ConfigError(f"unknown scenario {name!r}; choose from {[s.value for s in Scenario]}") from None


def validate_config(cfg: SimConfig) -> None:
    builder = SCENARIOS[_scenario(cfg.scenario)]
    ids = [c.id for c in cfg.chains]
    if len(set(ids)) != len(ids):
        raise ConfigError("duplicate chain ids")
    for c in cfg.chains:
        if not 1 <= c.threshold_m <= c.n_validators:
            raise ConfigError(f"chain {c.id}: need 1 <= threshold_m <= n_validators")
    needed = set(builder.chain_ids.values()) | {cfg.coordination_chain}
    if cfg.coordination_chain in builder.chain_ids.values():
        raise ConfigError("the coordination chain cannot host application contracts")
    missing = needed - set(ids)
    if missing:
        raise ConfigError(f"scenario {cfg.scenario} needs chains {sorted(missing)}")
    if not cfg.instigators:
        raise ConfigError("at least one instigator is required")
    if len(set(cfg.instigators)) != len(cfg.instigators):
        raise ConfigError("instigator names must be unique")
    for k in range(len(cfg.instigators)):
        for cid in sorted(needed):
            if k + 1 > cfg.chain(cid).n_validators:
                raise ConfigError(f"instigator {cfg.instigators[k]} has no validator on chain {cid}")
    if cfg.rotation not in ("fixed", "round_robin"):
        raise ConfigError(f"rotation must be fixed or round_robin, not {cfg.rotation!r}")
    if cfg.tx_count < 0 or cfg.batch_size < 1 or cfg.timeout_blocks < 1:
        raise ConfigError("tx_count >= 0, batch_size >= 1 and timeout_blocks >= 1 are required")
    if cfg.block_interval <= 0 or cfg.network_delay < 0:
        raise ConfigError("block_interval must be positive and network_delay non-negative")
    for b in cfg.byzantine:
        if b.mode not in FAULT_MODES:
            raise ConfigError(f"unknown Byzantine mode {b.mode!r}")
        if not 1 <= b.validator_index <= cfg.chain(b.chain).n_validators:
            raise ConfigError(f"chain {b.chain} has no validator {b.validator_index}")
    origin = builder.chain_ids["origin"]
    for f in cfg.failures:
        if f.mode not in FAILURE_MODES:
            raise ConfigError(f"unknown failure mode {f.mode!r}")
        if f.period < 1:
            raise ConfigError("failure period must be >= 1")
        if f.chain == origin or f.chain not in builder.chain_ids.values():
            raise ConfigError(f"failures target a subordinate chain of {cfg.scenario}, not chain {f.chain}")


def inject_byzantine(cfg: SimConfig, faults, allow_unreachable: bool = False) -> SimConfig:
    """Return ``cfg`` with the given validators misbehaving.

    Raises :class:`ThresholdUnreachableConfig` when a chain would be left with
    fewer than ``threshold_m`` honest validators, unless ``allow_unreachable``
    is set (useful to exercise the timeout path deliberately).
    """
    faults = tuple(f if isinstance(f, ByzantineFault) else ByzantineFault(**f) for f in faults)
    out = replace(cfg, byzantine=cfg.byzantine + faults)
    validate_config(out)
    if not allow_unreachable:
        for c in out.chains:
            bad = {b.validator_index for b in out.byzantine if b.chain == c.id}
            if c.n_validators - len(bad) < c.threshold_m:
                raise ThresholdUnreachableConfig(
                    f"chain {c.id}: {c.n_validators - len(bad)} honest validators < threshold {c.threshold_m}")
    return out


# -- scenarios --------------------------------------------------------------------

FAIL_BASE = 1_000_000


@dataclass
class ScenarioBuilder:
    scenario: Scenario
    chain_ids: dict[str, int]
    addresses: dict[str, str] = field(default_factory=dict)

    def deploy(self, net: Network, items: int, accounts: list[str]) -> None:
        raise NotImplementedError

    def call_spec(self, index: int, failures: list[FailureInjection]) -> CallSpec:
        raise NotImplementedError


def _router_with_items(chain, behavior: Behavior, count: int, state_fn=lambda i: {}, extra: dict | None = None):
    items = [chain.deploy(behavior, lockable=True, initial_state=state_fn(i)) for i in range(count)]
    state = {"item_count": count, **{f"item:{i}": a for i, a in enumerate(items)}, **(extra or {})}
    return chain.deploy(Behavior.ROUTER, lockable=False, initial_state=state), items


class HotelTrainBuilder(ScenarioBuilder):
    PRICES = {"hotel": 120, "train": 40}

    def __init__(self):
        super().__init__(Scenario.HOTEL_TRAIN, {"origin": 1, "hotel": 2, "train": 3})

    def deploy(self, net, items, accounts):
        a = self.addresses
        for leg in ("hotel", "train"):
            cid = self.chain_ids[leg]
            chain = net.chains[cid]
            balances = {f"bal:{acct}": 10**12 for acct in accounts}
            token_router, _ = _router_with_items(chain, Behavior.TOKEN, items, lambda i: balances)
            # the leg's sold-out date: every item already booked
            booked = {f"booked:{FAIL_BASE + cid}": "blocked"}
            a[leg], _ = _router_with_items(chain, Behavior.ITEM, items, lambda i: booked,
                                           {"token_router": token_router, "payee": f"{leg}-operator"})
        config = {}
        for leg in ("hotel", "train"):
            config.update({f"{leg}_chain": self.chain_ids[leg], f"{leg}_router": a[leg],
                           f"{leg}_price": self.PRICES[leg]})
        origin = net.chains[self.chain_ids["origin"]]
        a["origin"], _ = _router_with_items(origin, Behavior.TRAVEL_AGENCY, items, lambda i: dict(config))

    def call_spec(self, index, failures):
        date, guest = index + 1, f"guest{index}"
        prices = dict(self.PRICES)
        for f in failures:
            leg = "hotel" if f.chain == self.chain_ids["hotel"] else "train"
            if f.mode == "subordinate_failure":
                date = FAIL_BASE + f.chain
            elif f.mode == "param_tamper":
                prices[leg] += 1
        children = tuple(
            CallSpec(TxKind.SUBORDINATE, self.chain_ids[leg], self.addresses[leg], "book", (date, guest, prices[leg]))
            for leg in ("hotel", "train"))
        return CallSpec(TxKind.ORIGINATING, self.chain_ids["origin"], self.addresses["origin"], "forward",
                        ("book_trip", date, guest), children)


class SupplyChainBuilder(ScenarioBuilder):
    def __init__(self):
        super().__init__(Scenario.SUPPLY_CHAIN_PROVENANCE, {"origin": 1, "provenance": 2})

    def deploy(self, net, items, accounts):
        a = self.addresses
        prov = net.chains[self.chain_ids["provenance"]]
        a["provenance"], _ = _router_with_items(prov, Behavior.PROVENANCE, items,
                                                lambda i: {"sealed:recalled": True})
        origin = net.chains[self.chain_ids["origin"]]
        a["origin"], _ = _router_with_items(
            origin, Behavior.SUPPLY_CHAIN, items,
            lambda i: {"prov_chain": self.chain_ids["provenance"], "prov_router": a["provenance"]})

    def call_spec(self, index, failures):
        item_id, supplier, stage = f"item{index}", f"supplier{index % 7}", "shipped"
        signed_stage = stage
        for f in failures:
            if f.mode == "subordinate_failure":
                item_id = "recalled"
            elif f.mode == "param_tamper":
                signed_stage = "delivered"
        child = CallSpec(TxKind.SUBORDINATE, self.chain_ids["provenance"], self.addresses["provenance"],
                         "forward", ("record", item_id, signed_stage))
        return CallSpec(TxKind.ORIGINATING, self.chain_ids["origin"], self.addresses["origin"], "forward",
                        ("record_event", item_id, supplier, stage), (child,))


class OracleBuilder(ScenarioBuilder):
    PRICES = {"ETH": 2000, "XAG": 25}

    def __init__(self):
        super().__init__(Scenario.ORACLE, {"origin": 1, "oracle": 2})

    def deploy(self, net, items, accounts):
        a = self.addresses
        oracle = net.chains[self.chain_ids["oracle"]]
        a["oracle"] = oracle.deploy(Behavior.ORACLE_PRICE_FEED, lockable=False,
                                    initial_state={f"price:{s}": p for s, p in self.PRICES.items()})
        origin = net.chains[self.chain_ids["origin"]]
        a["origin"], _ = _router_with_items(
            origin, Behavior.SIMPLE_ACCOUNT, items,
            lambda i: {"cfg:oracle_chain": self.chain_ids["oracle"], "cfg:oracle_feed": a["oracle"]})

    def call_spec(self, index, failures):
        symbol = signed_symbol = "ETH"
        for f in failures:
            if f.mode == "subordinate_failure":
                symbol = signed_symbol = "UNLISTED"
            elif f.mode == "param_tamper":
                signed_symbol = "XAG"
        view = CallSpec(TxKind.VIEW, self.chain_ids["oracle"], self.addresses["oracle"], "get", (signed_symbol,))
        return CallSpec(TxKind.ORIGINATING, self.chain_ids["origin"], self.addresses["origin"], "forward",
                        ("open_valued", f"acct{index}", symbol, index % 10 + 1), (view,))


SCENARIOS: dict[Scenario, ScenarioBuilder] = {
    Scenario.HOTEL_TRAIN: HotelTrainBuilder(),
    Scenario.SUPPLY_CHAIN_PROVENANCE: SupplyChainBuilder(),
    Scenario.ORACLE: OracleBuilder(),
}

SCENARIO_DESCRIPTIONS = {
    Scenario.HOTEL_TRAIN: "travel agency books a hotel room and a train seat: 2 subordinate transactions",
    Scenario.SUPPLY_CHAIN_PROVENANCE: "supply-chain event mirrored to a provenance chain: 1 subordinate transaction",
    Scenario.ORACLE: "account valued from a price-feed chain: 1 subordinate view",
}


def _derived_int(*parts) -> int:
    return int.from_bytes(sha256(encode(list(parts)))[:8], "big")


@dataclass
class Simulation:
    config: SimConfig
    network: Network
    builder: ScenarioBuilder
    instigator_nodes: list
    instigator_keys: list
    initial_state: str
    runs: list[TxRun] = field(default_factory=list)

    def state_dump(self) -> str:
        return dump_state(self.network.chains)


def build_scenario(cfg: SimConfig, record_trace: bool = True) -> Simulation:
    validate_config(cfg)
    scenario = _scenario(cfg.scenario)
    builder = type(SCENARIOS[scenario])()
    net = Network(cost=cfg.cost, coordination_chain=cfg.coordination_chain, block_interval=cfg.block_interval,
                  network_delay=cfg.network_delay, record_trace=record_trace)
    for c in sorted(cfg.chains, key=lambda c: c.id):
        net.add_chain(c.id, c.n_validators, c.threshold_m, seed=_derived_int("keygen", cfg.seed, c.id))
    for b in cfg.byzantine:
        net.validator(b.chain, b.validator_index).mode = b.mode
    nodes = [net.multichain_node(name, k + 1) for k, name in enumerate(cfg.instigators)]
    keys = [eoa_key(_derived_int("eoa", cfg.seed, name)) for name in cfg.instigators]
    accounts = [account_id(public_bytes(k)) for k in keys]
    builder.deploy(net, items=2 * cfg.batch_size + 2, accounts=accounts)
    return Simulation(cfg, net, builder, nodes, keys, dump_state(net.chains))


def simulate(cfg: SimConfig, record_trace: bool = True) -> Simulation:
    sim = build_scenario(cfg, record_trace)
    net = sim.network
    nonce_rng = random.Random(_derived_int("nonce", cfg.seed))
    timeouts = [f for f in cfg.failures if f.mode == "timeout"]
    stall = (cfg.timeout_blocks + 1) * cfg.block_interval

    def delivery_delay(run: TxRun, msg: ProtocolMessage, dest: int) -> float:
        if msg.kind in (MessageKind.READY, MessageKind.VIEW_RESULT):
            if any(f.chain == msg.chain and f.hits(run.index) for f in timeouts):
                return stall
        return 0.0

    net.delivery_delay = delivery_delay
    next_index = 0
    finished = 0

    def on_done(_run: TxRun):
        nonlocal finished
        finished += 1
        submit_next()

    def submit_next():
        nonlocal next_index
        if next_index >= cfg.tx_count:
            return
        i = next_index
        next_index += 1
        k = i % len(cfg.instigators) if cfg.rotation == "round_robin" else 0
        active = [f for f in cfg.failures if f.mode != "timeout" and f.hits(i)]
        spec = sim.builder.call_spec(i, active)
        tx = net.build(spec, sim.instigator_keys[k], cfg.timeout_blocks, random_nonce(nonce_rng),
                       instigator=sim.instigator_nodes[k])
        sim.runs.append(net.submit(tx, sim.instigator_nodes[k], index=i, on_done=on_done))

    for _ in range(min(cfg.batch_size, cfg.tx_count)):
        submit_next()
    # leftover timeout watchdogs of finished transactions are no-ops.
    # Cyclic GC is paused: passes over the growing trace cost more than the run creates.
    gc_was_enabled = gc.isenabled()
    gc.disable()
    try:
        net.queue.run(until=lambda: finished == cfg.tx_count)
    finally:
        if gc_was_enabled:
            gc.enable()
    return sim


# -- audit and reports ----------------------------------------------------------------

def audit(sim: Simulation) -> list[dict]:
    """Per-transaction atomicity violations (an empty list means none)."""
    net = sim.network
    violations = []
    for run in sim.runs:
        problems = []
        tx_id = run.tx_id
        locked = {cid for cid, ch in net.chains.items() if tx_id in ch.lock_log}
        signals: dict[int, list[Outcome]] = {}
        for cid, ch in net.chains.items():
            for t, outcome in ch.signal_log:
                if t == tx_id:
                    signals.setdefault(cid, []).append(outcome)
        if run.status != "done":
            problems.append("transaction never completed")
        expected = Outcome.COMMIT if run.outcome == "Committed" else Outcome.IGNORE
        if set(signals) != locked:
            problems.append(f"locked chains {sorted(locked)} != signalled chains {sorted(signals)}")
        for cid, outcomes in signals.items():
            if outcomes != [expected]:
                problems.append(f"chain {cid} signalled {[o.value for o in outcomes]}, expected {expected.value}")
        leftover = [cid for cid, ch in net.chains.items() if ch.locked_by(tx_id)]
        if leftover:
            problems.append(f"contracts still locked on chains {leftover}")
        if run.started:
            state = net.coordination.effective_state(tx_id).value
            if state != run.outcome:
                problems.append(f"coordination state {state} != outcome {run.outcome}")
        elif run.outcome == "Committed":
            problems.append("committed without a coordination entry")
        if run.outcome == "Committed":
            wrote = {p.chain for p in run.tx.walk() if p.kind != TxKind.VIEW.value}
            if not wrote <= locked:
                problems.append(f"committed but chains {sorted(wrote - locked)} never locked")
        if problems:
            violations.append({"crosschain_tx_id": tx_id.hex(), "problems": problems})
    return violations


@dataclass
class SimReport:
    config: dict
    nodes: list[dict]
    transactions: list[dict]
    aggregate: dict
    violations: list[dict] = field(default_factory=list)

    def to_json(self) -> dict:
        return {"config": self.config, "nodes": self.nodes, "transactions": self.transactions,
                "aggregate": self.aggregate, "violations": self.violations}


def make_report(sim: Simulation) -> SimReport:
    net = sim.network
    completed = sum(1 for r in sim.runs if r.status == "done")
    nodes = []
    for cid in sorted(net.validators):
        for v in net.validators[cid]:
            busy = v.stats.busy_time
            nodes.append({
                "node": v.node_id,
                "chain": cid,
                "mode": v.mode,
                "busy_time": busy,
                "base_tx_count": v.stats.base_tx_count,
                "verify_count": v.stats.verify_count,
                "share_verify_count": v.stats.share_verify_count,
                "measured_tps": completed / busy if busy > 0 else None,
            })
    txs = [{
        "crosschain_tx_id": r.tx_id.hex(),
        "index": r.index,
        "instigator": r.instigator.operator,
        "outcome": r.outcome,
        "reason": r.reason,
        "latency": r.latency,
        "chains_touched": sorted(r.tx.chains()),
    } for r in sorted(sim.runs, key=lambda r: r.index)]
    violations = audit(sim)
    aggregate = {
        "tx_count": len(sim.runs),
        "committed": sum(1 for r in sim.runs if r.outcome == "Committed"),
        "ignored": sum(1 for r in sim.runs if r.outcome == "Ignored"),
        "atomicity_violations": len(violations),
        "virtual_time_end": net.now,
    }
    return SimReport(sim.config.to_json(), nodes, txs, aggregate, violations)


def run(cfg: SimConfig) -> SimReport:
    return make_report(simulate(cfg, record_trace=False))


REPORT_SCHEMA = {
    "type": "object",
    "required": ["config", "nodes", "transactions", "aggregate", "violations"],
    "properties": {
        "config": {"type": "object", "required": ["scenario", "seed", "tx_count"]},
        "nodes": {"type": "array", "items": {
            "type": "object",
            "required": ["node", "chain", "busy_time", "base_tx_count", "verify_count", "measured_tps"],
            "properties": {
                "node": {"type": "string"},
                "chain": {"type": "integer"},
                "busy_time": {"type": "number", "minimum": 0},
                "base_tx_count": {"type": "integer", "minimum": 0},
                "verify_count": {"type": "integer", "minimum": 0},
                "share_verify_count": {"type": "integer", "minimum": 0},
                "measured_tps": {"type": ["number", "null"]},
            },
        }},
        "transactions": {"type": "array", "items": {
            "type": "object",
            "required": ["crosschain_tx_id", "outcome", "latency", "chains_touched"],
            "properties": {
                "crosschain_tx_id": {"type": "string", "pattern": "^[0-9a-f]{64}$"},
                "outcome": {"enum": ["Committed", "Ignored"]},
                "latency": {"type": ["number", "null"]},
                "chains_touched": {"type": "array", "items": {"type": "integer"}},
            },
        }},
        "aggregate": {"type": "object", "required": ["committed", "ignored", "atomicity_violations"],
                      "properties": {"atomicity_violations": {"type": "integer", "minimum": 0}}},
        "violations": {"type": "array"},
    },
}


def validate_report(data: dict) -> None:
    jsonschema.validate(data, REPORT_SCHEMA)


CSV_COLUMNS = ["record", "id", "chain", "busy_time", "base_tx_count", "verify_count", "share_verify_count",
               "measured_tps", "outcome", "reason", "latency", "chains_touched", "committed", "ignored",
               "atomicity_violations"]


def emit_report(report: SimReport, format: str = "json") -> bytes:
    if format == "json":
        return (json.dumps(report.to_json(), indent=2) + "\n").encode()
    if format != "csv":
        raise ValueError(f"unknown report format {format!r}")
    buf = io.StringIO()
    w = csv.DictWriter(buf, CSV_COLUMNS, lineterminator="\n")
    w.writeheader()
    for n in report.nodes:
        w.writerow({"record": "node", "id": n["node"], **{k: n[k] for k in (
            "chain", "busy_time", "base_tx_count", "verify_count", "share_verify_count", "measured_tps")}})
    for t in report.transactions:
        w.writerow({"record": "tx", "id": t["crosschain_tx_id"], "outcome": t["outcome"], "reason": t["reason"],
                    "latency": t["latency"], "chains_touched": " ".join(map(str, t["chains_touched"]))})
    a = report.aggregate
    w.writerow({"record": "aggregate", "id": "all", "committed": a["committed"], "ignored": a["ignored"],
                "atomicity_violations": a["atomicity_violations"]})
    return buf.getvalue().encode()
