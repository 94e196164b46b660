"""Simulated single blockchain with lockable contracts and provisional state.

Contracts are native Python behaviors rather than EVM code. A crosschain part
is trial-executed against a copy-on-write overlay; on success every contract it
wrote is locked by the crosschain transaction id and the overlay is held as
provisional state until a signalling transaction commits or discards it.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Callable

from .encoding import encode, sha256


class Behavior(str, Enum):
    TOKEN = "Token"
    ROUTER = "Router"
    ITEM = "Item"
    SUPPLY_CHAIN = "SupplyChain"
    PROVENANCE = "Provenance"
    ORACLE_PRICE_FEED = "OraclePriceFeed"
    SIMPLE_ACCOUNT = "SimpleAccount"
    TRAVEL_AGENCY = "TravelAgency"


class CallKind(str, Enum):
    TRANSACTION = "Transaction"
    VIEW = "View"


class Outcome(str, Enum):
    COMMIT = "Commit"
    IGNORE = "Ignore"


class LedgerError(Exception):
    pass


class UnknownContract(LedgerError):
    pass


class UnknownFunction(LedgerError):
    pass


class ContractError(LedgerError):
    """A contract function rejected the call (e.g. insufficient balance)."""


class NoItemAvailable(ContractError):
    pass


class ContractLocked(LedgerError):
    pass


class NonlockableContract(LedgerError):
    pass


class ParameterMismatch(LedgerError):
    pass


class UnexpectedSubordinateCall(LedgerError):
    pass


class MissingSubordinateCall(LedgerError):
    pass


class NoSuchLock(LedgerError):
    pass


@dataclass
class ContractState:
    address: str
    behavior: Behavior
    lockable: bool
    committed: dict[str, Any] = field(default_factory=dict)
    lock: bytes | None = None
    provisional: dict[str, Any] | None = None


@dataclass(frozen=True)
class LocalTransaction:
    target: str
    function: str
    args: tuple = ()
    caller: str = ""


@dataclass
class SubordinateCallRecord:
    chain: int
    target: str
    function: str
    expected_args: tuple
    kind: CallKind
    cached_result: Any = None


@dataclass
class Receipt:
    chain: int
    target: str
    function: str
    result: Any = None
    written: tuple[str, ...] = ()
    base_tx_cost: int = 1


@dataclass
class PartResult:
    """Outcome of a successful trial execution of one part on one chain."""

    result: Any
    locked: list[str]
    to_submit: list
    calls: list[SubordinateCallRecord]
    base_tx_cost: int = 1


_FUNCTIONS: dict[Behavior, dict[str, tuple[Callable, bool]]] = {b: {} for b in Behavior}


def contract_function(behavior: Behavior, view: bool = False, name: str | None = None):
    def register(fn):
        _FUNCTIONS[behavior][name or fn.__name__] = (fn, view)
        return fn
    return register


def lookup_function(behavior: Behavior, name: str) -> tuple[Callable, bool]:
    try:
        return _FUNCTIONS[behavior][name]
    except KeyError:
        raise UnknownFunction(f"{behavior.value} has no function {name!r}") from None


def _same_args(actual, expected) -> bool:
    return encode(list(actual)) == encode(list(expected))


class Execution:
    """Execution context handed to contract functions.

    ``mode`` is ``"local"`` (writes go straight to committed state),
    ``"crosschain"`` (writes build a lockable overlay) or ``"view"`` (no writes).
    """

    def __init__(self, chain: Blockchain, caller: str, mode: str, tx_id: bytes | None = None,
                 on_subordinate_tx=None, on_subordinate_view=None):
        self.chain = chain
        self.caller = caller
        self.mode = mode
        self.tx_id = tx_id
        self.writes: dict[str, dict[str, Any]] = {}
        self._on_tx = on_subordinate_tx
        self._on_view = on_subordinate_view

    def contract(self, address: str) -> ContractState:
        return self.chain.contract(address)

    def visible(self, c: ContractState) -> dict[str, Any]:
        state = dict(c.committed)
        if self.tx_id is not None and c.lock == self.tx_id and c.provisional:
            state.update(c.provisional)
        state.update(self.writes.get(c.address, {}))
        return state

    def read(self, address: str, key: str, default=None):
        c = self.contract(address)
        pending = self.writes.get(address)
        if pending is not None and key in pending:
            return pending[key]
        if self.tx_id is not None and c.lock == self.tx_id and c.provisional and key in c.provisional:
            return c.provisional[key]
        return c.committed.get(key, default)

    def write(self, address: str, key: str, value) -> None:
        c = self.contract(address)
        if self.mode == "view":
            raise ContractError("view calls cannot modify state")
        if self.mode == "crosschain":
            if not c.lockable:
                raise NonlockableContract(f"{address} is not lockable")
            if c.lock is not None and c.lock != self.tx_id:
                raise ContractLocked(f"{address} is locked by another crosschain transaction")
        elif c.lock is not None:
            raise ContractLocked(f"{address} is locked")
        self.writes.setdefault(address, {})[key] = value

    def is_free(self, address: str) -> bool:
        lock = self.contract(address).lock
        return lock is None or (self.tx_id is not None and lock == self.tx_id)

    def call(self, address: str, function: str, *args):
        c = self.contract(address)
        fn, is_view = lookup_function(c.behavior, function)
        if self.mode == "view" and not is_view:
            raise ContractError(f"{function!r} is not a view function")
        return fn(self, address, *args)

    def subordinate_tx(self, chain: int, address: str, function: str, *args):
        if self._on_tx is None:
            raise UnexpectedSubordinateCall("subordinate transactions need a crosschain context")
        return self._on_tx(chain, address, function, args)

    def subordinate_view(self, chain: int, address: str, function: str, *args):
        if self._on_view is None:
            raise UnexpectedSubordinateCall("subordinate views need a crosschain context")
        return self._on_view(chain, address, function, args)


class Blockchain:
    def __init__(self, chain_id: int):
        self.chain_id = chain_id
        self.contracts: dict[str, ContractState] = {}
        self.height = 0
        self.base_tx_executed = 0
        self.lock_log: list[bytes] = []
        self.signal_log: list[tuple[bytes, Outcome]] = []

    # -- registry -----------------------------------------------------------

    def deploy(self, behavior: Behavior, lockable: bool = False, initial_state: dict | None = None) -> str:
        behavior = Behavior(behavior)
        seed = f"{self.chain_id}:{len(self.contracts)}:{behavior.value}".encode()
        address = "0x" + sha256(seed)[:20].hex()
        self.contracts[address] = ContractState(address, behavior, lockable, dict(initial_state or {}))
        return address

    def contract(self, address: str) -> ContractState:
        try:
            return self.contracts[address]
        except KeyError:
            raise UnknownContract(f"no contract at {address} on chain {self.chain_id}") from None

    def locked_by(self, tx_id: bytes) -> list[str]:
        return [a for a, c in self.contracts.items() if c.lock == tx_id]

    # -- plain transactions and views --------------------------------------

    def _mine(self) -> None:
        self.height += 1
        self.base_tx_executed += 1

    def execute_local(self, tx: LocalTransaction) -> Receipt:
        target = self.contract(tx.target)
        if target.lock is not None:
            raise ContractLocked(f"{tx.target} is locked")
        ex = Execution(self, tx.caller, "local")
        result = ex.call(tx.target, tx.function, *tx.args)
        for address, delta in ex.writes.items():
            self.contracts[address].committed.update(delta)
        self._mine()
        return Receipt(self.chain_id, tx.target, tx.function, result, tuple(ex.writes))

    def execute_view(self, call: LocalTransaction, reader_tx_id: bytes | None = None):
        self.contract(call.target)
        ex = Execution(self, call.caller, "view", tx_id=reader_tx_id)
        return ex.call(call.target, call.function, *call.args)

    # -- crosschain parts ---------------------------------------------------

    def _trial_execute(self, part, mode: str, dispatch_view):
        """Cache views, then trial-execute with call-site argument checks."""
        if part.chain != self.chain_id:
            raise LedgerError(f"part targets chain {part.chain}, this is chain {self.chain_id}")
        views = [s for s in part.subordinates if s.kind == CallKind.VIEW.value]
        txs = [s for s in part.subordinates if s.kind != CallKind.VIEW.value]
        records: list[SubordinateCallRecord] = []

        view_slots = []
        for v in views:
            if dispatch_view is None:
                raise LedgerError("part has subordinate views but no dispatcher was supplied")
            value = dispatch_view(v)
            view_slots.append([v, value, False])
            records.append(SubordinateCallRecord(v.chain, v.target, v.function, tuple(v.args),
                                                 CallKind.VIEW, value))
        tx_slots = [[s, False] for s in txs]

        def match(slots, chain, address, function, args, what):
            candidates = [s for s in slots if not s[-1] and s[0].chain == chain
                          and s[0].target == address and s[0].function == function]
            if not candidates:
                raise UnexpectedSubordinateCall(
                    f"{what} call {function}@{address} on chain {chain} is not in the signed transaction")
            slot = candidates[0]
            if not _same_args(args, slot[0].args):
                raise ParameterMismatch(
                    f"{what} {function}: actual args {list(args)} != signed {list(slot[0].args)}")
            slot[-1] = True
            return slot

        def on_tx(chain, address, function, args):
            match(tx_slots, chain, address, function, args, "subordinate transaction")
            records.append(SubordinateCallRecord(chain, address, function, tuple(args), CallKind.TRANSACTION))
            return None

        def on_view(chain, address, function, args):
            return match(view_slots, chain, address, function, args, "subordinate view")[1]

        ex = Execution(self, part.caller, mode, tx_id=part.crosschain_tx_id,
                       on_subordinate_tx=None if mode == "view" else on_tx, on_subordinate_view=on_view)
        result = ex.call(part.target, part.function, *part.args)

        missing = [s[0] for s in tx_slots if not s[-1]] + [s[0] for s in view_slots if not s[-1]]
        if missing:
            names = ", ".join(f"{m.function}@chain{m.chain}" for m in missing)
            raise MissingSubordinateCall(f"signed subordinate calls never made: {names}")
        return ex, result, txs, records

    def process_crosschain_part(self, part, dispatch_view: Callable | None = None) -> PartResult:
        """Trial-execute an Originating or Subordinate part and lock what it wrote.

        ``dispatch_view(view_part)`` returns the (already verified) result of a
        subordinate view. Raises a :class:`LedgerError` subclass on failure, in
        which case no state changes.
        """
        ex, result, txs, records = self._trial_execute(part, "crosschain", dispatch_view)
        tx_id = part.crosschain_tx_id
        for address, delta in ex.writes.items():
            c = self.contracts[address]
            c.lock = tx_id
            c.provisional = {**(c.provisional or {}), **delta}
        if ex.writes:
            self.lock_log.append(tx_id)
        self._mine()
        return PartResult(result, list(ex.writes), list(txs), records)

    def execute_view_part(self, part, dispatch_view: Callable | None = None):
        """Serve a subordinate view against committed state."""
        _, result, _, _ = self._trial_execute(part, "view", dispatch_view)
        return result

    def apply_signalling(self, tx_id: bytes, outcome: Outcome | str) -> Receipt:
        outcome = Outcome(outcome)
        locked = self.locked_by(tx_id)
        if not locked:
            raise NoSuchLock(f"no contract on chain {self.chain_id} is locked by {tx_id.hex()[:16]}")
        for address in locked:
            c = self.contracts[address]
            if outcome is Outcome.COMMIT and c.provisional:
                c.committed.update(c.provisional)
            c.provisional = None
            c.lock = None
        self.signal_log.append((tx_id, outcome))
        self._mine()
        return Receipt(self.chain_id, "", "signal:" + outcome.value, None, tuple(locked))

    def select_unlocked_item(self, router_address: str,
                             predicate: Callable[[ContractState], bool] = lambda c: True) -> str:
        router = self.contract(router_address)
        if router.behavior is not Behavior.ROUTER:
            raise ContractError(f"{router_address} is not a router")
        for address in router_items(router.committed):
            c = self.contract(address)
            if c.lock is None and predicate(c):
                return address
        raise NoItemAvailable(f"router {router_address} has no unlocked item available")

    # -- dumps --------------------------------------------------------------

    def dump(self) -> dict:
        return {
            address: {
                "behavior": c.behavior.value,
                "lockable": c.lockable,
                "lock": c.lock.hex() if c.lock is not None else None,
                "committed": {k: _jsonable(v) for k, v in sorted(c.committed.items())},
            }
            for address, c in sorted(self.contracts.items())
        }


def _jsonable(v):
    return "0x" + v.hex() if isinstance(v, bytes) else v


def dump_state(chains: dict[int, Blockchain]) -> str:
    """Canonical JSON state dump: {chain id -> {address -> contract}}."""
    data = {str(cid): chains[cid].dump() for cid in sorted(chains)}
    return json.dumps(data, sort_keys=True, separators=(",", ":"))


def router_items(state: dict) -> list[str]:
    return [state[f"item:{i}"] for i in range(state.get("item_count", 0))]


def _select(ex: Execution, router: str, predicate) -> str:
    for address in router_items(ex.visible(ex.contract(router))):
        if ex.is_free(address) and predicate(address):
            return address
    raise NoItemAvailable(f"router {router} has no unlocked item available")


# -- contract behaviors --------------------------------------------------------

@contract_function(Behavior.TOKEN)
def transfer(ex: Execution, me: str, sender: str, recipient: str, amount: int):
    if not isinstance(amount, int) or amount <= 0:
        raise ContractError(f"invalid amount {amount!r}")
    balance = ex.read(me, f"bal:{sender}", 0)
    if balance < amount:
        raise ContractError(f"insufficient balance: {sender} has {balance}, needs {amount}")
    ex.write(me, f"bal:{sender}", balance - amount)
    ex.write(me, f"bal:{recipient}", ex.read(me, f"bal:{recipient}", 0) + amount)
    return True


@contract_function(Behavior.TOKEN, view=True)
def balance_of(ex: Execution, me: str, account: str):
    return ex.read(me, f"bal:{account}", 0)


@contract_function(Behavior.TOKEN, view=True)
def total_supply(ex: Execution, me: str):
    state = ex.visible(ex.contract(me))
    return sum(v for k, v in state.items() if k.startswith("bal:"))


@contract_function(Behavior.ITEM)
def reserve(ex: Execution, me: str, date: int, guest: str):
    if ex.read(me, f"booked:{date}") is not None:
        raise ContractError(f"{me} already booked for {date}")
    ex.write(me, f"booked:{date}", guest)
    return me


@contract_function(Behavior.ITEM, view=True)
def is_available(ex: Execution, me: str, date: int):
    return ex.read(me, f"booked:{date}") is None


@contract_function(Behavior.ROUTER)
def book(ex: Execution, me: str, date: int, guest: str, price: int):
    """Reserve the first free item for ``date`` and pay for it via the token router."""
    item = _select(ex, me, lambda a: ex.read(a, f"booked:{date}") is None)
    ex.call(item, "reserve", date, guest)
    token_router = ex.read(me, "token_router")
    if token_router is not None and price > 0:
        ex.call(token_router, "pay", ex.caller, ex.read(me, "payee"), price)
    return item


@contract_function(Behavior.ROUTER)
def pay(ex: Execution, me: str, payer: str, payee: str, amount: int):
    item = _select(ex, me, lambda a: ex.read(a, f"bal:{payer}", 0) >= amount)
    ex.call(item, "transfer", payer, payee, amount)
    return item


@contract_function(Behavior.ROUTER)
def forward(ex: Execution, me: str, function: str, *args):
    item = _select(ex, me, lambda a: True)
    return ex.call(item, function, *args)


@contract_function(Behavior.TRAVEL_AGENCY)
def book_trip(ex: Execution, me: str, date: int, guest: str):
    ex.write(me, f"trip:{date}", guest)
    for leg in ("hotel", "train"):
        ex.subordinate_tx(ex.read(me, f"{leg}_chain"), ex.read(me, f"{leg}_router"), "book",
                          date, guest, ex.read(me, f"{leg}_price"))
    return True


@contract_function(Behavior.SUPPLY_CHAIN)
def record_event(ex: Execution, me: str, item_id: str, supplier: str, stage: str):
    n = ex.read(me, "events", 0)
    ex.write(me, f"event:{n}", f"{item_id}|{supplier}|{stage}")
    ex.write(me, "events", n + 1)
    # only the item and stage cross to the provenance chain; the supplier stays private
    ex.subordinate_tx(ex.read(me, "prov_chain"), ex.read(me, "prov_router"), "forward",
                      "record", item_id, stage)
    return n


@contract_function(Behavior.PROVENANCE)
def record(ex: Execution, me: str, item_id: str, stage: str):
    if ex.read(me, f"sealed:{item_id}"):
        raise ContractError(f"provenance for {item_id} is sealed")
    n = ex.read(me, f"count:{item_id}", 0)
    ex.write(me, f"stage:{item_id}:{n}", stage)
    ex.write(me, f"count:{item_id}", n + 1)
    return n


@contract_function(Behavior.PROVENANCE, view=True)
def history_length(ex: Execution, me: str, item_id: str):
    return ex.read(me, f"count:{item_id}", 0)


@contract_function(Behavior.ORACLE_PRICE_FEED, name="set")
def set_price(ex: Execution, me: str, symbol: str, price: int):
    ex.write(me, f"price:{symbol}", price)
    return price


@contract_function(Behavior.ORACLE_PRICE_FEED, view=True, name="get")
def get_price(ex: Execution, me: str, symbol: str):
    price = ex.read(me, f"price:{symbol}")
    if price is None:
        raise ContractError(f"no price for {symbol}")
    return price


@contract_function(Behavior.SIMPLE_ACCOUNT, name="open")
def open_account(ex: Execution, me: str, account: str, amount: int):
    ex.write(me, account, amount)
    return amount


@contract_function(Behavior.SIMPLE_ACCOUNT)
def open_valued(ex: Execution, me: str, account: str, symbol: str, quantity: int):
    price = ex.subordinate_view(ex.read(me, "cfg:oracle_chain"), ex.read(me, "cfg:oracle_feed"), "get", symbol)
    ex.write(me, account, quantity * price)
    return quantity * price


@contract_function(Behavior.SIMPLE_ACCOUNT, view=True)
def query(ex: Execution, me: str, account: str):
    return ex.read(me, account, 0)
