"""Multichain-node orchestration of atomic crosschain transactions.

A :class:`Network` owns the simulated chains, their validators and key sets,
the coordination contract and a virtual-time event queue. Protocol steps run
as events; every CPU cost (base-rate transaction execution, BLS verification)
is charged to the node that performs it, which advances that node's busy
clock and appends a trace record.

Signed transaction layout (see :mod:`xchain_sim.encoding` for value tags)::

    signing_bytes = b"XCTX1" || list[kind, chain, target, function, args,
                                     coordination_chain, coordination_contract,
                                     crosschain_tx_id, timeout_block, sender,
                                     list[child signed_bytes, ...]]
    signed_bytes  = list[signing_bytes, ed25519 signature]

Children are signed first, so a parent's signature covers its children's
signatures.
"""
from __future__ import annotations

import random
from dataclasses import dataclass, field
from enum import Enum
from functools import cached_property
from typing import Callable, Iterator

from cryptography.exceptions import InvalidSignature as Ed25519InvalidSignature
from cryptography.hazmat.primitives.asymmetric.ed25519 import Ed25519PrivateKey, Ed25519PublicKey

from .coordination import (
    CoordinationContract,
    CoordinationError,
    TxState,
    commit_message,
    ignore_message,
    start_message,
)
from .encoding import EncodingError, decode, encode, message_bytes, sha256
from .events import EventQueue
from .ledger import Blockchain, LedgerError, Outcome
from .perf_model import CostParams, Role
from .threshold_crypto import (
    DeferredSignatureShare,
    GroupSignature,
    InsufficientShares,
    KeySet,
    KeyShare,
    ThresholdParams,
    VerifyStats,
    make_keyset,
    robust_combine,
    verify_group,
)

TX_MAGIC = b"XCTX1"
ID_MAGIC = b"XCID1"


class TxKind(str, Enum):
    ORIGINATING = "Originating"
    SUBORDINATE = "Subordinate"
    VIEW = "View"


class MessageKind(str, Enum):
    START = "Start"
    COMMIT = "Commit"
    IGNORE = "Ignore"
    READY = "SubordinateTransactionReady"
    VIEW_RESULT = "SubordinateViewResult"


class ProtocolError(Exception):
    pass


class MalformedTransaction(ProtocolError):
    pass


class CoverageError(ProtocolError):
    """The instigating multichain node lacks a validator on some chain."""


class ThresholdUnreachable(ProtocolError):
    pass


class SubordinateFailure(ProtocolError):
    pass


# -- transaction tree ---------------------------------------------------------

@dataclass(frozen=True)
class CallSpec:
    """Unsigned description of one node of a crosschain call tree."""

    kind: TxKind
    chain: int
    target: str
    function: str
    args: tuple = ()
    children: tuple[CallSpec, ...] = ()

    def chains(self) -> set[int]:
        out = {self.chain}
        for c in self.children:
            out |= c.chains()
        return out

    def encoded(self) -> list:
        return [TxKind(self.kind).value, self.chain, self.target, self.function, list(self.args),
                [c.encoded() for c in self.children]]


@dataclass(frozen=True)
class CrosschainTransaction:
    kind: str
    chain: int
    target: str
    function: str
    args: tuple
    coordination_chain: int
    coordination_contract: str
    crosschain_tx_id: bytes
    timeout_block: int
    sender: bytes
    subordinates: tuple[CrosschainTransaction, ...]
    sender_signature: bytes = b""

    def signing_bytes(self) -> bytes:
        return TX_MAGIC + encode([
            self.kind, self.chain, self.target, self.function, list(self.args),
            self.coordination_chain, self.coordination_contract, self.crosschain_tx_id,
            self.timeout_block, self.sender, [c.signed_bytes() for c in self.subordinates],
        ])

    def signed_bytes(self) -> bytes:
        return self._signed

    @cached_property
    def _signed(self) -> bytes:
        return encode([self.signing_bytes(), self.sender_signature])

    @cached_property
    def digest(self) -> bytes:
        return sha256(self.signed_bytes())

    @property
    def caller(self) -> str:
        return account_id(self.sender)

    def walk(self) -> Iterator[CrosschainTransaction]:
        """This node and all descendants, depth first."""
        yield self
        for c in self.subordinates:
            yield from c.walk()

    def chains(self) -> set[int]:
        return {p.chain for p in self.walk()}

    def verify_sender(self) -> bool:
        try:
            Ed25519PublicKey.from_public_bytes(self.sender).verify(self.sender_signature, self.signing_bytes())
        except (Ed25519InvalidSignature, ValueError):
            return False
        return True

    @classmethod
    def from_signed_bytes(cls, data: bytes) -> CrosschainTransaction:
        try:
            body, signature = decode(data)
            if not body.startswith(TX_MAGIC):
                raise MalformedTransaction("bad transaction magic")
            (kind, chain, target, function, args, coord_chain, coord_contract, tx_id, timeout,
             sender, children) = decode(body[len(TX_MAGIC):])
        except (EncodingError, ValueError, TypeError) as e:
            raise MalformedTransaction(str(e)) from e
        return cls(kind, chain, target, function, tuple(args), coord_chain, coord_contract, tx_id,
                   timeout, sender, tuple(cls.from_signed_bytes(c) for c in children), signature)


def account_id(public_key: bytes) -> str:
    return "0x" + sha256(public_key)[:20].hex()


def eoa_key(seed: int) -> Ed25519PrivateKey:
    return Ed25519PrivateKey.from_private_bytes(sha256(b"eoa:" + encode(seed)))


def public_bytes(key: Ed25519PrivateKey) -> bytes:
    from cryptography.hazmat.primitives import serialization
    return key.public_key().public_bytes(serialization.Encoding.Raw, serialization.PublicFormat.Raw)


def derive_tx_id(spec: CallSpec, nonce: bytes) -> bytes:
    return sha256(ID_MAGIC + encode([spec.encoded(), nonce]))


def _check_tree(spec: CallSpec, root: bool = True) -> None:
    kind = TxKind(spec.kind)
    if root and kind is not TxKind.ORIGINATING:
        raise MalformedTransaction("the root of a crosschain transaction must be Originating")
    if not root and kind is TxKind.ORIGINATING:
        raise MalformedTransaction("Originating transactions cannot be nested")
    for child in spec.children:
        if kind is TxKind.VIEW and TxKind(child.kind) is not TxKind.VIEW:
            raise MalformedTransaction("a Subordinate View may only call other views")
        _check_tree(child, root=False)


def build_crosschain_tx(spec_tree: CallSpec, signer_key: Ed25519PrivateKey, *, coordination_chain: int,
                        coordination_contract: str, timeout_block: int, nonce: bytes = b"",
                        instigator: MultichainNode | None = None) -> CrosschainTransaction:
    """Sign a call tree deepest-first and return the Originating Transaction."""
    _check_tree(spec_tree)
    if instigator is not None and not instigator.covers(spec_tree.chains()):
        missing = sorted(spec_tree.chains() - set(instigator.validators))
        raise CoverageError(f"{instigator.operator} has no validator on chains {missing}")
    tx_id = derive_tx_id(spec_tree, nonce)
    sender = public_bytes(signer_key)

    def sign(spec: CallSpec) -> CrosschainTransaction:
        children = tuple(sign(c) for c in spec.children)
        unsigned = CrosschainTransaction(TxKind(spec.kind).value, spec.chain, spec.target, spec.function,
                                         tuple(spec.args), coordination_chain, coordination_contract, tx_id,
                                         timeout_block, sender, children)
        signature = signer_key.sign(unsigned.signing_bytes())
        return CrosschainTransaction(*[getattr(unsigned, f) for f in _TX_FIELDS], sender_signature=signature)

    return sign(spec_tree)


_TX_FIELDS = ("kind", "chain", "target", "function", "args", "coordination_chain", "coordination_contract",
              "crosschain_tx_id", "timeout_block", "sender", "subordinates")


# -- nodes and messages ---------------------------------------------------------

@dataclass
class NodeStats:
    base_tx_count: int = 0
    verify_count: int = 0
    share_verify_count: int = 0
    busy_time: float = 0.0


@dataclass(eq=False)
class Validator:
    chain: int
    index: int
    share: KeyShare | None = None
    mode: str = "honest"
    free_at: float = 0.0
    distrusted: set[int] = field(default_factory=set)
    stats: NodeStats = field(default_factory=NodeStats)

    @property
    def node_id(self) -> str:
        return f"chain{self.chain}/v{self.index}"

    def sign(self, message: bytes) -> DeferredSignatureShare | None:
        if self.mode == "silent" or self.share is None:
            return None
        if self.mode == "bad_share":
            return DeferredSignatureShare(self.share, b"corrupt:" + message)
        return DeferredSignatureShare(self.share, message)


@dataclass
class MultichainNode:
    operator: str
    validators: dict[int, Validator]

    def covers(self, chains) -> bool:
        return set(chains) <= set(self.validators)


@dataclass(frozen=True)
class ProtocolMessage:
    kind: MessageKind
    crosschain_tx_id: bytes
    chain: int
    payload: bytes
    group_signature: GroupSignature

    def signing_bytes(self) -> bytes:
        return message_bytes(MessageKind(self.kind).value, self.crosschain_tx_id, self.chain, self.payload)

    def with_payload(self, payload: bytes) -> ProtocolMessage:
        return ProtocolMessage(self.kind, self.crosschain_tx_id, self.chain, payload, self.group_signature)


@dataclass(eq=False)
class TxRun:
    """Originating-side bookkeeping for one crosschain transaction."""

    tx: CrosschainTransaction
    instigator: MultichainNode
    index: int
    submitted_at: float
    status: str = "pending"  # pending -> deciding -> signalling -> done
    outcome: str | None = None
    reason: str | None = None
    started: bool = False
    local_done: bool = False
    expected_ready: set[bytes] = field(default_factory=set)
    ready: set[bytes] = field(default_factory=set)
    finished_at: float | None = None
    signalled_chains: list[int] = field(default_factory=list)
    on_done: Callable[[TxRun], None] | None = None

    @property
    def tx_id(self) -> bytes:
        return self.tx.crosschain_tx_id

    @property
    def origin(self) -> int:
        return self.tx.chain

    def coordinator(self, chain: int) -> Validator:
        return self.instigator.validators[chain]

    @property
    def latency(self) -> float | None:
        return None if self.finished_at is None else self.finished_at - self.submitted_at


# -- the network ----------------------------------------------------------------

class Network:
    def __init__(self, cost: CostParams = CostParams(), coordination_chain: int = 0,
                 block_interval: float = 1.0, network_delay: float = 0.0, record_trace: bool = True):
        self.cost = cost
        self.queue = EventQueue()
        self.coordination_chain = coordination_chain
        self.coordination = CoordinationContract(block_interval=block_interval)
        self.network_delay = network_delay
        self.chains: dict[int, Blockchain] = {}
        self.validators: dict[int, list[Validator]] = {}
        self.keysets: dict[int, KeySet] = {}
        self.trace: list[dict] = []
        self.record_trace = record_trace
        # (run, message, destination chain) -> extra delivery delay in seconds
        self.delivery_delay: Callable[[TxRun, ProtocolMessage, int], float] | None = None
        self._roles: dict[tuple[bytes, int], dict[int, str]] = {}

    @property
    def now(self) -> float:
        return self.queue.now

    # -- setup ------------------------------------------------------------------

    def add_chain(self, chain_id: int, n_validators: int = 4, threshold_m: int = 3, seed: int = 0,
                  register: bool = True) -> Blockchain:
        params = ThresholdParams(n_validators, threshold_m)
        keyset = make_keyset(params, seed)
        self.chains[chain_id] = Blockchain(chain_id)
        self.keysets[chain_id] = keyset
        self.validators[chain_id] = [Validator(chain_id, s.signer_index, s) for s in keyset.shares]
        if register:
            self.coordination.register_public_key(chain_id, keyset.group_pk)
        return self.chains[chain_id]

    def validator(self, chain: int, index: int) -> Validator:
        return self.validators[chain][index - 1]

    def multichain_node(self, operator: str, index: int, chains=None) -> MultichainNode:
        chains = sorted(self.validators) if chains is None else sorted(chains)
        return MultichainNode(operator, {c: self.validator(c, index) for c in chains
                                         if index <= len(self.validators[c])})

    def build(self, spec: CallSpec, signer_key: Ed25519PrivateKey, timeout_blocks: int, nonce: bytes,
              instigator: MultichainNode | None = None) -> CrosschainTransaction:
        self.coordination.sync_to_time(self.now)
        return build_crosschain_tx(spec, signer_key, coordination_chain=self.coordination_chain,
                                   coordination_contract=self.coordination.address,
                                   timeout_block=self.coordination.current_block + timeout_blocks,
                                   nonce=nonce, instigator=instigator)

    # -- accounting ---------------------------------------------------------------

    def _role(self, run: TxRun | None, v: Validator) -> str | None:
        if run is None:
            return None
        key = (run.tx_id, v.chain)
        if key not in self._roles:
            parts = [p for p in run.tx.walk() if p.chain == v.chain]
            coord = run.instigator.validators.get(v.chain)
            if v.chain == run.origin:
                roles = (Role.ORIGINATING_COORDINATOR.value, Role.ORIGINATING_OTHER.value)
            elif v.chain == self.coordination_chain:
                roles = (Role.COORDINATION_CHAIN_NODE.value, Role.COORDINATION_CHAIN_NODE.value)
            elif any(p.kind == TxKind.SUBORDINATE.value for p in parts):
                roles = (Role.SUBORDINATE_COORDINATOR.value, "SubordinateOther")
            else:
                roles = (Role.SUBORDINATE_VIEW_SERVER.value, "ViewChainOther")
            self._roles[key] = {u.index: roles[0] if u is coord else roles[1] for u in self.validators[v.chain]}
        return self._roles[key][v.index]

    def charge(self, v: Validator, run: TxRun | None, event: str, base: int = 0, verifies: int = 0,
               share_verifies: int = 0) -> float:
        """Charge CPU work to a node; returns when that node finishes it."""
        cost = self.cost.cost(base, verifies + share_verifies)
        start = max(self.now, v.free_at)
        v.free_at = start + cost
        v.stats.base_tx_count += base
        v.stats.verify_count += verifies
        v.stats.share_verify_count += share_verifies
        v.stats.busy_time += cost
        if self.record_trace:
            self.trace.append({
                "time": v.free_at,
                "node": v.node_id,
                "chain": v.chain,
                "event": event,
                "crosschain_tx_id": run.tx_id.hex() if run is not None else None,
                "verifications_charged": verifies,
                "share_verifications_charged": share_verifies,
                "base_tx_charged": base,
                "role": self._role(run, v),
            })
        return v.free_at

    def charge_chain(self, chain: int, run: TxRun | None, event: str, base: int = 0, verifies: int = 0) -> None:
        for v in self.validators[chain]:
            self.charge(v, run, event, base=base, verifies=verifies)

    def _log(self, node: str, chain: int, event: str, run: TxRun) -> None:
        if self.record_trace:
            self.trace.append({"time": self.now, "node": node, "chain": chain, "event": event,
                               "crosschain_tx_id": run.tx_id.hex(), "verifications_charged": 0,
                               "share_verifications_charged": 0, "base_tx_charged": 0, "role": None})

    def _after(self, time: float, action: Callable[[], None]) -> None:
        self.queue.schedule(max(time, self.now), action)

    def _send(self, run: TxRun, msg: ProtocolMessage, dest_chain: int, ready_at: float,
              action: Callable[[ProtocolMessage], None]) -> None:
        delay = self.network_delay
        if self.delivery_delay is not None:
            delay += self.delivery_delay(run, msg, dest_chain)
        self._after(ready_at + delay, lambda: action(msg))

    # -- threshold signing --------------------------------------------------------

    def _sign_round(self, chain: int, message: bytes, coordinator: Validator, run: TxRun | None,
                    event: str) -> tuple[GroupSignature, float]:
        keyset = self.keysets[chain]
        shares = [s for s in (v.sign(message) for v in self.validators[chain]) if s is not None]
        # prefer signers with a clean history
        shares.sort(key=lambda s: (s.signer_index in coordinator.distrusted, s.signer_index))
        stats = VerifyStats()
        try:
            sig, bad = robust_combine(shares, keyset.params, keyset.group_pk, keyset.public_shares(),
                                      message, stats)
        except InsufficientShares as e:
            coordinator.distrusted.update(e.bad_indices)
            self.charge(coordinator, run, event + "_failed", verifies=stats.group, share_verifies=stats.share)
            raise ThresholdUnreachable(f"chain {chain}: {e}") from e
        if bad:
            coordinator.distrusted.update(bad)
            coordinator.distrusted.difference_update(
                s.signer_index for s in shares if s.signer_index not in bad and stats.share)
        done = self.charge(coordinator, run, event, verifies=stats.group, share_verifies=stats.share)
        return sig, done

    def threshold_sign_round(self, chain: int, message_bytes_: bytes, coordinator: Validator | None = None,
                             run: TxRun | None = None) -> GroupSignature:
        coordinator = coordinator or self.validators[chain][0]
        sig, _ = self._sign_round(chain, message_bytes_, coordinator, run, "sign")
        return sig

    def verify_message(self, msg: ProtocolMessage) -> bool:
        try:
            key = self.coordination.lookup_key(msg.chain)
        except CoordinationError:
            return False
        return verify_group(key, msg.signing_bytes(), msg.group_signature)

    # -- originating lifecycle ----------------------------------------------------

    def submit(self, tx: CrosschainTransaction, instigator: MultichainNode, index: int = 0,
               on_done: Callable[[TxRun], None] | None = None) -> TxRun:
        if not instigator.covers(tx.chains()):
            missing = sorted(tx.chains() - set(instigator.validators))
            raise CoverageError(f"{instigator.operator} has no validator on chains {missing}")
        run = TxRun(tx, instigator, index, self.now, on_done=on_done)
        run.expected_ready = {p.digest for p in tx.walk() if p.kind == TxKind.SUBORDINATE.value}
        self._after(self.now, lambda: self._begin(run))
        return run

    def run_originating(self, tx: CrosschainTransaction, instigator: MultichainNode) -> TxRun:
        run = self.submit(tx, instigator)
        self.queue.run(until=lambda: run.status == "done")
        return run

    def _begin(self, run: TxRun) -> None:
        origin = run.coordinator(run.origin)
        self._log(origin.node_id, run.origin, "tx_submitted", run)
        if not run.tx.verify_sender():
            self._resolve_unstarted(run, "invalid sender signature")
            return
        msg = start_message(run.tx_id, run.origin, run.tx.timeout_block)
        try:
            sig, done = self._sign_round(run.origin, msg, origin, run, "sign_start")
        except ThresholdUnreachable as e:
            self._resolve_unstarted(run, f"signing failure: {e}")
            return
        self._after(done + self.network_delay, lambda: self._submit_start(run, sig))

    def _coordination_gate(self, run: TxRun) -> Validator:
        return run.instigator.validators.get(self.coordination_chain) or self.validators[self.coordination_chain][0]

    def _submit_coordination(self, run: TxRun, event: str, call: Callable[[], object]):
        self.coordination.sync_to_time(self.now)
        before = self.coordination.stats.group
        error = None
        try:
            call()
        except CoordinationError as e:
            error = e
        verifies = self.coordination.stats.group - before
        self.charge_chain(self.coordination_chain, run, event, base=1, verifies=verifies)
        return error, self._coordination_gate(run).free_at

    def _submit_start(self, run: TxRun, sig: GroupSignature) -> None:
        error, done = self._submit_coordination(
            run, "coordination_start",
            lambda: self.coordination.start(run.tx_id, run.origin, run.tx.timeout_block, sig))
        if error is not None:
            self._resolve_unstarted(run, f"start rejected: {error}")
            return
        run.started = True
        expiry = (run.tx.timeout_block + 1) * self.coordination.block_interval
        self._after(expiry, lambda: self._on_timeout(run))
        self._after(done + self.network_delay, lambda: self._process_part(
            run, run.tx, on_success=lambda result: self._originating_mined(run, result),
            on_failure=lambda reason: self._fail(run, reason)))

    def _originating_mined(self, run: TxRun, result) -> None:
        run.local_done = True
        for sub in result.to_submit:
            self._submit_subordinate(run, sub)
        self._check_complete(run)

    def _check_complete(self, run: TxRun) -> None:
        if run.status != "pending" or not run.local_done or run.ready != run.expected_ready:
            return
        run.status = "deciding"
        self._decide(run, MessageKind.COMMIT)

    def _fail(self, run: TxRun, reason: str) -> None:
        if run.status != "pending":
            return
        run.status = "deciding"
        run.reason = reason
        self._decide(run, MessageKind.IGNORE)

    def _decide(self, run: TxRun, kind: MessageKind) -> None:
        origin = run.coordinator(run.origin)
        if kind is MessageKind.COMMIT:
            msg, submit = commit_message(run.tx_id, run.origin), self.coordination.commit
        else:
            msg, submit = ignore_message(run.tx_id, run.origin), self.coordination.ignore
        try:
            sig, done = self._sign_round(run.origin, msg, origin, run, "sign_" + kind.value.lower())
        except ThresholdUnreachable:
            return  # the timeout watchdog resolves it
        event = "coordination_" + kind.value.lower()

        def deliver():
            if run.status != "deciding":
                return
            _, gate = self._submit_coordination(run, event, lambda: submit(run.tx_id, sig))
            if self.coordination.effective_state(run.tx_id) is not TxState.STARTED:
                self._after(gate + self.network_delay, lambda: self._signal(run))

        self._after(done + self.network_delay, deliver)

    def _on_timeout(self, run: TxRun) -> None:
        if run.status not in ("pending", "deciding"):
            return
        self.coordination.sync_to_time(self.now)
        if self.coordination.effective_state(run.tx_id) is TxState.IGNORED:
            run.reason = run.reason or "timeout"
            self._signal(run)

    def _signal(self, run: TxRun) -> None:
        if run.status in ("signalling", "done"):
            return
        run.status = "signalling"
        self.coordination.sync_to_time(self.now)
        state = self.coordination.effective_state(run.tx_id)
        outcome = Outcome.COMMIT if state is TxState.COMMITTED else Outcome.IGNORE
        run.outcome = "Committed" if outcome is Outcome.COMMIT else "Ignored"
        done = self.now
        for cid in sorted(self.chains):
            if not self.chains[cid].locked_by(run.tx_id):
                continue
            self.chains[cid].apply_signalling(run.tx_id, outcome)
            self.charge_chain(cid, run, "signalling", base=1)
            run.signalled_chains.append(cid)
            done = max(done, run.coordinator(cid).free_at)
        self._after(done, lambda: self._complete(run))

    def _resolve_unstarted(self, run: TxRun, reason: str) -> None:
        run.status = "signalling"
        run.outcome = "Ignored"
        run.reason = reason
        self._complete(run)

    def _complete(self, run: TxRun) -> None:
        run.status = "done"
        run.finished_at = self.now
        self._log(run.coordinator(run.origin).node_id, run.origin, "tx_completed", run)
        if run.on_done is not None:
            run.on_done(run)

    # -- per-part processing (trial execution driver) -------------------------------

    def _entry_active(self, run: TxRun) -> bool:
        self.coordination.sync_to_time(self.now)
        try:
            return self.coordination.effective_state(run.tx_id) is TxState.STARTED
        except CoordinationError:
            return False

    def _process_part(self, run: TxRun, part: CrosschainTransaction, on_success, on_failure) -> None:
        if run.status != "pending":
            return
        if not self._entry_active(run):
            on_failure(f"chain {part.chain}: coordination entry is not active")
            return
        if not part.verify_sender():
            on_failure(f"chain {part.chain}: invalid sender signature")
            return
        self._collect_views(run, part, lambda values: self._trial(run, part, values, on_success, on_failure),
                            on_failure)

    def _trial(self, run: TxRun, part: CrosschainTransaction, view_values: dict, on_success, on_failure) -> None:
        if run.status != "pending":
            return
        node = run.coordinator(part.chain)
        try:
            result = self.chains[part.chain].process_crosschain_part(
                part, dispatch_view=lambda v: view_values[v.digest])
        except LedgerError as e:
            reason = f"chain {part.chain}: {type(e).__name__}: {e}"
            done = self.charge(node, run, "trial_failed", base=1)
            self._after(done, lambda: on_failure(reason))
            return
        self.charge_chain(part.chain, run, "mine_" + part.kind.lower(), base=1)
        self._after(node.free_at, lambda: on_success(result))

    def _collect_views(self, run: TxRun, part: CrosschainTransaction, then, on_failure) -> None:
        views = [c for c in part.subordinates if c.kind == TxKind.VIEW.value]
        if not views:
            then({})
            return
        values: dict[bytes, object] = {}
        caller = run.coordinator(part.chain)

        def on_value(view, value):
            values[view.digest] = value
            if len(values) == len(views):
                then(values)

        for view in views:
            def on_message(msg, view=view):
                self._receive_view_result(run, msg, view, part.chain, caller, on_value, on_failure)
            self._after(self.now + self.network_delay,
                        lambda view=view, on_message=on_message: self._serve_view(run, view, part.chain,
                                                                                  on_message, on_failure))

    def _serve_view(self, run: TxRun, view: CrosschainTransaction, caller_chain: int, on_message, on_failure) -> None:
        if run.status != "pending":
            return
        if not view.verify_sender():
            on_failure(f"chain {view.chain}: invalid sender signature on view")
            return
        server = run.coordinator(view.chain)

        def execute(values):
            if run.status != "pending":
                return
            try:
                value = self.chains[view.chain].execute_view_part(view, dispatch_view=lambda v: values[v.digest])
            except LedgerError as e:
                on_failure(f"chain {view.chain}: view failed: {type(e).__name__}: {e}")
                return
            payload = encode([view.digest, value])
            msg_bytes = message_bytes(MessageKind.VIEW_RESULT.value, run.tx_id, view.chain, payload)
            try:
                sig, done = self._sign_round(view.chain, msg_bytes, server, run, "sign_view_result")
            except ThresholdUnreachable:
                return  # silent; the originating side times out
            msg = ProtocolMessage(MessageKind.VIEW_RESULT, run.tx_id, view.chain, payload, sig)
            self._send(run, msg, caller_chain, done, on_message)

        self._collect_views(run, view, execute, on_failure)

    def _receive_view_result(self, run: TxRun, msg: ProtocolMessage, view: CrosschainTransaction,
                             caller_chain: int, caller: Validator, on_value, on_failure) -> None:
        if run.status != "pending":
            return
        self.charge_chain(caller_chain, run, "verify_view_result", verifies=1)
        ok = self.verify_message(msg) and msg.kind is MessageKind.VIEW_RESULT and msg.crosschain_tx_id == run.tx_id
        try:
            digest, value = decode(msg.payload)
        except (EncodingError, ValueError):
            ok = False
        if not ok or digest != view.digest:
            self._after(caller.free_at, lambda: on_failure(f"chain {caller_chain}: invalid view result message"))
            return
        self._after(caller.free_at, lambda: on_value(view, value))

    # -- subordinate transactions -----------------------------------------------------

    def _submit_subordinate(self, run: TxRun, part: CrosschainTransaction, on_ready=None, on_failure=None) -> None:
        on_ready = on_ready or (lambda msg: self._send(run, msg, run.origin, self.now, self._receive_ready_for(run)))
        on_failure = on_failure or (lambda reason: self._report_failure(run, reason))

        def mined(result):
            for sub in result.to_submit:
                self._submit_subordinate(run, sub, None if on_ready is None else on_ready, on_failure)
            node = run.coordinator(part.chain)
            msg_bytes = message_bytes(MessageKind.READY.value, run.tx_id, part.chain, part.digest)
            try:
                sig, done = self._sign_round(part.chain, msg_bytes, node, run, "sign_ready")
            except ThresholdUnreachable:
                return  # silent; the originating side times out
            msg = ProtocolMessage(MessageKind.READY, run.tx_id, part.chain, part.digest, sig)
            self._after(done, lambda: on_ready(msg))

        self._after(self.now + self.network_delay,
                    lambda: self._process_part(run, part, on_success=mined, on_failure=on_failure))

    def _report_failure(self, run: TxRun, reason: str) -> None:
        self._after(self.now + self.network_delay, lambda: self._fail(run, reason))

    def _receive_ready_for(self, run: TxRun):
        return lambda msg: self._receive_ready(run, msg)

    def _receive_ready(self, run: TxRun, msg: ProtocolMessage) -> None:
        if run.status != "pending":
            return
        self.charge_chain(run.origin, run, "verify_ready", verifies=1)
        origin = run.coordinator(run.origin)
        ok = (self.verify_message(msg) and msg.kind is MessageKind.READY and msg.crosschain_tx_id == run.tx_id
              and msg.payload in run.expected_ready)
        if not ok:
            self._after(origin.free_at, lambda: self._fail(run, "invalid Ready message"))
            return
        run.ready.add(msg.payload)
        self._after(origin.free_at, lambda: self._check_complete(run))

    # -- synchronous helpers for driving single steps -------------------------------------

    def begin(self, tx: CrosschainTransaction, instigator: MultichainNode) -> TxRun:
        """Sign and submit the Start message only; the run is left detached."""
        run = TxRun(tx, instigator, 0, self.now)
        origin = run.coordinator(run.origin)
        sig, done = self._sign_round(run.origin, start_message(run.tx_id, run.origin, tx.timeout_block),
                                     origin, run, "sign_start")
        self.queue.now = max(self.now, done)
        error, _ = self._submit_coordination(
            run, "coordination_start", lambda: self.coordination.start(run.tx_id, run.origin, tx.timeout_block, sig))
        if error is not None:
            raise error
        run.started = True
        return run

    def run_subordinate(self, run: TxRun, part: CrosschainTransaction) -> ProtocolMessage:
        """Process one subordinate part and return its threshold-signed Ready message."""
        box: dict = {}
        self._submit_subordinate(run, part, on_ready=lambda m: box.setdefault("msg", m),
                                 on_failure=lambda r: box.setdefault("error", r))
        self.queue.run(until=lambda: bool(box))
        if "error" in box:
            raise SubordinateFailure(box["error"])
        if "msg" not in box:
            raise SubordinateFailure("subordinate chain produced no Ready message")
        return box["msg"]

    def run_subordinate_view(self, run: TxRun, view: CrosschainTransaction, caller_chain: int) -> ProtocolMessage:
        box: dict = {}
        self._serve_view(run, view, caller_chain, lambda m: box.setdefault("msg", m),
                         lambda r: box.setdefault("error", r))
        self.queue.run(until=lambda: bool(box))
        if "error" in box:
            raise SubordinateFailure(box["error"])
        if "msg" not in box:
            raise SubordinateFailure("view chain produced no result message")
        return box["msg"]


def random_nonce(rng: random.Random) -> bytes:
    return rng.getrandbits(128).to_bytes(16, "big")
