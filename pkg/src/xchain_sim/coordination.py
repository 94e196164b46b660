"""Crosschain Coordination Contract hosted on the Coordination Blockchain.

Holds the blockchain public-key registry and one lifecycle entry per
crosschain transaction. Every accepted start/commit/ignore performs exactly
one group-signature verification, which the caller charges to each node of
the coordination chain.
"""
from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

from .encoding import encode, message_bytes
from .threshold_crypto import GroupPublicKey, GroupSignature, VerifyStats, verify_group


class TxState(str, Enum):
    STARTED = "Started"
    COMMITTED = "Committed"
    IGNORED = "Ignored"


class CoordinationError(Exception):
    pass


class UnknownChain(CoordinationError):
    pass


class UnknownTransaction(CoordinationError):
    pass


class DuplicateTransaction(CoordinationError):
    pass


class InvalidSignature(CoordinationError):
    pass


class TimeoutExpired(CoordinationError):
    pass


class InvalidState(CoordinationError):
    pass


@dataclass
class CoordinationEntry:
    crosschain_tx_id: bytes
    originating_chain: int
    state: TxState
    timeout_block: int

    def to_json(self) -> dict:
        return {
            "id": self.crosschain_tx_id.hex(),
            "state": self.state.value,
            "timeout_block": self.timeout_block,
            "originating_chain": self.originating_chain,
        }


@dataclass(frozen=True)
class KeyRegistryEntry:
    chain: int
    group_pk: GroupPublicKey
    version: int


def start_message(tx_id: bytes, originating_chain: int, timeout_block: int) -> bytes:
    return message_bytes("Start", tx_id, originating_chain, encode([timeout_block]))


def commit_message(tx_id: bytes, originating_chain: int) -> bytes:
    return message_bytes("Commit", tx_id, originating_chain)


def ignore_message(tx_id: bytes, originating_chain: int) -> bytes:
    return message_bytes("Ignore", tx_id, originating_chain)


class CoordinationContract:
    def __init__(self, address: str = "0x" + "c0" * 20, block_interval: float = 1.0):
        self.address = address
        self.block_interval = block_interval
        self.current_block = 0
        self.entries: dict[bytes, CoordinationEntry] = {}
        self.registry: dict[int, list[KeyRegistryEntry]] = {}
        self.stats = VerifyStats()

    # -- clock ----------------------------------------------------------------

    def advance_block(self, n: int = 1) -> int:
        if n < 0:
            raise ValueError("the coordination chain clock never goes backwards")
        self.current_block += n
        return self.current_block

    def block_at(self, time: float) -> int:
        return int(time // self.block_interval)

    def sync_to_time(self, time: float) -> int:
        target = self.block_at(time)
        if target > self.current_block:
            self.advance_block(target - self.current_block)
        return self.current_block

    # -- key registry ---------------------------------------------------------

    def register_public_key(self, chain: int, group_pk: GroupPublicKey) -> int:
        versions = self.registry.setdefault(chain, [])
        entry = KeyRegistryEntry(chain, group_pk, len(versions) + 1)
        versions.append(entry)
        return entry.version

    def lookup_key(self, chain: int) -> GroupPublicKey:
        versions = self.registry.get(chain)
        if not versions:
            raise UnknownChain(f"no public key registered for chain {chain}")
        return versions[-1].group_pk

    # -- lifecycle ------------------------------------------------------------

    def _check_sig(self, chain: int, message: bytes, sig: GroupSignature) -> None:
        if not verify_group(self.lookup_key(chain), message, sig, self.stats):
            raise InvalidSignature("group signature does not verify under the chain's registered key")

    def start(self, crosschain_tx_id: bytes, originating_chain: int, timeout_block: int,
              start_msg_sig: GroupSignature) -> CoordinationEntry:
        if crosschain_tx_id in self.entries:
            raise DuplicateTransaction(f"crosschain transaction {crosschain_tx_id.hex()[:16]} already started")
        if timeout_block <= self.current_block:
            raise TimeoutExpired(f"timeout block {timeout_block} is not after current block {self.current_block}")
        self._check_sig(originating_chain, start_message(crosschain_tx_id, originating_chain, timeout_block),
                        start_msg_sig)
        entry = CoordinationEntry(crosschain_tx_id, originating_chain, TxState.STARTED, timeout_block)
        self.entries[crosschain_tx_id] = entry
        return entry

    def entry(self, crosschain_tx_id: bytes) -> CoordinationEntry:
        try:
            return self.entries[crosschain_tx_id]
        except KeyError:
            raise UnknownTransaction(f"unknown crosschain transaction {crosschain_tx_id.hex()[:16]}") from None

    def _finish(self, crosschain_tx_id: bytes, sig: GroupSignature, new_state: TxState, message_fn):
        entry = self.entry(crosschain_tx_id)
        if entry.state is not TxState.STARTED:
            raise InvalidState(f"transaction is {entry.state.value}, expected Started")
        if self.current_block > entry.timeout_block:
            raise TimeoutExpired(f"block {self.current_block} is past timeout block {entry.timeout_block}")
        self._check_sig(entry.originating_chain, message_fn(crosschain_tx_id, entry.originating_chain), sig)
        entry.state = new_state
        return entry

    def commit(self, crosschain_tx_id: bytes, commit_msg_sig: GroupSignature) -> CoordinationEntry:
        return self._finish(crosschain_tx_id, commit_msg_sig, TxState.COMMITTED, commit_message)

    def ignore(self, crosschain_tx_id: bytes, ignore_msg_sig: GroupSignature) -> CoordinationEntry:
        return self._finish(crosschain_tx_id, ignore_msg_sig, TxState.IGNORED, ignore_message)

    def effective_state(self, crosschain_tx_id: bytes, current_block: int | None = None) -> TxState:
        entry = self.entry(crosschain_tx_id)
        block = self.current_block if current_block is None else current_block
        if entry.state is TxState.STARTED and block > entry.timeout_block:
            return TxState.IGNORED
        return entry.state

    def dump(self) -> list[dict]:
        return [self.entries[k].to_json() for k in sorted(self.entries)]
