import json
from dataclasses import dataclass

import pytest
from hypothesis import given, settings, strategies as st

from xchain_sim.ledger import (
    Behavior,
    Blockchain,
    ContractError,
    ContractLocked,
    LedgerError,
    LocalTransaction,
    MissingSubordinateCall,
    NoItemAvailable,
    NonlockableContract,
    NoSuchLock,
    Outcome,
    ParameterMismatch,
    UnexpectedSubordinateCall,
    UnknownFunction,
    dump_state,
)

TX1 = b"\x11" * 32
TX2 = b"\x22" * 32


@dataclass
class Part:
    """Minimal stand-in for a signed transaction node."""

    chain: int
    target: str
    function: str
    args: tuple = ()
    subordinates: tuple = ()
    kind: str = "Subordinate"
    caller: str = "alice"
    crosschain_tx_id: bytes = TX1


def token_chain(balances=None):
    chain = Blockchain(1)
    addr = chain.deploy(Behavior.TOKEN, lockable=True,
                        initial_state={f"bal:{k}": v for k, v in (balances or {"a": 10}).items()})
    return chain, addr


def hotel_chain(items=3):
    """Router over ``items`` hotel rooms, paying through a token router."""
    chain = Blockchain(2)
    tok = chain.deploy(Behavior.TOKEN, lockable=True, initial_state={"bal:alice": 500})
    tok_router = chain.deploy(Behavior.ROUTER, initial_state={"item_count": 1, "item:0": tok})
    rooms = [chain.deploy(Behavior.ITEM, lockable=True) for _ in range(items)]
    state = {"item_count": items, **{f"item:{i}": r for i, r in enumerate(rooms)},
             "token_router": tok_router, "payee": "hotel"}
    router = chain.deploy(Behavior.ROUTER, initial_state=state)
    return chain, router, rooms, tok


def test_deploy_token_balances():
    chain, addr = token_chain({"a": 7, "b": 3})
    c = chain.contract(addr)
    assert c.committed == {"bal:a": 7, "bal:b": 3}
    assert c.lock is None and c.provisional is None


def test_transfer_conserves():
    chain, addr = token_chain()
    chain.execute_local(LocalTransaction(addr, "transfer", ("a", "b", 10)))
    assert chain.execute_view(LocalTransaction(addr, "balance_of", ("a",))) == 0
    assert chain.execute_view(LocalTransaction(addr, "balance_of", ("b",))) == 10
    assert chain.base_tx_executed == 1


def test_transfer_over_balance_leaves_state():
    chain, addr = token_chain()
    before = dump_state({1: chain})
    with pytest.raises(ContractError):
        chain.execute_local(LocalTransaction(addr, "transfer", ("a", "b", 11)))
    assert dump_state({1: chain}) == before


def test_simple_account_open():
    chain = Blockchain(1)
    acct = chain.deploy(Behavior.SIMPLE_ACCOUNT)
    chain.execute_local(LocalTransaction(acct, "open", ("acc", 100)))
    assert chain.contract(acct).committed["acc"] == 100
    assert chain.execute_view(LocalTransaction(acct, "query", ("acc",))) == 100


def test_oracle_views():
    chain = Blockchain(1)
    feed = chain.deploy(Behavior.ORACLE_PRICE_FEED)
    chain.execute_local(LocalTransaction(feed, "set", ("XAU", 1900)))
    assert chain.execute_view(LocalTransaction(feed, "get", ("XAU",))) == 1900
    with pytest.raises(ContractError):
        chain.execute_view(LocalTransaction(feed, "get", ("NOPE",)))
    with pytest.raises(UnknownFunction):
        chain.execute_view(LocalTransaction(feed, "no_such_fn"))
    # a view cannot mutate
    with pytest.raises(ContractError):
        chain.execute_view(LocalTransaction(feed, "set", ("XAU", 1)))


def test_view_on_locked_contract_sees_committed_only():
    chain, addr = token_chain()
    part = Part(1, addr, "transfer", ("a", "b", 4))
    chain.process_crosschain_part(part)
    assert chain.contract(addr).provisional == {"bal:a": 6, "bal:b": 4}
    assert chain.execute_view(LocalTransaction(addr, "balance_of", ("a",))) == 10
    # the locking transaction's own reads see its overlay
    assert chain.execute_view(LocalTransaction(addr, "balance_of", ("a",)), reader_tx_id=TX1) == 6


def test_local_tx_on_locked_contract_fails():
    chain, addr = token_chain()
    chain.process_crosschain_part(Part(1, addr, "transfer", ("a", "b", 1)))
    with pytest.raises(ContractLocked):
        chain.execute_local(LocalTransaction(addr, "transfer", ("a", "b", 1)))


def test_hotel_booking_part_locks_room_and_token():
    chain, router, rooms, tok = hotel_chain()
    result = chain.process_crosschain_part(Part(2, router, "book", (5, "alice", 100)))
    assert result.result == rooms[0]
    assert set(result.locked) == {rooms[0], tok}
    assert chain.contract(rooms[0]).lock == TX1
    assert chain.contract(tok).provisional == {"bal:alice": 400, "bal:hotel": 100}
    assert chain.contract(router).lock is None


def test_signalling_commit_and_ignore():
    chain, router, rooms, tok = hotel_chain()
    initial = dump_state({2: chain})
    chain.process_crosschain_part(Part(2, router, "book", (5, "alice", 100)))
    chain.apply_signalling(TX1, Outcome.IGNORE)
    assert dump_state({2: chain}) == initial

    chain.process_crosschain_part(Part(2, router, "book", (5, "alice", 100), crosschain_tx_id=TX2))
    chain.apply_signalling(TX2, Outcome.COMMIT)
    assert chain.contract(rooms[0]).committed == {"booked:5": "alice"}
    assert chain.contract(tok).committed["bal:hotel"] == 100
    with pytest.raises(NoSuchLock):
        chain.apply_signalling(TX2, Outcome.COMMIT)


def test_locked_item_skipped_by_router():
    chain, router, rooms, _ = hotel_chain()
    chain.contract(rooms[0]).lock = TX2
    result = chain.process_crosschain_part(Part(2, router, "book", (5, "alice", 0)))
    assert result.result == rooms[1]


def test_part_targeting_locked_item_fails():
    chain, router, rooms, _ = hotel_chain()
    chain.process_crosschain_part(Part(2, rooms[0], "reserve", (1, "x")))
    before = dump_state({2: chain})
    with pytest.raises(ContractLocked):
        chain.process_crosschain_part(Part(2, rooms[0], "reserve", (2, "y"), crosschain_tx_id=TX2))
    assert dump_state({2: chain}) == before


def test_nonlockable_update_fails():
    chain = Blockchain(1)
    acct = chain.deploy(Behavior.SIMPLE_ACCOUNT, lockable=False)
    with pytest.raises(NonlockableContract):
        chain.process_crosschain_part(Part(1, acct, "open", ("x", 1)))
    assert chain.contract(acct).lock is None


def test_select_unlocked_item():
    chain, router, rooms, _ = hotel_chain()
    assert chain.select_unlocked_item(router) == rooms[0]
    chain.contract(rooms[0]).lock = TX1
    assert chain.select_unlocked_item(router) == rooms[1]
    for r in rooms:
        chain.contract(r).lock = TX1
    with pytest.raises(NoItemAvailable):
        chain.select_unlocked_item(router)


def agency_setup(price=40):
    origin = Blockchain(1)
    agency = origin.deploy(Behavior.TRAVEL_AGENCY, lockable=True, initial_state={
        "hotel_chain": 2, "hotel_router": "0xhotel", "hotel_price": 100,
        "train_chain": 3, "train_router": "0xtrain", "train_price": price})
    return origin, agency


def test_subordinate_args_must_match():
    origin, agency = agency_setup()
    subs = (Part(2, "0xhotel", "book", (5, "g", 100)), Part(3, "0xtrain", "book", (5, "g", 41)))
    with pytest.raises(ParameterMismatch):
        origin.process_crosschain_part(Part(1, agency, "book_trip", (5, "g"), subs, kind="Originating"))
    assert origin.contract(agency).lock is None


def test_subordinates_handed_back_on_success():
    origin, agency = agency_setup()
    subs = (Part(2, "0xhotel", "book", (5, "g", 100)), Part(3, "0xtrain", "book", (5, "g", 40)))
    result = origin.process_crosschain_part(Part(1, agency, "book_trip", (5, "g"), subs, kind="Originating"))
    assert result.to_submit == list(subs)
    assert [c.function for c in result.calls] == ["book", "book"]


def test_missing_and_extra_calls():
    origin, agency = agency_setup()
    with pytest.raises(UnexpectedSubordinateCall):
        origin.process_crosschain_part(Part(1, agency, "book_trip", (5, "g"),
                                            (Part(2, "0xhotel", "book", (5, "g", 100)),)))
    subs = (Part(2, "0xhotel", "book", (5, "g", 100)), Part(3, "0xtrain", "book", (5, "g", 40)),
            Part(3, "0xtrain", "book", (6, "g", 40)))
    with pytest.raises(MissingSubordinateCall):
        origin.process_crosschain_part(Part(1, agency, "book_trip", (5, "g"), subs))


def oracle_setup():
    chain = Blockchain(1)
    acct = chain.deploy(Behavior.SIMPLE_ACCOUNT, lockable=True,
                        initial_state={"cfg:oracle_chain": 2, "cfg:oracle_feed": "0xfeed"})
    return chain, acct


def test_view_result_cached_and_used():
    chain, acct = oracle_setup()
    view = Part(2, "0xfeed", "get", ("ETH",), kind="View")
    calls = []

    def dispatch(v):
        calls.append(v)
        return 2000

    result = chain.process_crosschain_part(Part(1, acct, "open_valued", ("bob", "ETH", 3), (view,)), dispatch)
    assert result.result == 6000
    assert calls == [view]  # dispatched once, up front
    assert result.calls[0].cached_result == 2000


def test_view_args_must_match():
    chain, acct = oracle_setup()
    view = Part(2, "0xfeed", "get", ("XAG",), kind="View")
    with pytest.raises(ParameterMismatch):
        chain.process_crosschain_part(Part(1, acct, "open_valued", ("bob", "ETH", 3), (view,)), lambda v: 25)


def test_views_without_dispatcher_rejected():
    chain, acct = oracle_setup()
    view = Part(2, "0xfeed", "get", ("ETH",), kind="View")
    with pytest.raises(LedgerError):
        chain.process_crosschain_part(Part(1, acct, "open_valued", ("bob", "ETH", 3), (view,)))


def test_dump_format():
    chain, addr = token_chain()
    data = json.loads(dump_state({1: chain}))
    assert data == {"1": {addr: {"behavior": "Token", "lockable": True, "lock": None,
                                 "committed": {"bal:a": 10}}}}


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.sampled_from("abc"), st.sampled_from("abc"), st.integers(1, 6),
                          st.sampled_from(["local", "commit", "ignore"])), max_size=12))
def test_token_conservation_and_ignore_noop(ops):
    chain, addr = token_chain({"a": 10, "b": 10, "c": 10})
    for n, (src, dst, amt, how) in enumerate(ops):
        before = dump_state({1: chain})
        tx_id = n.to_bytes(32, "big")
        try:
            if how == "local":
                chain.execute_local(LocalTransaction(addr, "transfer", (src, dst, amt)))
            else:
                chain.process_crosschain_part(Part(1, addr, "transfer", (src, dst, amt), crosschain_tx_id=tx_id))
                # isolation: committed state is untouched while locked
                assert json.loads(dump_state({1: chain}))["1"][addr]["committed"] == \
                    json.loads(before)["1"][addr]["committed"]
                chain.apply_signalling(tx_id, Outcome.COMMIT if how == "commit" else Outcome.IGNORE)
                if how == "ignore":
                    assert dump_state({1: chain}) == before
        except ContractError:
            assert dump_state({1: chain}) == before
        total = chain.execute_view(LocalTransaction(addr, "total_supply"))
        assert total == 30
