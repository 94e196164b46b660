from itertools import product

import pytest

from xchain_sim.coordination import (
    CoordinationContract,
    DuplicateTransaction,
    InvalidSignature,
    InvalidState,
    TimeoutExpired,
    TxState,
    UnknownChain,
    UnknownTransaction,
    commit_message,
    ignore_message,
    start_message,
)
from xchain_sim.threshold_crypto import ThresholdParams, combine_shares, make_keyset, sign_share

ORIGIN = 1
TX = b"\xab" * 32


@pytest.fixture(scope="module")
def keys():
    return make_keyset(ThresholdParams(4, 3), seed=1), make_keyset(ThresholdParams(4, 3), seed=2)


def group_sign(ks, msg):
    return combine_shares([sign_share(s, msg) for s in ks.shares[:ks.params.m]], ks.params)


@pytest.fixture
def cc(keys):
    c = CoordinationContract()
    c.register_public_key(ORIGIN, keys[0].group_pk)
    return c


def started(cc, keys, timeout=5, tx=TX):
    cc.start(tx, ORIGIN, timeout, group_sign(keys[0], start_message(tx, ORIGIN, timeout)))
    return cc


def test_registry_versions(keys):
    c = CoordinationContract()
    assert c.register_public_key(7, keys[0].group_pk) == 1
    assert c.register_public_key(7, keys[1].group_pk) == 2
    assert c.lookup_key(7) == keys[1].group_pk
    with pytest.raises(UnknownChain):
        c.lookup_key(8)


def test_start_valid(cc, keys):
    entry = started(cc, keys).entry(TX)
    assert entry.state is TxState.STARTED
    assert cc.stats.group == 1
    assert entry.to_json() == {"id": TX.hex(), "state": "Started", "timeout_block": 5, "originating_chain": 1}


def test_start_signature_over_other_id_rejected(cc, keys):
    other = b"\xcd" * 32
    sig = group_sign(keys[0], start_message(other, ORIGIN, 5))
    with pytest.raises(InvalidSignature):
        cc.start(TX, ORIGIN, 5, sig)
    with pytest.raises(UnknownTransaction):
        cc.entry(TX)


def test_start_signature_from_wrong_chain_key(cc, keys):
    with pytest.raises(InvalidSignature):
        cc.start(TX, ORIGIN, 5, group_sign(keys[1], start_message(TX, ORIGIN, 5)))


def test_start_duplicate_and_past_timeout(cc, keys):
    started(cc, keys)
    with pytest.raises(DuplicateTransaction):
        started(cc, keys)
    cc.advance_block(3)
    with pytest.raises(TimeoutExpired):
        started(cc, keys, timeout=3, tx=b"\x01" * 32)


def test_commit_and_ignore(cc, keys):
    started(cc, keys)
    assert cc.commit(TX, group_sign(keys[0], commit_message(TX, ORIGIN))).state is TxState.COMMITTED
    with pytest.raises(InvalidState):
        cc.ignore(TX, group_sign(keys[0], ignore_message(TX, ORIGIN)))
    assert cc.stats.group == 2


def test_commit_after_ignore(cc, keys):
    started(cc, keys)
    cc.ignore(TX, group_sign(keys[0], ignore_message(TX, ORIGIN)))
    with pytest.raises(InvalidState):
        cc.commit(TX, group_sign(keys[0], commit_message(TX, ORIGIN)))


def test_commit_signature_is_not_an_ignore(cc, keys):
    started(cc, keys)
    with pytest.raises(InvalidSignature):
        cc.ignore(TX, group_sign(keys[0], commit_message(TX, ORIGIN)))
    assert cc.entry(TX).state is TxState.STARTED


def test_commit_at_timeout_block_succeeds_but_not_after(cc, keys):
    started(cc, keys, timeout=5)
    cc.advance_block(5)
    assert cc.effective_state(TX) is TxState.STARTED
    cc.commit(TX, group_sign(keys[0], commit_message(TX, ORIGIN)))

    c2 = CoordinationContract()
    c2.register_public_key(ORIGIN, keys[0].group_pk)
    started(c2, keys, timeout=5)
    c2.advance_block(6)
    assert c2.effective_state(TX) is TxState.IGNORED
    with pytest.raises(TimeoutExpired):
        c2.commit(TX, group_sign(keys[0], commit_message(TX, ORIGIN)))
    assert c2.entry(TX).state is TxState.STARTED


def test_effective_state(cc, keys):
    started(cc, keys, timeout=5)
    assert cc.effective_state(TX, 5) is TxState.STARTED
    assert cc.effective_state(TX, 6) is TxState.IGNORED
    cc.commit(TX, group_sign(keys[0], commit_message(TX, ORIGIN)))
    assert cc.effective_state(TX, 10**9) is TxState.COMMITTED
    with pytest.raises(UnknownTransaction):
        cc.effective_state(b"\x00" * 32)


def test_clock():
    c = CoordinationContract(block_interval=2.0)
    assert c.advance_block() == 1
    assert c.advance_block(5) == 6
    with pytest.raises(ValueError):
        c.advance_block(-1)
    assert c.sync_to_time(3.9) == 6  # never goes backwards
    assert c.sync_to_time(20.0) == 10


def test_dump_sorted(cc, keys):
    started(cc, keys, tx=b"\x02" * 32)
    started(cc, keys, tx=b"\x01" * 32)
    assert [e["id"][:2] for e in cc.dump()] == ["01", "02"]


def test_exhaustive_short_traces(keys):
    """Every sequence of up to 4 operations keeps the state machine safe."""
    sigs = {
        "commit": group_sign(keys[0], commit_message(TX, ORIGIN)),
        "ignore": group_sign(keys[0], ignore_message(TX, ORIGIN)),
    }
    ops = ["commit", "ignore", "tick", "bad_commit"]
    for length in range(1, 5):
        for trace in product(ops, repeat=length):
            c = CoordinationContract()
            c.register_public_key(ORIGIN, keys[0].group_pk)
            started(c, keys, timeout=2)
            history = [c.effective_state(TX)]
            for op in trace:
                before = c.entry(TX).state
                verifies = c.stats.group
                try:
                    if op == "tick":
                        c.advance_block()
                    elif op == "bad_commit":
                        c.commit(TX, sigs["ignore"])
                    else:
                        getattr(c, op)(TX, sigs[op])
                        assert c.stats.group == verifies + 1
                except (InvalidState, TimeoutExpired, InvalidSignature):
                    assert c.entry(TX).state is before
                after = c.entry(TX).state
                if before is not TxState.STARTED:
                    assert after is before  # terminal states are final
                history.append(c.effective_state(TX))
            # once Ignored by timeout or decision, never anything else
            for i, s in enumerate(history):
                if s is TxState.IGNORED:
                    assert all(h is TxState.IGNORED for h in history[i:])
                if s is TxState.COMMITTED:
                    assert all(h is TxState.COMMITTED for h in history[i:])
