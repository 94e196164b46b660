"""Acceptance gate: one test per criterion, each printing a PASS/FAIL line."""
import csv
import io
import time
from collections import defaultdict
from itertools import chain, combinations

import pytest

from xchain_sim.cli import main
from xchain_sim.perf_model import CostParams, Role, Scenario, amortized_rate, compare_with_simulation, tx_rate, verify_count
from xchain_sim.sim_harness import (
    ByzantineFault,
    FailureInjection,
    SCENARIOS,
    default_config,
    emit_report,
    inject_byzantine,
    make_report,
    simulate,
)
from xchain_sim.threshold_crypto import (
    InsufficientShares,
    ThresholdParams,
    combine_shares,
    make_keyset,
    robust_combine,
    sign_share,
    verify_group,
)

SCENARIO_NAMES = [s.value for s in Scenario]


def verdict(capsys, number, ok, detail):
    with capsys.disabled():
        print(f"\n[criterion {number}] {'PASS' if ok else 'FAIL'}: {detail}")
    assert ok, detail


def app_chains(scenario):
    ids = SCENARIOS[Scenario(scenario)].chain_ids
    return sorted(ids.values())


def subordinate_chains(scenario):
    return app_chains(scenario)[1:]


def test_1_analytical_table(capsys):
    expected = {"HotelTrain": (39.5, 65.2), "SupplyChainProvenance": (49.2, 96.8), "Oracle": (49.2, 96.8)}
    start = time.perf_counter()
    assert main(["model"]) == 0
    elapsed = time.perf_counter() - start
    rows = list(csv.DictReader(io.StringIO(capsys.readouterr().out)))
    cells = {(r["scenario"], r["role"]): float(r["tps_rounded"]) for r in rows if r["tps_rounded"]}
    got = {s: (cells[(s, "OriginatingCoordinator")], cells[(s, "OriginatingOther")]) for s in expected}
    ok = got == expected and elapsed < 1.0
    verdict(capsys, 1, ok, f"model table {got} in {elapsed:.3f}s")


def test_2_closed_form_vs_trace(capsys):
    start = time.perf_counter()
    sim = simulate(default_config("HotelTrain", tx_count=1000))
    elapsed = time.perf_counter() - start
    trace = sim.network.trace
    closed = tx_rate("HotelTrain", "OriginatingCoordinator")
    cmp = compare_with_simulation(trace, "HotelTrain", "OriginatingCoordinator")
    # second route: sum the charged costs for that node directly
    p = CostParams()
    busy = sum(e["base_tx_charged"] / p.base_tx_rate
               + (e["verifications_charged"] + e["share_verifications_charged"]) * p.bls_verify_time
               for e in trace if e["node"] == cmp["node"])
    completed = sum(e["event"] == "tx_completed" for e in trace)
    direct = completed / busy
    err = max(abs(cmp["measured"] - closed), abs(direct - closed)) / closed
    ok = completed == 1000 and err <= 0.02 and elapsed < 30
    verdict(capsys, 2, ok, f"closed form {closed:.4f} vs trace {direct:.4f} "
                           f"(rel err {err:.2e}) on {cmp['node']}, sim {elapsed:.1f}s")


def test_3_verify_count_fidelity(capsys):
    mismatches = []
    for scenario in SCENARIO_NAMES:
        sim = simulate(default_config(scenario, tx_count=20))
        sums = defaultdict(int)
        for e in sim.network.trace:
            if e.get("role"):
                sums[(e["role"], e["node"], e["crosschain_tx_id"])] += e["verifications_charged"]
        seen = defaultdict(set)
        for (role, _, _), v in sums.items():
            seen[role].add(v)
        for role in Role:
            want = verify_count(scenario, role)
            got = seen.get(role.value, {0} if want == 0 else set())
            if got != {want}:
                mismatches.append((scenario, role.value, want, sorted(got)))
        if seen.get("SubordinateOther", {0}) != {0}:
            mismatches.append((scenario, "SubordinateOther", 0, sorted(seen["SubordinateOther"])))
    verdict(capsys, 3, not mismatches, f"per-role verify counts, mismatches={mismatches}")


def test_4_round_robin_amortization(capsys):
    measured, errors = [], []
    for n in (1, 2, 4, 8):
        cfg = default_config("HotelTrain", n_validators=max(4, n), tx_count=200,
                             instigators=tuple(f"node{k + 1}" for k in range(n)), rotation="round_robin")
        sim = simulate(cfg)
        out = compare_with_simulation(sim.network.trace, "HotelTrain", "OriginatingCoordinator",
                                      instigators=n, node="chain1/v1")
        measured.append(out["measured"])
        errors.append(abs(out["measured"] - amortized_rate("HotelTrain", n)) / amortized_rate("HotelTrain", n))
    increasing = all(a < b for a, b in zip(measured, measured[1:]))
    bounded = round(measured[0], 1) == 39.5 and measured[-1] < 65.2
    ok = increasing and bounded and max(errors) <= 0.02
    verdict(capsys, 4, ok, "measured tps " + ", ".join(f"{m:.2f}" for m in measured)
            + f", max rel err vs amortized {max(errors):.2e}")


def fault_cells(scenario):
    yield "happy", default_config(scenario, tx_count=20), False
    for mode in ("subordinate_failure", "param_tamper", "timeout"):
        for c in subordinate_chains(scenario):
            yield (f"{mode}@{c}", default_config(scenario, tx_count=20,
                                                  failures=(FailureInjection(mode, c, 2),)), False)
            yield (f"{mode}@{c}/all", default_config(scenario, tx_count=6,
                                                      failures=(FailureInjection(mode, c, 1),)), True)
    for mode in ("bad_share", "silent"):
        for c in app_chains(scenario):
            cfg = inject_byzantine(default_config(scenario, tx_count=20), [ByzantineFault(c, 2, mode)])
            yield f"{mode}@{c}", cfg, False


def test_5_atomicity_fault_matrix(capsys):
    start = time.perf_counter()
    problems, cells, txs = [], 0, 0
    for scenario in SCENARIO_NAMES:
        for name, cfg, all_fail in fault_cells(scenario):
            sim = simulate(cfg, record_trace=False)
            report = make_report(sim)
            cells += 1
            txs += len(sim.runs)
            if report.violations:
                problems.append((scenario, name, report.violations[:1]))
            if any(r.outcome is None for r in sim.runs):
                problems.append((scenario, name, "unfinished transaction"))
            if all_fail:
                if report.aggregate["committed"] or sim.state_dump() != sim.initial_state:
                    problems.append((scenario, name, "state differs from initial after all-fail run"))
            elif report.aggregate["committed"] == 0:
                problems.append((scenario, name, "nothing committed"))
    elapsed = time.perf_counter() - start
    ok = not problems and elapsed < 120
    verdict(capsys, 5, ok, f"{cells} cells, {txs} transactions, {len(problems)} violations "
                           f"in {elapsed:.1f}s {problems[:3]}")


def test_6_threshold_exhaustive(capsys):
    start = time.perf_counter()
    failures, checked = [], 0
    msg, other = b"acceptance message", b"something else"
    for n in range(1, 7):
        for m in range(1, n + 1):
            ks = make_keyset(ThresholdParams(n, m), seed=100 * n + m)
            shares = {s.signer_index: sign_share(s, msg) for s in ks.shares}
            sigs = {combine_shares([shares[i] for i in subset], ks.params).data
                    for subset in combinations(sorted(shares), m)}
            if len(sigs) != 1 or not verify_group(ks.group_pk, msg, combine_shares(list(shares.values()), ks.params)):
                failures.append(("unique", n, m, len(sigs)))
            bad_shares = {s.signer_index: sign_share(s, other) for s in ks.shares}
            indices = sorted(shares)
            for corrupted in chain.from_iterable(combinations(indices, k) for k in range(n + 1)):
                ordered = [bad_shares[i] for i in corrupted] + [shares[i] for i in indices if i not in corrupted]
                checked += 1
                try:
                    sig, found = robust_combine(ordered, ks.params, ks.group_pk, ks.public_shares(), msg)
                    if sorted(found) != list(corrupted) or sig.data not in sigs:
                        failures.append(("detect", n, m, corrupted, found))
                except InsufficientShares as e:
                    if n - len(corrupted) >= m or sorted(e.bad_indices) != list(corrupted):
                        failures.append(("insufficient", n, m, corrupted, e.bad_indices))
    elapsed = time.perf_counter() - start
    ok = not failures and elapsed < 60
    verdict(capsys, 6, ok, f"{checked} corruption patterns over N<=6, M<=N in {elapsed:.1f}s, "
                           f"failures={failures[:3]}")


def test_7_byzantine_locality(capsys):
    problems, rounds = [], 0
    for scenario in SCENARIO_NAMES:
        for c in app_chains(scenario):
            cfg = inject_byzantine(default_config(scenario, tx_count=10), [ByzantineFault(c, 2, "bad_share")])
            sim = simulate(cfg)
            share_rounds = defaultdict(list)
            for e in sim.network.trace:
                if e["share_verifications_charged"]:
                    share_rounds[e["chain"]].append(e)
            rounds += sum(len(v) for v in share_rounds.values())
            if set(share_rounds) != {c} or len(share_rounds[c]) != 1:
                problems.append((scenario, c, {k: len(v) for k, v in share_rounds.items()}))
            if make_report(sim).aggregate["committed"] != 10:
                problems.append((scenario, c, "not all committed"))
    verdict(capsys, 7, not problems, f"{rounds} share-verification rounds for one bad validator per run, "
                                     f"problems={problems}")


@pytest.mark.parametrize("fmt", ["json", "csv"])
def test_8_determinism(capsys, fmt):
    cfg = inject_byzantine(default_config("HotelTrain", tx_count=12, seed=42,
                                          failures=(FailureInjection("param_tamper", 3, 4),
                                                    FailureInjection("timeout", 2, 5))),
                           [ByzantineFault(1, 2, "bad_share")])
    a = emit_report(make_report(simulate(cfg)), fmt)
    b = emit_report(make_report(simulate(cfg)), fmt)
    verdict(capsys, 8, a == b, f"{fmt} reports byte-identical ({len(a)} bytes)")
