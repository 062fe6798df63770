"""Acceptance suite: one test per criterion, each printing a single verdict line.

Run alone with ``python3 -m pytest tests/test_acceptance.py -v``; the verdict
lines are repeated in the terminal summary.
"""

import json
import os
import random
import subprocess
import sys
import time
from collections import deque
from pathlib import Path

import numpy as np
import pytest

import topomem.atc as atc_mod
import topomem.engine as engine_mod
from fuzzdocs import VALID, fuzz_bank, malformed_case, run_case, run_reply
from report import verdict
from streams import golden_case, golden_mismatches, marker_stream, random_bank, run_stream
from suites import ScriptedBackend, run_routing_suite, tasks
from topomem.atc import consolidate
from topomem.audit import AuditLog, replay
from topomem.bank import UNREACHABLE, ConsolidationBuffer, EdgeType, MemoryBank
from topomem.cli import main as cli_main
from topomem.embedding import StubEmbedder
from topomem.engine import Config
from topomem.gateway import Gateway
from topomem.recoverability import find_orphans, hop_map, lineage_depths
from topomem.retrieval import QueryBudget, anchor, expand, materialize

TESTS = Path(__file__).parent

# ------------------------------------------------------------- criteria 1-2

CAPPED = (EdgeType.TEMPORAL, EdgeType.SEMANTIC, EdgeType.SIBLING)
N_RUNS = 1000
TIME_LIMIT_S = 300.0


def cap_violations(bank, ids):
    bad = []
    for u in ids:
        if u in bank and bank.unit(u).visible:
            for et in CAPPED:
                if bank.out_degree(u, et) > bank.caps.cap_for(et):
                    bad.append((u, et.value, bank.out_degree(u, et)))
    return bad


@pytest.fixture(scope="module")
def randomized_runs():
    """1000 end-to-end runs with stub backends, checked after every edit and every consolidation.

    An edit only changes out-edges of the units in its touched set (sources of
    added or removed edges, created, archived and redescribed units), so checking
    caps on those units after each edit, plus the whole surface after each
    consolidation, covers every visible unit after every edit.
    """
    stats = {"runs": 0, "turns": 0, "events": 0, "edits": 0, "applied": 0, "archived": 0,
             "cap": [], "orphans": [], "bound": []}
    apply_plan, write_online = atc_mod.apply_plan, engine_mod.write_online

    def apply_checked(bank, op, target, plan, embedder, cfg):
        summary = apply_plan(bank, op, target, plan, embedder, cfg)
        stats["edits"] += 1
        stats["applied"] += summary.applied
        stats["cap"] += cap_violations(bank, summary.touched() | set(target))
        return summary

    def write_checked(bank, *args, **kwargs):
        res = write_online(bank, *args, **kwargs)
        stats["edits"] += 1
        stats["cap"] += cap_violations(bank, [res.unit])
        return res

    def after_consolidation(engine):
        bank = engine.bank
        stats["events"] += 1
        stats["orphans"] += find_orphans(bank)
        stats["cap"] += cap_violations(bank, bank.visible_surface())
        hops, depth = hop_map(bank), lineage_depths(bank)
        stats["bound"] += [(v, h, depth[v]) for v, h in hops.items() if h == UNREACHABLE or h > depth[v] + 1]

    start = time.perf_counter()
    with pytest.MonkeyPatch.context() as mp:
        mp.setattr(atc_mod, "apply_plan", apply_checked)
        mp.setattr(engine_mod, "write_online", write_checked)
        for seed in range(N_RUNS):
            rng = random.Random(seed)
            n = rng.randint(50, 500)
            turns = marker_stream(rng, n, session_len=rng.randint(3, 8))
            engine = run_stream(turns, Config(every_sessions=None, every_turns=rng.randint(5, 20)),
                                check=after_consolidation)
            stats["runs"] += 1
            stats["turns"] += n
            stats["archived"] += len(engine.bank.archived())
    stats["elapsed"] = time.perf_counter() - start
    return stats


def test_criterion_01_no_orphans_and_reachability(randomized_runs):
    s = randomized_runs
    ok = (s["runs"] == N_RUNS and not s["orphans"] and not s["bound"] and s["elapsed"] < TIME_LIMIT_S
          and s["archived"] > 0)
    detail = (f"{s['runs']} runs, {s['turns']} turns, {s['events']} consolidations, {s['archived']} archived units, "
              f"{len(s['orphans'])} orphans, {len(s['bound'])} bound violations, {s['elapsed']:.0f}s "
              f"(limit {TIME_LIMIT_S:.0f}s)")
    assert verdict(1, "no orphans, h(v) <= supersessions + 1", ok, detail), s["orphans"][:5] + s["bound"][:5]


def test_criterion_02_degree_caps(randomized_runs):
    s = randomized_runs
    ok = not s["cap"] and s["edits"] > 0
    detail = f"{s['edits']} edits checked ({s['applied']} consolidation edits), {len(s['cap'])} violations"
    assert verdict(2, "degree caps respected after every edit", ok, detail), s["cap"][:5]


# --------------------------------------------------------------- criterion 3


def full_sort_oracle(bank, q, k):
    ids = bank.visible_surface()
    qn = float(np.sqrt(q @ q))
    scored = []
    for pos, uid in enumerate(ids):
        z = bank.unit(uid).embedding
        zn = float(np.sqrt(z @ z))
        s = 0.0 if zn == 0 or qn == 0 else min(1.0, max(-1.0, float(z @ q) / (zn * qn)))
        scored.append((-s, pos, uid))
    scored.sort()
    return [uid for _, _, uid in scored[:k]]


def tie_heavy_bank(rng, n, dim=64):
    """Integer vectors with repeated rows, doubled rows and zero rows, so ties are common."""
    bank = MemoryBank(dim)
    rows = []
    for _ in range(n):
        roll = rng.random()
        if rows and roll < 0.25:
            z = rows[int(rng.integers(len(rows)))].copy()
        elif rows and roll < 0.35:
            z = 2.0 * rows[int(rng.integers(len(rows)))]
        elif roll < 0.38:
            z = np.zeros(dim)
        else:
            z = rng.integers(-1, 2, dim).astype(float) * (rng.random(dim) < 0.2)
        rows.append(z)
        bank.create_unit("e", "s", ["k"], z)
    for uid in range(n):
        if rng.random() < 0.3:
            bank.set_visibility(uid, False)
    return bank, rows


def test_criterion_03_stage1_exact():
    mismatches, ties_seen = [], 0
    for seed in range(500):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(1, 1001))
        bank, rows = tie_heavy_bank(rng, n)
        q = rows[int(rng.integers(n))].copy() if rng.random() < 0.5 else rng.integers(-1, 2, 64).astype(float)
        k = int(rng.integers(1, 41))
        got = [u for u, _ in anchor(bank, q, k)]
        want = full_sort_oracle(bank, q, k)
        scores = [s for _, s in anchor(bank, q, min(len(bank.visible_surface()), k + 1))]
        ties_seen += len(scores) - len(set(scores))
        if got != want:
            mismatches.append((seed, got[:5], want[:5]))
    ok = not mismatches and ties_seen > 0
    assert verdict(3, "anchor() equals full-sort oracle incl. ties", ok,
                   f"500 banks <= 1000 units, d=64, {ties_seen} tied scores at the cut, {len(mismatches)} mismatches"), \
        mismatches[:3]


# --------------------------------------------------------------- criterion 4

PI = {"sibling_split": 0, "version": 1, "temporal": 2, "semantic": 3}


def oracle_hops(bank, anchors):
    adj = {}
    for e in bank.edges():
        adj.setdefault(e.src, []).append(e.dst)
    dist = {a: 0 for a in anchors}
    queue = deque(anchors)
    while queue:
        u = queue.popleft()
        for v in adj.get(u, []):
            if v not in dist:
                dist[v] = dist[u] + 1
                queue.append(v)
    return dist


def reference_expansion(bank, anchors, H, L):
    """Written from the contract: FIFO frontier, neighbors by (pi(type), id), global budget L."""
    out = {}
    for e in bank.edges():
        out.setdefault(e.src, []).append((PI[e.edge_type.value], e.dst))
    C, seen = [], set()
    for a in anchors:
        if a not in seen and len(C) < L:
            C.append(a)
            seen.add(a)
    frontier, hops = list(C), 0
    while frontier and hops < H and len(C) < L:
        nxt = []
        for u in frontier:
            for _, v in sorted(out.get(u, [])):
                if len(C) >= L:
                    break
                if v not in seen:
                    seen.add(v)
                    C.append(v)
                    nxt.append(v)
        frontier, hops = nxt, hops + 1
    return C


def test_criterion_04_expansion_bounds():
    over_budget, out_of_range, order_bad, compared = [], [], [], 0
    for seed in range(500):
        rng = np.random.default_rng(10_000 + seed)
        n = int(rng.integers(1, 300))
        bank = random_bank(rng, n, dim=2, archived=0.5, edges=int(rng.integers(0, 4 * n)))
        anchors = [int(x) for x in dict.fromkeys(rng.integers(0, n, int(rng.integers(1, 11))))]
        H, L = int(rng.integers(0, 5)), int(rng.integers(1, 80))
        C = expand(bank, anchors, H, L)
        if len(C) > L or len(set(C)) != len(C):
            over_budget.append(seed)
        dist = oracle_hops(bank, anchors)
        if any(c not in dist or dist[c] > H for c in C):
            out_of_range.append(seed)
        if seed % 5 == 0:  # 100 sampled frontiers
            compared += 1
            if C != reference_expansion(bank, anchors, H, L):
                order_bad.append(seed)
    ok = not (over_budget or out_of_range or order_bad) and compared == 100
    assert verdict(4, "expansion within L and H_q, (pi, id) admission order", ok,
                   f"500 graphs, {compared} orders compared, budget {len(over_budget)}, hops {len(out_of_range)}, "
                   f"order {len(order_bad)} failures"), (over_budget, out_of_range, order_bad)


# --------------------------------------------------------------- criterion 5

DETERMINISM_RUNS = 100


def determinism_engine(seed):
    rng = random.Random(50_000 + seed)
    turns = marker_stream(rng, rng.randint(50, 300), session_len=rng.randint(3, 8))
    cfg = Config(every_sessions=None, every_turns=rng.randint(5, 20), workers=rng.choice([1, 4]))
    return run_stream(turns, cfg)


def test_criterion_05_determinism_and_replay(tmp_path):
    # second execution in a separate interpreter with a different hash seed
    script = (
        "import sys; sys.path.insert(0, sys.argv[1]);"
        "from pathlib import Path; from test_acceptance import determinism_engine;"
        "out = Path(sys.argv[2])\n"
        f"for s in range({DETERMINISM_RUNS}):\n"
        "    e = determinism_engine(s)\n"
        "    (out / f'{s}.snap').write_text(e.bank.dumps()); (out / f'{s}.audit').write_text(e.audit.dumps())\n"
    )
    env = dict(os.environ, PYTHONHASHSEED="4242")
    child = subprocess.Popen([sys.executable, "-c", script, str(TESTS), str(tmp_path)], env=env)
    live_diff, replay_diff, applied = [], [], 0
    for seed in range(DETERMINISM_RUNS):
        engine = determinism_engine(seed)
        applied += sum(1 for d in engine.audit.decisions() if d["reason"] == "APPLIED")
        rebuilt = replay(MemoryBank(64), engine.audit.records, StubEmbedder())
        if rebuilt.dumps() != engine.bank.dumps():
            replay_diff.append(seed)
        engine.seed_bytes = (engine.bank.dumps(), engine.audit.dumps())
        (tmp_path / f"{seed}.mine").write_text(engine.seed_bytes[0] + "\0" + engine.seed_bytes[1])
    assert child.wait(timeout=600) == 0
    for seed in range(DETERMINISM_RUNS):
        snap, audit = (tmp_path / f"{seed}.mine").read_text().split("\0")
        if (tmp_path / f"{seed}.snap").read_text() != snap or (tmp_path / f"{seed}.audit").read_text() != audit:
            live_diff.append(seed)
    ok = not live_diff and not replay_diff and applied > 0
    assert verdict(5, "byte-identical live runs and replay", ok,
                   f"{DETERMINISM_RUNS} runs, {applied} applied edits, {len(live_diff)} live diffs "
                   f"(second run in a fresh interpreter), {len(replay_diff)} replay diffs"), (live_diff, replay_diff)


# --------------------------------------------------------------- criterion 6


def test_criterion_06_gating_and_routing():
    results = run_routing_suite()
    failed = [(n, d) for n, ok, d in results if not ok]
    # the same thresholds end to end: p = 0.9 edits, p just below does not
    e2e = []
    for p, want in ((0.9, "APPLIED"), (0.8999, "LOW_CONF")):
        bank, targets = fuzz_bank()
        buf = ConsolidationBuffer()
        buf.push(1, [])
        rep = consolidate(bank, buf, Gateway(ScriptedBackend({1: tasks(split=[(1, p)])})), StubEmbedder())
        e2e.append([o.reason for o in rep.outcomes] == [want])
    ok = not failed and all(e2e)
    assert verdict(6, "gating, coherence, arity, dedupe and overlap queues", ok,
                   f"{len(results)} hand-enumerated cases + 2 pipeline cases, {len(failed)} failed"), failed


# --------------------------------------------------------------- criterion 7

FUZZ_CASES = 10_000


def test_criterion_07_fail_closed():
    bank, targets = fuzz_bank()
    # control: the well-formed replies do edit a copy of the bank
    controls = []
    for schema_id, op in (("plan_split", "SPLIT"), ("plan_merge", "MERGE"), ("plan_update", "UPDATE")):
        copy = bank.copy()
        decisions = run_reply(copy, targets, schema_id, op, json.dumps(VALID[schema_id]()))
        controls.append([d["reason"] for d in decisions] == ["APPLIED"] and copy.dumps() != bank.dumps())
    rng = random.Random(7)
    failures, codes = [], {}
    for _ in range(FUZZ_CASES):
        case = malformed_case(rng)
        codes[case[3]] = codes.get(case[3], 0) + 1
        problem = run_case(bank, targets, case)
        if problem:
            failures.append(problem)
    ok = not failures and all(controls)
    assert verdict(7, "malformed documents never mutate the bank, one reason each", ok,
                   f"{FUZZ_CASES} cases {dict(sorted(codes.items()))}, {len(failures)} failures"), failures[:5]


# --------------------------------------------------------------- criterion 8


def test_criterion_08_visible_surface_scaling():
    rng = np.random.default_rng(8)
    n, dim, k, queries = 20_000, 64, 10, 1000
    Z = rng.standard_normal((n, dim))
    half, full = MemoryBank(dim), MemoryBank(dim)
    for z in Z:
        half.create_unit("e", "s", ["k"], z)
        full.create_unit("e", "s", ["k"], z)
    for uid in rng.choice(n, n // 2, replace=False):
        half.set_visibility(int(uid), False)
    Q = rng.standard_normal((queries, dim))
    anchor(half, Q[0], k), anchor(full, Q[0], k)  # build both indexes
    t_half = t_full = 0.0
    for q in Q:  # interleaved so drift hits both sides equally
        t0 = time.perf_counter()
        anchor(half, q, k)
        t1 = time.perf_counter()
        anchor(full, q, k)
        t_full += time.perf_counter() - t1
        t_half += t1 - t0
    ratio = t_half / t_full
    ok = ratio <= 0.8
    assert verdict(8, "Stage-1 over V+ <= 0.8x over V", ok,
                   f"{n} units, 50% archived, {queries} queries: {1e3 * t_half / queries:.3f} ms vs "
                   f"{1e3 * t_full / queries:.3f} ms, ratio {ratio:.3f}"), ratio


# --------------------------------------------------------------- criterion 9


def stats_on(tmp_path, name, events, turns, capsys):
    store = tmp_path / name
    empty = tmp_path / "empty.jsonl"
    empty.write_text("")
    assert cli_main(["ingest", str(store), "-i", str(empty)]) == 0
    metrics = [{"kind": "write", "turn": i + 1, "latency_s": 0.01, "tokens": 4} for i in range(turns)]
    metrics += [{"kind": "event", "run": i, "turn": turns, "latency_s": c, "tokens": 100, "ops": 1}
                for i, c in enumerate(events)]
    (store / "metrics.jsonl").write_text("".join(json.dumps(m) + "\n" for m in metrics))
    state = json.loads((store / "state.json").read_text())
    state["turns"] = turns
    (store / "state.json").write_text(json.dumps(state))
    assert cli_main(["stats", str(store), "--out", str(store / "r")]) == 0
    capsys.readouterr()
    rows = [json.loads(x) for x in (store / "r" / "stats.jsonl").read_text().splitlines()]
    return rows[:-1], rows[-1]["summary"]


def test_criterion_09_amortization(tmp_path, capsys):
    # (event costs in s, total turns) -> amortized s/turn = mean event cost / (turns / events)
    fixtures = [([12.0], 60, 0.2), ([3.0, 9.0], 80, 0.15), ([13.0, 13.0], 130, 0.2), ([], 40, 0.0)]
    problems = []
    for i, (events, turns, want) in enumerate(fixtures):
        rows, summary = stats_on(tmp_path, f"s{i}", events, turns, capsys)
        I = turns / len(events) if events else 0.0
        if summary["realized_interval"] != I or summary["amortized_offline_s"] != want:
            problems.append((events, turns, summary["realized_interval"], summary["amortized_offline_s"]))
        if [r["amortized_offline_s"] for r in rows] != [c / I for c in events]:
            problems.append(("rows", events, rows))
    ok = not problems
    assert verdict(9, "amortized offline = event cost / realized I", ok,
                   f"12 s at I=60 -> 0.2 s/turn; {len(fixtures)} fixtures, {len(problems)} mismatches"), problems


# -------------------------------------------------------------- criterion 10


def words(tag, n):
    return " ".join(f"{tag}{i}" for i in range(n))


def test_criterion_10_materialization():
    problems = []
    # default budget: 16 ranked blocks of 151 tokens (timestamp + 150 words); 13 fit in 2048
    assert QueryBudget().token_budget == 2048 and QueryBudget().K == 16
    bank = MemoryBank(2)
    times = [float(t) for t in np.random.default_rng(10).permutation(20)]
    for i in range(20):
        bank.create_unit(words(f"u{i}w", 150), "s", ["k"], [1.0, 0.0], 1_700_000_000.0 + 3600 * times[i])
    ranked = [(i, 1.0 - i / 100) for i in range(20)]
    text, included = materialize(bank, ranked, 16, 2048)
    by_time = sorted(range(16), key=lambda i: times[i])
    want_ids = by_time[:13]
    want_text = "\n\n".join(
        f"[{time.strftime('%Y-%m-%dT%H:%M:%SZ', time.gmtime(1_700_000_000 + 3600 * times[i]))}] {words(f'u{i}w', 150)}"
        for i in want_ids)
    if included != want_ids or text != want_text:
        problems.append("default budget golden")
    if len(text.split()) != 13 * 151:
        problems.append("token count")
    # undated blocks go last, dated ones ascend
    b2 = MemoryBank(2)
    for ev, ts in (("late", 200.0), ("none", None), ("early", 100.0)):
        b2.create_unit(ev, "s", ["k"], [1.0, 0.0], ts)
    t2, _ = materialize(b2, [(0, 0.9), (1, 0.8), (2, 0.7)], 16, 2048)
    if t2 != "[1970-01-01T00:01:40Z] early\n\n[1970-01-01T00:03:20Z] late\n\nnone":
        problems.append(f"ordering golden {t2!r}")
    # adversarial budgets: a block exactly filling the remainder is kept, one token less drops it
    for m in range(1, 14):
        exact = 151 * m
        if materialize(bank, ranked, 16, exact)[1] != want_ids[:m]:
            problems.append(f"exact fit m={m}")
        if materialize(bank, ranked, 16, exact - 1)[1] != want_ids[: m - 1]:
            problems.append(f"one over m={m}")
    ok = not problems
    assert verdict(10, "time order, blank-line joins, whole-block truncation", ok,
                   f"default 2048 golden + 26 adversarial budgets, {len(problems)} mismatches"), problems


# -------------------------------------------------------------- criterion 11


def test_criterion_11_operator_goldens():
    problems = {}
    for name in ("split", "merge", "update"):
        bank, summary, embedder, expected = golden_case(name)
        found = golden_mismatches(bank, summary, embedder, expected)
        if found:
            problems[name] = found
    ok = not problems
    assert verdict(11, "SPLIT / MERGE / UPDATE golden traces", ok,
                   "3 hand-derived end states" + (f", mismatches in {sorted(problems)}" if problems else "")), problems
