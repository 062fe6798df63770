"""Command-line interface.

Exit codes: 0 success, 1 usage error, 2 data error, 3 backend failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Sequence

from topomem.audit import AuditError, ReplayDivergence, load_snapshot, replay, summarize_run
from topomem.bank import BankError
from topomem.embedding import EmbeddingError
from topomem.engine import Config, ConfigError, Store, read_turns
from topomem.gateway import BackendError, GatewayError

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_BACKEND = 0, 1, 2, 3

log = logging.getLogger("topomem")


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> None:  # argparse exits 2 by default
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _dump(obj) -> str:
    return json.dumps(obj, ensure_ascii=False, separators=(",", ":"), sort_keys=True)


def _write_jsonl(path: Path, rows) -> None:
    path.write_text("".join(_dump(r) + "\n" for r in rows), encoding="utf-8")


def _open_store(args, must_exist: bool = True) -> Store:
    store = Store(args.store)
    if must_exist and not store.exists():
        raise DataError(f"no snapshot in {store.root}")
    return store


def _config(args, store: Store) -> Config:
    base = Config.from_file(args.config) if getattr(args, "config", None) else store.config()
    overrides = {}
    for name in ("every_sessions", "every_turns", "buffer_size", "workers"):
        value = getattr(args, name, None)
        if value is not None:
            overrides[name] = value
    return base.merged(**overrides)


# ---------------------------------------------------------------- commands


def cmd_ingest(args) -> int:
    store = _open_store(args, must_exist=False)
    with store.lock():
        if not store.exists():
            store.init(Config.from_file(args.config) if args.config else Config())
        engine = store.load(_config(args, store))
        stream = sys.stdin if args.input == "-" else open(args.input, encoding="utf-8")
        written = skipped = 0
        try:
            for lineno, item in read_turns(stream):
                if isinstance(item, Exception):
                    log.warning("line %d skipped: %s", lineno, item)
                    skipped += 1
                    continue
                engine.ingest(item)
                written += 1
        finally:
            if stream is not sys.stdin:
                stream.close()
        if args.flush and len(engine.buffer):
            engine.consolidate(trigger="flush")
        store.save(engine)
    print(_dump({
        "written": written,
        "skipped": skipped,
        "units": len(engine.bank),
        "visible": len(engine.bank.visible_surface()),
        "events": len(engine.reports),
        "buffered": len(engine.buffer),
    }))
    return EXIT_OK


def cmd_query(args) -> int:
    store = _open_store(args)
    engine = store.load(_config(args, store))
    base = engine.config
    k = base.k if args.k is None else args.k
    L = base.L if args.L is None else args.L
    # an implicit K shrinks to fit small k/L overrides; an explicit one is validated as given
    K = args.K if args.K is not None else min(base.K, k + L)
    budget = base.merged(k=k, L=L, K=K, H_q=args.H, token_budget=args.token_budget).budget()
    result = engine.query(args.text, budget)
    rec = result.to_record()
    if args.no_latency:
        rec.pop("latencies_ms")
    print(_dump(rec))
    return EXIT_OK


def cmd_consolidate(args) -> int:
    store = _open_store(args)
    with store.lock():
        engine = store.load(_config(args, store))
        report = engine.consolidate(trigger="manual")
        store.save(engine)
    print(_dump(report.to_record()))
    return EXIT_OK


def cmd_replay(args) -> int:
    store = _open_store(args)
    engine = store.load(_config(args, store))
    snapshot0 = load_snapshot(store.path(Store.SNAPSHOT0))
    try:
        rebuilt = replay(snapshot0, engine.audit.records, engine.embedder)
    except ReplayDivergence as exc:
        print(_dump({"verdict": "divergent", "run": exc.run, "seq": exc.seq, "detail": exc.detail}))
        return EXIT_DATA
    same = rebuilt.dumps() == engine.bank.dumps()
    print(_dump({"verdict": "identical" if same else "different", "digest": rebuilt.digest()}))
    return EXIT_OK if same else EXIT_DATA


def _out_dir(args, store: Store) -> Path:
    out = Path(args.out) if args.out else store.root / "reports"
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_stats(args) -> int:
    from topomem.plotting import amortization_figure

    store = _open_store(args)
    engine = store.load(_config(args, store))
    cost = summarize_run(engine.metrics.records, engine.state.turns, engine.audit.decisions())
    out = _out_dir(args, store)
    events = [m for m in engine.metrics.records if m["kind"] == "event"]
    rows = [
        {"run": e["run"], "turn": e["turn"], "event_latency_s": e["latency_s"], "event_tokens": e["tokens"],
         "ops": e["ops"], "realized_interval": cost.realized_interval,
         "amortized_offline_s": cost.realized_interval and e["latency_s"] / cost.realized_interval}
        for e in events
    ]
    _write_jsonl(out / "stats.jsonl", rows + [{"summary": cost.to_record()}])
    amortization_figure(cost, out / "amortization.png")
    print(f"{'online s/turn':>14} {'offline s/event':>16} {'I (turns)':>10} {'amortized s/turn':>17} {'ratio':>7}")
    print(f"{cost.online_latency_mean:>14.6f} {cost.event_latency_mean:>16.6f} {cost.realized_interval:>10.2f} "
          f"{cost.amortized_offline_s:>17.6f} {cost.amortized_to_online_ratio:>7.3f}")
    print(_dump({"proposals": cost.proposals, "applied": cost.applied,
                 "reasons": {k: v for k, v in cost.reason_counts.items() if v}}))
    return EXIT_OK


def cmd_recoverability(args) -> int:
    from topomem.plotting import coverage_figure
    from topomem.recoverability import report

    store = _open_store(args)
    bank = load_snapshot(store.path(Store.SNAPSHOT))
    rep = report(bank, args.H_max)
    out = _out_dir(args, store)
    _write_jsonl(out / "recoverability.jsonl", rep.rows() + [{"summary": rep.summary()}])
    coverage_figure(rep, out / "coverage.png")
    for row in rep.rows():
        print(_dump(row))
    print(_dump(rep.summary()))
    return EXIT_OK


# ------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="topomem", description="Typed-graph long-term memory store.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p):
        p.add_argument("store", help="store directory")
        p.add_argument("--config", help="JSON config file (overrides store config)")

    p = sub.add_parser("ingest", help="write turn records (JSONL) into the store")
    common(p)
    p.add_argument("--input", "-i", default="-", help="turn file, or - for stdin")
    p.add_argument("--every-sessions", type=int, dest="every_sessions")
    p.add_argument("--every-turns", type=int, dest="every_turns")
    p.add_argument("--buffer-size", type=int, dest="buffer_size")
    p.add_argument("--workers", type=int)
    p.add_argument("--flush", action="store_true", help="consolidate whatever is buffered at the end")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("query", help="retrieve a context for a query")
    common(p)
    p.add_argument("text")
    p.add_argument("--k", type=int)
    p.add_argument("--L", type=int)
    p.add_argument("--H", type=int, help="hop limit H_q")
    p.add_argument("--K", type=int)
    p.add_argument("--token-budget", type=int, dest="token_budget")
    p.add_argument("--no-latency", action="store_true", help="omit timings (byte-stable output)")
    p.set_defaults(func=cmd_query)

    p = sub.add_parser("consolidate", help="run one consolidation over the buffer")
    common(p)
    p.add_argument("--workers", type=int)
    p.set_defaults(func=cmd_consolidate)

    p = sub.add_parser("replay", help="rebuild the bank from snapshot0 and the audit log")
    common(p)
    p.set_defaults(func=cmd_replay)

    p = sub.add_parser("stats", help="cost and reason-code report")
    common(p)
    p.add_argument("--out", help="report directory (default STORE/reports)")
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("recoverability", help="coverage of archived units")
    common(p)
    p.add_argument("--H-max", type=int, default=8, dest="H_max")
    p.add_argument("--out", help="report directory (default STORE/reports)")
    p.set_defaults(func=cmd_recoverability)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # --help or a usage error; callers get the code back
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, UsageError) as exc:
        print(f"topomem: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (EmbeddingError, BackendError, GatewayError) as exc:
        print(f"topomem: backend failure: {exc}", file=sys.stderr)
        return EXIT_BACKEND
    except (DataError, BankError, AuditError, OSError) as exc:
        print(f"topomem: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
