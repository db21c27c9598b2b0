"""Command line entry points: ``manager``, ``worker``, ``train``, ``experiment``."""
from __future__ import annotations

import argparse
import asyncio
import csv
import logging
import sys

from .errors import DQuLearnError


def _manager(args):
    from .comanager import CoManager
    from .config import load_fleet_config
    from .server import serve

    workers, extra = ([], {})
    if args.fleet_config:
        workers, extra = load_fleet_config(args.fleet_config)
    period = args.heartbeat_period or float(extra.get("heartbeat_period", 5.0))
    state = CoManager(workers, heartbeat_period=period, allow_exact_fit=args.allow_exact_fit)
    host, _, port = args.listen.rpartition(":")

    def ready(server):
        print("LISTENING %s:%d" % server.address, flush=True)

    try:
        asyncio.run(serve(state, host or "127.0.0.1", int(port), args.virtual_clock, args.event_log, ready))
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except KeyboardInterrupt:
        pass
    return 0


def _worker(args):
    from .client import parse_address
    from .worker import FatalStartupError, WorkerConfig, WorkerDaemon, read_cru_trace

    trace = read_cru_trace(args.cru_trace) if args.cru_trace else None
    cfg = WorkerConfig(
        args.id, args.max_qubits, parse_address(args.manager), args.period,
        cru_mode=args.cru_mode, cru_trace=trace, parallelism=args.parallelism,
        synthetic_delay=args.synthetic_delay, backoff_base=args.backoff_base,
    )
    try:
        asyncio.run(WorkerDaemon(cfg).run())
    except FatalStartupError as exc:
        print(f"error: registration rejected: {exc}", file=sys.stderr)
        return 3
    except KeyboardInterrupt:
        pass
    return 0


def _train(args):
    from .config import load_train_config
    from .segmentation import load_dataset
    from .trainer import METRICS_COLUMNS, LocalExecutor, metrics_row, train

    config, extras = load_train_config(args.config)
    if args.epochs is not None:
        config.epochs = args.epochs
    dataset = load_dataset(args.dataset or extras["dataset"])
    limit = extras.get("max_samples")
    if limit:
        dataset = dataset.subset(labels=list(config.class_labels), limit=limit)
    manager = args.manager or extras.get("manager")
    endpoint = LocalExecutor() if args.local or not manager else manager
    out_path = args.metrics or extras.get("metrics")
    out = open(out_path, "w", newline="", encoding="utf-8") if out_path else sys.stdout
    writer = csv.DictWriter(out, fieldnames=METRICS_COLUMNS)
    writer.writeheader()

    def on_epoch(m):
        writer.writerow(metrics_row(m))
        out.flush()

    try:
        train(dataset, config, endpoint, on_epoch=on_epoch)
    finally:
        if out is not sys.stdout:
            out.close()
    return 0


def _experiment(args):
    from .experiment import load_experiment, run_experiment

    spec = load_experiment(args.config)
    if args.output:
        spec.output = args.output
    rows = run_experiment(spec)
    failed = any(r["status"] == "failed" for r in rows)
    print(f"wrote {len(rows)} rows to {spec.output}")
    return 1 if failed else 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dqulearn", description=__doc__)
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    m = sub.add_parser("manager", help="run the co-manager")
    m.add_argument("--listen", default="127.0.0.1:5555")
    m.add_argument("--heartbeat-period", type=float, default=None, help="seconds (default 5)")
    m.add_argument("--virtual-clock", action="store_true", help="take time from message stamps")
    m.add_argument("--allow-exact-fit", action="store_true", help="place when AR >= demand")
    m.add_argument("--fleet-config")
    m.add_argument("--event-log", help="append one JSON record per state transition")
    m.set_defaults(func=_manager)

    w = sub.add_parser("worker", help="run a simulated quantum worker")
    w.add_argument("--id", required=True)
    w.add_argument("--max-qubits", type=int, required=True)
    w.add_argument("--manager", default="127.0.0.1:5555")
    w.add_argument("--period", type=float, default=5.0)
    w.add_argument("--cru-mode", choices=("measured", "scripted"), default="measured")
    w.add_argument("--cru-trace")
    w.add_argument("--parallelism", type=int, default=None)
    w.add_argument("--synthetic-delay", type=float, default=0.0, help="extra seconds per circuit")
    w.add_argument("--backoff-base", type=float, default=1.0)
    w.set_defaults(func=_worker)

    t = sub.add_parser("train", help="train a classifier through a manager (or locally)")
    t.add_argument("--config", required=True)
    t.add_argument("--manager")
    t.add_argument("--local", action="store_true", help="simulate in-process, no fleet")
    t.add_argument("--dataset")
    t.add_argument("--epochs", type=int)
    t.add_argument("--metrics", help="per-epoch CSV path (default stdout)")
    t.set_defaults(func=_train)

    e = sub.add_parser("experiment", help="spawn fleets and clients, write a metrics CSV")
    e.add_argument("--config", required=True)
    e.add_argument("--output")
    e.set_defaults(func=_experiment)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        return args.func(args)
    except DQuLearnError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
