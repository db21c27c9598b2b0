"""Experiment harness: fleets of child processes running one or more training clients.

Output CSV columns, in order (fixed)::

    repetition, seed, client, epoch, wall_seconds, circuits,
    circuits_per_second, loss, accuracy, status

One row per (client, epoch), then one aggregate row per client with
``epoch = all`` (summed wall time and circuits, final loss and accuracy).
A failed client contributes a single row with ``status = failed``.
"""
from __future__ import annotations

import csv
import logging
import os
import subprocess
import sys
import tempfile
from dataclasses import dataclass, replace
from pathlib import Path

from .config import load_train_config, parse_fleet_list, read_kv, train_config_to_kv
from .errors import ConfigError
from .fleet import spawn_fleet, teardown
from .trainer import TrainConfig

logger = logging.getLogger(__name__)

EXPERIMENT_COLUMNS = (
    "repetition", "seed", "client", "epoch", "wall_seconds", "circuits",
    "circuits_per_second", "loss", "accuracy", "status",
)


@dataclass
class ClientSpec:
    name: str
    config: TrainConfig
    dataset: str
    max_samples: int | None = None


@dataclass
class ExperimentSpec:
    fleet: list[tuple[str, int]]
    clients: list[ClientSpec]
    repetitions: int = 1
    output: str = "experiment.csv"
    mode: str = "single-client"
    heartbeat_period: float = 5.0
    synthetic_delay: float = 0.0
    allow_exact_fit: bool = False
    parallelism: int | None = None

    def __post_init__(self):
        if not self.fleet:
            raise ConfigError("experiment needs at least one worker")
        if not self.clients:
            raise ConfigError("experiment needs at least one client")
        if self.mode not in ("single-client", "multi-tenant"):
            raise ConfigError(f"unknown mode {self.mode!r}")
        if self.mode == "single-client" and len(self.clients) != 1:
            raise ConfigError("single-client mode takes exactly one client")
        if self.repetitions < 1:
            raise ConfigError("repetitions must be >= 1")


def load_experiment(path) -> ExperimentSpec:
    """Keys: fleet, mode, repetitions, output, heartbeat_period, synthetic_delay,
    allow_exact_fit, parallelism, and ``client.<name> = <train config path>``."""
    kv = read_kv(path)
    base = Path(path).parent
    clients = []
    opts = {}
    for key, value in kv.items():
        if key.startswith("client."):
            cfg_path = base / value
            cfg, extras = load_train_config(cfg_path)
            if "dataset" not in extras:
                raise ConfigError(f"{cfg_path}: client config needs a dataset")
            dataset = extras["dataset"]
            if not dataset.startswith("synthetic:") and not os.path.isabs(dataset.split("|")[0]):
                dataset = "|".join(str(cfg_path.parent / p) for p in dataset.split("|"))
            clients.append(ClientSpec(key[len("client."):], cfg, dataset, extras.get("max_samples")))
        else:
            opts[key] = value
    known = {"fleet", "repetitions", "output", "mode", "heartbeat_period", "synthetic_delay",
             "allow_exact_fit", "parallelism"}
    unknown = set(opts) - known
    if unknown:
        raise ConfigError(f"unknown experiment keys {sorted(unknown)}")
    try:
        return ExperimentSpec(
            fleet=parse_fleet_list(opts.get("fleet", "")),
            clients=clients,
            repetitions=int(opts.get("repetitions", 1)),
            output=str(base / opts.get("output", "experiment.csv")),
            mode=opts.get("mode", "single-client"),
            heartbeat_period=float(opts.get("heartbeat_period", 5.0)),
            synthetic_delay=float(opts.get("synthetic_delay", 0.0)),
            allow_exact_fit=opts.get("allow_exact_fit", "false").lower() in ("1", "true", "yes"),
            parallelism=int(opts["parallelism"]) if "parallelism" in opts else None,
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def _launch_client(client: ClientSpec, seed: int, address: str, workdir: str, rep: int):
    cfg = replace(client.config, seed=seed, client_id=f"{client.name}-r{rep}")
    cfg_path = os.path.join(workdir, f"{client.name}-r{rep}.conf")
    metrics = os.path.join(workdir, f"{client.name}-r{rep}.csv")
    extras = {"dataset": client.dataset, "max_samples": client.max_samples}
    Path(cfg_path).write_text(train_config_to_kv(cfg, extras), encoding="utf-8")
    log = open(os.path.join(workdir, f"{client.name}-r{rep}.log"), "w")
    proc = subprocess.Popen(
        [sys.executable, "-m", "dqulearn", "train", "--config", cfg_path, "--manager", address,
         "--metrics", metrics],
        stdout=log, stderr=subprocess.STDOUT,
    )
    return proc, metrics, log


def _client_rows(rep, seed, name, metrics_path):
    with open(metrics_path, newline="", encoding="utf-8") as fh:
        epochs = list(csv.DictReader(fh))
    rows = [
        {"repetition": rep, "seed": seed, "client": name, **e, "status": "ok"} for e in epochs
    ]
    if epochs:
        wall = sum(float(e["wall_seconds"]) for e in epochs)
        circuits = sum(int(e["circuits"]) for e in epochs)
        rows.append({
            "repetition": rep, "seed": seed, "client": name, "epoch": "all",
            "wall_seconds": repr(wall), "circuits": circuits,
            "circuits_per_second": repr(circuits / wall if wall > 0 else float("inf")),
            "loss": epochs[-1]["loss"], "accuracy": epochs[-1]["accuracy"], "status": "ok",
        })
    return rows


def run_experiment(spec: ExperimentSpec, workdir: str | None = None) -> list[dict]:
    """Run every repetition, write ``spec.output`` and return its rows."""
    rows: list[dict] = []
    failed = False
    workdir = workdir or tempfile.mkdtemp(prefix="dqulearn-exp-")
    for rep in range(spec.repetitions):
        handles = spawn_fleet(
            spec.fleet, spec.heartbeat_period, spec.synthetic_delay, spec.allow_exact_fit,
            parallelism=spec.parallelism,
        )
        try:
            launched = []
            for client in spec.clients:
                seed = client.config.seed + rep
                launched.append((client, seed, *_launch_client(client, seed, handles.address, workdir, rep)))
            for client, seed, proc, metrics, log in launched:
                code = proc.wait()
                log.close()
                if code != 0 or not os.path.exists(metrics):
                    failed = True
                    rows.append({"repetition": rep, "seed": seed, "client": client.name, "epoch": "",
                                 "wall_seconds": "", "circuits": "", "circuits_per_second": "",
                                 "loss": "", "accuracy": "", "status": "failed"})
                    logger.error("client %s failed (exit %s); see %s", client.name, code, log.name)
                else:
                    rows.extend(_client_rows(rep, seed, client.name, metrics))
        finally:
            teardown(handles)
        write_rows(spec.output, rows)
        if failed:
            break
    return rows


def write_rows(path, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=EXPERIMENT_COLUMNS)
        writer.writeheader()
        writer.writerows(rows)
