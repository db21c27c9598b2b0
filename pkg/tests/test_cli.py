"""Child-process fleets, the command line and configuration files."""
import csv
import subprocess
import sys
import threading
import time

import pytest

from dqulearn.cli import build_parser, main
from dqulearn.config import (
    load_fleet_config,
    load_train_config,
    parse_fleet_list,
    parse_kv,
    train_config_from_kv,
    train_config_to_kv,
)
from dqulearn.errors import ConfigError
from dqulearn.experiment import EXPERIMENT_COLUMNS, load_experiment, run_experiment
from dqulearn.fleet import kill_worker, spawn_fleet, teardown
from dqulearn.trainer import METRICS_COLUMNS, TrainConfig

TRAIN_CONF = """\
# two-class bars, one filter
alpha = 0.05
epochs = 2
n_filters = 1
seed = 1
class_labels = 0, 1
dataset = synthetic:bars:8
"""


def write(path, text):
    path.write_text(text)
    return str(path)


def read_csv(path):
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        return reader.fieldnames, list(reader)


# -- config ------------------------------------------------------------------------

def test_train_config_round_trip():
    cfg, extras = train_config_from_kv(parse_kv(TRAIN_CONF))
    assert cfg.alpha == 0.05 and cfg.class_labels == (0, 1) and cfg.shots is None
    assert extras == {"dataset": "synthetic:bars:8"}
    again, extras2 = train_config_from_kv(parse_kv(train_config_to_kv(cfg, extras)))
    assert again == cfg and extras2 == extras


@pytest.mark.parametrize("text", ["bogus = 1\n", "alpha = fast\n", "alpha = -1\n", "[x]\nalpha = 1\n"])
def test_train_config_errors(text):
    with pytest.raises(ConfigError):
        train_config_from_kv(parse_kv(text))


def test_fleet_config(tmp_path):
    workers, extra = load_fleet_config(write(tmp_path / "f.conf", "heartbeat_period = 2\nworker.w1 = 5\nworker.w2 = 10\n"))
    assert workers == [("w1", 5), ("w2", 10)] and extra == {"heartbeat_period": "2"}
    assert parse_fleet_list("w1:5, w2:10") == [("w1", 5), ("w2", 10)]
    with pytest.raises(ConfigError):
        parse_fleet_list("w1")


def test_parser_flags():
    args = build_parser().parse_args(
        ["worker", "--id", "w", "--max-qubits", "5", "--period", "2", "--cru-mode", "scripted",
         "--cru-trace", "t.csv", "--parallelism", "2"]
    )
    assert (args.id, args.max_qubits, args.period, args.parallelism) == ("w", 5, 2.0, 2)
    args = build_parser().parse_args(
        ["manager", "--listen", "0.0.0.0:7000", "--heartbeat-period", "1", "--virtual-clock",
         "--allow-exact-fit", "--fleet-config", "f.conf"]
    )
    assert args.virtual_clock and args.allow_exact_fit and args.heartbeat_period == 1.0


# -- train command -----------------------------------------------------------------

def test_local_train_writes_metrics(tmp_path):
    conf = write(tmp_path / "t.conf", TRAIN_CONF)
    out = tmp_path / "m.csv"
    assert main(["train", "--config", conf, "--local", "--metrics", str(out)]) == 0
    columns, rows = read_csv(out)
    assert tuple(columns) == METRICS_COLUMNS
    assert [r["epoch"] for r in rows] == ["0", "1"]
    for r in rows:
        cps = float(r["circuits_per_second"])
        assert abs(cps - int(r["circuits"]) / float(r["wall_seconds"])) <= 1e-9 * max(1.0, cps)


# -- child-process fleets ---------------------------------------------------------

@pytest.fixture
def fleet():
    handles = spawn_fleet([("w1", 10), ("w2", 10)], heartbeat_period=0.5)
    yield handles
    teardown(handles)


def test_spawn_registers_within_one_period():
    start = time.monotonic()
    handles = spawn_fleet([("w1", 5), ("w2", 10)], heartbeat_period=1.0)
    try:
        assert handles.registered() == {"w1", "w2"}
        assert time.monotonic() - start < 1.0 + 5.0  # interpreter start-up dominates
        first = min(e["t"] for e in handles.events() if e["kind"] == "register")
        last = max(e["t"] for e in handles.events() if e["kind"] == "register")
        assert last - first < 1.0
    finally:
        teardown(handles)
        teardown(handles)
    assert handles.closed
    assert all(p.poll() is not None for p in [handles.manager, *handles.workers.values()])


def test_train_through_fleet_and_kill_one_worker(fleet, tmp_path):
    conf = write(tmp_path / "t.conf", TRAIN_CONF.replace("epochs = 2", "epochs = 3"))
    out = tmp_path / "m.csv"
    proc = subprocess.Popen(
        [sys.executable, "-m", "dqulearn", "train", "--config", conf, "--manager", fleet.address,
         "--metrics", str(out)],
        stderr=subprocess.PIPE, text=True,
    )
    threading.Timer(0.5, kill_worker, args=(fleet, "w1")).start()
    _, err = proc.communicate(timeout=120)
    assert proc.returncode == 0, err
    _, rows = read_csv(out)
    assert len(rows) == 3
    kinds = [e["kind"] for e in fleet.events()]
    assert "evict" in kinds
    assert fleet.registered() == {"w2"}


def test_port_conflict_names_the_port(fleet):
    port = fleet.address.rsplit(":", 1)[1]
    proc = subprocess.run(
        [sys.executable, "-m", "dqulearn", "manager", "--listen", fleet.address],
        capture_output=True, text=True, timeout=30,
    )
    assert proc.returncode == 2
    assert port in proc.stderr
    with pytest.raises(RuntimeError, match=port):
        spawn_fleet([], listen=fleet.address)


def test_duplicate_worker_exits_with_error(fleet):
    proc = subprocess.run(
        [sys.executable, "-m", "dqulearn", "worker", "--id", "w1", "--max-qubits", "5",
         "--manager", fleet.address],
        capture_output=True, text=True, timeout=30,
    )
    assert proc.returncode == 3
    assert "already active" in proc.stderr


# -- experiments -------------------------------------------------------------------

def test_experiment_repetitions(tmp_path):
    write(tmp_path / "c.conf", TRAIN_CONF)
    exp = write(tmp_path / "e.conf", "fleet = w1:10\nrepetitions = 2\nheartbeat_period = 1\n"
                "output = out.csv\nclient.solo = c.conf\n")
    assert main(["experiment", "--config", exp]) == 0
    columns, rows = read_csv(tmp_path / "out.csv")
    assert tuple(columns) == EXPERIMENT_COLUMNS
    per_rep = {}
    for r in rows:
        per_rep.setdefault(r["repetition"], []).append((r["epoch"], r["circuits"]))
    assert per_rep["0"] == per_rep["1"]
    assert [r["seed"] for r in rows] == ["1"] * 3 + ["2"] * 3
    agg = [r for r in rows if r["epoch"] == "all"]
    assert len(agg) == 2


def test_multi_tenant_experiment(tmp_path):
    for q, nl in ((5, 1), (5, 2), (7, 1), (7, 2)):
        text = TRAIN_CONF.replace("epochs = 2", "epochs = 1").replace("bars:8", "bars:4")
        write(tmp_path / f"c{q}{nl}.conf", text + f"qubit_count = {q}\nn_layers = {nl}\n")
    clients = "".join(f"client.q{q}l{nl} = c{q}{nl}.conf\n" for q, nl in ((5, 1), (5, 2), (7, 1), (7, 2)))
    exp = write(tmp_path / "e.conf", "fleet = w1:5, w2:10, w3:15, w4:20\nmode = multi-tenant\n"
                "heartbeat_period = 1\noutput = mt.csv\n" + clients)
    spec = load_experiment(exp)
    rows = run_experiment(spec, workdir=str(tmp_path))
    assert all(r["status"] == "ok" for r in rows)
    assert {r["client"] for r in rows} == {"q5l1", "q5l2", "q7l1", "q7l2"}


def test_failed_client_recorded(tmp_path):
    write(tmp_path / "c.conf", TRAIN_CONF.replace("dataset = synthetic:bars:8", "dataset = missing.csv"))
    exp = write(tmp_path / "e.conf", "fleet = w1:10\nheartbeat_period = 1\noutput = f.csv\nclient.bad = c.conf\n")
    assert main(["experiment", "--config", exp]) == 1
    _, rows = read_csv(tmp_path / "f.csv")
    assert [r["status"] for r in rows] == ["failed"]


def test_shipped_configs_load():
    from pathlib import Path

    from dqulearn.config import load_fleet_config, load_train_config
    from dqulearn.experiment import load_experiment

    root = Path(__file__).parent.parent / "configs"
    cfg, extras = load_train_config(root / "train.conf")
    assert cfg.qubit_count == 5 and extras["dataset"].startswith("synthetic:")
    workers, _ = load_fleet_config(root / "fleet.conf")
    assert [mr for _, mr in workers] == [5, 10, 15, 20]
    spec = load_experiment(root / "experiment.conf")
    assert spec.mode == "multi-tenant" and len(spec.clients) == 4
