"""Start and stop a manager plus workers, in-process (threads) or as child processes."""
from __future__ import annotations

import asyncio
import json
import logging
import os
import signal
import subprocess
import sys
import tempfile
import threading
import time
from dataclasses import dataclass, field

from .comanager import CoManager
from .server import ManagerServer
from .worker import WorkerConfig, WorkerDaemon

logger = logging.getLogger(__name__)


class LocalFleet:
    """Manager and workers on one background event loop; for tests and local runs."""

    def __init__(self, workers, heartbeat_period=5.0, synthetic_delay=0.0,
                 allow_exact_fit=False, parallelism=None, event_log=None, cru_traces=None):
        self.worker_specs = list(workers)
        self.period = heartbeat_period
        self.synthetic_delay = synthetic_delay
        self.parallelism = parallelism
        self.cru_traces = cru_traces or {}
        self.state = CoManager(heartbeat_period=heartbeat_period, allow_exact_fit=allow_exact_fit)
        self.event_log = event_log
        self.loop = asyncio.new_event_loop()
        self.server: ManagerServer | None = None
        self.daemons: dict[str, WorkerDaemon] = {}
        self._tasks: dict[str, asyncio.Task] = {}
        self._thread = threading.Thread(target=self.loop.run_forever, daemon=True)

    def _call(self, coro, timeout=30):
        return asyncio.run_coroutine_threadsafe(coro, self.loop).result(timeout)

    @property
    def address(self) -> str:
        host, port = self.server.address
        return f"{host}:{port}"

    def start(self, wait=True):
        self._thread.start()

        async def boot():
            self.server = ManagerServer(self.state, "127.0.0.1", 0, event_log=self.event_log)
            await self.server.start()

        self._call(boot())
        for wid, mr in self.worker_specs:
            self.add_worker(wid, mr)
        if wait:
            self.wait_registered(len(self.worker_specs))
        return self

    def add_worker(self, wid, mr, **overrides):
        trace = self.cru_traces.get(wid)
        cfg = WorkerConfig(
            wid, mr, self.server.address, self.period,
            cru_mode="scripted" if trace else "measured", cru_trace=trace,
            parallelism=self.parallelism, synthetic_delay=self.synthetic_delay,
            backoff_base=0.05, backoff_cap=0.5, **overrides,
        )

        async def launch():
            daemon = WorkerDaemon(cfg)
            self.daemons[wid] = daemon
            self._tasks[wid] = asyncio.create_task(daemon.run())

        self._call(launch())

    def registry(self) -> dict:
        async def snap():
            return self.state.snapshot()

        return self._call(snap())

    def wait_registered(self, count, timeout=10.0):
        deadline = time.monotonic() + timeout
        while len(self.registry()) < count:
            if time.monotonic() > deadline:
                raise TimeoutError(f"only {len(self.registry())}/{count} workers registered")
            time.sleep(0.01)

    def kill_worker(self, wid):
        """Crash a worker: no more heartbeats or results, connection dropped."""

        async def kill():
            task = self._tasks.pop(wid)
            daemon = self.daemons.pop(wid)
            task.cancel()
            await asyncio.gather(task, return_exceptions=True)
            if daemon._writer is not None:
                daemon._writer.transport.abort()

        self._call(kill())

    def stop(self):
        if not self._thread.is_alive():
            return

        async def shutdown():
            for task in self._tasks.values():
                task.cancel()
            await asyncio.gather(*self._tasks.values(), return_exceptions=True)
            await self.server.stop()

        try:
            self._call(shutdown())
        finally:
            self.loop.call_soon_threadsafe(self.loop.stop)
            self._thread.join(5)

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.stop()


# -- child processes -------------------------------------------------------------


@dataclass
class FleetHandles:
    manager: subprocess.Popen
    address: str
    workers: dict[str, subprocess.Popen] = field(default_factory=dict)
    event_log: str = ""
    closed: bool = False

    def events(self) -> list[dict]:
        with open(self.event_log, encoding="utf-8") as fh:
            return [json.loads(line) for line in fh if line.strip()]

    def registered(self) -> set[str]:
        live = set()
        for e in self.events():
            if e["kind"] == "register":
                live.add(e["worker_id"])
            elif e["kind"] == "evict":
                live.discard(e["evicted"])
        return live


def _python_cmd(*args) -> list[str]:
    return [sys.executable, "-m", "dqulearn", *args]


def spawn_fleet(
    workers,
    heartbeat_period=5.0,
    synthetic_delay=0.0,
    allow_exact_fit=False,
    listen="127.0.0.1:0",
    event_log=None,
    parallelism=None,
    timeout=30.0,
    env=None,
) -> FleetHandles:
    """Launch ``dqulearn manager`` and one ``dqulearn worker`` per (id, MR) pair."""
    if event_log is None:
        fd, event_log = tempfile.mkstemp(prefix="dqulearn-events-", suffix=".jsonl")
        os.close(fd)
    cmd = _python_cmd("manager", "--listen", listen, "--heartbeat-period", str(heartbeat_period),
                      "--event-log", event_log)
    if allow_exact_fit:
        cmd.append("--allow-exact-fit")
    stderr_log = tempfile.TemporaryFile(mode="w+")
    manager = subprocess.Popen(cmd, stdout=subprocess.PIPE, stderr=stderr_log, text=True, env=env)
    line = manager.stdout.readline()
    if not line.startswith("LISTENING "):
        manager.wait(5)
        stderr_log.seek(0)
        err = stderr_log.read().strip().splitlines()
        raise RuntimeError(f"manager failed to start: {err[-1] if err else line.strip()}")
    stderr_log.close()
    address = line.split()[1]
    handles = FleetHandles(manager, address, event_log=event_log)
    try:
        for wid, mr in workers:
            wcmd = _python_cmd("worker", "--id", wid, "--max-qubits", str(mr), "--manager", address,
                               "--period", str(heartbeat_period), "--synthetic-delay", str(synthetic_delay),
                               "--backoff-base", "0.1")
            if parallelism:
                wcmd += ["--parallelism", str(parallelism)]
            handles.workers[wid] = subprocess.Popen(
                wcmd, stdout=subprocess.DEVNULL, stderr=subprocess.DEVNULL, env=env
            )
        deadline = time.monotonic() + timeout
        want = {wid for wid, _ in workers}
        while not want <= handles.registered():
            if time.monotonic() > deadline:
                raise TimeoutError(f"workers {sorted(want - handles.registered())} never registered")
            time.sleep(0.02)
    except BaseException:
        teardown(handles)
        raise
    return handles


def kill_worker(handles: FleetHandles, wid: str):
    proc = handles.workers[wid]
    if proc.poll() is None:
        proc.send_signal(signal.SIGKILL)
        proc.wait(5)


def teardown(handles: FleetHandles):
    """Stop every process in the fleet. Safe to call repeatedly."""
    if handles.closed:
        return
    procs = list(handles.workers.values()) + [handles.manager]
    for p in procs:
        if p.poll() is None:
            p.terminate()
    for p in procs:
        try:
            p.wait(3)
        except subprocess.TimeoutExpired:
            p.kill()
            p.wait(3)
    if handles.manager.stdout:
        handles.manager.stdout.close()
    handles.closed = True
