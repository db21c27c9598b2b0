"""Quantum worker daemon: registration, heartbeats and circuit execution."""
from __future__ import annotations

import asyncio
import bisect
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

from . import protocol as proto
from .circuit import LogicalCircuit, deserialize, execute
from .errors import ArgumentError, ConfigError, DecodeError, ExecutionError

logger = logging.getLogger(__name__)


class FatalStartupError(RuntimeError):
    pass


@dataclass
class WorkerConfig:
    worker_id: str
    max_qubits: int
    manager: tuple[str, int] = ("127.0.0.1", 5555)
    heartbeat_period: float = 5.0
    cru_mode: str = "measured"
    cru_trace: list | None = None
    parallelism: int | None = None  # None: as many as the qubit budget admits
    synthetic_delay: float = 0.0
    backoff_base: float = 1.0
    backoff_cap: float = 30.0
    virtual_time: bool = False  # stamp messages with scripted time instead of wall time

    def __post_init__(self):
        if self.max_qubits < 1:
            raise ConfigError("max_qubits must be >= 1")
        if self.cru_mode not in ("measured", "scripted"):
            raise ConfigError(f"unknown cru mode {self.cru_mode!r}")
        if self.cru_mode == "scripted" and not self.cru_trace:
            raise ConfigError("scripted CRU mode needs a trace")
        if self.parallelism is not None and self.parallelism < 1:
            raise ConfigError("parallelism must be >= 1")


def read_cru_trace(path) -> list[tuple[float, float]]:
    """``time,value`` per line; ``#`` starts a comment."""
    trace = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.split("#", 1)[0].strip()
            if line:
                t, v = line.split(",")
                trace.append((float(t), float(v)))
    return sorted(trace)


class CruMeter:
    """Classical resource usage in [0, 1].

    Measured mode keeps an exponentially weighted average (half-life one
    heartbeat period) of this process's CPU-busy fraction. Scripted mode
    returns the trace value in force at ``now`` (step interpolation).
    """

    def __init__(self, mode="measured", trace=None, period=5.0, cpu_time=time.process_time, wall=time.monotonic):
        self.mode = mode
        self.trace = sorted(trace or [])
        self.period = period
        self._cpu, self._wall = cpu_time, wall
        self._last_cpu, self._last_wall = cpu_time(), wall()
        self.value = 0.0
        self.stale = False

    def scripted(self, now: float) -> float:
        times = [t for t, _ in self.trace]
        i = bisect.bisect_right(times, now) - 1
        return self.trace[max(i, 0)][1]

    def measure(self, now: float | None = None) -> float:
        if self.mode == "scripted":
            return self.scripted(0.0 if now is None else now)
        try:
            cpu, wall = self._cpu(), self._wall()
        except OSError:
            self.stale = True
            return self.value
        dt = wall - self._last_wall
        if dt <= 0:
            return self.value
        busy = min(1.0, max(0.0, (cpu - self._last_cpu) / dt))
        weight = 1.0 - math.pow(0.5, dt / self.period)
        self.value += weight * (busy - self.value)
        self._last_cpu, self._last_wall = cpu, wall
        self.stale = False
        return self.value


def run_assigned(circuit: LogicalCircuit, max_qubits: int, shots=None, seed=None) -> float:
    """Execute and measure one decoded circuit on this worker (identity qubit layout)."""
    if circuit.qubit_demand > max_qubits:
        raise ExecutionError(
            "capacity_violation",
            f"{circuit.circuit_id} needs {circuit.qubit_demand} qubits, worker has {max_qubits}",
        )
    try:
        return execute(circuit, shots, seed)
    except ArgumentError as exc:
        raise ExecutionError("execution_failed", str(exc)) from None


def execute_assignment(circuit_bytes: bytes, max_qubits: int, shots=None, seed=None) -> tuple[str, float]:
    """Load, execute and measure one serialized circuit."""
    try:
        circuit = deserialize(circuit_bytes)
    except DecodeError as exc:
        raise ExecutionError("malformed_circuit", str(exc)) from None
    return circuit.circuit_id, run_assigned(circuit, max_qubits, shots, seed)


class WorkerDaemon:
    def __init__(self, config: WorkerConfig, clock=None):
        self.config = config
        self.clock = clock or time.monotonic
        self._t0 = self.clock()
        self.cru = CruMeter(config.cru_mode, config.cru_trace, config.heartbeat_period)
        self.active: dict[str, int] = {}  # circuit id -> demand; mutated on the loop thread only
        self.executed = 0
        self.failures = 0
        limit = config.parallelism or config.max_qubits
        self._pool = ThreadPoolExecutor(max_workers=limit, thread_name_prefix=config.worker_id)
        self._slots = asyncio.Semaphore(limit)
        self._writer: asyncio.StreamWriter | None = None
        self._corr = 0
        self._registered = asyncio.Event()
        self._stopping = False

    def now(self) -> float:
        return self.clock() - self._t0

    def _next_corr(self) -> int:
        self._corr += 1
        return self._corr

    def _send(self, msg: proto.Message) -> bool:
        if self._writer is None or self._writer.is_closing():
            return False
        try:
            self._writer.write(proto.encode(msg))
            return True
        except (ConnectionError, RuntimeError) as exc:
            logger.warning("send failed: %s", exc)
            return False

    def _stamp(self, body: dict) -> dict:
        if self.config.virtual_time:
            body["at"] = float(self.now())
        return body

    def heartbeat_message(self) -> proto.Message:
        active = [[cid, d] for cid, d in self.active.items()]
        body = {"worker_id": self.config.worker_id, "active": active, "cru": self.cru.measure(self.now())}
        return proto.Message("HEARTBEAT", self._next_corr(), self._stamp(body))

    def heartbeat_tick(self) -> bool:
        ok = self._send(self.heartbeat_message())
        if not ok:
            logger.warning("heartbeat from %s not sent", self.config.worker_id)
        return ok

    async def _connect_and_register(self, first: bool):
        cfg = self.config
        delay = cfg.backoff_base
        while True:
            try:
                reader, writer = await asyncio.open_connection(*cfg.manager)
            except OSError as exc:
                logger.info("manager unreachable (%s); retrying in %.1fs", exc, delay)
                await asyncio.sleep(delay)
                delay = min(cfg.backoff_cap, delay * 2)
                continue
            self._writer = writer
            body = {"worker_id": cfg.worker_id, "mr": cfg.max_qubits, "cru": self.cru.measure(self.now())}
            self._send(proto.Message("REGISTER", self._next_corr(), self._stamp(body)))
            decoder, pending = proto.FrameDecoder(), []
            try:
                reply = await proto.read_message(reader, decoder, pending)
            except (ConnectionError, proto.ProtocolError):
                reply = None
            if reply is not None and reply.type == "REGISTER_ACK":
                logger.info("%s registered (MR=%d)", cfg.worker_id, cfg.max_qubits)
                return reader, decoder, pending
            writer.close()
            self._writer = None
            if reply is not None and reply.type == "ERROR" and reply["code"] == "conflict":
                if first:
                    raise FatalStartupError(reply["detail"])
                # still listed from an earlier session; wait for eviction
            await asyncio.sleep(delay)
            delay = min(cfg.backoff_cap, delay * 2)

    async def _heartbeats(self):
        while True:
            await asyncio.sleep(self.config.heartbeat_period)
            self.heartbeat_tick()

    async def _run_circuit(self, corr: int, msg: proto.Message, circuit, error):
        cid = circuit.circuit_id if circuit is not None else ""
        try:
            if error is not None:
                raise error
            async with self._slots:
                loop = asyncio.get_running_loop()
                fidelity = await loop.run_in_executor(
                    self._pool,
                    run_assigned,
                    circuit,
                    self.config.max_qubits,
                    msg.get("shots"),
                    msg.get("seed"),
                )
                if self.config.synthetic_delay > 0:
                    await asyncio.sleep(self.config.synthetic_delay)
            self.executed += 1
            self._send(proto.Message("RESULT", corr, {"circuit_id": cid, "fidelity": fidelity}))
        except ExecutionError as exc:
            self.failures += 1
            body = {"code": exc.code, "detail": str(exc)}
            if cid:
                body["circuit_id"] = cid
            self._send(proto.Message("ERROR", corr, body))
        finally:
            self.active.pop(cid, None)

    def _on_assign(self, msg: proto.Message):
        circuit, error = None, None
        try:
            circuit = deserialize(proto.unpack_circuit(msg["circuit"]))
            self.active[circuit.circuit_id] = circuit.qubit_demand
        except (DecodeError, proto.FrameError) as exc:
            error = ExecutionError("malformed_circuit", str(exc))
        asyncio.create_task(self._run_circuit(msg.correlation_id, msg, circuit, error))

    async def run(self):
        first = True
        hb = None
        try:
            while not self._stopping:
                reader, decoder, pending = await self._connect_and_register(first)
                first = False
                self._registered.set()
                hb = asyncio.create_task(self._heartbeats())
                try:
                    while True:
                        try:
                            msg = await proto.read_message(reader, decoder, pending)
                        except proto.ProtocolError as exc:
                            logger.error("protocol error from manager: %s", exc)
                            break
                        if msg is None:
                            break
                        if msg.type == "ASSIGN":
                            self._on_assign(msg)
                        elif msg.type == "ERROR" and msg["code"] == "unknown_worker":
                            logger.warning("manager no longer lists %s; re-registering", self.config.worker_id)
                            break
                except ConnectionError:
                    pass
                finally:
                    hb.cancel()
                    self._registered.clear()
                    if self._writer is not None:
                        self._writer.close()
                        self._writer = None
                logger.warning("%s lost the manager connection", self.config.worker_id)
        finally:
            self._pool.shutdown(wait=False, cancel_futures=True)

    def stop(self):
        self._stopping = True
        if self._writer is not None:
            self._writer.close()
