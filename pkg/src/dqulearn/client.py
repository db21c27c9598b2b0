"""Submit circuits to the co-manager and collect their fidelities."""
from __future__ import annotations

import asyncio
import logging

from . import protocol as proto
from .circuit import serialize
from .errors import JobError, TransportError

logger = logging.getLogger(__name__)

# worker-side failures worth another attempt
RETRYABLE = frozenset({"execution_failed", "capacity_violation", "failed"})


def parse_address(address) -> tuple[str, int]:
    if isinstance(address, tuple):
        return address[0], int(address[1])
    host, _, port = str(address).rpartition(":")
    if not host or not port.isdigit():
        raise ValueError(f"expected host:port, got {address!r}")
    return host, int(port)


class ManagerClient:
    """Executor that routes circuits through a co-manager over TCP.

    Up to ``in_flight`` submissions are outstanding at once; they are issued
    in input order and complete in any order.
    """

    def __init__(self, address, client_id: str = "client", in_flight: int = 32, retries: int = 2,
                 connect_timeout: float = 10.0):
        self.address = parse_address(address)
        self.client_id = client_id
        self.in_flight = in_flight
        self.retries = retries
        self.connect_timeout = connect_timeout
        self.duplicates = 0
        self.cached = 0
        self.submitted = 0

    def execute(self, circuits, shots=None, seeds=None) -> dict[str, float]:
        return asyncio.run(self.execute_async(circuits, shots, seeds))

    async def execute_async(self, circuits, shots=None, seeds=None) -> dict[str, float]:
        try:
            reader, writer = await asyncio.wait_for(
                asyncio.open_connection(*self.address), self.connect_timeout
            )
        except (OSError, asyncio.TimeoutError) as exc:
            raise TransportError(f"manager at {self.address[0]}:{self.address[1]} unreachable: {exc}") from None
        loop = asyncio.get_running_loop()
        pending: dict[int, asyncio.Future] = {}
        window = asyncio.Semaphore(self.in_flight)
        corr = 0
        results: dict[str, float] = {}

        async def read_loop():
            decoder, queue = proto.FrameDecoder(), []
            try:
                while True:
                    msg = await proto.read_message(reader, decoder, queue)
                    if msg is None:
                        break
                    if msg.type == "SUBMIT_ACK":
                        continue
                    fut = pending.pop(msg.correlation_id, None)
                    if fut is None:
                        if msg.type == "JOB_RESULT":
                            self.duplicates += 1
                        continue
                    if not fut.done():
                        fut.set_result(msg)
            except (ConnectionError, proto.ProtocolError) as exc:
                logger.warning("manager connection failed: %s", exc)
            err = TransportError("manager closed the connection")
            for fut in pending.values():
                if not fut.done():
                    fut.set_exception(err)
            pending.clear()

        async def submit(i, circuit):
            nonlocal corr
            body = {"client_id": self.client_id, "circuit": proto.pack_circuit(serialize(circuit))}
            if shots is not None:
                body["shots"] = int(shots)
                body["seed"] = int(seeds[i]) if seeds else 0
            async with window:
                for attempt in range(self.retries + 1):
                    if reader_task.done():
                        raise TransportError("manager closed the connection")
                    corr += 1
                    fut = loop.create_future()
                    pending[corr] = fut
                    writer.write(proto.encode(proto.Message("SUBMIT", corr, body)))
                    self.submitted += 1
                    msg = await fut
                    if msg.type == "JOB_RESULT":
                        if circuit.circuit_id in results:
                            self.duplicates += 1
                        results[circuit.circuit_id] = msg["fidelity"]
                        self.cached += msg["cached"]
                        return
                    code = msg["code"] if msg.type == "ERROR" else msg.type
                    if code not in RETRYABLE or attempt == self.retries:
                        raise JobError(f"{circuit.circuit_id}: {code}: {msg.get('detail', '')}")
                    logger.info("retrying %s after %s", circuit.circuit_id, code)

        reader_task = asyncio.create_task(read_loop())
        tasks = [asyncio.create_task(submit(i, c)) for i, c in enumerate(circuits)]
        try:
            await asyncio.gather(*tasks)
        except BaseException:
            for t in tasks:
                t.cancel()
            await asyncio.gather(*tasks, return_exceptions=True)
            raise
        finally:
            writer.close()
            reader_task.cancel()
            await asyncio.gather(reader_task, return_exceptions=True)
        return results
