"""asyncio TCP front end for :class:`~dqulearn.comanager.CoManager`.

All registry mutations happen on the event loop thread, which is the single
owner of the manager state.
"""
from __future__ import annotations

import asyncio
import json
import logging

from . import protocol as proto
from .circuit import read_header
from .clock import MonotonicClock, VirtualClock
from .comanager import QUEUED, Cached, CoManager
from .errors import ArgumentError, ConflictError, DecodeError, DuplicateInFlightError

logger = logging.getLogger(__name__)


class _Peer:
    def __init__(self, writer: asyncio.StreamWriter):
        self.writer = writer
        self.worker_id: str | None = None
        self.assigned: dict[int, str] = {}  # ASSIGN correlation id -> circuit id
        self._corr = 0
        self.closed = False

    def next_corr(self) -> int:
        self._corr += 1
        return self._corr

    def send(self, msg: proto.Message):
        if self.closed:
            return
        try:
            self.writer.write(proto.encode(msg))
        except (ConnectionError, RuntimeError) as exc:
            logger.debug("send failed: %s", exc)
            self.closed = True


class ManagerServer:
    def __init__(
        self,
        state: CoManager,
        host: str = "127.0.0.1",
        port: int = 0,
        virtual_clock: bool = False,
        event_log: str | None = None,
    ):
        self.state = state
        self.host, self.port = host, port
        self.clock = VirtualClock() if virtual_clock else MonotonicClock()
        self.virtual = virtual_clock
        self.workers: dict[str, _Peer] = {}
        self.held: dict[str, list] = {}
        self._server: asyncio.AbstractServer | None = None
        self._ticker: asyncio.Task | None = None
        self._log = open(event_log, "a", encoding="utf-8") if event_log else None
        if self._log:
            state.event_sink = self._write_event

    def _write_event(self, event: dict):
        self._log.write(json.dumps(event, sort_keys=True) + "\n")
        self._log.flush()

    @property
    def address(self) -> tuple[str, int]:
        sock = self._server.sockets[0]
        return sock.getsockname()[:2]

    async def start(self):
        self._server = await asyncio.start_server(self._handle, self.host, self.port)
        if not self.virtual:
            self._ticker = asyncio.create_task(self._tick())
        logger.info("manager listening on %s:%s", *self.address)

    async def stop(self):
        if self._ticker:
            self._ticker.cancel()
        if self._server:
            self._server.close()
            for peer in list(self.workers.values()):
                peer.writer.close()
            await self._server.wait_closed()
        if self._log:
            self._log.close()
            self._log = None

    async def _tick(self):
        interval = min(1.0, self.state.period / 4)
        while True:
            await asyncio.sleep(interval)
            self._detect()

    def _detect(self):
        evicted = self.state.detect_failures(self.clock.now())
        for wid in evicted:
            logger.warning("worker %s evicted after missing three heartbeats", wid)
            peer = self.workers.pop(wid, None)
            if peer is not None:
                peer.worker_id = None
        self._flush()

    def _observe(self, msg: proto.Message):
        if self.virtual and "at" in msg.body:
            self.clock.advance_to(msg["at"])
            self._detect()

    def _flush(self):
        for placement in self.state.pop_outbox():
            st = self.state.circuits.get(placement.circuit_id)
            if st is None:
                continue
            peer = self.workers.get(placement.worker_id)
            if peer is None:
                self.held.setdefault(placement.worker_id, []).append(placement.circuit_id)
                continue
            self._send_assign(peer, st)

    def _send_assign(self, peer: _Peer, st):
        text, shots, seed = st.payload
        corr = peer.next_corr()
        peer.assigned[corr] = st.circuit_id
        body = {"circuit": text}
        if shots is not None:
            body["shots"] = shots
            body["seed"] = seed
        peer.send(proto.Message("ASSIGN", corr, body))

    async def _handle(self, reader, writer):
        peer = _Peer(writer)
        decoder = proto.FrameDecoder()
        queue: list = []
        try:
            while True:
                try:
                    msg = await proto.read_message(reader, decoder, queue)
                except proto.ProtocolError as exc:
                    logger.warning("closing connection after protocol error: %s", exc)
                    peer.send(proto.Message("ERROR", 0, {"code": "protocol", "detail": str(exc)}))
                    break
                if msg is None:
                    break
                self._dispatch(peer, msg)
                await writer.drain()
        except (ConnectionError, asyncio.IncompleteReadError):
            pass
        finally:
            peer.closed = True
            if peer.worker_id and self.workers.get(peer.worker_id) is peer:
                del self.workers[peer.worker_id]
                self.state.disconnect(peer.worker_id, self.clock.now())
            writer.close()

    def _dispatch(self, peer: _Peer, msg: proto.Message):
        handler = getattr(self, f"_on_{msg.type.lower()}", None)
        if handler is None:
            peer.send(
                proto.Message(
                    "ERROR", msg.correlation_id, {"code": "unexpected", "detail": msg.type}
                )
            )
            return
        handler(peer, msg)
        self._flush()

    # -- worker side -----------------------------------------------------------

    def _on_register(self, peer, msg):
        self._observe(msg)
        wid = msg["worker_id"]
        try:
            self.state.register_worker(wid, msg["mr"], msg["cru"], self.clock.now())
        except (ConflictError, ArgumentError) as exc:
            code = "conflict" if isinstance(exc, ConflictError) else "bad_request"
            peer.send(proto.Message("ERROR", msg.correlation_id, {"code": code, "detail": str(exc)}))
            return
        peer.worker_id = wid
        self.workers[wid] = peer
        peer.send(
            proto.Message(
                "REGISTER_ACK",
                msg.correlation_id,
                {"worker_id": wid, "heartbeat_period": self.state.period},
            )
        )
        for cid in self.held.pop(wid, []):
            st = self.state.circuits.get(cid)
            if st is not None and st.worker_id == wid:
                self._send_assign(peer, st)

    def _on_heartbeat(self, peer, msg):
        self._observe(msg)
        wid = msg["worker_id"]
        if self.workers.get(wid) is peer:
            self.state.on_heartbeat(wid, msg["active"], msg["cru"], self.clock.now())
            return
        if wid not in self.state.workers:
            # logs the zombie heartbeat without touching any ledger
            self.state.on_heartbeat(wid, msg["active"], msg["cru"], self.clock.now())
        peer.send(
            proto.Message(
                "ERROR",
                msg.correlation_id,
                {"code": "unknown_worker", "detail": f"{wid} is not registered on this connection"},
            )
        )

    def _on_result(self, peer, msg):
        cid = msg["circuit_id"]
        peer.assigned.pop(msg.correlation_id, None)
        if peer.worker_id is None:
            logger.info("result for %s from unregistered connection dropped", cid)
            return
        st = self.state.complete(cid, peer.worker_id, msg["fidelity"], self.clock.now())
        if st is not None:
            client, corr = st.client_id
            client.send(
                proto.Message(
                    "JOB_RESULT", corr, {"circuit_id": cid, "fidelity": msg["fidelity"], "cached": False}
                )
            )

    def _on_error(self, peer, msg):
        cid = peer.assigned.pop(msg.correlation_id, None) or msg.get("circuit_id")
        if peer.worker_id is None or cid is None:
            logger.warning("error from peer: %s %s", msg["code"], msg["detail"])
            return
        st = self.state.fail(cid, peer.worker_id, self.clock.now(), msg["code"])
        if st is not None:
            client, corr = st.client_id
            client.send(
                proto.Message(
                    "ERROR",
                    corr,
                    {"code": msg["code"], "detail": msg["detail"], "circuit_id": cid},
                )
            )

    # -- client side -----------------------------------------------------------

    def _on_submit(self, peer, msg):
        corr = msg.correlation_id
        # only the header is needed for placement; workers validate the gate list
        try:
            cid, demand = read_header(proto.unpack_circuit(msg["circuit"]))
        except (DecodeError, proto.FrameError) as exc:
            peer.send(proto.Message("ERROR", corr, {"code": "malformed_circuit", "detail": str(exc)}))
            return
        payload = (msg["circuit"], msg.get("shots"), msg.get("seed", 0))
        try:
            outcome = self.state.assign(
                cid, demand, self.clock.now(), client_id=(peer, corr), payload=payload
            )
        except DuplicateInFlightError as exc:
            peer.send(
                proto.Message(
                    "ERROR", corr, {"code": "duplicate_in_flight", "detail": str(exc), "circuit_id": cid}
                )
            )
            return
        if isinstance(outcome, Cached):
            peer.send(
                proto.Message(
                    "JOB_RESULT", corr, {"circuit_id": cid, "fidelity": outcome.fidelity, "cached": True}
                )
            )
            return
        status = "queued" if outcome == QUEUED else "assigned"
        peer.send(proto.Message("SUBMIT_ACK", corr, {"circuit_id": cid, "status": status}))


async def serve(state: CoManager, host, port, virtual_clock=False, event_log=None, ready=None):
    server = ManagerServer(state, host, port, virtual_clock, event_log)
    try:
        await server.start()
    except OSError as exc:
        raise OSError(exc.errno, f"cannot listen on port {port}: {exc.strerror}") from None
    if ready is not None:
        ready(server)
    try:
        await asyncio.Event().wait()
    finally:
        await server.stop()
