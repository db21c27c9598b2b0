"""Logical circuits: feature encoding, variational layers, SWAP-test assembly.

Register layout for a circuit of ``qubit_count = 1 + 2m`` qubits: the ancilla
is qubit 0, the data register is qubits ``1..m`` and the model register is
qubits ``m+1..2m``.

Wire format (version 1), used as the ASSIGN/SUBMIT payload::

    byte 0        format version, 0x01
    then records  4-byte big-endian length L, followed by L bytes of UTF-8
                  text "key=value"

Records appear in this fixed order: ``id``, ``demand``, ``ancilla``,
``gates=<count>``, one ``gate=<KIND>;<t0>,<t1>,...;<angle>`` per gate (angle
``-`` when absent, otherwise the shortest round-tripping decimal),
``params=<count>``, one ``param=<gate position>`` per trainable parameter.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass, replace
from functools import cached_property
from typing import NamedTuple

import numpy as np

from .errors import ArgumentError, DecodeError, GateIndexError, LayoutError, RangeError, ShapeError
from .gates import ARITY, PARAMETRIC
from .statevector import Gate, pack_gates

FORMAT_VERSION = 1
HALF_PI = math.pi / 2
# tolerance on the [0, pi] encoding range for values produced by float arithmetic
_ANGLE_SLACK = 1e-12


@dataclass(frozen=True)
class LayerSpec:
    n_layers: int
    qubit_count: int

    def __post_init__(self):
        if self.n_layers not in (1, 2, 3):
            raise ArgumentError(f"n_layers must be 1, 2 or 3, got {self.n_layers}")
        if self.qubit_count < 3 or self.qubit_count % 2 == 0:
            raise ArgumentError(f"qubit_count must be odd and >= 3, got {self.qubit_count}")

    @property
    def n_data_qubits(self) -> int:
        return (self.qubit_count - 1) // 2

    @property
    def n_model_qubits(self) -> int:
        return self.n_data_qubits

    @property
    def ancilla(self) -> int:
        return 0

    @property
    def data_register(self) -> list[int]:
        return list(range(1, 1 + self.n_data_qubits))

    @property
    def model_register(self) -> list[int]:
        m = self.n_data_qubits
        return list(range(1 + m, 1 + 2 * m))


def param_count(spec: LayerSpec) -> int:
    m = spec.n_model_qubits
    count = 2 * m
    if spec.n_layers >= 2:
        count += 2 * (m - 1)
    if spec.n_layers == 3:
        count += 2 * (m - 1)
    return count


class LayerGates(NamedTuple):
    gates: list[Gate]
    param_positions: list[int]


@dataclass(frozen=True)
class LogicalCircuit:
    circuit_id: str
    qubit_demand: int
    gates: tuple[Gate, ...]
    param_positions: tuple[int, ...]
    ancilla_index: int = 0

    def __post_init__(self):
        object.__setattr__(self, "gates", tuple(self.gates))
        object.__setattr__(self, "param_positions", tuple(int(p) for p in self.param_positions))
        for g in self.gates:
            if max(g.targets) >= self.qubit_demand:
                raise LayoutError(f"gate {g} exceeds qubit demand {self.qubit_demand}")
        if not 0 <= self.ancilla_index < self.qubit_demand:
            raise LayoutError(f"ancilla {self.ancilla_index} outside the register")
        if len(set(self.param_positions)) != len(self.param_positions):
            raise LayoutError("parameter bindings must reference distinct gates")
        for p in self.param_positions:
            if not 0 <= p < len(self.gates) or self.gates[p].kind not in PARAMETRIC:
                raise LayoutError(f"parameter binding {p} is not a rotation gate")

    @property
    def n_params(self) -> int:
        return len(self.param_positions)

    @property
    def param_values(self) -> list[float]:
        return [self.gates[p].angle for p in self.param_positions]

    @cached_property
    def packed(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        return pack_gates(self.gates)


def encode_features(angles, target_register) -> list[Gate]:
    """Two features per qubit: RY(angles[2k]) then RZ(angles[2k+1]) on qubit k."""
    angles = [float(a) for a in angles]
    if len(angles) != 2 * len(target_register):
        raise ShapeError(
            f"{len(angles)} angles for {len(target_register)} qubits; need two per qubit"
        )
    for a in angles:
        if not (-_ANGLE_SLACK <= a <= math.pi + _ANGLE_SLACK):
            raise RangeError(f"encoding angle {a} outside [0, pi]")
    gates = []
    for k, q in enumerate(target_register):
        gates.append(Gate("RY", (q,), angles[2 * k]))
        gates.append(Gate("RZ", (q,), angles[2 * k + 1]))
    return gates


def build_layers(spec: LayerSpec, params) -> LayerGates:
    params = [float(p) for p in params]
    if len(params) != param_count(spec):
        raise ShapeError(f"expected {param_count(spec)} parameters, got {len(params)}")
    model = spec.model_register
    pairs = list(zip(model[:-1], model[1:]))
    it = iter(params)
    gates = []
    for q in model:
        gates.append(Gate("RY", (q,), next(it)))
        gates.append(Gate("RZ", (q,), next(it)))
    if spec.n_layers >= 2:
        for a, b in pairs:
            gates.append(Gate("RYY", (a, b), next(it)))
            gates.append(Gate("RZZ", (a, b), next(it)))
    if spec.n_layers == 3:
        for a, b in pairs:
            gates.append(Gate("CRY", (a, b), next(it)))
            gates.append(Gate("CRZ", (a, b), next(it)))
    return LayerGates(gates, list(range(len(gates))))


def assemble_swap_circuit(
    encoding, layers: LayerGates, spec: LayerSpec, circuit_id: str = "circuit"
) -> LogicalCircuit:
    data, model = set(spec.data_register), set(spec.model_register)
    for g in encoding:
        if not set(g.targets) <= data:
            raise LayoutError(f"encoding gate {g} leaves the data register")
    for g in layers.gates:
        if not set(g.targets) <= model:
            raise LayoutError(f"layer gate {g} leaves the model register")
    anc = spec.ancilla
    scaffold = [Gate("H", (anc,))]
    scaffold += [
        Gate("CSWAP", (anc, d, m)) for d, m in zip(spec.data_register, spec.model_register)
    ]
    scaffold.append(Gate("H", (anc,)))
    offset = len(encoding)
    return LogicalCircuit(
        circuit_id=circuit_id,
        qubit_demand=spec.qubit_count,
        gates=tuple(encoding) + tuple(layers.gates) + tuple(scaffold),
        param_positions=tuple(offset + p for p in layers.param_positions),
        ancilla_index=anc,
    )


def shift_gate(circuit: LogicalCircuit, position: int, delta: float, new_id: str) -> LogicalCircuit:
    gates = list(circuit.gates)
    g = gates[position]
    if g.kind not in PARAMETRIC:
        raise ArgumentError(f"gate {position} ({g.kind}) has no angle")
    gates[position] = g.with_angle(g.angle + delta)
    return replace(circuit, circuit_id=new_id, gates=tuple(gates))


def shift_parameter(
    circuit: LogicalCircuit, param_index: int, delta: float, tag: str | None = None
) -> LogicalCircuit:
    """Copy of ``circuit`` with one bound angle moved by ``delta``.

    The new id is ``<id>|<tag><param_index>``; ``tag`` defaults to ``fwd`` for
    positive and ``bck`` for negative shifts.
    """
    if not 0 <= param_index < circuit.n_params:
        raise GateIndexError(
            f"parameter {param_index} out of range ({circuit.n_params} bound)"
        )
    if tag is None:
        tag = "fwd" if delta > 0 else "bck"
    return shift_gate(
        circuit,
        circuit.param_positions[param_index],
        delta,
        f"{circuit.circuit_id}|{tag}{param_index}",
    )


# -- serialization -----------------------------------------------------------

_LEN = struct.Struct(">I")


def _record(text: str) -> bytes:
    data = text.encode("utf-8")
    return _LEN.pack(len(data)) + data


def serialize(circuit: LogicalCircuit) -> bytes:
    parts = [bytes([FORMAT_VERSION])]
    parts.append(_record(f"id={circuit.circuit_id}"))
    parts.append(_record(f"demand={circuit.qubit_demand}"))
    parts.append(_record(f"ancilla={circuit.ancilla_index}"))
    parts.append(_record(f"gates={len(circuit.gates)}"))
    for g in circuit.gates:
        angle = "-" if g.angle is None else repr(g.angle)
        parts.append(_record(f"gate={g.kind};{','.join(map(str, g.targets))};{angle}"))
    parts.append(_record(f"params={circuit.n_params}"))
    for p in circuit.param_positions:
        parts.append(_record(f"param={p}"))
    return b"".join(parts)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def record(self, key: str) -> str:
        start = self.pos
        if start + 4 > len(self.data):
            raise DecodeError(f"truncated length prefix for {key!r}", start)
        (length,) = _LEN.unpack_from(self.data, start)
        end = start + 4 + length
        if end > len(self.data):
            raise DecodeError(f"record {key!r} truncated", start)
        try:
            text = self.data[start + 4 : end].decode("utf-8")
        except UnicodeDecodeError:
            raise DecodeError("record is not UTF-8", start) from None
        name, sep, value = text.partition("=")
        if not sep or name != key:
            raise DecodeError(f"expected record {key!r}, found {text[:32]!r}", start)
        self.pos = end
        return value

    def integer(self, key: str) -> int:
        start = self.pos
        value = self.record(key)
        if not value.isascii() or not value.isdigit() or str(int(value)) != value:
            raise DecodeError(f"{key} is not a canonical non-negative integer", start)
        return int(value)


def _parse_gate(text: str, offset: int) -> Gate:
    fields = text.split(";")
    if len(fields) != 3 or fields[0] not in ARITY:
        raise DecodeError(f"bad gate record {text[:40]!r}", offset)
    kind, targets, angle = fields
    try:
        tg = tuple(int(t) for t in targets.split(","))
        value = None if angle == "-" else float(angle)
        gate = Gate(kind, tg, value)
    except (ValueError, IndexError) as exc:
        raise DecodeError(f"bad gate record: {exc}", offset) from None
    if value is not None and repr(value) != angle or ",".join(map(str, tg)) != targets:
        raise DecodeError("gate record is not in canonical form", offset)
    return gate


def _open(data: bytes) -> _Reader:
    if not data:
        raise DecodeError("empty input", 0)
    if data[0] != FORMAT_VERSION:
        raise DecodeError(f"unsupported circuit format version {data[0]}", 0)
    r = _Reader(data)
    r.pos = 1
    return r


def read_header(data: bytes) -> tuple[str, int]:
    """(circuit_id, qubit_demand) without decoding the gate list."""
    r = _open(bytes(data))
    return r.record("id"), r.integer("demand")


def deserialize(data: bytes) -> LogicalCircuit:
    data = bytes(data)
    r = _open(data)
    circuit_id = r.record("id")
    demand = r.integer("demand")
    ancilla = r.integer("ancilla")
    gates = []
    for _ in range(r.integer("gates")):
        start = r.pos
        gates.append(_parse_gate(r.record("gate"), start))
    positions = [r.integer("param") for _ in range(r.integer("params"))]
    if r.pos != len(data):
        raise DecodeError("trailing bytes after circuit", r.pos)
    try:
        return LogicalCircuit(circuit_id, demand, tuple(gates), tuple(positions), ancilla)
    except (LayoutError, GateIndexError) as exc:
        raise DecodeError(f"inconsistent circuit: {exc}", len(data)) from None


def execute(circuit: LogicalCircuit, shots: int | None = None, seed: int | None = None) -> float:
    """Run ``circuit`` from |0...0> (identity qubit layout) and return P(ancilla = 0)."""
    from . import kernels
    from .statevector import MAX_QUBITS, sample_prob

    if not 1 <= circuit.qubit_demand <= MAX_QUBITS:
        raise ArgumentError(f"qubit demand {circuit.qubit_demand} outside [1, {MAX_QUBITS}]")
    codes, targets, angles = circuit.packed
    state = kernels.run_circuit(circuit.qubit_demand, codes, targets, angles)
    p0 = min(1.0, max(0.0, kernels.prob_zero(state, circuit.ancilla_index)))
    return p0 if shots is None else sample_prob(p0, shots, seed)
