"""Dense statevector simulation of the training gate set and the SWAP test."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import ArgumentError, CapacityError, GateIndexError, ShapeError
from .gates import ARITY, GATE_CODES, PARAMETRIC

MAX_QUBITS = 24


@dataclass(frozen=True)
class Gate:
    kind: str
    targets: tuple[int, ...]
    angle: float | None = None

    def __post_init__(self):
        if self.kind not in ARITY:
            raise ArgumentError(f"unknown gate kind {self.kind!r}")
        targets = tuple(int(t) for t in self.targets)
        object.__setattr__(self, "targets", targets)
        if len(targets) != ARITY[self.kind]:
            raise GateIndexError(
                f"{self.kind} takes {ARITY[self.kind]} targets, got {len(targets)}"
            )
        if len(set(targets)) != len(targets) or min(targets) < 0:
            raise GateIndexError(f"invalid targets {targets} for {self.kind}")
        if self.kind in PARAMETRIC:
            if self.angle is None or not math.isfinite(self.angle):
                raise ArgumentError(f"{self.kind} needs a finite angle")
            object.__setattr__(self, "angle", float(self.angle))
        elif self.angle is not None:
            raise ArgumentError(f"{self.kind} takes no angle")

    def with_angle(self, angle: float) -> Gate:
        return Gate(self.kind, self.targets, angle)


@dataclass(frozen=True, eq=False)
class StateVector:
    """Immutable amplitude vector; qubit 0 is the least significant index bit."""

    n_qubits: int
    amplitudes: np.ndarray = field(repr=False)

    def __post_init__(self):
        amps = np.array(self.amplitudes, dtype=complex)
        if amps.shape != (1 << self.n_qubits,):
            raise ShapeError(
                f"expected {1 << self.n_qubits} amplitudes, got shape {amps.shape}"
            )
        amps.flags.writeable = False
        object.__setattr__(self, "amplitudes", amps)

    @classmethod
    def from_amplitudes(cls, amplitudes) -> StateVector:
        amps = np.asarray(amplitudes, dtype=complex)
        n = amps.size.bit_length() - 1
        if n < 1 or amps.size != 1 << n:
            raise ShapeError(f"amplitude count {amps.size} is not a power of two")
        return cls(n, amps)

    def norm(self) -> float:
        return float(np.linalg.norm(self.amplitudes))


def new_state(n_qubits: int, max_qubits: int = MAX_QUBITS) -> StateVector:
    if not 1 <= n_qubits <= max_qubits:
        raise CapacityError(f"n_qubits must be in [1, {max_qubits}], got {n_qubits}")
    amps = np.zeros(1 << n_qubits, dtype=complex)
    amps[0] = 1.0
    return StateVector(n_qubits, amps)


def _check_gate(gate: Gate, n_qubits: int):
    if max(gate.targets) >= n_qubits:
        raise GateIndexError(
            f"{gate.kind} targets {gate.targets} out of range for {n_qubits} qubits"
        )


def apply_gate(state: StateVector, gate: Gate) -> StateVector:
    _check_gate(gate, state.n_qubits)
    t = gate.targets + (0,) * (3 - len(gate.targets))
    out = kernels.apply_gate(
        state.amplitudes, state.n_qubits, GATE_CODES[gate.kind], *t, gate.angle or 0.0
    )
    return StateVector(state.n_qubits, out)


def pack_gates(gates) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Flatten a gate list into the (codes, targets, angles) arrays the kernels take."""
    count = len(gates)
    codes = np.empty(count, dtype=np.intc)
    targets = np.zeros((count, 3), dtype=np.intc)
    angles = np.zeros(count, dtype=np.float64)
    for i, g in enumerate(gates):
        codes[i] = GATE_CODES[g.kind]
        targets[i, : len(g.targets)] = g.targets
        if g.angle is not None:
            angles[i] = g.angle
    return codes, targets, angles


def run_gates(n_qubits: int, gates, initial: StateVector | None = None) -> StateVector:
    """Apply ``gates`` in order, starting from ``initial`` or |0...0>."""
    if initial is None:
        new_state(n_qubits)  # range check
    elif initial.n_qubits != n_qubits:
        raise ShapeError("initial state width does not match n_qubits")
    for g in gates:
        _check_gate(g, n_qubits)
    codes, targets, angles = pack_gates(gates)
    start = None if initial is None else initial.amplitudes
    return StateVector(n_qubits, kernels.run_circuit(n_qubits, codes, targets, angles, start))


def prob_zero(state: StateVector, qubit: int) -> float:
    if not 0 <= qubit < state.n_qubits:
        raise GateIndexError(f"qubit {qubit} out of range for {state.n_qubits} qubits")
    return min(1.0, max(0.0, kernels.prob_zero(state.amplitudes, qubit)))


def swap_test_register(psi: StateVector, phi: StateVector) -> tuple[StateVector, list[Gate]]:
    """Joint (1 + 2n)-qubit input state and the SWAP-test gates acting on it.

    Layout: ancilla is qubit 0, ``psi`` occupies qubits 1..n, ``phi`` n+1..2n.
    """
    if psi.n_qubits != phi.n_qubits:
        raise ShapeError(
            f"SWAP test needs equal widths, got {psi.n_qubits} and {phi.n_qubits}"
        )
    n = psi.n_qubits
    # index = phi_bits << (n+1) | psi_bits << 1 | ancilla
    joint = np.kron(np.kron(phi.amplitudes, psi.amplitudes), np.array([1.0, 0.0]))
    gates = [Gate("H", (0,))]
    gates += [Gate("CSWAP", (0, 1 + k, 1 + n + k)) for k in range(n)]
    gates.append(Gate("H", (0,)))
    return StateVector(2 * n + 1, joint), gates


def sample_prob(p: float, shots: int, seed: int | None = None) -> float:
    if shots <= 0:
        raise ArgumentError(f"shots must be positive, got {shots}")
    rng = np.random.default_rng(seed)
    return int(rng.binomial(shots, min(1.0, max(0.0, p)))) / shots


def swap_test_fidelity(
    psi: StateVector, phi: StateVector, shots: int | None = None, seed: int | None = None
) -> float:
    """P(ancilla = 0) of the SWAP test, exact or estimated from ``shots`` samples."""
    if shots is not None and shots <= 0:
        raise ArgumentError(f"shots must be positive, got {shots}")
    joint, gates = swap_test_register(psi, phi)
    p0 = prob_zero(run_gates(joint.n_qubits, gates, joint), 0)
    if shots is None:
        return p0
    return sample_prob(p0, shots, seed)
