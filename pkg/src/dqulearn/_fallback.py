"""Pure numpy kernels, used when the compiled extension is unavailable.

Same surface as ``_kernels``: every function takes and returns flat
complex128 arrays and never mutates its input.
"""
import numpy as np

from .gates import ARITY, CODE_NAMES, gate_matrix

IMPLEMENTATION = "python"


def _apply_matrix(state, n, matrix, qubits):
    k = len(qubits)
    tensor = state.reshape((2,) * n)
    # tensor axis a holds qubit n - 1 - a
    axes = [n - 1 - q for q in qubits]
    op = matrix.reshape((2,) * (2 * k))
    out = np.tensordot(op, tensor, axes=(list(range(k, 2 * k)), axes))
    out = np.moveaxis(out, list(range(k)), axes)
    return np.ascontiguousarray(out).reshape(-1)


def apply_gate(state, n, code, t0, t1, t2, angle):
    kind = CODE_NAMES[code]
    targets = (t0, t1, t2)[: ARITY[kind]]
    return _apply_matrix(np.asarray(state, dtype=complex), n, gate_matrix(kind, angle), targets)


_H_CODE = 0
_RAW_H = np.array([[1, 1], [1, -1]], dtype=complex)


def run_circuit(n, codes, targets, angles, state=None):
    """Apply a packed gate list.

    H is applied without its 1/sqrt(2) and the factors are paid at the end as
    a power of two, so an even number of H gates normalizes exactly.
    """
    if state is None:
        state = np.zeros(1 << n, dtype=complex)
        state[0] = 1.0
    else:
        state = np.array(state, dtype=complex)
    owed = 0
    for code, tg, angle in zip(codes, targets, angles):
        if code == _H_CODE:
            state = _apply_matrix(state, n, _RAW_H, (int(tg[0]),))
            owed += 1
            if owed == 64:
                state *= 2.0**-32
                owed = 0
        else:
            state = apply_gate(state, n, int(code), int(tg[0]), int(tg[1]), int(tg[2]), float(angle))
    if owed:
        state *= 2.0 ** -(owed // 2)
        if owed % 2:
            state *= np.sqrt(0.5)
    return state


def prob_zero(state, qubit):
    probs = np.abs(state) ** 2
    n = probs.size.bit_length() - 1
    return float(probs.reshape(1 << (n - qubit - 1), 2, 1 << qubit)[:, 0, :].sum())
