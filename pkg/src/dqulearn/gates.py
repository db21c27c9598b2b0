"""Gate catalogue: numeric codes, arities and unitary matrices.

Matrix convention: for a gate on targets ``(t0, t1, ...)`` the first target is
the most significant bit of the local matrix index. Qubit 0 is the least
significant bit of the global basis-state index.
"""
from __future__ import annotations

import math

import numpy as np

# Codes are shared with the compiled kernel; keep in sync with _kernels.pyx.
GATE_CODES = {
    "H": 0,
    "RX": 1,
    "RY": 2,
    "RZ": 3,
    "RYY": 4,
    "RZZ": 5,
    "CRY": 6,
    "CRZ": 7,
    "CSWAP": 8,
}
CODE_NAMES = {code: name for name, code in GATE_CODES.items()}

ARITY = {
    "H": 1,
    "RX": 1,
    "RY": 1,
    "RZ": 1,
    "RYY": 2,
    "RZZ": 2,
    "CRY": 2,
    "CRZ": 2,
    "CSWAP": 3,
}
PARAMETRIC = frozenset({"RX", "RY", "RZ", "RYY", "RZZ", "CRY", "CRZ"})
CONTROLLED_ROTATIONS = frozenset({"CRY", "CRZ"})

_INV_SQRT2 = 1.0 / math.sqrt(2.0)


def _rx(theta):
    c, s = math.cos(theta / 2), math.sin(theta / 2)
    return np.array([[c, -1j * s], [-1j * s, c]], dtype=complex)


def _ry(theta):
    c, s = math.cos(theta / 2), math.sin(theta / 2)
    return np.array([[c, -s], [s, c]], dtype=complex)


def _rz(theta):
    return np.array(
        [[np.exp(-0.5j * theta), 0], [0, np.exp(0.5j * theta)]], dtype=complex
    )


def _controlled(u):
    m = np.eye(4, dtype=complex)
    m[2:, 2:] = u
    return m


def gate_matrix(kind: str, angle: float | None = None) -> np.ndarray:
    if kind == "H":
        return np.array([[1, 1], [1, -1]], dtype=complex) * _INV_SQRT2
    if kind == "RX":
        return _rx(angle)
    if kind == "RY":
        return _ry(angle)
    if kind == "RZ":
        return _rz(angle)
    if kind == "RYY":
        c, s = math.cos(angle / 2), math.sin(angle / 2)
        # exp(-i a/2 Y(x)Y); Y(x)Y maps |00> -> -|11>, |01> -> |10>
        return np.array(
            [
                [c, 0, 0, 1j * s],
                [0, c, -1j * s, 0],
                [0, -1j * s, c, 0],
                [1j * s, 0, 0, c],
            ],
            dtype=complex,
        )
    if kind == "RZZ":
        e, f = np.exp(-0.5j * angle), np.exp(0.5j * angle)
        return np.diag([e, f, f, e]).astype(complex)
    if kind == "CRY":
        return _controlled(_ry(angle))
    if kind == "CRZ":
        return _controlled(_rz(angle))
    if kind == "CSWAP":
        m = np.eye(8, dtype=complex)
        # control is the top bit: swap |1,0,1> and |1,1,0>
        m[[5, 6]] = m[[6, 5]]
        return m
    raise ValueError(f"unknown gate kind {kind!r}")
