# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled statevector kernels.

Gates are applied in place on a private copy of the amplitudes with the GIL
released, so worker threads can simulate circuits concurrently.
"""
import numpy as np

from libc.math cimport cos, ldexp, sin, sqrt

IMPLEMENTATION = "cython"

ctypedef double complex cplx

# keep in sync with gates.GATE_CODES
cdef enum:
    G_H = 0
    G_RX = 1
    G_RY = 2
    G_RZ = 3
    G_RYY = 4
    G_RZZ = 5
    G_CRY = 6
    G_CRZ = 7
    G_CSWAP = 8


cdef inline void _one_qubit(cplx* s, Py_ssize_t dim, Py_ssize_t bit,
                            cplx m00, cplx m01, cplx m10, cplx m11,
                            Py_ssize_t ctrl) noexcept nogil:
    # ctrl == 0 means uncontrolled; otherwise only indices with that bit set
    cdef Py_ssize_t i, j
    cdef cplx a0, a1
    for i in range(dim):
        if i & bit:
            continue
        if ctrl and not (i & ctrl):
            continue
        j = i | bit
        a0 = s[i]
        a1 = s[j]
        s[i] = m00 * a0 + m01 * a1
        s[j] = m10 * a0 + m11 * a1


cdef int _apply(cplx* s, int n, int code, int t0, int t1, int t2, double angle,
                bint raw_h=False) noexcept nogil:
    # raw_h applies H without its 1/sqrt(2); the caller owes the factor
    cdef Py_ssize_t dim = (<Py_ssize_t>1) << n
    cdef Py_ssize_t b0 = (<Py_ssize_t>1) << t0
    cdef Py_ssize_t b1 = (<Py_ssize_t>1) << t1
    cdef Py_ssize_t b2 = (<Py_ssize_t>1) << t2
    cdef Py_ssize_t i, j
    cdef double c = cos(angle / 2.0)
    cdef double sn = sin(angle / 2.0)
    cdef double r = 1.0 if raw_h else 1.0 / sqrt(2.0)
    cdef cplx a0, a1, e_minus, e_plus
    cdef cplx isn = 1j * sn
    e_minus = c - isn
    e_plus = c + isn
    if code == G_H:
        _one_qubit(s, dim, b0, r, r, r, -r, 0)
    elif code == G_RX:
        _one_qubit(s, dim, b0, c, -isn, -isn, c, 0)
    elif code == G_RY:
        _one_qubit(s, dim, b0, c, -sn, sn, c, 0)
    elif code == G_RZ:
        _one_qubit(s, dim, b0, e_minus, 0, 0, e_plus, 0)
    elif code == G_CRY:
        _one_qubit(s, dim, b1, c, -sn, sn, c, b0)
    elif code == G_CRZ:
        _one_qubit(s, dim, b1, e_minus, 0, 0, e_plus, b0)
    elif code == G_RYY:
        for i in range(dim):
            if (i & b0) or (i & b1):
                continue
            # |00> <-> |11| pair
            j = i | b0 | b1
            a0 = s[i]
            a1 = s[j]
            s[i] = c * a0 + isn * a1
            s[j] = isn * a0 + c * a1
            # |01> <-> |10> pair
            a0 = s[i | b1]
            a1 = s[i | b0]
            s[i | b1] = c * a0 - isn * a1
            s[i | b0] = -isn * a0 + c * a1
    elif code == G_RZZ:
        for i in range(dim):
            if ((i & b0) != 0) == ((i & b1) != 0):
                s[i] = s[i] * e_minus
            else:
                s[i] = s[i] * e_plus
    elif code == G_CSWAP:
        for i in range(dim):
            if (i & b0) and (i & b1) and not (i & b2):
                j = (i ^ b1) | b2
                a0 = s[i]
                s[i] = s[j]
                s[j] = a0
    else:
        return -1
    return 0


def apply_gate(state, int n, int code, int t0, int t1, int t2, double angle):
    out = np.array(state, dtype=np.complex128, copy=True, order="C")
    cdef cplx[::1] view = out
    cdef int rc
    with nogil:
        rc = _apply(&view[0], n, code, t0, t1, t2, angle)
    if rc != 0:
        raise ValueError(f"unknown gate code {code}")
    return out


def run_circuit(int n, codes, targets, angles, state=None):
    cdef int[::1] cv = np.ascontiguousarray(codes, dtype=np.intc)
    cdef int[:, ::1] tv = np.ascontiguousarray(targets, dtype=np.intc).reshape(-1, 3)
    cdef double[::1] av = np.ascontiguousarray(angles, dtype=np.float64)
    if state is None:
        out = np.zeros((<Py_ssize_t>1) << n, dtype=np.complex128)
        out[0] = 1.0
    else:
        out = np.array(state, dtype=np.complex128, copy=True, order="C")
    cdef cplx[::1] view = out
    cdef Py_ssize_t g, i, count = cv.shape[0]
    cdef Py_ssize_t dim = view.shape[0]
    cdef int rc = 0
    cdef int owed = 0
    with nogil:
        for g in range(count):
            rc = _apply(&view[0], n, cv[g], tv[g, 0], tv[g, 1], tv[g, 2], av[g], True)
            if rc != 0:
                break
            if cv[g] == G_H:
                owed += 1
                if owed == 64:
                    for i in range(dim):
                        view[i] = view[i] * ldexp(1.0, -32)
                    owed = 0
        # deferred H normalization: a power of two, exact when owed is even
        if rc == 0 and owed:
            for i in range(dim):
                view[i] = view[i] * ldexp(1.0, -(owed // 2))
                if owed % 2:
                    view[i] = view[i] * sqrt(0.5)
    if rc != 0:
        raise ValueError("unknown gate code in circuit")
    return out


def prob_zero(state, int qubit):
    cdef const cplx[::1] view = np.ascontiguousarray(state, dtype=np.complex128)
    cdef Py_ssize_t i, bit = (<Py_ssize_t>1) << qubit
    cdef double total = 0.0
    cdef cplx a
    with nogil:
        for i in range(view.shape[0]):
            if not (i & bit):
                a = view[i]
                total += a.real * a.real + a.imag * a.imag
    return total
