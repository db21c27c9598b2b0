import os
import subprocess
import sys

import numpy as np
import pytest

from dqulearn import kernels
from dqulearn.gates import ARITY, GATE_CODES
from dqulearn.statevector import Gate, pack_gates

IMPLS = kernels.implementations()


def random_gates(rng, n, count):
    gates = []
    kinds = [k for k in GATE_CODES if ARITY[k] <= n]
    for _ in range(count):
        kind = kinds[rng.integers(len(kinds))]
        targets = tuple(int(q) for q in rng.choice(n, ARITY[kind], replace=False))
        angle = None if kind in ("H", "CSWAP") else float(rng.uniform(-2 * np.pi, 2 * np.pi))
        gates.append(Gate(kind, targets, angle))
    return gates


def test_env_var_selects_fallback():
    code = "from dqulearn import kernels; print(kernels.IMPLEMENTATION)"
    env = {**os.environ, "DQULEARN_PURE_PYTHON": "1"}
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "python"


def test_default_prefers_compiled():
    expected = "cython" if "cython" in IMPLS else "python"
    assert kernels.IMPLEMENTATION == expected


@pytest.mark.skipif("cython" not in IMPLS, reason="compiled kernels not built")
@pytest.mark.parametrize("seed", range(25))
def test_compiled_matches_fallback(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 9))
    codes, targets, angles = pack_gates(random_gates(rng, n, 60))
    a = IMPLS["cython"].run_circuit(n, codes, targets, angles)
    b = IMPLS["python"].run_circuit(n, codes, targets, angles)
    np.testing.assert_allclose(a, b, atol=1e-12)
    for q in range(n):
        assert IMPLS["cython"].prob_zero(a, q) == pytest.approx(IMPLS["python"].prob_zero(b, q), abs=1e-12)


@pytest.mark.skipif("cython" not in IMPLS, reason="compiled kernels not built")
def test_single_gate_parity_from_random_state():
    rng = np.random.default_rng(0)
    n = 4
    state = rng.normal(size=16) + 1j * rng.normal(size=16)
    state /= np.linalg.norm(state)
    for g in random_gates(rng, n, 200):
        t = (*g.targets, 0, 0)[:3]
        a = IMPLS["cython"].apply_gate(state, n, GATE_CODES[g.kind], *t, g.angle or 0.0)
        b = IMPLS["python"].apply_gate(state, n, GATE_CODES[g.kind], *t, g.angle or 0.0)
        np.testing.assert_allclose(a, b, atol=1e-13)


@pytest.mark.parametrize("name", sorted(IMPLS))
def test_inputs_not_mutated(name):
    impl = IMPLS[name]
    state = np.zeros(8, dtype=complex)
    state[0] = 1
    before = state.copy()
    impl.apply_gate(state, 3, GATE_CODES["H"], 0, 0, 0, 0.0)
    codes, targets, angles = pack_gates([Gate("H", (1,)), Gate("RY", (2,), 0.3)])
    impl.run_circuit(3, codes, targets, angles, state)
    np.testing.assert_array_equal(state, before)
