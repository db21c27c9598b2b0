import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dqulearn.circuit import (
    LayerSpec,
    LogicalCircuit,
    assemble_swap_circuit,
    build_layers,
    deserialize,
    encode_features,
    execute,
    param_count,
    serialize,
    shift_parameter,
)
from dqulearn.errors import (
    ArgumentError,
    DecodeError,
    GateIndexError,
    LayoutError,
    RangeError,
    ShapeError,
)
from dqulearn.gates import ARITY, PARAMETRIC
from dqulearn.statevector import Gate, run_gates

from oracles import full_unitary, prob_zero_dense, run_dense, swap_formula


def spec_circuit(qc=5, nl=1, angles=None, params=None, cid="c"):
    spec = LayerSpec(nl, qc)
    m = spec.n_data_qubits
    angles = np.zeros(2 * m) if angles is None else angles
    params = np.zeros(param_count(spec)) if params is None else params
    enc = encode_features(angles, spec.data_register)
    return assemble_swap_circuit(enc, build_layers(spec, params), spec, cid)


# -- encode_features -----------------------------------------------------------

def test_zero_angles_leave_state_unchanged():
    gates = encode_features([0, 0, 0, 0], [0, 1])
    assert len(gates) == 4
    np.testing.assert_allclose(run_gates(2, gates).amplitudes, [1, 0, 0, 0], atol=1e-15)


def test_pi_encoding_flips_qubit():
    gates = encode_features([math.pi, 0], [0])
    assert [(g.kind, g.angle) for g in gates] == [("RY", math.pi), ("RZ", 0.0)]
    expected = full_unitary(1, "RZ", (0,), 0.0) @ full_unitary(1, "RY", (0,), math.pi) @ [1, 0]
    out = run_gates(1, gates).amplitudes
    np.testing.assert_allclose(out, expected, atol=1e-15)
    assert abs(out[1]) == pytest.approx(1.0)


def test_encoding_length_mismatch():
    with pytest.raises(ShapeError):
        encode_features([0, 0, 0], [0, 1])


def test_encoding_range():
    with pytest.raises(RangeError):
        encode_features([4.0, 0], [0])
    with pytest.raises(RangeError):
        encode_features([-0.1, 0], [0])


# -- build_layers / param_count ------------------------------------------------

@pytest.mark.parametrize("qc", [5, 7])
@pytest.mark.parametrize("nl", [1, 2, 3])
def test_param_count_matches_enumeration(qc, nl):
    spec = LayerSpec(nl, qc)
    layers = build_layers(spec, np.zeros(param_count(spec)))
    assert len(layers.param_positions) == sum(g.kind in PARAMETRIC for g in layers.gates)
    assert param_count(spec) == len(layers.gates)
    assert all(set(g.targets) <= set(spec.model_register) for g in layers.gates)


def test_layer_examples():
    assert param_count(LayerSpec(1, 5)) == 4
    assert len(build_layers(LayerSpec(1, 5), [0.1] * 4).gates) == 4
    assert param_count(LayerSpec(3, 5)) == 8
    kinds = [g.kind for g in build_layers(LayerSpec(3, 5), [0.0] * 8).gates]
    assert kinds == ["RY", "RZ", "RY", "RZ", "RYY", "RZZ", "CRY", "CRZ"]


@pytest.mark.parametrize("nl", [0, 4])
def test_layer_count_range(nl):
    with pytest.raises(ArgumentError):
        LayerSpec(nl, 5)


def test_even_qubit_count_rejected():
    with pytest.raises(ArgumentError):
        LayerSpec(1, 6)


def test_params_length_mismatch():
    with pytest.raises(ShapeError):
        build_layers(LayerSpec(1, 5), [0.0] * 3)


# -- assemble_swap_circuit -----------------------------------------------------

def test_assembled_counts_qc5():
    c = spec_circuit(5, 1)
    assert c.qubit_demand == 5
    assert len(c.gates) == 4 + 4 + 4
    assert [g.kind for g in c.gates[-4:]] == ["H", "CSWAP", "CSWAP", "H"]
    assert c.ancilla_index == 0


def test_assembled_counts_qc7():
    c = spec_circuit(7, 1)
    assert c.qubit_demand == 7
    assert sum(g.kind == "CSWAP" for g in c.gates) == 3


def test_empty_encoding_zero_layers_is_exactly_one():
    spec = LayerSpec(1, 5)
    c = assemble_swap_circuit([], build_layers(spec, [0.0] * 4), spec)
    assert execute(c) == 1.0


@pytest.mark.parametrize("qc", [5, 7])
@pytest.mark.parametrize("nl", [1, 2, 3])
def test_zero_everything_is_exactly_one(qc, nl):
    assert execute(spec_circuit(qc, nl)) == 1.0


def test_register_overlap_is_layout_error():
    spec = LayerSpec(1, 5)
    bad = [Gate("RY", (spec.model_register[0],), 0.1)]
    with pytest.raises(LayoutError):
        assemble_swap_circuit(bad, build_layers(spec, [0.0] * 4), spec)


def test_circuit_invariants():
    with pytest.raises(LayoutError):
        LogicalCircuit("x", 2, (Gate("H", (2,)),), ())
    with pytest.raises(LayoutError):
        LogicalCircuit("x", 2, (Gate("RY", (0,), 0.1),), (0, 0))


def test_executed_fidelity_matches_state_overlap():
    rng = np.random.default_rng(5)
    for nl in (1, 2, 3):
        spec = LayerSpec(nl, 5)
        angles = rng.uniform(0, math.pi, 4)
        params = rng.uniform(-math.pi, math.pi, param_count(spec))
        c = spec_circuit(5, nl, angles, params)
        # oracle: prepare each register separately on 2 qubits and compare overlap
        enc = encode_features(angles, [0, 1])
        layer_spec = build_layers(spec, params).gates
        shifted = [Gate(g.kind, tuple(t - 3 for t in g.targets), g.angle) for g in layer_spec]
        psi, phi = run_dense(2, enc), run_dense(2, shifted)
        assert execute(c) == pytest.approx(swap_formula(psi, phi), abs=1e-12)
        assert execute(c) == pytest.approx(prob_zero_dense(run_dense(5, c.gates), 0), abs=1e-12)


# -- shift_parameter -----------------------------------------------------------

def test_shift_inverse():
    c = spec_circuit(5, 3, params=np.linspace(-1, 1, 8))
    back = shift_parameter(shift_parameter(c, 3, math.pi / 2), 3, -math.pi / 2)
    for a, b in zip(back.param_values, c.param_values):
        assert abs(a - b) <= 1e-15


def test_shift_changes_one_binding():
    c = spec_circuit(5, 3, params=np.linspace(-1, 1, 8))
    s = shift_parameter(c, 0, math.pi / 2)
    diff = [i for i, (a, b) in enumerate(zip(s.param_values, c.param_values)) if a != b]
    assert diff == [0]
    assert s.circuit_id == "c|fwd0"
    assert shift_parameter(c, 0, -math.pi / 2).circuit_id == "c|bck0"
    assert c.param_values[0] == -1.0


def test_shift_out_of_range():
    c = spec_circuit(5, 3)
    with pytest.raises(GateIndexError):
        shift_parameter(c, 8, math.pi / 2)


# -- serialization -------------------------------------------------------------

def test_round_trip_example():
    c = spec_circuit(5, 1, angles=[0.1, 0.2, 0.3, 0.4], params=[1, 2, 3, 4])
    assert deserialize(serialize(c)) == c


def test_serialization_is_byte_stable():
    assert serialize(spec_circuit(5, 2)) == serialize(spec_circuit(5, 2))


def test_truncated_bytes():
    data = serialize(spec_circuit(5, 1))
    for cut in (0, 1, 3, 10, len(data) - 1):
        with pytest.raises(DecodeError) as info:
            deserialize(data[:cut])
        assert 0 <= info.value.offset <= cut


def test_bad_version_and_trailing_bytes():
    data = serialize(spec_circuit(5, 1))
    with pytest.raises(DecodeError):
        deserialize(b"\x02" + data[1:])
    with pytest.raises(DecodeError):
        deserialize(data + b"\x00")


def test_non_canonical_angle_rejected():
    c = LogicalCircuit("x", 1, (Gate("RY", (0,), 0.5),), (0,))
    data = serialize(c).replace(b";0.5", b";.50")
    with pytest.raises(DecodeError):
        deserialize(data)


@st.composite
def circuits(draw):
    n = draw(st.integers(1, 9))
    gates = []
    for _ in range(draw(st.integers(0, 20))):
        kind = draw(st.sampled_from(sorted(k for k in ARITY if ARITY[k] <= n)))
        targets = draw(st.permutations(range(n)))[: ARITY[kind]]
        angle = draw(st.floats(allow_nan=False, allow_infinity=False)) if kind in PARAMETRIC else None
        gates.append(Gate(kind, tuple(targets), angle))
    rotations = [i for i, g in enumerate(gates) if g.kind in PARAMETRIC]
    positions = draw(st.lists(st.sampled_from(rotations), unique=True)) if rotations else []
    cid = draw(st.text(min_size=1, max_size=30))
    return LogicalCircuit(cid, n, tuple(gates), tuple(positions), draw(st.integers(0, n - 1)))


@settings(max_examples=500, deadline=None)
@given(circuits())
def test_round_trip_property(c):
    data = serialize(c)
    back = deserialize(data)
    assert back == c
    assert serialize(back) == data


@settings(max_examples=300, deadline=None)
@given(st.binary(max_size=200))
def test_random_bytes_never_crash(data):
    try:
        deserialize(data)
    except DecodeError as exc:
        assert 0 <= exc.offset <= len(data)
