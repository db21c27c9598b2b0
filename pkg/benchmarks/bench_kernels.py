"""Compare the compiled and numpy statevector kernels.

    python benchmarks/bench_kernels.py [--repeat N]

Times the SWAP-test circuit family the trainer emits (qC = 5, 7, 9, 11 with
three layers) and a random 60-gate circuit, reporting circuits per second.
"""
import argparse
import time

import numpy as np

from dqulearn import kernels
from dqulearn.circuit import LayerSpec, assemble_swap_circuit, build_layers, encode_features, param_count
from dqulearn.gates import ARITY, GATE_CODES
from dqulearn.statevector import Gate, pack_gates


def trainer_circuit(qc, rng):
    spec = LayerSpec(3, qc)
    encoding = encode_features(rng.uniform(0, np.pi, 2 * spec.n_data_qubits), spec.data_register)
    layers = build_layers(spec, rng.uniform(-np.pi, np.pi, param_count(spec)))
    return assemble_swap_circuit(encoding, layers, spec).packed


def random_circuit(n, count, rng):
    kinds = list(GATE_CODES)
    gates = []
    for _ in range(count):
        kind = kinds[rng.integers(len(kinds))]
        targets = tuple(int(q) for q in rng.choice(n, ARITY[kind], replace=False))
        gates.append(Gate(kind, targets, None if kind in ("H", "CSWAP") else float(rng.uniform(0, 6))))
    return pack_gates(gates)


def bench(impl, n, packed, repeat):
    codes, targets, angles = packed
    impl.run_circuit(n, codes, targets, angles)  # warm-up
    start = time.perf_counter()
    for _ in range(repeat):
        impl.run_circuit(n, codes, targets, angles)
    return repeat / (time.perf_counter() - start)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=300)
    args = ap.parse_args()
    rng = np.random.default_rng(0)
    impls = kernels.implementations()
    cases = [(f"swap-test qC={qc} nL=3", qc, trainer_circuit(qc, rng)) for qc in (5, 7, 9, 11)]
    cases.append(("random 10q x 60 gates", 10, random_circuit(10, 60, rng)))
    names = sorted(impls)
    print(f"{'case':<24}" + "".join(f"{n + ' c/s':>14}" for n in names) + f"{'speedup':>10}")
    for label, n, packed in cases:
        rates = {name: bench(impls[name], n, packed, args.repeat) for name in names}
        speed = rates["cython"] / rates["python"] if "cython" in rates else float("nan")
        print(f"{label:<24}" + "".join(f"{rates[k]:>14.0f}" for k in names) + f"{speed:>9.1f}x")


if __name__ == "__main__":
    main()
