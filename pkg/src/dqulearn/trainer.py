"""Training driver: circuit-bank compilation, dispatch, shift-rule gradients.

Each class owns ``n_filters`` independent (dense layer, quantum parameter)
pairs. For one sample the class fidelity is the mean SWAP-test fidelity over
that class's filters and the sample's patches; prediction is the class with
the highest fidelity.
"""
from __future__ import annotations

import logging
import math
import time
import uuid
import zlib
from dataclasses import dataclass, field, replace
from typing import NamedTuple, Protocol

import numpy as np

from . import circuit as cir
from .errors import ArgumentError, IncompleteResultsError, RangeError, ShapeError
from .gates import CONTROLLED_ROTATIONS
from .segmentation import (
    Dataset,
    DenseLayer,
    center_bias,
    dense_preactivation,
    init_dense,
    segment,
    squash,
)

logger = logging.getLogger(__name__)

HALF_PI = math.pi / 2
P_CLIP = 1e-9
FIDELITY_SLACK = 1e-9

# (shift, coefficient, tag). Rotations generated by a Pauli/2 get the two-term
# rule; controlled rotations have generator eigenvalues {0, +-1/2} and need four.
_C_NEAR = (math.sqrt(2) + 1) / (4 * math.sqrt(2))
_C_FAR = (math.sqrt(2) - 1) / (4 * math.sqrt(2))
TWO_TERM = ((HALF_PI, 0.5, "fwd"), (-HALF_PI, -0.5, "bck"))
FOUR_TERM = (
    (HALF_PI, _C_NEAR, "fwd"),
    (-HALF_PI, -_C_NEAR, "bck"),
    (3 * HALF_PI, -_C_FAR, "fwd3"),
    (-3 * HALF_PI, _C_FAR, "bck3"),
)


def shift_rule(kind: str):
    return FOUR_TERM if kind in CONTROLLED_ROTATIONS else TWO_TERM


@dataclass
class TrainConfig:
    alpha: float = 0.001
    epochs: int = 40
    stride: int = 2
    width: int = 4
    n_filters: int = 4
    n_layers: int = 1
    qubit_count: int = 5
    shots: int | None = None
    seed: int = 0
    class_labels: tuple = (0, 1)
    in_flight: int = 32
    retries: int = 2
    train_dense: bool = False
    client_id: str | None = None

    def __post_init__(self):
        self.class_labels = tuple(self.class_labels)
        if not self.alpha > 0:
            raise ArgumentError(f"alpha must be positive, got {self.alpha}")
        if self.epochs < 0:
            raise ArgumentError("epochs must be >= 0")
        if self.n_filters < 1:
            raise ArgumentError("n_filters must be >= 1")
        if not self.class_labels or len(set(self.class_labels)) != len(self.class_labels):
            raise ArgumentError("class_labels must be non-empty and distinct")
        if self.shots is not None and self.shots < 1:
            raise ArgumentError("shots must be positive")
        if self.in_flight < 1 or self.retries < 0:
            raise ArgumentError("in_flight must be >= 1 and retries >= 0")
        self.spec  # validates n_layers / qubit_count

    @property
    def spec(self) -> cir.LayerSpec:
        return cir.LayerSpec(self.n_layers, self.qubit_count)

    @property
    def n_classes(self) -> int:
        return len(self.class_labels)


@dataclass
class Model:
    params: np.ndarray  # (classes, filters, n_params)
    dense_w: np.ndarray  # (classes, filters, input_dim, 2 * n_data_qubits)
    dense_b: np.ndarray  # (classes, filters, 2 * n_data_qubits)

    def dense(self, c: int, f: int) -> DenseLayer:
        return DenseLayer(self.dense_w[c, f], self.dense_b[c, f])

    def copy(self) -> Model:
        return Model(self.params.copy(), self.dense_w.copy(), self.dense_b.copy())


def training_samples(dataset: Dataset, config: TrainConfig) -> Dataset:
    return dataset.subset(labels=list(config.class_labels))


def init_model(config: TrainConfig, dataset: Dataset) -> Model:
    """Quantum parameters and dense weights uniform in [0, pi); biases centred on the data."""
    rng = np.random.default_rng(config.seed)
    spec = config.spec
    n_params = cir.param_count(spec)
    params = rng.uniform(0.0, 1.0, size=(config.n_classes, config.n_filters, n_params)) * math.pi
    patches = np.array(
        [p.pixels for img in dataset.images for p in segment(img, config.stride, config.width)]
    )
    in_dim = config.width * config.width
    out_dim = 2 * spec.n_data_qubits
    dense_w = np.empty((config.n_classes, config.n_filters, in_dim, out_dim))
    dense_b = np.empty((config.n_classes, config.n_filters, out_dim))
    for c in range(config.n_classes):
        for f in range(config.n_filters):
            layer = init_dense(in_dim, spec.n_data_qubits, rng)
            if len(patches):
                layer = center_bias(layer, patches)
            dense_w[c, f], dense_b[c, f] = layer.weights, layer.bias
    return Model(params, dense_w, dense_b)


# -- circuit bank --------------------------------------------------------------


class BankEntry(NamedTuple):
    circuit: cir.LogicalCircuit
    sample: int
    patch: int
    filter: int
    klass: int
    kind: str  # "eval", "param" or "enc"
    index: int  # parameter or encoding-angle index; -1 for eval
    coeff: float  # shift-rule coefficient; 0 for eval
    key: str  # run-independent identity (seeds shot sampling)


@dataclass
class CircuitBank:
    entries: list[BankEntry]
    labels: np.ndarray  # class index per sample
    n_patches: list[int]
    n_classes: int
    n_filters: int
    n_params: int
    patch_inputs: list[np.ndarray] = field(default_factory=list)
    preacts: dict = field(default_factory=dict)  # (s, p, f, c) -> dense pre-activation

    @property
    def shifted(self) -> list[BankEntry]:
        return [e for e in self.entries if e.kind != "eval"]

    @property
    def evaluations(self) -> list[BankEntry]:
        return [e for e in self.entries if e.kind == "eval"]

    def __len__(self):
        return len(self.entries)


def expected_bank_size(n_instances: int, spec: cir.LayerSpec, shifts: bool = True) -> tuple[int, int]:
    """(shifted, unshifted) circuit counts for ``n_instances`` (sample, patch, filter, class) tuples."""
    if not shifts:
        return 0, n_instances
    layers = cir.build_layers(spec, [0.0] * cir.param_count(spec))
    per = sum(len(shift_rule(g.kind)) for g in layers.gates)
    return n_instances * per, n_instances


def build_circuit_bank(
    samples: Dataset,
    model: Model,
    config: TrainConfig,
    epoch: int = 0,
    prefix: str = "run",
    shifts: bool = True,
) -> CircuitBank:
    if len(samples) == 0:
        raise ArgumentError("circuit bank needs at least one sample")
    spec = config.spec
    n_params = cir.param_count(spec)
    if model.params.shape != (config.n_classes, config.n_filters, n_params):
        raise ShapeError(
            f"params shape {model.params.shape} != "
            f"{(config.n_classes, config.n_filters, n_params)}"
        )
    label_index = {lab: i for i, lab in enumerate(config.class_labels)}
    try:
        labels = np.array([label_index[int(y)] for y in samples.labels])
    except KeyError as exc:
        raise ArgumentError(f"sample label {exc} not in class_labels") from None
    bank = CircuitBank([], labels, [], config.n_classes, config.n_filters, n_params)
    data_reg = spec.data_register
    for s, image in enumerate(samples.images):
        patches = segment(image, config.stride, config.width, source_id=s)
        bank.n_patches.append(len(patches))
        pixels = np.array([p.pixels for p in patches])
        bank.patch_inputs.append(pixels)
        for f in range(config.n_filters):
            for c in range(config.n_classes):
                layers = cir.build_layers(spec, model.params[c, f])
                y = dense_preactivation(model.dense(c, f), pixels)
                angles = squash(y)
                for p in range(len(patches)):
                    key = f"e{epoch}/s{s}/p{p}/f{f}/c{c}"
                    base = cir.assemble_swap_circuit(
                        cir.encode_features(angles[p], data_reg), layers, spec, f"{prefix}/{key}"
                    )
                    bank.entries.append(
                        BankEntry(
                            replace(base, circuit_id=base.circuit_id + "|eval"),
                            s, p, f, c, "eval", -1, 0.0, key + "|eval",
                        )
                    )
                    if not shifts:
                        continue
                    for j in range(n_params):
                        kind = base.gates[base.param_positions[j]].kind
                        for delta, coeff, tag in shift_rule(kind):
                            shifted = cir.shift_parameter(base, j, delta, tag)
                            bank.entries.append(
                                BankEntry(shifted, s, p, f, c, "param", j, coeff, f"{key}|{tag}{j}")
                            )
                    if config.train_dense:
                        bank.preacts[(s, p, f, c)] = y[p]
                        for k in range(2 * spec.n_data_qubits):
                            for delta, coeff, tag in TWO_TERM:
                                shifted = cir.shift_gate(
                                    base, k, delta, f"{base.circuit_id}|enc{tag}{k}"
                                )
                                bank.entries.append(
                                    BankEntry(shifted, s, p, f, c, "enc", k, coeff, f"{key}|enc{tag}{k}")
                                )
    return bank


# -- dispatch ------------------------------------------------------------------


class Executor(Protocol):
    def execute(self, circuits, shots=None, seeds=None) -> dict[str, float]:
        ...


class LocalExecutor:
    """Runs circuits in-process; the reference path for tests and ``train --local``."""

    def __init__(self):
        self.executed = 0

    def execute(self, circuits, shots=None, seeds=None) -> dict[str, float]:
        seeds = seeds or [None] * len(circuits)
        out = {}
        for c, seed in zip(circuits, seeds):
            out[c.circuit_id] = cir.execute(c, shots, seed)
            self.executed += 1
        return out


def shot_seed(root_seed: int, key: str) -> int:
    return (root_seed * 1_000_003 + zlib.crc32(key.encode())) % (2**63)


def dispatch(bank: CircuitBank, endpoint, config: TrainConfig | None = None) -> dict[str, float]:
    """Execute every bank entry through ``endpoint`` and return fidelities by circuit id.

    ``endpoint`` is an :class:`Executor` or a ``host:port`` manager address.
    """
    config = config or TrainConfig()
    if isinstance(endpoint, (str, tuple)):
        from .client import ManagerClient

        endpoint = ManagerClient(
            endpoint,
            client_id=config.client_id or "client",
            in_flight=config.in_flight,
            retries=config.retries,
        )
    circuits = [e.circuit for e in bank.entries]
    seeds = None
    if config.shots is not None:
        seeds = [shot_seed(config.seed, e.key) for e in bank.entries]
    results = endpoint.execute(circuits, shots=config.shots, seeds=seeds)
    missing = [c.circuit_id for c in circuits if c.circuit_id not in results]
    if missing:
        raise IncompleteResultsError(f"{len(missing)} circuits without results, e.g. {missing[0]}")
    return results


# -- loss and gradient -----------------------------------------------------------


def _check_fidelities(fidelities) -> np.ndarray:
    f = np.asarray(fidelities, dtype=float)
    if np.any(f < 0.5 - FIDELITY_SLACK) or np.any(f > 1 + FIDELITY_SLACK):
        raise RangeError(f"fidelities {f} outside [0.5, 1]")
    return f


def loss_and_predict(fidelities, true_label: int) -> tuple[float, int]:
    """Rescaled-fidelity cross-entropy and argmax prediction (ties to the lowest index)."""
    f = _check_fidelities(fidelities)
    p = np.clip(2.0 * (f - 0.5), P_CLIP, 1.0 - P_CLIP)
    others = np.delete(p, true_label)
    loss = -math.log(p[true_label]) - float(np.sum(np.log1p(-others)))
    return loss, int(np.argmax(f))


def loss_gradient(fidelities, true_label: int) -> np.ndarray:
    """d loss / d fidelity for each class (zero where the clip is active)."""
    f = _check_fidelities(fidelities)
    p = 2.0 * (f - 0.5)
    inside = (p > P_CLIP) & (p < 1.0 - P_CLIP)
    pc = np.clip(p, P_CLIP, 1.0 - P_CLIP)
    dp = 1.0 / (1.0 - pc)
    dp[true_label] = -1.0 / pc[true_label]
    return np.where(inside, 2.0 * dp, 0.0)


def raw_shift_term(f_fwd: float, f_bck: float) -> float:
    return (f_fwd - f_bck) / 2.0


def _lookup(results, entry: BankEntry) -> float:
    try:
        return results[entry.circuit.circuit_id]
    except KeyError:
        raise IncompleteResultsError(f"no result for {entry.circuit.circuit_id}") from None


def class_fidelities(results, bank: CircuitBank) -> np.ndarray:
    """(samples, classes) fidelities, mean-pooled over filters and patches."""
    n_samples = len(bank.labels)
    total = np.zeros((n_samples, bank.n_classes))
    for e in bank.evaluations:
        total[e.sample, e.klass] += _lookup(results, e)
    counts = np.array(bank.n_patches, dtype=float)[:, None] * bank.n_filters
    # sampled estimates may stray below 0.5; keep the loss defined
    return np.clip(total / counts, 0.5, 1.0)


def evaluate(results, bank: CircuitBank) -> tuple[float, float]:
    """Mean loss and accuracy over the bank's samples."""
    fid = class_fidelities(results, bank)
    losses, correct = [], 0
    for s, y in enumerate(bank.labels):
        loss, pred = loss_and_predict(fid[s], int(y))
        losses.append(loss)
        correct += int(pred == y)
    return float(np.mean(losses)), correct / len(bank.labels)


@dataclass
class Gradient:
    params: np.ndarray
    dense_w: np.ndarray | None = None
    dense_b: np.ndarray | None = None


def compute_gradient(results, bank: CircuitBank) -> Gradient:
    """Gradient of the mean loss, chaining shift-rule fidelity derivatives."""
    fid = class_fidelities(results, bank)
    n_samples = len(bank.labels)
    dl_df = np.array([loss_gradient(fid[s], int(bank.labels[s])) for s in range(n_samples)])
    # d pooled fidelity / d patch fidelity, and 1/S for the mean over samples
    weight = dl_df / (np.array(bank.n_patches, dtype=float)[:, None] * bank.n_filters * n_samples)

    grad = np.zeros((bank.n_classes, bank.n_filters, bank.n_params))
    seen = np.zeros_like(grad, dtype=int)
    enc: dict = {}
    for e in bank.entries:
        if e.kind == "eval":
            continue
        w = weight[e.sample, e.klass] * e.coeff * _lookup(results, e)
        if e.kind == "param":
            grad[e.klass, e.filter, e.index] += w
            seen[e.klass, e.filter, e.index] += 1
        else:
            k = (e.sample, e.patch, e.filter, e.klass)
            enc.setdefault(k, np.zeros(len(bank.preacts[k])))[e.index] += w
    expected = _entries_per_param(bank)
    if np.any(seen != expected):
        raise IncompleteResultsError("bank is missing shift directions for some parameters")
    out = Gradient(grad)
    if bank.preacts:
        in_dim = bank.patch_inputs[0].shape[1]
        out_dim = len(next(iter(bank.preacts.values())))
        out.dense_w = np.zeros((bank.n_classes, bank.n_filters, in_dim, out_dim))
        out.dense_b = np.zeros((bank.n_classes, bank.n_filters, out_dim))
        for (s, p, f, c), d_angle in enc.items():
            sig = squash(bank.preacts[(s, p, f, c)]) / math.pi
            d_pre = d_angle * math.pi * sig * (1.0 - sig)
            out.dense_w[c, f] += np.outer(bank.patch_inputs[s][p], d_pre)
            out.dense_b[c, f] += d_pre
    return out


def _entries_per_param(bank: CircuitBank) -> np.ndarray:
    """Shifted entries each parameter must have received across the whole bank."""
    counts = np.zeros((bank.n_classes, bank.n_filters, bank.n_params), dtype=int)
    instances = sum(bank.n_patches)
    first = next((e for e in bank.evaluations), None)
    if first is None:
        return counts
    circuit = first.circuit
    if not any(e.kind == "param" for e in bank.entries):
        return counts
    for j, pos in enumerate(circuit.param_positions):
        counts[:, :, j] = instances * len(shift_rule(circuit.gates[pos].kind))
    return counts


def update_params(params, gradient, alpha: float) -> np.ndarray:
    params = np.asarray(params, dtype=float)
    gradient = np.asarray(gradient, dtype=float)
    if params.shape != gradient.shape:
        raise ShapeError(f"params {params.shape} and gradient {gradient.shape} differ")
    return params - alpha * gradient


def apply_gradient(model: Model, grad: Gradient, alpha: float) -> Model:
    out = Model(update_params(model.params, grad.params, alpha), model.dense_w, model.dense_b)
    if grad.dense_w is not None:
        out.dense_w = update_params(model.dense_w, grad.dense_w, alpha)
        out.dense_b = update_params(model.dense_b, grad.dense_b, alpha)
    return out


# -- epochs ----------------------------------------------------------------------


@dataclass
class EpochMetrics:
    epoch_index: int
    wall_seconds: float
    circuits_executed: int
    loss: float
    accuracy: float

    @property
    def circuits_per_second(self) -> float:
        return self.circuits_executed / self.wall_seconds if self.wall_seconds > 0 else math.inf


METRICS_COLUMNS = ("epoch", "wall_seconds", "circuits", "circuits_per_second", "loss", "accuracy")


def metrics_row(m: EpochMetrics) -> dict:
    return {
        "epoch": m.epoch_index,
        "wall_seconds": repr(m.wall_seconds),
        "circuits": m.circuits_executed,
        "circuits_per_second": repr(m.circuits_per_second),
        "loss": repr(m.loss),
        "accuracy": repr(m.accuracy),
    }


def run_epoch(
    dataset: Dataset,
    model: Model,
    config: TrainConfig,
    endpoint,
    epoch_index: int = 0,
    prefix: str | None = None,
) -> tuple[Model, EpochMetrics]:
    """One full-batch pass: segment, encode, dispatch, differentiate, update."""
    prefix = prefix or config.client_id or "run"
    start = time.perf_counter()
    bank = build_circuit_bank(dataset, model, config, epoch_index, prefix)
    results = dispatch(bank, endpoint, config)
    grad = compute_gradient(results, bank)
    loss, accuracy = evaluate(results, bank)
    model = apply_gradient(model, grad, config.alpha)
    wall = time.perf_counter() - start
    metrics = EpochMetrics(epoch_index, wall, len(bank), loss, accuracy)
    logger.info(
        "epoch %d: %d circuits in %.3fs, loss %.5f, accuracy %.3f",
        epoch_index, len(bank), wall, loss, accuracy,
    )
    return model, metrics


def train(dataset: Dataset, config: TrainConfig, endpoint, model: Model | None = None, on_epoch=None):
    """Run ``config.epochs`` epochs; returns the final model and per-epoch metrics."""
    samples = training_samples(dataset, config)
    if config.client_id is None:
        config = replace(config, client_id=f"client-{uuid.uuid4().hex[:8]}")
    model = model or init_model(config, samples)
    history = []
    for epoch in range(config.epochs):
        model, metrics = run_epoch(samples, model, config, endpoint, epoch)
        history.append(metrics)
        if on_epoch is not None:
            on_epoch(metrics)
    return model, history
