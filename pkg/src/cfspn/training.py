"""Maximum-likelihood estimation of circuit parameters from labeled data.

Mini-batch gradient ascent on the mean joint log-likelihood
log S(x|y) + log P(y).  Constraints hold at every step by construction:
sum weights are trained as unconstrained logits mapped through a normalized
exponential, Gaussian variances as floor + exp(raw), Bernoulli means through
a sigmoid.  The class prior is set to the empirical class frequencies.
"""

from __future__ import annotations

import copy
import itertools
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit, logsumexp

from .circuit import Circuit, validate
from .engine import CompiledCircuit
from .structure import StructureConfig, build_circuit


@dataclass
class TrainConfig:
    learning_rate: float = 0.05
    epochs: int = 200
    batch_size: int = 128
    variance_floor: float = 1e-3
    seed: int = 0
    validation_fraction: float = 0.1
    patience: int = 10
    # Re-seed leaf parameters from training-data statistics before the first
    # epoch (means from random rows, variances from per-column spread).
    # Far-from-data initial leaves give every mixture component the same
    # responsibility, a near-stationary start that plain ascent escapes
    # only very slowly.
    init_from_data: bool = True
    # "adam" or "sgd".  Root mixture weights see gradients scaled by 1/fan-in
    # (thousands of children), so fixed-rate ascent leaves them frozen;
    # per-parameter moment scaling moves them at a useful pace.  Both are
    # deterministic for a fixed seed.
    optimizer: str = "adam"

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.variance_floor <= 0:
            raise ValueError(f"variance_floor must be > 0, got {self.variance_floor}")
        if not (0.0 <= self.validation_fraction < 1.0):
            raise ValueError("validation_fraction must be in [0, 1), got "
                             f"{self.validation_fraction}")
        if self.patience < 0:
            raise ValueError(f"patience must be >= 0, got {self.patience}")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"optimizer must be 'adam' or 'sgd', got "
                             f"{self.optimizer!r}")


@dataclass
class TrainReport:
    train_log_likelihood: list[float]
    validation_log_likelihood: float | None
    epochs_run: int
    converged: bool

    def to_dict(self) -> dict:
        return {
            "train_log_likelihood": [float(v) for v in self.train_log_likelihood],
            "validation_log_likelihood": (
                None if self.validation_log_likelihood is None
                else float(self.validation_log_likelihood)),
            "epochs_run": self.epochs_run,
            "converged": self.converged,
        }


class _Adam:
    """Per-array moment estimates; one shared step counter per update."""

    def __init__(self, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m: dict = {}
        self.v: dict = {}
        self.t = 0

    def begin(self) -> None:
        self.t += 1

    def direction(self, key, g: np.ndarray) -> np.ndarray:
        m = self.m.get(key)
        if m is None:
            m = np.zeros_like(g)
            self.v[key] = np.zeros_like(g)
        v = self.v[key]
        m = self.beta1 * m + (1.0 - self.beta1) * g
        v = self.beta2 * v + (1.0 - self.beta2) * g * g
        self.m[key], self.v[key] = m, v
        m_hat = m / (1.0 - self.beta1 ** self.t)
        v_hat = v / (1.0 - self.beta2 ** self.t)
        return m_hat / (np.sqrt(v_hat) + self.eps)


class _Parameters:
    """Unconstrained view of trainable parameters, synced into a CompiledCircuit."""

    def __init__(self, work: Circuit, compiled: CompiledCircuit, floor: float,
                 optimizer: str = "adam"):
        self.floor = floor
        self.compiled = compiled
        self.adam = _Adam() if optimizer == "adam" else None
        self.theta: dict[int, np.ndarray] = {}
        self._sum_location: dict[int, tuple[int, int]] = {}
        for li, level in enumerate(compiled.levels):
            for row, i in enumerate(level.sum_ids):
                node = work.nodes[i]
                self.theta[int(i)] = node.log_weights.copy()
                self._sum_location[int(i)] = (li, row)
        self.mean = compiled.gaussian_mean.copy()
        self.rho = np.log(np.maximum(compiled.gaussian_variance - floor, 1e-12))
        p = np.clip(compiled.bernoulli_p, 1e-6, 1.0 - 1e-6)
        self.tau = np.log(p) - np.log1p(-p)
        self.sync()

    def sync(self) -> None:
        """Push current parameters into the compiled circuit's arrays."""
        c = self.compiled
        c.gaussian_mean[:] = self.mean
        c.gaussian_variance[:] = self.floor + np.exp(self.rho)
        c.bernoulli_p[:] = expit(self.tau)
        for i, th in self.theta.items():
            li, row = self._sum_location[i]
            lw = th - logsumexp(th)
            c.levels[li].sum_log_weights[row, : lw.size] = lw

    def ascend(self, result, lr: float) -> None:
        """One gradient-ascent step from a backward result, then sync."""
        if self.adam is not None:
            self.adam.begin()
            scale = self.adam.direction
        else:
            def scale(key, g):
                return g
        for i, g_lw in (result.sum_log_weight_grads or {}).items():
            th = self.theta[i]
            w = np.exp(th - logsumexp(th))
            th += lr * scale(("theta", i), g_lw - w * g_lw.sum())
        if self.mean.size:
            self.mean += lr * scale("mean", result.gaussian_mean_grads)
            self.rho += lr * scale(
                "rho", result.gaussian_variance_grads * np.exp(self.rho))
        if self.tau.size:
            p = expit(self.tau)
            self.tau += lr * scale(
                "tau", result.bernoulli_p_grads * p * (1.0 - p))
        self.sync()

    def snapshot(self) -> tuple:
        return ({i: th.copy() for i, th in self.theta.items()},
                self.mean.copy(), self.rho.copy(), self.tau.copy())

    def restore(self, snap: tuple) -> None:
        theta, mean, rho, tau = snap
        self.theta = {i: th.copy() for i, th in theta.items()}
        self.mean = mean.copy()
        self.rho = rho.copy()
        self.tau = tau.copy()
        self.sync()

    def write_back(self, work: Circuit) -> None:
        c = self.compiled
        for row, i in enumerate(c.gaussian_ids):
            node = work.nodes[i]
            node.mean = float(c.gaussian_mean[row])
            node.variance = float(c.gaussian_variance[row])
        for row, i in enumerate(c.bernoulli_ids):
            work.nodes[i].p = float(c.bernoulli_p[row])
        for i, th in self.theta.items():
            work.nodes[i].log_weights = th - logsumexp(th)


def _class_seeds(circuit: Circuit, labels: np.ndarray, scale: float) -> dict[int, np.ndarray]:
    seeds: dict[int, np.ndarray] = {}
    for y, root in enumerate(circuit.class_roots):
        vec = (labels == y).astype(np.float64) * scale
        if root in seeds:
            seeds[root] = seeds[root] + vec
        else:
            seeds[root] = vec
    return seeds


def _mean_joint_ll_compiled(compiled: CompiledCircuit, circuit: Circuit,
                            X: np.ndarray, y: np.ndarray,
                            chunk: int = 256) -> float:
    roots = np.asarray(circuit.class_roots)
    total = 0.0
    for start in range(0, X.shape[0], chunk):
        Xb = X[start:start + chunk]
        yb = y[start:start + chunk]
        V = compiled.forward(Xb)
        total += float(np.sum(V[roots[yb], np.arange(Xb.shape[0])]
                              + circuit.log_prior[yb]))
    return total / X.shape[0]


def mean_joint_log_likelihood(circuit: Circuit, features, labels) -> float:
    """Mean log S(x|y) + log P(y) over a labeled sample."""
    from . import engine
    X = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    return _mean_joint_ll_compiled(engine.compile_circuit(circuit), circuit, X, y)


def fit(circuit: Circuit, dataset, config: TrainConfig) -> tuple[Circuit, TrainReport]:
    """Train a copy of the circuit on (features, labels) by gradient ascent.

    A validation_fraction share of the data is held out; when the held-out
    log-likelihood fails to improve for `patience` consecutive epochs,
    training stops and the best-scoring parameters are restored (patience 0
    disables early stopping).  Deterministic for a fixed config seed.
    """
    X = np.asarray(dataset.features, dtype=np.float64)
    y = np.asarray(dataset.labels, dtype=np.int64)
    if X.shape[0] == 0:
        raise ValueError("empty dataset")
    C = circuit.num_classes
    if y.min() < 0 or y.max() >= C:
        raise ValueError(f"labels outside [0, {C})")
    if X.shape[1] != circuit.num_variables:
        raise ValueError(f"data has {X.shape[1]} features, circuit has "
                         f"{circuit.num_variables}")
    report = validate(circuit)
    if not report.ok:
        raise ValueError(f"invalid circuit: {report.summary()}")

    work = copy.deepcopy(circuit)
    counts = np.bincount(y, minlength=C).astype(np.float64)
    with np.errstate(divide="ignore"):
        work.log_prior = np.log(counts / counts.sum())

    rng = np.random.default_rng(config.seed)
    n_val = int(round(config.validation_fraction * X.shape[0]))
    order = rng.permutation(X.shape[0])
    val_idx, train_idx = order[:n_val], order[n_val:]
    if train_idx.size == 0:
        raise ValueError("validation split leaves no training rows")
    use_early_stop = n_val > 0 and config.patience > 0

    compiled = CompiledCircuit(work)
    if config.init_from_data:
        Xtr = X[train_idx]
        if compiled.gaussian_ids.size:
            rows = rng.integers(0, Xtr.shape[0], size=compiled.gaussian_ids.size)
            compiled.gaussian_mean[:] = Xtr[rows, compiled.gaussian_vars]
            spread = Xtr.var(axis=0)
            compiled.gaussian_variance[:] = np.maximum(
                spread[compiled.gaussian_vars], config.variance_floor * 10.0)
        if compiled.bernoulli_ids.size:
            freq = Xtr.mean(axis=0)
            compiled.bernoulli_p[:] = np.clip(
                freq[compiled.bernoulli_vars], 0.05, 0.95)
    params = _Parameters(work, compiled, config.variance_floor, config.optimizer)
    roots = np.asarray(work.class_roots)

    train_ll: list[float] = []
    best_val = -np.inf
    last_val = None
    best_snap = None
    bad_epochs = 0
    converged = False
    epochs_run = 0
    for epoch in range(config.epochs):
        epochs_run = epoch + 1
        epoch_order = train_idx[rng.permutation(train_idx.size)]
        ll_sum = 0.0
        for bi, start in enumerate(range(0, epoch_order.size, config.batch_size)):
            idx = epoch_order[start:start + config.batch_size]
            Xb, yb = X[idx], y[idx]
            V = compiled.forward(Xb)
            batch_ll = (V[roots[yb], np.arange(idx.size)]
                        + work.log_prior[yb])
            if not np.all(np.isfinite(batch_ll)):
                raise ValueError(
                    f"non-finite loss in epoch {epoch}, batch {bi}")
            ll_sum += float(batch_ll.sum())
            seeds = _class_seeds(work, yb, 1.0 / idx.size)
            back = compiled.backward(V, Xb, seeds, want_input=False,
                                     want_params=True)
            params.ascend(back, config.learning_rate)
        train_ll.append(ll_sum / epoch_order.size)

        if n_val > 0:
            val_ll = _mean_joint_ll_compiled(compiled, work, X[val_idx], y[val_idx])
            last_val = val_ll
            if val_ll > best_val:
                best_val = val_ll
                best_snap = params.snapshot()
                bad_epochs = 0
            else:
                bad_epochs += 1
                if use_early_stop and bad_epochs >= config.patience:
                    converged = True
                    break

    if use_early_stop and best_snap is not None:
        params.restore(best_snap)
    params.write_back(work)
    final_report = validate(work, variance_floor=config.variance_floor)
    if not final_report.ok:
        raise RuntimeError(f"training produced an invalid circuit: "
                           f"{final_report.summary()}")
    # the reported validation score matches the returned parameters
    final_val = best_val if use_early_stop and best_snap is not None else last_val
    report = TrainReport(
        train_log_likelihood=train_ll,
        validation_log_likelihood=(float(final_val) if final_val is not None
                                   and np.isfinite(final_val) else None),
        epochs_run=epochs_run,
        converged=converged,
    )
    return work, report


@dataclass
class GridPoint:
    structure: StructureConfig
    train: TrainConfig
    mean_validation_ll: float
    fold_lls: list[float] = field(default_factory=list)


@dataclass
class CrossValidationResult:
    best: GridPoint
    results: list[GridPoint]


def cross_validate(dataset, structure_grid, train_grid, folds: int,
                   seed: int = 0) -> CrossValidationResult:
    """k-fold model selection over a structure x training grid.

    Scores each grid point by mean held-out joint log-likelihood across
    folds; fold assignment is a deterministic function of the seed.  Returns
    the first best point plus per-point scores.
    """
    if folds < 2:
        raise ValueError(f"folds must be >= 2, got {folds}")
    structure_grid = list(structure_grid)
    train_grid = list(train_grid)
    if not structure_grid or not train_grid:
        raise ValueError("empty configuration grid")
    n = len(dataset)
    if folds > n:
        raise ValueError(f"{folds} folds for {n} rows")

    perm = np.random.default_rng(seed).permutation(n)
    results: list[GridPoint] = []
    for sc, tc in itertools.product(structure_grid, train_grid):
        fold_lls = []
        for j in range(folds):
            held = perm[j::folds]
            rest = np.concatenate([perm[k::folds] for k in range(folds) if k != j])
            circuit = build_circuit(dataset.dimension, sc)
            fitted, _ = fit(circuit, dataset.subset(rest), tc)
            fold_lls.append(mean_joint_log_likelihood(
                fitted, dataset.features[held], dataset.labels[held]))
        results.append(GridPoint(sc, tc, float(np.mean(fold_lls)), fold_lls))
    best = max(results, key=lambda g: g.mean_validation_ll)
    return CrossValidationResult(best=best, results=results)
