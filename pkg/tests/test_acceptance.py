"""End-to-end acceptance checks.

Each test prints one [PASS]/[FAIL]/[SKIP] verdict line that bypasses
pytest's output capture, then asserts.  Criteria 3 through 6 share one
trained two-moons model; the tuned step sizes found for criterion 4 feed
criteria 5 and 6.
"""

import itertools
import math
import os
import time
from contextlib import nullcontext
from pathlib import Path

import numpy as np
import pytest

from cfspn import circuit as cm
from cfspn import counterfactual as cf
from cfspn import data, grad, inference, training
from cfspn.data import FeatureColumn, FeatureMeta
from cfspn.structure import StructureConfig, build_circuit
from conftest import random_circuit

EPSILON1_GRID = (0.1, 1.0, 10.0)
EPSILON2_GRID = (0.01, 0.1, 1.0)

_capture = None


@pytest.fixture(autouse=True)
def _verdicts_reach_terminal(capsys):
    global _capture
    _capture = capsys
    yield
    _capture = None


def emit(line):
    with _capture.disabled() if _capture is not None else nullcontext():
        print(line, flush=True)


def report(ok, name, detail):
    emit(f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}")
    assert ok, f"{name}: {detail}"


def skip(name, detail):
    emit(f"[SKIP] {name}: {detail}")
    pytest.skip(detail)


@pytest.fixture(scope="module")
def moons_bundle():
    ds = data.make_moons(2000, 0.1, seed=7)
    train, test = data.split(ds, 0.7, seed=7)
    structure = StructureConfig(num_classes=2, seed=7)
    tc = training.TrainConfig(epochs=60, seed=7, variance_floor=0.02)
    t0 = time.perf_counter()
    fitted, _ = training.fit(build_circuit(2, structure), train, tc)
    seconds = time.perf_counter() - t0
    preds = inference.predict(fitted, test.features)
    rows = np.flatnonzero(preds != 1)[:120]
    queries = [(test.features[i], int(preds[i]), 1) for i in rows]
    return {"circuit": fitted, "test": test, "train_seconds": seconds,
            "queries": queries}


@pytest.fixture(scope="module")
def tuned_counterfactuals(moons_bundle):
    circuit = moons_bundle["circuit"]
    queries = moons_bundle["queries"]
    best = None
    for e1, e2 in itertools.product(EPSILON1_GRID, EPSILON2_GRID):
        cfg = cf.CfConfig(epsilon1=e1, epsilon2=e2)
        results = cf.run_queries(circuit, queries, "two_step", cfg)
        rate = cf.summarize(results).success_rate
        if best is None or rate > best["success_rate"]:
            best = {"epsilon1": e1, "epsilon2": e2,
                    "success_rate": rate, "results": results}
    return best


def test_criterion_01_normalization_oracle(rng):
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(50):
        d = int(rng.integers(2, 13))
        c = random_circuit(rng, num_variables=d, leaf_family="bernoulli")
        grid = np.array(list(itertools.product([0.0, 1.0], repeat=d)))
        total = float(np.exp(inference.log_density(c, grid)).sum())
        worst = max(worst, abs(total - 1.0))
    seconds = time.perf_counter() - t0
    report(worst <= 1e-9 and seconds < 60.0,
           "criterion 1 normalization",
           f"worst |sum - 1| = {worst:.2e} over 50 circuits (tol 1e-9), "
           f"{seconds:.1f}s (budget 60s)")


def central_fd(f, x, h=1e-5):
    out = np.zeros_like(x)
    for j in range(x.size):
        xp, xm = x.copy(), x.copy()
        xp[j] += h
        xm[j] -= h
        out[j] = (f(xp) - f(xm)) / (2 * h)
    return out


def relative_error(got, fd):
    scale = max(np.linalg.norm(got), np.linalg.norm(fd), 1e-3)
    return np.linalg.norm(got - fd) / scale


def test_criterion_02_gradient_oracle(rng):
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(200):
        d = int(rng.integers(2, 17))
        c = random_circuit(rng, num_variables=d, num_classes=2,
                           max_repetitions=2)
        x = rng.normal(0.5, 0.4, size=d)

        got = grad.grad_log_ratio(c, x, 0, 1)
        fd = central_fd(lambda v: inference.class_log_density(c, 1, v)
                        - inference.class_log_density(c, 0, v), x)
        worst = max(worst, relative_error(got, fd))

        got = grad.grad_density(c, x, mode="density").values
        fd = central_fd(lambda v: math.exp(inference.log_density(c, v)), x)
        worst = max(worst, relative_error(got, fd))

        got = grad.grad_density(c, x, mode="log_density").values
        fd = central_fd(lambda v: inference.log_density(c, v), x)
        worst = max(worst, relative_error(got, fd))
    seconds = time.perf_counter() - t0
    report(worst <= 1e-4 and seconds < 60.0,
           "criterion 2 gradient oracle",
           f"worst relative error = {worst:.2e} over 200 pairs (tol 1e-4), "
           f"{seconds:.1f}s (budget 60s)")


def test_criterion_03_moons_classification(moons_bundle):
    circuit = moons_bundle["circuit"]
    test = moons_bundle["test"]
    seconds = moons_bundle["train_seconds"]
    acc = inference.accuracy(circuit, test.features, test.labels)
    report(acc >= 0.90 and seconds < 300.0,
           "criterion 3 moons classification",
           f"test accuracy = {acc:.3f} (needs >= 0.90), trained in "
           f"{seconds:.0f}s (budget 300s)")


def test_criterion_04_counterfactual_effectiveness(tuned_counterfactuals):
    best = tuned_counterfactuals
    n = len(best["results"])
    report(best["success_rate"] >= 0.90 and n >= 100,
           "criterion 4 counterfactual effectiveness",
           f"success rate = {best['success_rate']:.3f} over {n} queries at "
           f"eps1={best['epsilon1']}, eps2={best['epsilon2']} (needs >= 0.90)")


def test_criterion_05_density_improvement(tuned_counterfactuals):
    results = tuned_counterfactuals["results"]
    mean_final = float(np.mean([r.logdens_x_prime for r in results]))
    mean_mid = float(np.mean([r.logdens_u for r in results]))
    gain = mean_final - mean_mid
    report(gain > 0.0,
           "criterion 5 density improvement",
           f"mean logdens x' - u = {gain:+.4f} "
           f"({mean_final:.3f} vs {mean_mid:.3f}, needs > 0)")


def test_criterion_06_speed_advantage(moons_bundle, tuned_counterfactuals):
    circuit = moons_bundle["circuit"]
    results = tuned_counterfactuals["results"]
    evals = sorted({r.grad_evals for r in results})
    ours = float(np.mean([sum(r.elapsed) for r in results]))

    baseline_cfg = cf.BaselineConfig(max_iters=1000, early_stop=False)
    subset = moons_bundle["queries"][:10]
    wachter = cf.run_queries(circuit, subset, "wachter",
                             baseline=baseline_cfg)
    theirs = cf.summarize(wachter).mean_time
    report(evals == [2] and ours <= theirs / 10.0,
           "criterion 6 speed",
           f"gradient evaluations per query = {evals} (needs [2]); "
           f"{ours * 1e3:.1f}ms vs wachter {theirs * 1e3:.0f}ms per query "
           f"(needs <= 1/10)")


def onehot_tabular_dataset(seed=11, n=1200):
    """Two 3-level one-hot groups plus 2 continuous; logistic labels."""
    rng = np.random.default_rng(seed)
    features = np.zeros((n, 8))
    labels = np.zeros(n, dtype=np.int64)
    for i in range(n):
        a = int(rng.integers(3))
        b = int(rng.integers(3))
        c1 = float(rng.random())
        c2 = float(rng.random())
        features[i, a] = 1.0
        features[i, 3 + b] = 1.0
        features[i, 6] = c1
        features[i, 7] = c2
        score = (2.0 * (a == 1) - 1.5 * (b == 2)
                 + 3.0 * (c1 - 0.5) - 2.0 * (c2 - 0.5))
        labels[i] = 1 if score > 0.0 else 0
    columns = (
        [FeatureColumn(name="A", kind="onehot", group=0, category=f"a{k}")
         for k in range(3)]
        + [FeatureColumn(name="B", kind="onehot", group=1, category=f"b{k}")
           for k in range(3)]
        + [FeatureColumn(name="c1", kind="continuous",
                         scaling_kind="minmax", scaling=(0.0, 1.0)),
           FeatureColumn(name="c2", kind="continuous",
                         scaling_kind="minmax", scaling=(0.0, 1.0))])
    meta = FeatureMeta(columns=columns, label_name="y", classes=["0", "1"])
    return data.Dataset(features, labels, 2, meta)


def test_criterion_07_one_hot_consistency():
    ds = onehot_tabular_dataset()
    train, test = data.split(ds, 0.7, seed=11)
    structure = StructureConfig(num_classes=2, seed=11)
    tc = training.TrainConfig(epochs=40, seed=11, variance_floor=0.02)
    fitted, _ = training.fit(build_circuit(8, structure), train, tc)

    preds = inference.predict(fitted, test.features)
    rows = np.flatnonzero(preds != 1)[:60]
    queries = [(test.features[i], int(preds[i]), 1) for i in rows]
    ours = cf.run_queries(fitted, queries, "two_step",
                          cf.CfConfig(epsilon1=0.1, epsilon2=0.01))
    theirs = cf.run_queries(fitted, queries, "wachter",
                            baseline=cf.BaselineConfig())
    ours_median = cf.one_hot_consistency(ours, ds.meta).median_abs_sum
    theirs_median = cf.one_hot_consistency(theirs, ds.meta).median_abs_sum
    report(ours_median <= theirs_median,
           "criterion 7 one-hot consistency",
           f"median |group perturbation sum| = {ours_median:.4f} vs wachter "
           f"{theirs_median:.4f} over {len(queries)} queries (needs <=)")


def test_criterion_08_uniform_prior_identity(rng):
    worst = 0.0
    for _ in range(100):
        c = random_circuit(rng, num_classes=2)
        c.log_prior = cm.uniform_log_weights(2)
        x = rng.normal(0.5, 0.5, size=c.num_variables)
        post = inference.posterior(c, x)
        posterior_ratio = post[1] - post[0]
        conditional_ratio = (inference.class_log_density(c, 1, x)
                             - inference.class_log_density(c, 0, x))
        worst = max(worst, abs(posterior_ratio - conditional_ratio))
    report(worst <= 1e-12,
           "criterion 8 uniform-prior identity",
           f"worst |posterior ratio - conditional ratio| = {worst:.2e} "
           f"over 100 models (tol 1e-12)")


def test_criterion_09_serialization_round_trip(tmp_path, rng):
    families = ("gaussian", "bernoulli", "categorical")
    worst = 0.0
    for i in range(100):
        family = families[i % 3]
        c = random_circuit(rng, leaf_family=family)
        path = tmp_path / f"model_{i}.json"
        cm.save(c, path)
        back = cm.load(path)
        if family == "gaussian":
            X = rng.normal(0.5, 0.5, size=(5, c.num_variables))
        else:
            X = rng.integers(0, 2, size=(5, c.num_variables)).astype(float)
        diff = np.abs(inference.log_density(c, X)
                      - inference.log_density(back, X))
        worst = max(worst, float(diff.max()))
    report(worst <= 1e-12,
           "criterion 9 serialization",
           f"worst round-trip |log density delta| = {worst:.2e} "
           f"over 100 models (tol 1e-12)")


def mnist_directory():
    env = os.environ.get("MNIST_DIR")
    candidates = [Path(env)] if env else []
    candidates.append(Path(__file__).resolve().parent.parent / "data" / "mnist")
    for directory in candidates:
        for suffix in ("", ".gz"):
            if (directory / f"train-images-idx3-ubyte{suffix}").exists():
                return directory
    return None


def test_criterion_10_mnist_optional():
    directory = mnist_directory()
    if directory is None:
        skip("criterion 10 mnist",
             "IDX files not found (set MNIST_DIR or place them in data/mnist)")
    digits = (1, 3, 4, 7, 8)
    train = data.load_mnist(directory, digits, part="train")
    test = data.load_mnist(directory, digits, part="t10k")
    structure = StructureConfig(num_classes=len(digits), seed=7)
    tc = training.TrainConfig(epochs=10, batch_size=256, seed=7,
                              variance_floor=0.02)
    fitted, _ = training.fit(build_circuit(train.dimension, structure),
                             train, tc)
    acc = inference.accuracy(fitted, test.features, test.labels)

    source, target = digits.index(1), digits.index(7)
    preds = inference.predict(fitted, test.features)
    rows = np.flatnonzero((test.labels == source) & (preds == source))[:100]
    queries = [(test.features[i], source, target) for i in rows]
    results = cf.run_queries(fitted, queries, "two_step", cf.CfConfig())
    rate = cf.summarize(results).success_rate
    report(acc >= 0.90 and rate >= 0.5,
           "criterion 10 mnist",
           f"test accuracy = {acc:.3f} (needs >= 0.90), 1->7 success rate = "
           f"{rate:.3f} over {len(queries)} queries (needs >= 0.5)")
