"""Sweep two-step counterfactual step sizes on two moons and compare
against the iterative baseline.

Trains a class-conditional circuit, then reports success rate, final log
density, perturbation size, and wall time for every (epsilon1, epsilon2)
pair plus one baseline row.
"""

import argparse
import itertools
import sys

import numpy as np

from cfspn import counterfactual as cf
from cfspn import data, inference, training
from cfspn.structure import StructureConfig, build_circuit

EPSILON1_GRID = (0.1, 1.0, 10.0)
EPSILON2_GRID = (0.01, 0.1, 1.0)


def parse_args(argv):
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--n", type=int, default=2000)
    p.add_argument("--noise", type=float, default=0.1)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--epochs", type=int, default=60)
    p.add_argument("--variance-floor", type=float, default=0.02)
    p.add_argument("--max-queries", type=int, default=200)
    p.add_argument("--baseline-iters", type=int, default=1000)
    return p.parse_args(argv)


def row(label, results):
    m = cf.summarize(results)
    deltas = [float(np.linalg.norm(r.x_prime - r.x)) for r in results]
    return (f"{label:<18} {m.success_rate:>8.3f} {m.mean_log_density:>10.3f} "
            f"{np.mean(deltas):>8.3f} {m.mean_grad_evals:>7.1f} "
            f"{m.mean_time * 1e3:>9.2f}")


def main(argv=None):
    args = parse_args(argv)
    ds = data.make_moons(args.n, args.noise, seed=args.seed)
    train, test = data.split(ds, 0.7, seed=args.seed)
    structure = StructureConfig(num_classes=2, seed=args.seed)
    tc = training.TrainConfig(epochs=args.epochs, seed=args.seed,
                              variance_floor=args.variance_floor)
    circuit, record = training.fit(build_circuit(2, structure), train, tc)
    acc = inference.accuracy(circuit, test.features, test.labels)
    print(f"trained {args.epochs} epochs, test accuracy {acc:.3f}, "
          f"{len(record.train_log_likelihood)} epochs run")

    preds = inference.predict(circuit, test.features)
    rows = np.flatnonzero(preds != 1)[:args.max_queries]
    queries = [(test.features[i], int(preds[i]), 1) for i in rows]
    print(f"{len(queries)} queries (predicted class != 1, target 1)\n")

    print(f"{'method':<18} {'success':>8} {'logdens':>10} {'|dx|':>8} "
          f"{'grads':>7} {'ms/query':>9}")
    for e1, e2 in itertools.product(EPSILON1_GRID, EPSILON2_GRID):
        cfg = cf.CfConfig(epsilon1=e1, epsilon2=e2)
        results = cf.run_queries(circuit, queries, "two_step", cfg)
        print(row(f"two_step {e1}/{e2}", results))
    baseline = cf.BaselineConfig(max_iters=args.baseline_iters,
                                 early_stop=False)
    results = cf.run_queries(circuit, queries, "wachter", baseline=baseline)
    print(row(f"wachter {args.baseline_iters}", results))
    return 0


if __name__ == "__main__":
    sys.exit(main())
