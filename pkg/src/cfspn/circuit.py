"""Circuit representation, validation, log-space evaluation and serialization.

A circuit is a DAG of sum, product and univariate leaf nodes stored in a flat
arena in topological order (children before parents), with one root per class
plus a class prior.  All evaluation happens in log space; linear-space
probabilities only appear at API boundaries.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Union

import numpy as np

FORMAT_VERSION = 1

#: Normalization tolerance for weight vectors, leaf simplices and priors.
NORMALIZATION_TOL = 1e-9

#: log of the smallest positive normal float64; densities below this underflow.
LOG_TINY = math.log(np.finfo(np.float64).tiny)

LOG_2PI = math.log(2.0 * math.pi)


class CircuitFormatError(ValueError):
    """A model document could not be parsed into a valid circuit."""


@dataclass(eq=False)
class GaussianLeaf:
    variable: int
    mean: float
    variance: float

    kind = "gaussian"


@dataclass(eq=False)
class BernoulliLeaf:
    variable: int
    p: float

    kind = "bernoulli"


@dataclass(eq=False)
class CategoricalLeaf:
    variable: int
    probabilities: np.ndarray

    kind = "categorical"

    def __post_init__(self):
        self.probabilities = np.asarray(self.probabilities, dtype=np.float64)


@dataclass(eq=False)
class SumNode:
    children: list[int]
    log_weights: np.ndarray

    kind = "sum"

    def __post_init__(self):
        self.log_weights = np.asarray(self.log_weights, dtype=np.float64)


@dataclass(eq=False)
class ProductNode:
    children: list[int]

    kind = "product"


LeafNode = Union[GaussianLeaf, BernoulliLeaf, CategoricalLeaf]
Node = Union[GaussianLeaf, BernoulliLeaf, CategoricalLeaf, SumNode, ProductNode]


def uniform_log_weights(n: int) -> np.ndarray:
    return np.full(n, -math.log(n), dtype=np.float64)


@dataclass(eq=False)
class Circuit:
    """Flat-arena circuit with per-class roots.

    ``nodes`` must list children before parents so one bottom-up pass
    evaluates the whole DAG.  Instances are treated as immutable after
    construction; training works on a private copy.
    """

    nodes: list[Node]
    class_roots: list[int]
    log_prior: np.ndarray
    num_variables: int
    format_version: int = FORMAT_VERSION

    def __post_init__(self):
        self.log_prior = np.asarray(self.log_prior, dtype=np.float64)

    @property
    def num_classes(self) -> int:
        return len(self.class_roots)

    @cached_property
    def scopes(self) -> list[frozenset[int]]:
        """Variable scope of every node, computed bottom-up.

        Assumes valid child references and topological order; use
        :func:`validate` first on untrusted circuits.
        """
        scopes: list[frozenset[int]] = []
        for node in self.nodes:
            if isinstance(node, (GaussianLeaf, BernoulliLeaf, CategoricalLeaf)):
                scopes.append(frozenset((node.variable,)))
            else:
                merged: set[int] = set()
                for c in node.children:
                    merged |= scopes[c]
                scopes.append(frozenset(merged))
        return scopes


@dataclass
class Violation:
    node: int | None
    kind: str
    message: str


@dataclass
class ValidationReport:
    violations: list[Violation] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def summary(self) -> str:
        if self.ok:
            return "ok"
        return "; ".join(f"[{v.kind}] node {v.node}: {v.message}" for v in self.violations)


def validate(circuit: Circuit, variance_floor: float = 0.0) -> ValidationReport:
    """Check every structural invariant of a circuit, reporting all violations.

    Pure: never raises on bad circuits and never mutates its input.  Checks
    node references and topological order, smoothness of sum nodes,
    decomposability of product nodes, weight/prior normalization, leaf
    parameter domains and class-root scopes.
    """
    report = ValidationReport()
    n = len(circuit.nodes)

    def bad(node: int | None, kind: str, message: str) -> None:
        report.violations.append(Violation(node, kind, message))

    if n == 0:
        bad(None, "structure", "circuit has no nodes")
        return report
    if circuit.num_variables < 1:
        bad(None, "structure", f"num_variables must be >= 1, got {circuit.num_variables}")

    # Child references must resolve and respect children-before-parents order.
    refs_ok = True
    for i, node in enumerate(circuit.nodes):
        if isinstance(node, (SumNode, ProductNode)):
            if len(node.children) < 1:
                bad(i, "structure", f"{node.kind} node has no children")
                refs_ok = False
                continue
            for c in node.children:
                if not (0 <= c < n):
                    bad(i, "node-ref", f"child id {c} out of range")
                    refs_ok = False
                elif c >= i:
                    bad(i, "topological-order", f"child {c} does not precede parent {i}")
                    refs_ok = False

    # Leaf parameter domains.
    for i, node in enumerate(circuit.nodes):
        if isinstance(node, (GaussianLeaf, BernoulliLeaf, CategoricalLeaf)):
            if not (0 <= node.variable < circuit.num_variables):
                bad(i, "leaf-domain", f"variable {node.variable} out of range")
        if isinstance(node, GaussianLeaf):
            if not (node.variance > 0.0) or not np.isfinite(node.variance):
                bad(i, "leaf-domain", f"variance {node.variance} is not positive")
            elif node.variance < variance_floor - 1e-12:
                bad(i, "leaf-domain", f"variance {node.variance} below floor {variance_floor}")
            if not np.isfinite(node.mean):
                bad(i, "leaf-domain", f"mean {node.mean} is not finite")
        elif isinstance(node, BernoulliLeaf):
            if not (0.0 <= node.p <= 1.0):
                bad(i, "leaf-domain", f"p {node.p} outside [0, 1]")
        elif isinstance(node, CategoricalLeaf):
            probs = node.probabilities
            if probs.ndim != 1 or probs.size < 1:
                bad(i, "leaf-domain", "probabilities must be a non-empty vector")
            elif np.any(probs < 0) or abs(probs.sum() - 1.0) > NORMALIZATION_TOL:
                bad(i, "leaf-domain", "probabilities are not a simplex")

    # Sum-weight normalization.
    for i, node in enumerate(circuit.nodes):
        if isinstance(node, SumNode):
            lw = node.log_weights
            if lw.shape != (len(node.children),):
                bad(i, "weight-normalization",
                    f"{lw.size} weights for {len(node.children)} children")
                continue
            if np.any(np.isnan(lw)) or np.any(lw == np.inf):
                bad(i, "weight-normalization", "log weights contain nan or +inf")
                continue
            total = np.exp(lw).sum()
            if abs(total - 1.0) > NORMALIZATION_TOL:
                bad(i, "weight-normalization", f"weights sum to {total!r}")

    if not refs_ok:
        # Scope-dependent checks need resolvable references.
        return report

    scopes = circuit.scopes
    for i, node in enumerate(circuit.nodes):
        if isinstance(node, SumNode):
            first = scopes[node.children[0]]
            for c in node.children[1:]:
                if scopes[c] != first:
                    bad(i, "smoothness", f"children {node.children[0]} and {c} differ in scope")
                    break
        elif isinstance(node, ProductNode):
            seen: set[int] = set()
            for c in node.children:
                if seen & scopes[c]:
                    bad(i, "decomposability",
                        f"child {c} overlaps the scope of a sibling")
                    break
                seen |= scopes[c]

    # Class roots and prior.
    if not circuit.class_roots:
        bad(None, "structure", "circuit has no class roots")
    full = frozenset(range(circuit.num_variables))
    for y, r in enumerate(circuit.class_roots):
        if not (0 <= r < n):
            bad(None, "node-ref", f"class root {y} id {r} out of range")
        elif scopes[r] != full:
            bad(r, "scope", f"class root {y} does not cover all variables")

    prior = circuit.log_prior
    if prior.shape != (len(circuit.class_roots),):
        bad(None, "prior", f"log_prior length {prior.size} != {len(circuit.class_roots)} classes")
    elif np.any(np.isnan(prior)) or np.any(prior == np.inf):
        bad(None, "prior", "log_prior contains nan or +inf")
    elif abs(np.exp(prior).sum() - 1.0) > NORMALIZATION_TOL:
        bad(None, "prior", f"prior sums to {np.exp(prior).sum()!r}")

    return report


def log_value(circuit: Circuit, root: int, evidence: np.ndarray) -> float:
    """Log value of one node on a single evidence row, in nats.

    Evidence is a length-d float vector; NaN marks a marginalized variable
    (the leaf contributes log 1).  A fully marginalized query returns 0.0
    exactly: a valid circuit is normalized by construction, so no numerical
    pass is needed.
    """
    from . import engine

    if not (0 <= root < len(circuit.nodes)):
        raise ValueError(f"invalid root id {root}")
    x = np.asarray(evidence, dtype=np.float64)
    if x.shape != (circuit.num_variables,):
        raise ValueError(
            f"evidence has shape {x.shape}, expected ({circuit.num_variables},)")
    if np.all(np.isnan(x)):
        return 0.0
    values = engine.compile_circuit(circuit).forward(x[None, :])
    return float(values[root, 0])


def _node_to_dict(node: Node) -> dict:
    if isinstance(node, GaussianLeaf):
        return {"kind": "gaussian", "variable": node.variable,
                "mean": node.mean, "variance": node.variance}
    if isinstance(node, BernoulliLeaf):
        return {"kind": "bernoulli", "variable": node.variable, "p": node.p}
    if isinstance(node, CategoricalLeaf):
        return {"kind": "categorical", "variable": node.variable,
                "probabilities": node.probabilities.tolist()}
    if isinstance(node, SumNode):
        return {"kind": "sum", "children": list(node.children),
                "log_weights": node.log_weights.tolist()}
    if isinstance(node, ProductNode):
        return {"kind": "product", "children": list(node.children)}
    raise TypeError(f"unknown node type {type(node)!r}")


def _node_from_dict(obj: dict, index: int) -> Node:
    try:
        kind = obj["kind"]
        if kind == "gaussian":
            return GaussianLeaf(int(obj["variable"]), float(obj["mean"]),
                                float(obj["variance"]))
        if kind == "bernoulli":
            return BernoulliLeaf(int(obj["variable"]), float(obj["p"]))
        if kind == "categorical":
            return CategoricalLeaf(int(obj["variable"]),
                                   np.asarray(obj["probabilities"], dtype=np.float64))
        if kind == "sum":
            return SumNode([int(c) for c in obj["children"]],
                           np.asarray(obj["log_weights"], dtype=np.float64))
        if kind == "product":
            return ProductNode([int(c) for c in obj["children"]])
    except (KeyError, TypeError, ValueError) as exc:
        raise CircuitFormatError(f"malformed node {index}: {exc}") from exc
    raise CircuitFormatError(f"node {index} has unknown kind {kind!r}")


def save(circuit: Circuit, destination: str | Path) -> None:
    """Write a circuit as a versioned JSON document.

    Floats are emitted as shortest decimal strings that round-trip to the
    identical float64, so ``load(save(c))`` is bit-equal parameter-wise.
    """
    report = validate(circuit)
    if not report.ok:
        raise ValueError(f"refusing to save an invalid circuit: {report.summary()}")
    doc = {
        "format_version": circuit.format_version,
        "num_variables": circuit.num_variables,
        "log_prior": circuit.log_prior.tolist(),
        "class_roots": list(circuit.class_roots),
        "nodes": [_node_to_dict(n) for n in circuit.nodes],
    }
    with open(destination, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=1)
        fh.write("\n")


def load(source: str | Path) -> Circuit:
    """Load and validate a circuit saved by :func:`save`.

    Raises :class:`CircuitFormatError` on version mismatch, malformed
    documents or circuits that fail validation after parsing.
    """
    try:
        with open(source, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise CircuitFormatError(f"not a JSON document: {exc}") from exc
    if not isinstance(doc, dict):
        raise CircuitFormatError("top level is not an object")
    version = doc.get("format_version")
    if version != FORMAT_VERSION:
        raise CircuitFormatError(
            f"format_version {version!r} not supported (expected {FORMAT_VERSION})")
    try:
        circuit = Circuit(
            nodes=[_node_from_dict(o, i) for i, o in enumerate(doc["nodes"])],
            class_roots=[int(r) for r in doc["class_roots"]],
            log_prior=np.asarray(doc["log_prior"], dtype=np.float64),
            num_variables=int(doc["num_variables"]),
            format_version=int(version),
        )
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, CircuitFormatError):
            raise
        raise CircuitFormatError(f"malformed document: {exc}") from exc
    report = validate(circuit)
    if not report.ok:
        raise CircuitFormatError(f"loaded circuit is invalid: {report.summary()}")
    return circuit


def structural_equal(a: Circuit, b: Circuit) -> bool:
    """Node-by-node equality with bit-exact parameter comparison."""
    if (a.num_variables != b.num_variables or a.format_version != b.format_version
            or list(a.class_roots) != list(b.class_roots)
            or not np.array_equal(a.log_prior, b.log_prior)
            or len(a.nodes) != len(b.nodes)):
        return False
    for na, nb in zip(a.nodes, b.nodes):
        if type(na) is not type(nb):
            return False
        if isinstance(na, GaussianLeaf):
            if (na.variable, na.mean, na.variance) != (nb.variable, nb.mean, nb.variance):
                return False
        elif isinstance(na, BernoulliLeaf):
            if (na.variable, na.p) != (nb.variable, nb.p):
                return False
        elif isinstance(na, CategoricalLeaf):
            if na.variable != nb.variable or not np.array_equal(na.probabilities,
                                                                nb.probabilities):
                return False
        elif isinstance(na, SumNode):
            if (list(na.children) != list(nb.children)
                    or not np.array_equal(na.log_weights, nb.log_weights)):
                return False
        else:
            if list(na.children) != list(nb.children):
                return False
    return True
