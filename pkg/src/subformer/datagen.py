"""Deterministic synthetic corpora for tests and fixtures.

Molecules are composed from a small fragment grammar (chains, branches,
plain/aromatic/fused rings, halogens) kept inside the supported SMILES
subset, and every emitted string is re-parsed as a self-check.  Targets
are a fixed structural score so regression fixtures are learnable:
0.2 * cycle count + 0.1 * heteroatom count + 0.02 * atom count.
"""

from __future__ import annotations

import json

from . import autograd as ag
from .graphs import Graph, make_graph, parse_smiles, parse_symbols

STREAM_DATAGEN = 9

CHAIN_ATOMS = ("C", "C", "C", "C", "N", "O", "S")
HALOGENS = ("F", "Cl", "Br", "I")
RINGS = (
    "C1CCCCC1",
    "C1CCCC1",
    "C1CC1",
    "c1ccccc1",
    "C1CCC2CCCCC2C1",
    "c1ccc2ccccc2c1",
    "C1CCOC1",
    "c1ccncc1",
)


def _chain(rng, length: int) -> str:
    return "".join(rng.choice(CHAIN_ATOMS) for _ in range(length))


def random_smiles(rng) -> str:
    """One random molecule; always starts with an atom so branches attach."""
    shape = rng.random()
    if shape < 0.15:
        # long chain, occasionally branched
        parts = [_chain(rng, int(rng.integers(12, 23)))]
        if rng.random() < 0.5:
            parts.append(f"({_chain(rng, int(rng.integers(1, 4)))})")
            parts.append(_chain(rng, int(rng.integers(2, 6))))
        return "".join(parts)
    parts = [_chain(rng, int(rng.integers(1, 5)))]
    for _ in range(int(rng.integers(1, 4))):
        kind = rng.random()
        if kind < 0.45:
            parts.append(str(rng.choice(RINGS)))
        elif kind < 0.7:
            sub = str(rng.choice(HALOGENS)) if rng.random() < 0.4 \
                else _chain(rng, int(rng.integers(1, 4)))
            parts.append(f"({sub})")
            parts.append(_chain(rng, int(rng.integers(1, 3))))
        else:
            parts.append(_chain(rng, int(rng.integers(2, 6))))
    return "".join(parts)


def _hetero_count(symbols) -> int:
    return sum(1 for s in symbols if s.upper() != "C")


def structural_target(smiles: str) -> float:
    """Fixed learnable score: cycles, heteroatoms, and size, weighted."""
    graph = parse_smiles(smiles)
    symbols, _, _ = parse_symbols(smiles)
    cycles = graph.num_edges - graph.num_nodes + 1
    return round(0.2 * cycles + 0.1 * _hetero_count(symbols)
                 + 0.02 * graph.num_nodes, 6)


def make_molecules(count: int, seed: int) -> list:
    """(id, smiles, target) rows; every SMILES re-parses successfully."""
    rng = ag.make_rng(seed, STREAM_DATAGEN)
    rows = []
    while len(rows) < count:
        smiles = random_smiles(rng)
        target = structural_target(smiles)  # parses; raises if grammar slipped
        rows.append((f"mol{len(rows):05d}", smiles, target))
    return rows


def write_corpus(path, rows, tasks: int = 1,
                 task_type: str = "regression"):
    """JSONL corpus with a header line, byte-deterministic."""
    with open(path, "w") as fh:
        fh.write(json.dumps({"tasks": tasks, "task_type": task_type},
                            sort_keys=True) + "\n")
        for rid, smiles, target in rows:
            fh.write(json.dumps({"id": rid, "smiles": smiles,
                                 "targets": [target]}, sort_keys=True) + "\n")


def random_graph(rng, num_nodes: int, extra_edges: int = 0,
                 num_labels: int = 3) -> Graph:
    """Connected random graph: a random tree plus extra non-tree edges."""
    edges = set()
    for v in range(1, num_nodes):
        u = int(rng.integers(0, v))
        edges.add((u, v, 0))
    tries = 0
    while extra_edges > 0 and tries < 50 * (extra_edges + 1):
        tries += 1
        u = int(rng.integers(0, num_nodes))
        v = int(rng.integers(0, num_nodes))
        if u == v:
            continue
        e = (min(u, v), max(u, v), 0)
        if e in edges:
            continue
        edges.add(e)
        extra_edges -= 1
    labels = [int(rng.integers(0, num_labels)) for _ in range(num_nodes)]
    return make_graph(num_nodes, sorted(edges), labels)
