"""Input validation for the estimator facade.

Estimators accept either SMILES strings or Graph objects; these helpers
normalize both into the Corpus shape the training loop consumes, with
index-carrying error messages.
"""

from __future__ import annotations

import numpy as np

from .graphs import (AtomVocab, Corpus, DatasetRecord, Graph, SmilesError,
                     make_graph, parse_symbols)


def check_structures(X) -> tuple:
    """Normalize a sequence of SMILES or Graphs.

    Returns (graphs, atom_vocab, num_atom_types).  All-string input builds
    a sorted vocabulary over the set; all-Graph input keeps raw labels.
    Mixing the two forms is rejected.
    """
    items = list(X)
    if not items:
        raise ValueError("X is empty")
    kinds = {type(x) for x in items}
    if all(isinstance(x, Graph) for x in items):
        max_label = max((max(g.node_labels) for g in items if g.node_labels),
                        default=0)
        return items, None, max_label + 1
    if all(isinstance(x, str) for x in items):
        parsed = []
        symbols_seen: set = set()
        for i, smiles in enumerate(items):
            try:
                symbols, _arom, edges = parse_symbols(smiles)
            except SmilesError as exc:
                raise ValueError(f"X[{i}]: cannot parse {smiles!r}: {exc}")
            symbols_seen.update(symbols)
            parsed.append((symbols, edges))
        vocab = AtomVocab(sorted(symbols_seen))
        graphs = [make_graph(len(sym), edges, [vocab.id(s) for s in sym])
                  for sym, edges in parsed]
        return graphs, vocab, len(vocab)
    raise TypeError(f"X must be all SMILES strings or all Graphs, "
                    f"got types {sorted(t.__name__ for t in kinds)}")


def check_targets(y, n_samples: int, task_type: str) -> list:
    """Coerce targets to per-record tuples; NaN marks a missing label."""
    arr = np.asarray(y, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[:, None]
    if arr.ndim != 2 or arr.shape[0] != n_samples:
        raise ValueError(f"y shape {np.shape(y)} does not match "
                         f"{n_samples} samples")
    rows = []
    for i in range(n_samples):
        row = []
        for value in arr[i]:
            if np.isnan(value):
                if task_type == "regression":
                    raise ValueError(f"y[{i}]: NaN regression target")
                row.append(None)
            else:
                if task_type == "classification" and value not in (0.0, 1.0):
                    raise ValueError(f"y[{i}]: classification targets must "
                                     f"be 0/1, got {value}")
                row.append(float(value))
        rows.append(tuple(row))
    return rows


def corpus_from_arrays(X, y, task_type: str) -> Corpus:
    """In-memory Corpus from estimator-style (X, y) input."""
    graphs, vocab, num_atom_types = check_structures(X)
    targets = check_targets(y, len(graphs), task_type)
    num_tasks = len(targets[0])
    records = [DatasetRecord(graph=g, targets=t, id=f"x{i}")
               for i, (g, t) in enumerate(zip(graphs, targets))]
    return Corpus(records=records, atom_vocab=vocab, num_tasks=num_tasks,
                  task_type=task_type, num_atom_types=num_atom_types)


def graphs_for_vocab(X, vocab: AtomVocab | None) -> list:
    """Parse predict-time input against the vocabulary fixed at fit time."""
    items = list(X)
    if all(isinstance(x, Graph) for x in items):
        return items
    if vocab is None:
        raise ValueError("estimator was fitted on Graphs; cannot take SMILES")
    graphs = []
    for i, smiles in enumerate(items):
        if not isinstance(smiles, str):
            raise TypeError(f"X[{i}]: expected SMILES string")
        try:
            symbols, _arom, edges = parse_symbols(smiles)
            labels = [vocab.id(s) for s in symbols]
        except SmilesError as exc:
            raise ValueError(f"X[{i}]: cannot parse {smiles!r}: {exc}")
        except KeyError as exc:
            raise ValueError(f"X[{i}]: atom type {exc.args[0]!r} "
                             f"was not seen during fit")
        graphs.append(make_graph(len(symbols), edges, labels))
    return graphs
