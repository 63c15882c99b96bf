"""Molecular graph representation, SMILES-subset parsing, and corpus I/O.

Graphs are undirected and labeled: integer atom-type ids on nodes, integer
bond-type ids on edges.  Each edge is stored exactly once with ``u < v``;
message passing expands to both directions on the fly.
"""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass, field

import numpy as np

# Bond label ids used by the SMILES parser.
BOND_SINGLE = 0
BOND_DOUBLE = 1
BOND_TRIPLE = 2
BOND_AROMATIC = 3

_ORGANIC = ("B", "C", "N", "O", "P", "S", "F", "Cl", "Br", "I")
_AROMATIC = ("b", "c", "n", "o", "p", "s")

# Default atom-type order used when parsing outside a corpus context.
DEFAULT_ATOM_TYPES = _ORGANIC + _AROMATIC

_BOND_CHARS = {"-": BOND_SINGLE, "=": BOND_DOUBLE, "#": BOND_TRIPLE}


class GraphError(ValueError):
    """Invalid graph structure or unsupported graph operation."""


class SmilesError(ValueError):
    """Base class for SMILES parse failures.  Carries the byte offset."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (offset {offset})")
        self.offset = offset


class UnbalancedParens(SmilesError):
    pass


class UnmatchedRingClosure(SmilesError):
    pass


class UnsupportedToken(SmilesError):
    pass


class CorpusError(ValueError):
    """Fatal corpus-file problem (unreadable file, malformed line, bad targets)."""


@dataclass(frozen=True)
class Graph:
    """Undirected labeled graph.  Immutable; safe to share across threads."""

    num_nodes: int
    node_labels: tuple
    edges: tuple  # of (u, v, label) with u < v

    def __post_init__(self):
        if self.num_nodes < 0:
            raise GraphError("negative node count")
        if len(self.node_labels) != self.num_nodes:
            raise GraphError("node label count does not match num_nodes")
        seen = set()
        for u, v, _label in self.edges:
            if u == v:
                raise GraphError(f"self-loop at node {u}")
            if not (0 <= u < v < self.num_nodes):
                raise GraphError(f"bad edge ({u}, {v}) for {self.num_nodes} nodes")
            if (u, v) in seen:
                raise GraphError(f"duplicate edge ({u}, {v})")
            seen.add((u, v))

    @property
    def num_edges(self) -> int:
        return len(self.edges)

    def degrees(self) -> np.ndarray:
        deg = np.zeros(self.num_nodes, dtype=np.int64)
        for u, v, _ in self.edges:
            deg[u] += 1
            deg[v] += 1
        return deg

    def neighbors(self) -> list:
        adj = [[] for _ in range(self.num_nodes)]
        for u, v, _ in self.edges:
            adj[u].append(v)
            adj[v].append(u)
        return adj

    def directed_edges(self):
        """(src, dst, label) arrays with every edge in both directions."""
        if not self.edges:
            z = np.zeros(0, dtype=np.int64)
            return z, z, z
        e = np.asarray(self.edges, dtype=np.int64)
        src = np.concatenate([e[:, 0], e[:, 1]])
        dst = np.concatenate([e[:, 1], e[:, 0]])
        lab = np.concatenate([e[:, 2], e[:, 2]])
        return src, dst, lab

    def adjacency(self) -> np.ndarray:
        a = np.zeros((self.num_nodes, self.num_nodes), dtype=np.float64)
        for u, v, _ in self.edges:
            a[u, v] = 1.0
            a[v, u] = 1.0
        return a

    def relabeled(self, perm) -> "Graph":
        """Apply a node permutation: new index of old node i is perm[i]."""
        labels = [0] * self.num_nodes
        for old, new in enumerate(perm):
            labels[new] = self.node_labels[old]
        edges = []
        for u, v, lab in self.edges:
            a, b = perm[u], perm[v]
            edges.append((min(a, b), max(a, b), lab))
        return Graph(self.num_nodes, tuple(labels), tuple(sorted(edges)))


def make_graph(num_nodes, edges, node_labels=None) -> Graph:
    """Build a Graph, normalizing edge orientation and order."""
    if node_labels is None:
        node_labels = (0,) * num_nodes
    norm = sorted((min(u, v), max(u, v), lab) for u, v, lab in edges)
    return Graph(num_nodes, tuple(node_labels), tuple(norm))


@dataclass(frozen=True)
class DatasetRecord:
    graph: Graph
    targets: tuple  # floats; None marks a missing classification label
    id: str


class AtomVocab:
    """Mapping between atom-type symbols and categorical ids."""

    def __init__(self, symbols=DEFAULT_ATOM_TYPES):
        self.symbols = list(symbols)
        self._index = {s: i for i, s in enumerate(self.symbols)}

    def __len__(self):
        return len(self.symbols)

    def id(self, symbol: str) -> int:
        return self._index[symbol]

    def to_json(self):
        return list(self.symbols)

    @classmethod
    def from_json(cls, data):
        return cls(data)


# --- SMILES parsing -------------------------------------------------------

def _tokenize(text: str):
    """Yield (kind, value, offset) tokens.

    Kinds: atom (value = (symbol, aromatic)), bond, open, close, ring
    (value = ring closure number).
    """
    i, n = 0, len(text)
    while i < n:
        ch = text[i]
        if ch in "([":
            if ch == "(":
                yield "open", None, i
                i += 1
                continue
            # Bracket atom: [symbol] with an optional implicit-H count.
            j = text.find("]", i)
            if j < 0:
                raise UnsupportedToken("unterminated bracket atom", i)
            body = text[i + 1:j]
            sym, rest = _split_bracket_symbol(body, i + 1)
            if rest and not (rest[0] == "H" and rest[1:].isdigit() or rest == "H"):
                raise UnsupportedToken(
                    f"unsupported bracket-atom content {body!r} "
                    "(charges, isotopes, and stereo are outside the subset)", i)
            yield "atom", (sym, sym.islower()), i
            i = j + 1
        elif ch == ")":
            yield "close", None, i
            i += 1
        elif ch in _BOND_CHARS:
            yield "bond", _BOND_CHARS[ch], i
            i += 1
        elif ch == "%":
            if i + 2 >= n or not text[i + 1:i + 3].isdigit():
                raise UnsupportedToken("%% ring closure needs two digits", i)
            yield "ring", int(text[i + 1:i + 3]), i
            i += 3
        elif ch.isdigit():
            if ch == "0":
                raise UnsupportedToken("ring closure digit 0", i)
            yield "ring", int(ch), i
            i += 1
        else:
            two = text[i:i + 2]
            if two in ("Cl", "Br"):
                yield "atom", (two, False), i
                i += 2
            elif ch in _ORGANIC:
                yield "atom", (ch, False), i
                i += 1
            elif ch in _AROMATIC:
                yield "atom", (ch, True), i
                i += 1
            else:
                raise UnsupportedToken(f"unsupported token {ch!r}", i)


def _split_bracket_symbol(body: str, offset: int):
    """Split a bracket-atom body into (symbol, remainder)."""
    if not body:
        raise UnsupportedToken("empty bracket atom", offset)
    if body[0].isdigit() or body[0] in "+-@":
        raise UnsupportedToken(
            f"unsupported bracket-atom content {body!r} "
            "(charges, isotopes, and stereo are outside the subset)", offset)
    for sym in ("Cl", "Br"):
        if body.startswith(sym):
            return sym, body[len(sym):]
    head = body[0]
    if head in _ORGANIC or head in _AROMATIC:
        return head, body[1:]
    raise UnsupportedToken(f"unsupported atom symbol in bracket {body!r}", offset)


def parse_symbols(text: str):
    """Parse SMILES into (symbols, aromatic flags, edges) without a vocabulary.

    Hydrogens are implicit and dropped.  Raises a SmilesError subclass with
    the byte offset on failure.
    """
    if not text:
        raise UnsupportedToken("empty SMILES", 0)
    symbols, aromatic, edges = [], [], []
    edge_set = set()
    prev = None
    pending_bond = None
    pending_offset = 0
    branch_stack = []
    open_offsets = []
    rings = {}  # number -> (atom, explicit bond or None, offset)

    def add_edge(u, v, label, offset):
        key = (min(u, v), max(u, v))
        if u == v:
            raise UnmatchedRingClosure("ring closure produced a self-loop", offset)
        if key in edge_set:
            raise UnmatchedRingClosure("ring closure duplicates an edge", offset)
        edge_set.add(key)
        edges.append((key[0], key[1], label))

    def implicit_bond(u, v):
        if aromatic[u] and aromatic[v]:
            return BOND_AROMATIC
        return BOND_SINGLE

    for kind, value, offset in _tokenize(text):
        if kind == "atom":
            sym, is_arom = value
            idx = len(symbols)
            symbols.append(sym)
            aromatic.append(is_arom)
            if prev is not None:
                label = pending_bond if pending_bond is not None else implicit_bond(prev, idx)
                add_edge(prev, idx, label, offset)
            pending_bond = None
            prev = idx
        elif kind == "bond":
            pending_bond = value
            pending_offset = offset
        elif kind == "open":
            if prev is None:
                raise UnsupportedToken("branch before any atom", offset)
            branch_stack.append(prev)
            open_offsets.append(offset)
        elif kind == "close":
            if not branch_stack:
                raise UnbalancedParens("unmatched ')'", offset)
            prev = branch_stack.pop()
            open_offsets.pop()
        elif kind == "ring":
            if prev is None:
                raise UnmatchedRingClosure("ring closure before any atom", offset)
            if value in rings:
                other, other_bond, _ = rings.pop(value)
                label = pending_bond if pending_bond is not None else other_bond
                if label is None:
                    label = implicit_bond(other, prev)
                add_edge(other, prev, label, offset)
            else:
                rings[value] = (prev, pending_bond, offset)
            pending_bond = None
    if pending_bond is not None:
        raise UnsupportedToken("dangling bond symbol", pending_offset)
    if branch_stack:
        raise UnbalancedParens("unclosed '('", open_offsets[-1])
    if rings:
        number, (_, _, offset) = min(rings.items(), key=lambda kv: kv[1][2])
        raise UnmatchedRingClosure(f"ring closure {number} never closed", offset)
    return symbols, aromatic, edges


def parse_smiles(text: str, vocab: AtomVocab | None = None) -> Graph:
    """Parse a SMILES string from the supported subset into a Graph.

    Node labels index into ``vocab`` (aromatic atoms are distinct lowercase
    symbols); edge labels are the bond ids 0..3.
    """
    if vocab is None:
        vocab = AtomVocab()
    symbols, _aromatic, edges = parse_symbols(text)
    try:
        labels = tuple(vocab.id(s) for s in symbols)
    except KeyError as exc:
        raise UnsupportedToken(f"atom symbol {exc.args[0]!r} not in vocabulary", 0)
    return make_graph(len(symbols), edges, labels)


# --- Elementary graph algorithms ------------------------------------------

def bfs_distances(g: Graph, source: int) -> np.ndarray:
    """Hop distances from ``source``; -1 for unreachable nodes."""
    dist = np.full(g.num_nodes, -1, dtype=np.int64)
    dist[source] = 0
    adj = g.neighbors()
    queue = deque([source])
    while queue:
        u = queue.popleft()
        for v in adj[u]:
            if dist[v] < 0:
                dist[v] = dist[u] + 1
                queue.append(v)
    return dist


def bfs_all_pairs(g: Graph) -> np.ndarray:
    """All-pairs hop-distance matrix.  Raises GraphError on disconnected input."""
    n = g.num_nodes
    out = np.zeros((n, n), dtype=np.int64)
    for s in range(n):
        dist = bfs_distances(g, s)
        bad = np.nonzero(dist < 0)[0]
        if bad.size:
            raise GraphError(f"graph is disconnected: no path from {s} to {bad[0]}")
        out[s] = dist
    return out


def is_connected(g: Graph) -> bool:
    if g.num_nodes == 0:
        return False
    return bool((bfs_distances(g, 0) >= 0).all())


def add_virtual_node(g: Graph, node_label: int | None = None,
                     edge_label: int | None = None) -> Graph:
    """Return a copy of ``g`` with one extra node connected to every node.

    The new node gets a dedicated label (defaults to max existing + 1), and
    its edges a dedicated bond label.  Any two original nodes end up at most
    two hops apart.
    """
    if node_label is None:
        node_label = max(g.node_labels, default=-1) + 1
    if edge_label is None:
        edge_label = max((lab for _, _, lab in g.edges), default=-1) + 1
    vn = g.num_nodes
    edges = list(g.edges) + [(u, vn, edge_label) for u in range(g.num_nodes)]
    return Graph(vn + 1, tuple(g.node_labels) + (node_label,), tuple(edges))


# --- JSON-lines corpus ------------------------------------------------------

@dataclass
class Corpus:
    """Loaded dataset: ordered records plus the vocabulary built from them."""

    records: list
    atom_vocab: AtomVocab
    num_tasks: int
    task_type: str  # "regression" | "classification"
    num_atom_types: int
    skipped: int = 0
    skip_reasons: list = field(default_factory=list)


def _parse_targets(raw, num_tasks, task_type, line_no):
    if not isinstance(raw, list):
        raise CorpusError(f"line {line_no}: targets must be a list")
    if num_tasks is not None and len(raw) != num_tasks:
        raise CorpusError(
            f"line {line_no}: expected {num_tasks} targets, got {len(raw)}")
    out = []
    for t in raw:
        if t is None:
            if task_type == "regression":
                raise CorpusError(f"line {line_no}: missing regression target")
            out.append(None)
        else:
            val = float(t)
            if task_type == "classification" and val not in (0.0, 1.0):
                raise CorpusError(f"line {line_no}: classification target {t!r}")
            out.append(val)
    return tuple(out)


def load_corpus(path) -> Corpus:
    """Load a JSON-lines corpus.

    Each line is a record ``{"id", "smiles" | ("nodes","edges"), "targets"}``.
    An optional leading header line ``{"tasks": int, "task_type": str}``
    declares the task layout; otherwise it is inferred from the first record
    (all targets in {0, 1, null} reads as classification).  Records whose
    SMILES fall outside the supported subset are skipped and counted, not
    fatal; malformed JSON is fatal and reported with its line number.
    """
    try:
        with open(path, "r", encoding="utf-8") as fh:
            lines = fh.read().splitlines()
    except OSError as exc:
        raise CorpusError(f"cannot read corpus {path}: {exc}")

    rows = []
    for line_no, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise CorpusError(f"line {line_no}: malformed JSON ({exc.msg})")
        rows.append((line_no, obj))

    num_tasks = None
    task_type = None
    if rows and "tasks" in rows[0][1] and "smiles" not in rows[0][1] \
            and "nodes" not in rows[0][1]:
        header = rows.pop(0)[1]
        num_tasks = int(header["tasks"])
        task_type = str(header.get("task_type", "regression"))
        if task_type not in ("regression", "classification"):
            raise CorpusError(f"unknown task_type {task_type!r}")

    # First pass: parse structures, collect the atom-type vocabulary.
    parsed = []  # (line_no, id, payload) with payload either symbols-graph or Graph
    symbols_seen = set()
    skipped = 0
    skip_reasons = []
    max_raw_label = -1
    for line_no, obj in rows:
        rec_id = str(obj.get("id", f"line{line_no}"))
        if "targets" not in obj:
            raise CorpusError(f"line {line_no}: record has no targets")
        if "smiles" in obj:
            try:
                symbols, _arom, edges = parse_symbols(obj["smiles"])
            except SmilesError as exc:
                skipped += 1
                skip_reasons.append((line_no, str(exc)))
                continue
            symbols_seen.update(symbols)
            parsed.append((line_no, rec_id, (symbols, edges), obj["targets"]))
        elif "nodes" in obj and "edges" in obj:
            labels = [int(x) for x in obj["nodes"]]
            edges = [(int(u), int(v), int(lab)) for u, v, lab in obj["edges"]]
            try:
                graph = make_graph(len(labels), edges, labels)
            except GraphError as exc:
                skipped += 1
                skip_reasons.append((line_no, str(exc)))
                continue
            if labels:
                max_raw_label = max(max_raw_label, max(labels))
            parsed.append((line_no, rec_id, graph, obj["targets"]))
        else:
            raise CorpusError(f"line {line_no}: record needs smiles or nodes/edges")

    vocab = AtomVocab(sorted(symbols_seen))

    records = []
    for line_no, rec_id, payload, raw_targets in parsed:
        if task_type is None:
            vals = [t for t in raw_targets] if isinstance(raw_targets, list) else []
            task_type = "classification" if vals and all(
                t is None or t in (0, 1, 0.0, 1.0) for t in vals) else "regression"
        if num_tasks is None:
            num_tasks = len(raw_targets)
        targets = _parse_targets(raw_targets, num_tasks, task_type, line_no)
        if isinstance(payload, Graph):
            graph = payload
        else:
            symbols, edges = payload
            labels = tuple(vocab.id(s) for s in symbols)
            graph = make_graph(len(symbols), edges, labels)
        records.append(DatasetRecord(graph=graph, targets=targets, id=rec_id))

    if num_tasks is None:
        raise CorpusError("corpus contains no usable records")
    num_atom_types = max(len(vocab), max_raw_label + 1)
    return Corpus(records=records, atom_vocab=vocab, num_tasks=num_tasks,
                  task_type=task_type, num_atom_types=num_atom_types,
                  skipped=skipped, skip_reasons=skip_reasons)
