"""Junction-tree decomposition of molecular graphs.

A graph is decomposed into clusters (rings, non-ring bonds, and singleton
atoms for highly shared atoms), the clusters are joined where they share
atoms, and a maximal spanning tree of that cluster graph becomes the
junction tree.  The binary assignment matrix S maps each cluster (row) to
its member atoms (columns).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .graphs import Graph, GraphError, is_connected

RING = "ring"
BOND = "bond"
SINGLETON = "singleton"


class DecompositionError(ValueError):
    """Raised when a graph cannot be decomposed (disconnected, empty)."""


@dataclass(frozen=True)
class Cluster:
    kind: str
    atoms: tuple  # sorted node indices
    type_key: str  # categorical identity, e.g. "Ring_6", "Bond_0", "Singleton_2"


@dataclass(frozen=True)
class Decomposition:
    clusters: tuple
    tree_edges: tuple  # (i, j) cluster-index pairs, i < j
    assignment: np.ndarray  # S, shape (num clusters, num atoms), {0,1}
    # Cluster atom sets before singleton extraction, aligned with `clusters`
    # (singleton rows repeat their single atom).  Kept for coverage checks.
    original_atoms: tuple

    @property
    def num_clusters(self) -> int:
        return len(self.clusters)


def _bfs_tree(g: Graph):
    """Parent pointers and visit order of a BFS spanning tree rooted at 0."""
    parent = [-1] * g.num_nodes
    order = []
    seen = [False] * g.num_nodes
    seen[0] = True
    adj = g.neighbors()
    for row in adj:
        row.sort()
    queue = [0]
    while queue:
        u = queue.pop(0)
        order.append(u)
        for v in adj[u]:
            if not seen[v]:
                seen[v] = True
                parent[v] = u
                queue.append(v)
    return parent, order


def _edge_key(u, v):
    return (u, v) if u < v else (v, u)


def _cycle_nodes(edge_set):
    """Ordered node list of a simple cycle given as a set of edges, or None."""
    adj = {}
    for u, v in edge_set:
        adj.setdefault(u, []).append(v)
        adj.setdefault(v, []).append(u)
    if any(len(nb) != 2 for nb in adj.values()):
        return None
    start = min(adj)
    prev, cur = None, start
    nodes = []
    while True:
        nodes.append(cur)
        a, b = sorted(adj[cur])
        nxt = a if a != prev else b
        prev, cur = cur, nxt
        if cur == start:
            break
    if len(nodes) != len(adj):
        return None  # more than one component
    return nodes


def cycle_basis(g: Graph):
    """Fundamental cycle basis, XOR-reduced toward smallest total length.

    Cycles come from a BFS spanning tree rooted at node 0; pairs are then
    greedily combined whenever the symmetric difference is a strictly
    shorter simple cycle.  Returns ordered node lists, sorted by (length,
    nodes); deterministic for a fixed node ordering.
    """
    if not is_connected(g):
        raise DecompositionError("cycle basis requires a connected graph")
    parent, order = _bfs_tree(g)
    depth = [0] * g.num_nodes
    for u in order:
        if parent[u] >= 0:
            depth[u] = depth[parent[u]] + 1
    tree_edges = {_edge_key(u, parent[u]) for u in range(g.num_nodes) if parent[u] >= 0}

    basis = []
    for u, v, _lab in g.edges:
        if _edge_key(u, v) in tree_edges:
            continue
        cyc = {_edge_key(u, v)}
        a, b = u, v
        while depth[a] > depth[b]:
            cyc.add(_edge_key(a, parent[a]))
            a = parent[a]
        while depth[b] > depth[a]:
            cyc.add(_edge_key(b, parent[b]))
            b = parent[b]
        while a != b:
            cyc.add(_edge_key(a, parent[a]))
            cyc.add(_edge_key(b, parent[b]))
            a, b = parent[a], parent[b]
        basis.append(frozenset(cyc))

    # Pairwise XOR reduction: replace the longer cycle whenever the symmetric
    # difference is a strictly shorter simple cycle.
    changed = True
    while changed:
        changed = False
        for i in range(len(basis)):
            for j in range(len(basis)):
                if i == j:
                    continue
                x = basis[i] ^ basis[j]
                if x and len(x) < max(len(basis[i]), len(basis[j])) \
                        and _cycle_nodes(x) is not None:
                    k = i if len(basis[i]) >= len(basis[j]) else j
                    basis[k] = frozenset(x)
                    changed = True
    cycles = [_cycle_nodes(c) for c in basis]
    cycles.sort(key=lambda c: (len(c), sorted(c)))
    return cycles


def maximal_spanning_tree(num_nodes: int, weighted_edges):
    """Maximum-weight spanning tree via greedy Kruskal.

    ``weighted_edges`` is a list of (i, j, weight).  Ties break on the
    lexicographically smallest (min index, max index) pair, so the result is
    deterministic.  Raises DecompositionError if the graph is disconnected.
    """
    if num_nodes == 0:
        return []
    parent = list(range(num_nodes))

    def find(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    ordered = sorted(
        ((min(i, j), max(i, j), w) for i, j, w in weighted_edges),
        key=lambda e: (-e[2], e[0], e[1]))
    out = []
    for i, j, _w in ordered:
        ri, rj = find(i), find(j)
        if ri != rj:
            parent[ri] = rj
            out.append((i, j))
            if len(out) == num_nodes - 1:
                break
    if len(out) != num_nodes - 1:
        raise DecompositionError("cluster graph is disconnected")
    return out


def ring_type_key(size: int) -> str:
    return f"Ring_{size}"


def bond_type_key(bond_label: int) -> str:
    return f"Bond_{bond_label}"


def singleton_type_key(atom_label: int) -> str:
    return f"Singleton_{atom_label}"


def decompose(g: Graph) -> Decomposition:
    """Decompose a connected graph into its junction tree.

    Rings come from the cycle basis (bridged rings sharing three or more
    atoms are merged); every edge outside a ring becomes a bond cluster;
    atoms in more than two clusters become singleton clusters and leave
    their bond clusters.  Clusters sharing atoms are joined (weight = shared
    atom count), singletons are joined to the bond clusters that lost them
    (weight 1), and the maximal spanning tree is the junction tree.
    """
    if g.num_nodes == 0:
        raise DecompositionError("cannot decompose an empty graph")
    if not is_connected(g):
        raise DecompositionError("cannot decompose a disconnected graph")

    rings = [set(c) for c in cycle_basis(g)]

    # Merge bridged rings sharing >= 3 atoms until stable.
    merged = True
    while merged:
        merged = False
        for i in range(len(rings)):
            for j in range(i + 1, len(rings)):
                if len(rings[i] & rings[j]) >= 3:
                    rings[i] |= rings[j]
                    del rings[j]
                    merged = True
                    break
            if merged:
                break
    rings.sort(key=lambda s: sorted(s))

    clusters = []  # (kind, set of atoms, type_key)
    for ring in rings:
        clusters.append([RING, set(ring), ring_type_key(len(ring))])

    bond_members = {}  # cluster index -> (u, v)
    for u, v, lab in g.edges:
        if any(u in ring and v in ring for ring in rings):
            continue
        bond_members[len(clusters)] = (u, v)
        clusters.append([BOND, {u, v}, bond_type_key(lab)])

    # Isolated single-node graph: no rings, no bonds.
    if not clusters:
        clusters.append([SINGLETON, {0}, singleton_type_key(g.node_labels[0])])

    original_atoms = [frozenset(c[1]) for c in clusters]

    membership = {}
    for idx, (_kind, atoms, _key) in enumerate(clusters):
        for a in atoms:
            membership.setdefault(a, []).append(idx)

    attach_edges = []
    crowded = sorted(a for a, cs in membership.items() if len(cs) > 2)
    for atom in crowded:
        s_idx = len(clusters)
        clusters.append(
            [SINGLETON, {atom}, singleton_type_key(g.node_labels[atom])])
        original_atoms.append(frozenset({atom}))
        for c_idx in membership[atom]:
            kind, atoms, _key = clusters[c_idx]
            if kind != BOND:
                continue
            # Removing the atom must not empty the cluster; a bond between
            # two crowded atoms stays intact and connects by intersection.
            if len(atoms - {atom}) >= 1:
                atoms.discard(atom)
                attach_edges.append((c_idx, s_idx))

    final = []
    for kind, atoms, key in clusters:
        final.append(Cluster(kind=kind, atoms=tuple(sorted(atoms)), type_key=key))

    m = len(final)
    weighted = {}
    for i in range(m):
        set_i = set(final[i].atoms)
        for j in range(i + 1, m):
            shared = len(set_i.intersection(final[j].atoms))
            if shared:
                weighted[(i, j)] = shared
    for i, j in attach_edges:
        key = (min(i, j), max(i, j))
        weighted.setdefault(key, 1)

    tree = maximal_spanning_tree(m, [(i, j, w) for (i, j), w in weighted.items()])
    tree_edges = tuple(sorted((min(i, j), max(i, j)) for i, j in tree))

    assignment = np.zeros((m, g.num_nodes), dtype=np.uint8)
    for idx, cluster in enumerate(final):
        for a in cluster.atoms:
            assignment[idx, a] = 1

    return Decomposition(clusters=tuple(final), tree_edges=tree_edges,
                         assignment=assignment,
                         original_atoms=tuple(original_atoms))


def tree_graph(decomp: Decomposition) -> Graph:
    """Junction tree as a plain Graph; node labels are left at 0."""
    edges = [(i, j, 0) for i, j in decomp.tree_edges]
    return Graph(decomp.num_clusters, (0,) * decomp.num_clusters, tuple(edges))


def to_json_dict(decomp: Decomposition) -> dict:
    return {
        "clusters": [
            {"kind": c.kind, "atoms": list(c.atoms), "type": c.type_key}
            for c in decomp.clusters
        ],
        "tree_edges": [list(e) for e in decomp.tree_edges],
        "assignment": [
            sorted(int(a) for a in np.nonzero(decomp.assignment[i])[0])
            for i in range(decomp.num_clusters)
        ],
    }


def to_dot(decomp: Decomposition, name: str = "junction_tree") -> str:
    """Render the junction tree in DOT format for visual inspection."""
    lines = [f"graph {name} {{", "  node [shape=box];"]
    for i, c in enumerate(decomp.clusters):
        atoms = ",".join(str(a) for a in c.atoms)
        lines.append(f'  c{i} [label="{c.type_key}\\n{{{atoms}}}"];')
    for i, j in decomp.tree_edges:
        lines.append(f"  c{i} -- c{j};")
    lines.append("}")
    return "\n".join(lines) + "\n"
