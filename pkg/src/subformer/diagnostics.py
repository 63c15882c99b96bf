"""Analysis instruments: smoothing, squashing, reach, and attention maps.

Dirichlet energy profiles quantify over-smoothing per layer; Jacobian maps
quantify over-squashing (input nodes whose influence on a reference node's
output falls below a norm threshold); hop histograms show how far apart
nodes sit in a corpus; attention export serializes the learned maps.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from . import model as M
from .graphs import Graph, GraphError, bfs_all_pairs
from .junction import Decomposition

OVERSQUASH_THRESHOLD = 0.05


@dataclass
class EnergyProfile:
    """Per-layer Dirichlet energies, index 0 being the layer input."""

    values: list

    def ratio(self, layer: int, base: int = 1) -> float:
        return self.values[layer] / self.values[base]


@dataclass
class SquashMap:
    """Jacobian Frobenius norms of one node's output w.r.t. every input node."""

    ref_node: int
    norms: np.ndarray
    flags: np.ndarray  # True where norm < threshold (over-squashed)
    threshold: float


def dirichlet_energy(x, edges) -> float:
    """(1/n) sum_i sum_{j~i} ||x_i - x_j||^2; each edge counts twice."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[:, None]
    n = arr.shape[0]
    total = 0.0
    for edge in edges:
        u, v = edge[0], edge[1]
        diff = arr[u] - arr[v]
        total += 2.0 * float(diff @ diff)
    return total / n


def energy_profile(snapshots, edges) -> EnergyProfile:
    """Dirichlet energy of each feature snapshot over a fixed edge set."""
    if not snapshots:
        raise ValueError("no snapshots given")
    return EnergyProfile([dirichlet_energy(s, edges) for s in snapshots])


def subformer_energy_profile(params: dict, config, prepared) -> EnergyProfile:
    """Token energy per encoder layer for one molecule.

    Energies are taken over the tree tokens (CLS excluded) with the
    junction-tree edges as the neighbor structure; entry 0 is the encoder
    input.
    """
    result = M.forward(prepared, config, params, capture_tokens=True)
    m = prepared.num_clusters
    tree_tokens = [snap[0, 1:m + 1, :] for snap in result.token_snapshots]
    return energy_profile(tree_tokens, prepared.tree_edges)


def gcn_energy_profile(g: Graph, x0, weights) -> EnergyProfile:
    """Node-feature energy per layer of the GCN comparator stack."""
    x0 = x0 if isinstance(x0, ag.Tensor) else ag.Tensor(np.asarray(x0))
    snaps = M.gcn_stack(g, x0, weights)
    return energy_profile([s.data for s in snaps], g.edges)


# --- Jacobian probes ----------------------------------------------------------


def _probe_jacobian(build, x0_data, ref_node, out_dim, threshold) -> SquashMap:
    """Accumulate per-node gradient norms over one backward pass per output dim.

    ``build(x0)`` must rerun the forward from a fresh leaf tensor and return
    the (n, out_dim) output to differentiate.
    """
    n = x0_data.shape[0]
    if not 0 <= ref_node < n:
        raise ValueError(f"ref_node {ref_node} out of range for {n} nodes")
    acc = np.zeros(n)
    for c in range(out_dim):
        x0 = ag.Tensor(x0_data, requires_grad=True, dtype=np.float64)
        with ag.Tape() as tape:
            y = build(x0)
            ag.backward(ag.slice_(y, (ref_node, c)), tape)
        if x0.grad is not None:
            acc += (x0.grad ** 2).sum(axis=1)
    norms = np.sqrt(acc)
    return SquashMap(ref_node=ref_node, norms=norms,
                     flags=norms < threshold, threshold=threshold)


def jacobian_map(params: dict, config, prepared, ref_node: int,
                 threshold: float = OVERSQUASH_THRESHOLD) -> SquashMap:
    """Influence of every atom's initial features on a reference atom's output.

    The probed output is the final tree-token matrix mapped back to atoms
    through S^T; the CLS state and the readout head are not part of the
    probe.  Runs at 64-bit in evaluation mode.
    """
    with ag.using_dtype(np.float64):
        frozen = {k: ag.Tensor(v.data, dtype=np.float64)
                  for k, v in params.items()}
        batch = M.make_batch([prepared], config)
        m = prepared.num_clusters
        s_t = ag.Tensor(batch.s_block.T)
        x0_data = frozen["atom_emb"].data[batch.node_ids]

        def build(x0):
            result = M.forward_batch(frozen, config, batch,
                                     M.ForwardContext(), x0_override=x0)
            tree = ag.reshape(
                ag.slice_(result.final_tokens, (slice(None), slice(1, m + 1))),
                (m, result.final_tokens.data.shape[2]))
            return ag.matmul(s_t, tree)

        return _probe_jacobian(build, x0_data, ref_node,
                               config.transformer_hidden, threshold)


def mp_jacobian_map(g: Graph, ref_node: int, layers: int, width: int = 16,
                    seed: int = 0,
                    threshold: float = OVERSQUASH_THRESHOLD) -> SquashMap:
    """Same probe through a pure message-passing (GCN) stack.

    A k-layer stack has a k-hop receptive field, so nodes farther than k
    hops from ref_node get exactly zero norm.
    """
    with ag.using_dtype(np.float64):
        weights = M.gcn_random_weights(layers, width, seed)
        rng = ag.make_rng(seed, 11)
        x0_data = rng.normal(0.0, 1.0, (g.num_nodes, width))

        def build(x0):
            return M.gcn_stack(g, x0, weights)[-1]

        return _probe_jacobian(build, x0_data, ref_node, width, threshold)


# --- hop histograms -------------------------------------------------------------


def reference_node(g: Graph) -> int:
    """Deterministic reference: maximum eccentricity, lowest index on ties."""
    dist = bfs_all_pairs(g)
    return int(np.argmax(dist.max(axis=1)))


def hop_histogram(graphs) -> tuple:
    """Histogram of BFS distances from each graph's reference node.

    Returns ({hops: count}, skipped) where disconnected graphs are skipped
    and counted rather than failing the batch.
    """
    hist: dict[int, int] = {}
    skipped = 0
    for g in graphs:
        try:
            dist = bfs_all_pairs(g)
        except GraphError:
            skipped += 1
            continue
        ref = int(np.argmax(dist.max(axis=1)))
        for j in range(g.num_nodes):
            if j == ref:
                continue
            h = int(dist[ref, j])
            hist[h] = hist.get(h, 0) + 1
    return hist, skipped


def write_histogram_csv(path, hist: dict, skipped: int = 0):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["hops", "count"])
        for h in sorted(hist):
            writer.writerow([h, hist[h]])
        if skipped:
            writer.writerow(["skipped_graphs", skipped])


# --- attention export -----------------------------------------------------------


def extract_attention(params: dict, config, prepared) -> list:
    """All attention matrices for one molecule as AttentionRecord objects."""
    result = M.forward(prepared, config, params, capture_attention=True)
    records = []
    for layer, heads in enumerate(result.attention):
        for head, mat in enumerate(heads):
            records.append(M.AttentionRecord(layer=layer, head=head,
                                             weights=mat[0]))
    return records


def attention_export(params: dict, config, prepared,
                     decomposition: Decomposition) -> dict:
    """Serializable attention summary for one molecule.

    Contains every layer/head matrix, the head-averaged last layer, and the
    CLS row mapped to clusters and (via S^T) to atoms.  All matrices are
    row-stochastic over CLS + tree tokens.
    """
    records = extract_attention(params, config, prepared)
    layers: dict[int, list] = {}
    for rec in records:
        layers.setdefault(rec.layer, []).append(rec.weights)
    n_layers = len(layers)
    if n_layers == 0:
        raise ValueError("model has no transformer layers to export")
    last = np.mean(layers[n_layers - 1], axis=0)
    cls_clusters = last[0, 1:]
    atom_weights = decomposition.assignment.T.astype(np.float64) @ cls_clusters
    return {
        "num_clusters": int(decomposition.num_clusters),
        "layers": [
            {"layer": l, "heads": [h.tolist() for h in layers[l]]}
            for l in sorted(layers)
        ],
        "last_layer_mean": last.tolist(),
        "cls_cluster_weights": cls_clusters.tolist(),
        "cls_atom_weights": atom_weights.tolist(),
    }


def _ramp_color(weight: float, max_weight: float) -> str:
    """Linear white-to-red fill over [0, max_weight]."""
    t = 0.0 if max_weight <= 0 else min(max(weight / max_weight, 0.0), 1.0)
    level = int(round(255 * (1.0 - t)))
    return f"#ff{level:02x}{level:02x}"


def attention_tree_dot(decomposition: Decomposition, weights,
                       name: str = "tree") -> str:
    """DOT tree with clusters filled by attention weight (white→red ramp)."""
    weights = np.asarray(weights, dtype=np.float64)
    wmax = float(weights.max()) if weights.size else 0.0
    lines = [f"graph {name} {{", "  node [style=filled];"]
    for i, cluster in enumerate(decomposition.clusters):
        color = _ramp_color(float(weights[i]), wmax)
        lines.append(f'  c{i} [label="{cluster.type_key}" '
                     f'fillcolor="{color}"];')
    for a, b in decomposition.tree_edges:
        lines.append(f"  c{a} -- c{b};")
    lines.append("}")
    return "\n".join(lines) + "\n"


def attention_graph_dot(g: Graph, weights, name: str = "molecule") -> str:
    """DOT molecular graph with atoms filled by mapped attention weight."""
    weights = np.asarray(weights, dtype=np.float64)
    wmax = float(weights.max()) if weights.size else 0.0
    lines = [f"graph {name} {{", "  node [style=filled];"]
    for i in range(g.num_nodes):
        color = _ramp_color(float(weights[i]), wmax)
        lines.append(f'  a{i} [label="{g.node_labels[i]}" '
                     f'fillcolor="{color}"];')
    for u, v, label in g.edges:
        lines.append(f'  a{u} -- a{v} [label="{label}"];')
    lines.append("}")
    return "\n".join(lines) + "\n"


def write_attention(out_prefix, data: dict, decomposition: Decomposition,
                    g: Graph):
    """Write attention JSON plus the colored tree/molecule DOT files."""
    with open(f"{out_prefix}.json", "w") as fh:
        json.dump(data, fh, indent=2, sort_keys=True)
        fh.write("\n")
    with open(f"{out_prefix}_tree.dot", "w") as fh:
        fh.write(attention_tree_dot(decomposition,
                                    data["cls_cluster_weights"]))
    with open(f"{out_prefix}_graph.dot", "w") as fh:
        fh.write(attention_graph_dot(g, data["cls_atom_weights"]))
