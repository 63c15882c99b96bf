"""SubFormer layers and forward pass.

The model message-passes on the molecular graph (GINE), exchanges features
with junction-tree clusters through a coupled residual block, projects the
cluster features to tokens with positional encodings and a CLS token, runs
a post-norm transformer encoder over them, and reads out the CLS state,
optionally concatenated with the summed node features (dual readout).

A plain GCN stack is included as the pure message-passing comparator for
smoothing/squashing diagnostics.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from . import spectral
from .graphs import Graph, add_virtual_node
from .junction import Decomposition, decompose, tree_graph

CHECKPOINT_VERSION = 1
VIRTUAL_BOND = 4  # bond labels 0..3 are chemical; 4 marks virtual-node edges
NUM_BOND_TYPES = 5
UNKNOWN_CLUSTER = "<unk>"

STREAM_INIT = 1


class ModelError(RuntimeError):
    """Configuration or shape inconsistency in the model pipeline."""


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters.

    mp_* control the graph-side GINE/coupling stack, transformer_* the
    tree-token encoder.  pe configures tree-token positional encodings,
    mp_pe optional graph-side ones.  padding_dim caps the per-batch tree
    size (batches still pad dynamically to their own maximum).
    """

    mp_layers: int = 2
    mp_hidden: int = 64
    transformer_layers: int = 3
    transformer_hidden: int = 128
    heads: int = 8
    ffn_hidden: int = 128
    mp_dropout: float = 0.0
    edge_dropout: float = 0.0
    attn_dropout: float = 0.1
    pe: spectral.PEConfig | None = None
    mp_pe: spectral.PEConfig | None = None
    dual_readout: bool = True
    virtual_node: bool = False
    padding_dim: int | None = 40
    readout_hidden: int = 128
    precision: str = "float32"

    def __post_init__(self):
        counts = {
            "mp_layers": self.mp_layers, "mp_hidden": self.mp_hidden,
            "transformer_hidden": self.transformer_hidden, "heads": self.heads,
            "ffn_hidden": self.ffn_hidden, "readout_hidden": self.readout_hidden,
        }
        for name, value in counts.items():
            if value < 1:
                raise ValueError(f"{name} must be >= 1, got {value}")
        if self.transformer_layers < 0:
            raise ValueError("transformer_layers must be >= 0")
        if self.transformer_hidden % self.heads:
            raise ValueError(f"transformer_hidden {self.transformer_hidden} not "
                             f"divisible by heads {self.heads}")
        for name in ("mp_dropout", "edge_dropout", "attn_dropout"):
            rate = getattr(self, name)
            if not 0.0 <= rate < 1.0:
                raise ValueError(f"{name} must be in [0, 1), got {rate}")
        if self.padding_dim is not None and self.padding_dim < 1:
            raise ValueError("padding_dim must be >= 1 or null")
        if self.precision not in ("float32", "float64"):
            raise ValueError("precision must be float32 or float64")

    def to_dict(self) -> dict:
        def pe_dict(pe):
            if pe is None:
                return None
            return {"kinds": list(pe.kinds), "dim": pe.dim, "merge": pe.merge,
                    "deg_cap": pe.deg_cap, "deg_emb": pe.deg_emb}
        out = {k: getattr(self, k) for k in self.__dataclass_fields__}
        out["pe"] = pe_dict(self.pe)
        out["mp_pe"] = pe_dict(self.mp_pe)
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        kwargs = dict(data)
        for key in ("pe", "mp_pe"):
            if kwargs.get(key) is not None:
                pe = dict(kwargs[key])
                pe["kinds"] = tuple(pe.get("kinds", ()))
                kwargs[key] = spectral.PEConfig(**pe)
        return cls(**kwargs)


@dataclass(frozen=True)
class AttentionRecord:
    """One head's row-stochastic attention matrix over CLS + tree tokens."""

    layer: int
    head: int
    weights: np.ndarray  # (m+1, m+1)
    masked: bool = True


@dataclass
class PreparedGraph:
    """Per-molecule arrays the batched forward consumes.

    Edge arrays describe the (possibly virtual-node-augmented) MP graph in
    both directions.  assignment keeps the decomposition's m x n 0/1 matrix,
    zero-padded with a column per virtual atom.
    """

    graph: Graph                # MP graph (augmented when virtual_node)
    decomposition: Decomposition
    node_ids: np.ndarray        # (n,) atom-type ids
    edge_src: np.ndarray        # (2E,)
    edge_dst: np.ndarray        # (2E,)
    edge_labels: np.ndarray     # (2E,)
    cluster_ids: np.ndarray     # (m,) cluster-type ids
    assignment: np.ndarray      # (m, n) float
    encodings: list             # tree-level, aligned with config.pe.kinds
    mp_encodings: list          # graph-level, aligned with config.mp_pe.kinds
    tree_edges: tuple           # (a, b) cluster index pairs

    @property
    def num_nodes(self) -> int:
        return self.graph.num_nodes

    @property
    def num_clusters(self) -> int:
        return len(self.cluster_ids)


def build_cluster_vocab(decompositions) -> dict:
    """Sorted cluster-type vocabulary with a reserved unknown id 0."""
    keys = sorted({c.type_key for d in decompositions for c in d.clusters})
    vocab = {UNKNOWN_CLUSTER: 0}
    for key in keys:
        vocab[key] = len(vocab)
    return vocab


def prepare(graph: Graph, config: ModelConfig, cluster_vocab: dict,
            num_atom_types: int,
            decomposition: Decomposition | None = None) -> PreparedGraph:
    """Decompose one molecule and precompute every model input array.

    The junction tree is always built on the plain molecular graph; the
    virtual node, when enabled, is appended afterwards for message passing
    only (its assignment column stays zero, atom id num_atom_types, edge
    label VIRTUAL_BOND).
    """
    decomp = decomposition if decomposition is not None else decompose(graph)
    mp_graph = graph
    if config.virtual_node:
        mp_graph = add_virtual_node(graph, node_label=num_atom_types,
                                    edge_label=VIRTUAL_BOND)
    src, dst, labels = mp_graph.directed_edges()
    assign = decomp.assignment.astype(np.float64)
    if mp_graph.num_nodes > assign.shape[1]:
        pad = np.zeros((assign.shape[0], mp_graph.num_nodes - assign.shape[1]))
        assign = np.hstack([assign, pad])
    cluster_ids = np.array(
        [cluster_vocab.get(c.type_key, cluster_vocab[UNKNOWN_CLUSTER])
         for c in decomp.clusters], dtype=np.int64)
    tree = tree_graph(decomp)
    encodings = spectral.compute_encodings(tree, config.pe) if config.pe else []
    mp_encodings = (spectral.compute_encodings(mp_graph, config.mp_pe)
                    if config.mp_pe else [])
    return PreparedGraph(
        graph=mp_graph, decomposition=decomp,
        node_ids=np.array(mp_graph.node_labels, dtype=np.int64),
        edge_src=src, edge_dst=dst, edge_labels=labels,
        cluster_ids=cluster_ids, assignment=assign,
        encodings=encodings, mp_encodings=mp_encodings,
        tree_edges=decomp.tree_edges)


@dataclass
class ModelBatch:
    """Concatenated arrays for a list of prepared molecules.

    Graph tensors are a disjoint union (node/edge indices offset per item);
    tree tokens are addressed by tok_index, a (B, Tmax) map into the flat
    cluster axis with -1 padding.  mask covers CLS + tree positions.
    """

    node_ids: np.ndarray
    node_item: np.ndarray
    edge_src: np.ndarray
    edge_dst: np.ndarray
    edge_labels: np.ndarray
    edge_item: np.ndarray
    cluster_ids: np.ndarray
    cluster_item: np.ndarray
    s_block: np.ndarray        # (M, N)
    tok_index: np.ndarray      # (B, Tmax)
    mask: np.ndarray           # (B, Tmax + 1) bool
    encodings: list            # flat (M, ...) per tree PE kind
    mp_encodings: list         # flat (N, ...) per graph PE kind
    node_counts: list
    cluster_counts: list

    @property
    def size(self) -> int:
        return len(self.node_counts)


def make_batch(items: list, config: ModelConfig) -> ModelBatch:
    if not items:
        raise ModelError("empty batch")
    tmax = max(it.num_clusters for it in items)
    if config.padding_dim is not None and tmax > config.padding_dim:
        raise ModelError(f"tree with {tmax} clusters exceeds "
                         f"padding_dim {config.padding_dim}")
    b = len(items)
    n_total = sum(it.num_nodes for it in items)
    m_total = sum(it.num_clusters for it in items)
    node_ids, node_item = [], []
    src, dst, labels, edge_item = [], [], [], []
    cluster_ids, cluster_item = [], []
    s_block = np.zeros((m_total, n_total))
    tok_index = np.full((b, tmax), -1, dtype=np.int64)
    mask = np.zeros((b, tmax + 1), dtype=bool)
    mask[:, 0] = True
    n_off = m_off = 0
    for i, it in enumerate(items):
        n, m = it.num_nodes, it.num_clusters
        node_ids.append(it.node_ids)
        node_item.append(np.full(n, i, dtype=np.int64))
        src.append(it.edge_src + n_off)
        dst.append(it.edge_dst + n_off)
        labels.append(it.edge_labels)
        edge_item.append(np.full(len(it.edge_labels), i, dtype=np.int64))
        cluster_ids.append(it.cluster_ids)
        cluster_item.append(np.full(m, i, dtype=np.int64))
        s_block[m_off:m_off + m, n_off:n_off + n] = it.assignment
        tok_index[i, :m] = m_off + np.arange(m)
        mask[i, 1:m + 1] = True
        n_off += n
        m_off += m
    kinds = config.pe.kinds if config.pe else ()
    encodings = [_stack_encoding([it.encodings[j] for it in items])
                 for j in range(len(kinds))]
    mp_kinds = config.mp_pe.kinds if config.mp_pe else ()
    mp_encodings = [_stack_encoding([it.mp_encodings[j] for it in items])
                    for j in range(len(mp_kinds))]
    return ModelBatch(
        node_ids=np.concatenate(node_ids), node_item=np.concatenate(node_item),
        edge_src=np.concatenate(src), edge_dst=np.concatenate(dst),
        edge_labels=np.concatenate(labels), edge_item=np.concatenate(edge_item),
        cluster_ids=np.concatenate(cluster_ids),
        cluster_item=np.concatenate(cluster_item),
        s_block=s_block, tok_index=tok_index, mask=mask,
        encodings=encodings, mp_encodings=mp_encodings,
        node_counts=[it.num_nodes for it in items],
        cluster_counts=[it.num_clusters for it in items])


def _stack_encoding(parts):
    parts = [np.asarray(p) for p in parts]
    if parts[0].ndim == 1:
        return np.concatenate(parts)
    return np.vstack(parts)


# --- parameters ---------------------------------------------------------------

def init_params(config: ModelConfig, num_atom_types: int,
                num_cluster_types: int, num_tasks: int, seed: int) -> dict:
    """Fresh parameter tensors, drawn in a fixed order from one stream.

    Weight matrices and embedding tables use uniform Kaiming fan-in bounds
    (embedding fan-in = row width), biases and GINE eps start at zero,
    coupling scalars at one, CLS ~ N(0, 0.02^2), layer-norm gains at one.
    """
    rng = ag.make_rng(seed, STREAM_INIT)
    d = config.mp_hidden
    dm = config.transformer_hidden
    params: dict[str, ag.Tensor] = {}

    def uniform(name, shape, fan_in):
        bound = float(np.sqrt(6.0 / fan_in))
        params[name] = ag.Tensor(rng.uniform(-bound, bound, shape),
                                 requires_grad=True)

    def zeros(name, shape):
        params[name] = ag.Tensor(np.zeros(shape), requires_grad=True)

    def const(name, value):
        params[name] = ag.Tensor(np.array([value]), requires_grad=True)

    atom_rows = num_atom_types + (1 if config.virtual_node else 0)
    uniform("atom_emb", (atom_rows, d), d)
    uniform("bond_emb", (NUM_BOND_TYPES, d), d)
    uniform("cluster_emb", (num_cluster_types, d), d)
    for l in range(config.mp_layers):
        const(f"mp{l}_eps", 0.0)
        uniform(f"mp{l}_mlp_w1", (d, d), d)
        zeros(f"mp{l}_mlp_b1", (d,))
        uniform(f"mp{l}_mlp_w2", (d, d), d)
        zeros(f"mp{l}_mlp_b2", (d,))
        const(f"mp{l}_theta1", 1.0)
        uniform(f"mp{l}_w1", (d, d), d)
        const(f"mp{l}_theta2", 1.0)
        uniform(f"mp{l}_w2", (d, d), d)
    uniform("tok_w", (d, dm), d)
    zeros("tok_b", (dm,))
    params["cls"] = ag.Tensor(rng.normal(0.0, 0.02, (1, dm)), requires_grad=True)
    if config.pe:
        _init_pe(params, "pe_", config.pe, dm, dm, uniform, zeros)
    if config.mp_pe:
        _init_pe(params, "mppe_", config.mp_pe, d, d, uniform, zeros)
    for l in range(config.transformer_layers):
        for piece in ("wq", "wk", "wv", "wo"):
            uniform(f"tr{l}_{piece}", (dm, dm), dm)
            zeros(f"tr{l}_b{piece[1]}", (dm,))
        params[f"tr{l}_ln1_g"] = ag.Tensor(np.ones(dm), requires_grad=True)
        zeros(f"tr{l}_ln1_b", (dm,))
        uniform(f"tr{l}_ffn_w1", (dm, config.ffn_hidden), dm)
        zeros(f"tr{l}_ffn_b1", (config.ffn_hidden,))
        uniform(f"tr{l}_ffn_w2", (config.ffn_hidden, dm), config.ffn_hidden)
        zeros(f"tr{l}_ffn_b2", (dm,))
        params[f"tr{l}_ln2_g"] = ag.Tensor(np.ones(dm), requires_grad=True)
        zeros(f"tr{l}_ln2_b", (dm,))
    head_in = dm + d if config.dual_readout else dm
    uniform("head_w1", (head_in, config.readout_hidden), head_in)
    zeros("head_b1", (config.readout_hidden,))
    uniform("head_w2", (config.readout_hidden, num_tasks), config.readout_hidden)
    zeros("head_b2", (num_tasks,))
    return params


def _init_pe(params, prefix, pe, token_width, out_width, uniform, zeros):
    shapes = spectral.pe_param_shapes(pe, token_width, out_width)
    for name, shape in sorted(shapes.items()):
        if name.endswith("_b"):
            zeros(prefix + name, shape)
        elif name == "deg_table":
            uniform(prefix + name, shape, shape[1])
        else:
            uniform(prefix + name, shape, shape[0])


def _pe_view(params: dict, prefix: str) -> dict:
    return {k[len(prefix):]: v for k, v in params.items() if k.startswith(prefix)}


# --- forward ------------------------------------------------------------------

@dataclass
class ForwardContext:
    """Runtime switches and capture buffers for one forward pass.

    item_rngs supplies one counter-based generator per batch item for
    dropout masks, so masks depend only on (seed, epoch, item).
    """

    training: bool = False
    item_rngs: list | None = None
    capture_attention: bool = False
    capture_tokens: bool = False
    attention: list = field(default_factory=list)
    token_snapshots: list = field(default_factory=list)


@dataclass
class ForwardResult:
    prediction: ag.Tensor            # (B, num_tasks)
    final_tokens: ag.Tensor          # (B, Tmax+1, dm)
    final_node_features: ag.Tensor   # (N_total, d)
    attention: list                  # [layer][head] -> (B, T, T) arrays
    token_snapshots: list            # length transformer_layers + 1


def _segment_dropout(x: ag.Tensor, p: float, ctx: ForwardContext,
                     counts, width) -> ag.Tensor:
    if not ctx.training or p <= 0.0:
        return x
    masks = [rng.random((c, width)) >= p
             for rng, c in zip(ctx.item_rngs, counts)]
    return ag.dropout(x, p, np.concatenate(masks, axis=0))


def _padded_dropout(x: ag.Tensor, p: float, ctx: ForwardContext,
                    token_counts) -> ag.Tensor:
    # Masks are drawn at each item's true token count so they do not
    # depend on batch composition or shard grouping.
    if not ctx.training or p <= 0.0:
        return x
    b, t, w = x.data.shape
    keep = np.ones((b, t, w), dtype=bool)
    for i, (rng, c) in enumerate(zip(ctx.item_rngs, token_counts)):
        keep[i, :c, :] = rng.random((c, w)) >= p
    return ag.dropout(x, p, keep)


def gine_layer(x: ag.Tensor, edge_src, edge_dst, edge_emb: ag.Tensor,
               params: dict, layer: int) -> ag.Tensor:
    """x_i' = MLP((1 + eps) x_i + sum_{j->i} relu(x_j + e_ji))."""
    if edge_emb.data.ndim == 2 and edge_emb.data.shape[1] != x.data.shape[1]:
        raise ModelError(f"edge width {edge_emb.data.shape[1]} does not match "
                         f"node width {x.data.shape[1]}")
    n = x.data.shape[0]
    msgs = ag.relu(ag.add(ag.gather(x, edge_src), edge_emb))
    agg = ag.scatter_sum(msgs, edge_dst, n)
    one = ag.Tensor(np.ones(1))
    h = ag.add(ag.mul(ag.add(params[f"mp{layer}_eps"], one), x), agg)
    h = ag.relu(ag.add(ag.matmul(h, params[f"mp{layer}_mlp_w1"]),
                       params[f"mp{layer}_mlp_b1"]))
    return ag.add(ag.matmul(h, params[f"mp{layer}_mlp_w2"]),
                  params[f"mp{layer}_mlp_b2"])


def coupling_block(x: ag.Tensor, z: ag.Tensor, s: ag.Tensor, s_t: ag.Tensor,
                   edge_src, edge_dst, edge_emb, params: dict, layer: int,
                   ctx: ForwardContext, config: ModelConfig,
                   node_counts=None) -> tuple:
    """One graph/tree exchange step.

    X'' = GINE(X); X' = X'' + theta1 * lrelu(S^T Z W1);
    Z'  = Z + theta2 * lrelu(S X' W2).
    """
    if s.data.shape != (z.data.shape[0], x.data.shape[0]):
        raise ModelError(f"assignment shape {s.data.shape} does not match "
                         f"{z.data.shape[0]} clusters x {x.data.shape[0]} nodes")
    xpp = gine_layer(x, edge_src, edge_dst, edge_emb, params, layer)
    if node_counts is not None:
        xpp = _segment_dropout(xpp, config.mp_dropout, ctx,
                               node_counts, xpp.data.shape[1])
    down = ag.leaky_relu(ag.matmul(ag.matmul(s_t, z), params[f"mp{layer}_w1"]))
    xp = ag.add(xpp, ag.mul(params[f"mp{layer}_theta1"], down))
    up = ag.leaky_relu(ag.matmul(ag.matmul(s, xp), params[f"mp{layer}_w2"]))
    zp = ag.add(z, ag.mul(params[f"mp{layer}_theta2"], up))
    return xp, zp


def transformer_encoder(tokens: ag.Tensor, mask: np.ndarray, params: dict,
                        config: ModelConfig, ctx: ForwardContext) -> ag.Tensor:
    """Post-norm encoder over CLS + tree tokens; padding masked in attention.

    Each layer: MHSA (per-head width d/H, logits scaled by 1/sqrt(d/H)),
    residual, layer norm, then relu FFN, residual, layer norm.
    """
    b, t, dm = tokens.data.shape
    heads = config.heads
    k = dm // heads
    inv = 1.0 / float(np.sqrt(k))
    key_mask = mask[:, None, :]
    token_counts = mask.sum(axis=1).astype(int)
    if ctx.capture_tokens:
        ctx.token_snapshots.append(tokens.data.copy())
    for l in range(config.transformer_layers):
        q = ag.add(ag.matmul(tokens, params[f"tr{l}_wq"]), params[f"tr{l}_bq"])
        kk = ag.add(ag.matmul(tokens, params[f"tr{l}_wk"]), params[f"tr{l}_bk"])
        v = ag.add(ag.matmul(tokens, params[f"tr{l}_wv"]), params[f"tr{l}_bv"])
        layer_rec = []
        head_out = []
        for h in range(heads):
            cols = (slice(None), slice(None), slice(h * k, (h + 1) * k))
            qh, kh, vh = ag.slice_(q, cols), ag.slice_(kk, cols), ag.slice_(v, cols)
            logits = ag.scale(ag.matmul(qh, ag.transpose_last2(kh)), inv)
            probs = ag.masked_softmax(logits, key_mask)
            if ctx.capture_attention:
                layer_rec.append(probs.data.copy())
            if ctx.training and config.attn_dropout > 0.0:
                keep = np.ones((b, t, t), dtype=bool)
                for i, (rng, c) in enumerate(zip(ctx.item_rngs,
                                                 token_counts)):
                    keep[i, :c, :c] = rng.random((c, c)) >= config.attn_dropout
                probs = ag.dropout(probs, config.attn_dropout, keep)
            head_out.append(ag.matmul(probs, vh))
        att = ag.add(ag.matmul(ag.concat(head_out, axis=-1),
                               params[f"tr{l}_wo"]), params[f"tr{l}_bo"])
        att = _padded_dropout(att, config.attn_dropout, ctx, token_counts)
        tokens = ag.layer_norm(ag.add(tokens, att),
                               params[f"tr{l}_ln1_g"], params[f"tr{l}_ln1_b"])
        ffn = ag.relu(ag.add(ag.matmul(tokens, params[f"tr{l}_ffn_w1"]),
                             params[f"tr{l}_ffn_b1"]))
        ffn = ag.add(ag.matmul(ffn, params[f"tr{l}_ffn_w2"]),
                     params[f"tr{l}_ffn_b2"])
        ffn = _padded_dropout(ffn, config.attn_dropout, ctx, token_counts)
        tokens = ag.layer_norm(ag.add(tokens, ffn),
                               params[f"tr{l}_ln2_g"], params[f"tr{l}_ln2_b"])
        if ctx.capture_attention:
            ctx.attention.append(layer_rec)
        if ctx.capture_tokens:
            ctx.token_snapshots.append(tokens.data.copy())
    return tokens


def forward_batch(params: dict, config: ModelConfig, batch: ModelBatch,
                  ctx: ForwardContext | None = None,
                  x0_override: ag.Tensor | None = None) -> ForwardResult:
    """Full SubFormer pass over a batch.

    x0_override replaces the atom-embedding lookup with an explicit leaf
    tensor (the Jacobian probe differentiates with respect to it).
    """
    if ctx is None:
        ctx = ForwardContext()
    b = batch.size
    x = x0_override if x0_override is not None \
        else ag.gather(params["atom_emb"], batch.node_ids)
    if config.mp_pe:
        x = spectral.merge_pe(x, batch.mp_encodings, config.mp_pe,
                              _pe_view(params, "mppe_"))
    e = ag.gather(params["bond_emb"], batch.edge_labels)
    edge_counts = [int(np.sum(batch.edge_item == i)) for i in range(b)]
    e = _segment_dropout(e, config.edge_dropout, ctx,
                         edge_counts, e.data.shape[1])
    z = ag.gather(params["cluster_emb"], batch.cluster_ids)
    s = ag.Tensor(batch.s_block)
    s_t = ag.Tensor(batch.s_block.T)
    for l in range(config.mp_layers):
        x, z = coupling_block(x, z, s, s_t, batch.edge_src, batch.edge_dst,
                              e, params, l, ctx, config, batch.node_counts)
    tok = ag.add(ag.matmul(z, params["tok_w"]), params["tok_b"])
    if config.pe:
        tok = spectral.merge_pe(tok, batch.encodings, config.pe,
                                _pe_view(params, "pe_"))
    padded = ag.gather(tok, batch.tok_index)
    cls = ag.gather(params["cls"], np.zeros((b, 1), dtype=np.int64))
    tokens = ag.concat([cls, padded], axis=1)
    tokens = transformer_encoder(tokens, batch.mask, params, config, ctx)
    z0 = ag.slice_(tokens, (slice(None), 0))
    if config.dual_readout:
        x_out = ag.scatter_sum(x, batch.node_item, b)
        z_out = ag.concat([z0, x_out], axis=-1)
    else:
        z_out = z0
    hidden = ag.relu(ag.add(ag.matmul(z_out, params["head_w1"]),
                            params["head_b1"]))
    pred = ag.add(ag.matmul(hidden, params["head_w2"]), params["head_b2"])
    return ForwardResult(prediction=pred, final_tokens=tokens,
                         final_node_features=x, attention=ctx.attention,
                         token_snapshots=ctx.token_snapshots)


def forward(prepared: PreparedGraph, config: ModelConfig, params: dict,
            capture_attention: bool = False,
            capture_tokens: bool = False) -> ForwardResult:
    """Single-molecule evaluation-mode forward (batch of one)."""
    batch = make_batch([prepared], config)
    ctx = ForwardContext(training=False, capture_attention=capture_attention,
                         capture_tokens=capture_tokens)
    return forward_batch(params, config, batch, ctx)


# --- GCN comparator -----------------------------------------------------------

def gcn_norm_adjacency(g: Graph) -> np.ndarray:
    """D~^(-1/2) (A + I) D~^(-1/2) with self-loops added."""
    n = g.num_nodes
    a = g.adjacency().astype(np.float64) + np.eye(n)
    inv_sqrt = 1.0 / np.sqrt(a.sum(axis=1))
    return a * inv_sqrt[:, None] * inv_sqrt[None, :]


def gcn_stack(g: Graph, x0: ag.Tensor, weights: list) -> list:
    """Plain GCN tower: X^(l+1) = relu(A_hat X^(l) W^(l)).

    Returns per-layer snapshots as tensors, starting with the input, so
    gradients can be taken through any layer.
    """
    a_hat = ag.Tensor(gcn_norm_adjacency(g))
    snaps = [x0]
    x = x0
    for w in weights:
        x = ag.relu(ag.matmul(ag.matmul(a_hat, x), w))
        snaps.append(x)
    return snaps


def gcn_random_weights(layers: int, width: int, seed: int) -> list:
    rng = ag.make_rng(seed, STREAM_INIT, 7)
    bound = float(np.sqrt(6.0 / width))
    return [ag.Tensor(rng.uniform(-bound, bound, (width, width)))
            for _ in range(layers)]


# --- checkpoints ----------------------------------------------------------------

def save_checkpoint(path, params: dict, meta: dict):
    """Write parameters and metadata as deterministic JSON.

    Values are row-major float lists; sorted keys and repr-based float
    formatting make the byte output a pure function of the content.
    """
    obj = {"version": CHECKPOINT_VERSION, "meta": meta, "params": {}}
    for name, tensor in params.items():
        obj["params"][name] = {
            "shape": list(tensor.data.shape),
            "values": [float(v) for v in tensor.data.ravel()],
        }
    with open(path, "w") as fh:
        json.dump(obj, fh, sort_keys=True, separators=(",", ":"))
        fh.write("\n")


def load_checkpoint(path) -> tuple:
    """Read a checkpoint; returns (params with requires_grad, meta)."""
    with open(path) as fh:
        obj = json.load(fh)
    version = obj.get("version")
    if version != CHECKPOINT_VERSION:
        raise ModelError(f"unsupported checkpoint version {version!r}")
    meta = obj["meta"]
    dtype = np.float64 if meta.get("model", {}).get("precision") == "float64" \
        else np.float32
    params = {}
    for name, entry in obj["params"].items():
        arr = np.array(entry["values"], dtype=dtype).reshape(entry["shape"])
        params[name] = ag.Tensor(arr, requires_grad=True, dtype=dtype)
    return params, meta
