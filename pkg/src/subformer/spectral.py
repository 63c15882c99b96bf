"""Symmetric eigensolver and positional encodings.

Three node encodings are supported: Laplacian eigenvectors (LPE),
shortest-path-matrix eigenvectors (SPDE), and capped-degree ids (DEG).
They are computed on the junction tree for transformer tokens and can
also be computed on the molecular graph for message-passing inputs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .graphs import Graph, bfs_all_pairs

PE_KINDS = ("DEG", "LPE", "SPDE")


class SpectralError(RuntimeError):
    """Eigensolver misuse or failure (asymmetric input, no convergence)."""


@dataclass(frozen=True)
class PEConfig:
    """Which encodings to compute and how to fold them into tokens.

    dim is the eigenvector count per spectral kind; deg_emb is the width
    of the learnable degree-embedding rows (defaults to dim).  With sum
    merging each encoding is projected to the token width and added; with
    concat merging tokens and encodings are concatenated, then projected.
    """

    kinds: tuple[str, ...]
    dim: int
    merge: str = "concat"
    deg_cap: int = 8
    deg_emb: int | None = None

    def __post_init__(self):
        kinds = tuple(str(k).upper() for k in self.kinds)
        object.__setattr__(self, "kinds", kinds)
        object.__setattr__(self, "merge", str(self.merge).lower())
        for k in kinds:
            if k not in PE_KINDS:
                raise ValueError(f"unknown positional encoding kind {k!r}")
        if len(set(kinds)) != len(kinds):
            raise ValueError("duplicate positional encoding kind")
        if self.dim < 1:
            raise ValueError("dim must be >= 1")
        if self.merge not in ("concat", "sum"):
            raise ValueError(f"merge must be 'concat' or 'sum', got {self.merge!r}")
        if self.deg_cap < 1:
            raise ValueError("deg_cap must be >= 1")

    def widths(self) -> list[int]:
        """Feature width each kind contributes before merging."""
        out = []
        for k in self.kinds:
            out.append(self.deg_emb or self.dim if k == "DEG" else self.dim)
        return out


def jacobi_eigh(m, tol: float = 1e-10, max_sweeps: int = 100):
    """Eigendecomposition of a real symmetric matrix by cyclic Jacobi sweeps.

    Returns (eigenvalues ascending, eigenvectors as columns).  Sweeps run
    until the off-diagonal Frobenius norm drops below ``tol``; raises
    SpectralError on asymmetric input or if ``max_sweeps`` is exhausted.
    """
    a = np.array(m, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise SpectralError(f"matrix must be square, got shape {a.shape}")
    scale = max(1.0, float(np.max(np.abs(a))) if a.size else 0.0)
    if a.size and float(np.max(np.abs(a - a.T))) > 1e-12 * scale:
        raise SpectralError("matrix is not symmetric within 1e-12")
    n = a.shape[0]
    a = (a + a.T) / 2.0
    v = np.eye(n)
    for _ in range(max_sweeps):
        off = np.sqrt(2.0 * np.sum(np.tril(a, -1) ** 2))
        if off < tol:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if apq == 0.0:
                    continue
                tau = (a[q, q] - a[p, p]) / (2.0 * apq)
                t = np.sign(tau) / (abs(tau) + np.sqrt(tau * tau + 1.0))
                if t == 0.0:  # sign(0) is 0; take the positive root
                    t = 1.0 / (abs(tau) + np.sqrt(tau * tau + 1.0))
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                acp, acq = a[:, p].copy(), a[:, q].copy()
                a[:, p] = c * acp - s * acq
                a[:, q] = s * acp + c * acq
                arp, arq = a[p, :].copy(), a[q, :].copy()
                a[p, :] = c * arp - s * arq
                a[q, :] = s * arp + c * arq
                vcp, vcq = v[:, p].copy(), v[:, q].copy()
                v[:, p] = c * vcp - s * vcq
                v[:, q] = s * vcp + c * vcq
    else:
        raise SpectralError(f"Jacobi sweep did not converge in {max_sweeps} sweeps")
    w = np.diag(a).copy()
    order = np.argsort(w, kind="stable")
    return w[order], v[:, order]


def normalized_laplacian(g: Graph) -> np.ndarray:
    """L = I - D^(-1/2) A D^(-1/2); a degree-0 node keeps its identity row."""
    n = g.num_nodes
    deg = g.degrees().astype(np.float64)
    inv_sqrt = np.where(deg > 0, 1.0 / np.sqrt(np.maximum(deg, 1.0)), 0.0)
    lap = np.eye(n)
    for u, vv, _ in g.edges:
        w = inv_sqrt[u] * inv_sqrt[vv]
        lap[u, vv] -= w
        lap[vv, u] -= w
    return lap


def _fix_sign(col: np.ndarray) -> np.ndarray:
    """Flip so the maximum-absolute entry is positive (first index on ties)."""
    if not col.any():
        return col
    i = int(np.argmax(np.abs(col)))
    return -col if col[i] < 0 else col


def _select_pad(vectors: np.ndarray, k: int) -> np.ndarray:
    """Take up to k columns, sign-fix each, zero-pad the remainder."""
    n, avail = vectors.shape
    out = np.zeros((n, k))
    take = min(k, avail)
    for j in range(take):
        out[:, j] = _fix_sign(vectors[:, j])
    return out


def laplacian_pe(g: Graph, k: int) -> np.ndarray:
    """First k non-trivial Laplacian eigenvectors as an n x k matrix.

    Eigenvalues are taken ascending, skipping those below 1e-8 (the
    constant space); missing columns are zero-padded.
    """
    if k <= 0:
        raise ValueError("k must be positive")
    w, v = jacobi_eigh(normalized_laplacian(g))
    keep = w >= 1e-8
    return _select_pad(v[:, keep], k)


def spd_pe(g: Graph, k: int) -> np.ndarray:
    """Top-k eigenvectors of the hop-distance matrix, by descending |eigenvalue|.

    Ties between +x and -x prefer the positive eigenvalue.  Near-zero
    eigenvalues (< 1e-8) are dropped; columns follow the same sign and
    padding rules as laplacian_pe.  Requires a connected graph.
    """
    if k <= 0:
        raise ValueError("k must be positive")
    dist = bfs_all_pairs(g).astype(np.float64)
    w, v = jacobi_eigh(dist)
    keep = np.abs(w) >= 1e-8
    w, v = w[keep], v[:, keep]
    order = np.lexsort((-w, -np.abs(w)))
    return _select_pad(v[:, order], k)


def degree_pe(g: Graph, cap: int) -> np.ndarray:
    """Per-node min(degree, cap), used as embedding-table indices."""
    if cap < 1:
        raise ValueError("cap must be >= 1")
    return np.minimum(g.degrees(), cap).astype(np.int64)


def compute_encodings(g: Graph, config: PEConfig) -> list:
    """Raw encodings for each configured kind, aligned with config.kinds."""
    out = []
    for kind in config.kinds:
        if kind == "DEG":
            out.append(degree_pe(g, config.deg_cap))
        elif kind == "LPE":
            out.append(laplacian_pe(g, config.dim))
        else:
            out.append(spd_pe(g, config.dim))
    return out


def pe_param_shapes(config: PEConfig, token_width: int, out_width: int) -> dict:
    """Shapes of the learnable pieces merge_pe expects, keyed by name.

    Sum merging needs out_width == token_width; weight matrices follow
    ``proj_<kind>_w/_b`` (sum) or ``proj_w/_b`` (concat), plus a
    ``deg_table`` of deg_cap + 1 rows whenever DEG is configured.
    """
    shapes = {}
    if "DEG" in config.kinds:
        shapes["deg_table"] = (config.deg_cap + 1, config.deg_emb or config.dim)
    if config.merge == "sum":
        if token_width != out_width:
            raise ValueError("sum merge requires token width == output width")
        for kind, width in zip(config.kinds, config.widths()):
            shapes[f"proj_{kind.lower()}_w"] = (width, out_width)
            shapes[f"proj_{kind.lower()}_b"] = (out_width,)
    else:
        total = token_width + sum(config.widths())
        shapes["proj_w"] = (total, out_width)
        shapes["proj_b"] = (out_width,)
    return shapes


def merge_pe(tokens: ag.Tensor, encodings: list, config: PEConfig,
             params: dict) -> ag.Tensor:
    """Fold raw encodings into token features.

    ``encodings`` aligns with config.kinds: id vectors for DEG (looked up
    in the deg_table), float matrices for LPE/SPDE.  ``params`` holds
    tensors named per pe_param_shapes.
    """
    if len(encodings) != len(config.kinds):
        raise ValueError("one encoding per configured kind required")
    parts = []
    for kind, enc in zip(config.kinds, encodings):
        if kind == "DEG":
            parts.append(ag.gather(params["deg_table"], np.asarray(enc)))
        else:
            enc = np.asarray(enc)
            if enc.shape != (tokens.data.shape[0], config.dim):
                raise ValueError(f"{kind} encoding shape {enc.shape} does not "
                                 f"match ({tokens.data.shape[0]}, {config.dim})")
            parts.append(ag.Tensor(enc))
    if config.merge == "sum":
        out = tokens
        for kind, part in zip(config.kinds, parts):
            w = params[f"proj_{kind.lower()}_w"]
            b = params[f"proj_{kind.lower()}_b"]
            out = ag.add(out, ag.add(ag.matmul(part, w), b))
        return out
    stacked = ag.concat([tokens] + parts, axis=-1)
    return ag.add(ag.matmul(stacked, params["proj_w"]), params["proj_b"])
