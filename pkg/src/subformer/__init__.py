"""Junction-tree graph transformer for molecular property prediction.

Message passing runs on the atom graph, a junction-tree decomposition
compresses it into cluster tokens, and a transformer attends over the
tokens.  Ships with spectral positional encodings, a small reverse-mode
autodiff engine, training/evaluation loops, over-smoothing and
over-squashing diagnostics, a WL expressivity test, and a CLI.
"""

from .autograd import Tape, Tensor, make_rng, set_default_dtype
from .estimators import JunctionTreeDecomposer, SubFormerClassifier, SubFormerRegressor
from .graphs import (
    AtomVocab,
    Corpus,
    CorpusError,
    DatasetRecord,
    Graph,
    GraphError,
    UnsupportedToken,
    add_virtual_node,
    load_corpus,
    make_graph,
    parse_smiles,
)
from .junction import Cluster, Decomposition, decompose, tree_graph
from .model import ModelConfig, forward_batch, init_params, load_checkpoint, save_checkpoint
from .spectral import PEConfig, compute_encodings, jacobi_eigh
from .training import Batch, TrainConfig, evaluate, train_on_corpus
from .wl import compare_pair, jt_wl_distinguish, wl_distinguish, wl_refine

__version__ = "0.1.0"

__all__ = [
    "AtomVocab",
    "Batch",
    "Cluster",
    "Corpus",
    "CorpusError",
    "DatasetRecord",
    "Decomposition",
    "Graph",
    "GraphError",
    "JunctionTreeDecomposer",
    "ModelConfig",
    "PEConfig",
    "SubFormerClassifier",
    "SubFormerRegressor",
    "Tape",
    "Tensor",
    "TrainConfig",
    "UnsupportedToken",
    "add_virtual_node",
    "compare_pair",
    "compute_encodings",
    "decompose",
    "evaluate",
    "forward_batch",
    "init_params",
    "jacobi_eigh",
    "jt_wl_distinguish",
    "load_checkpoint",
    "load_corpus",
    "make_graph",
    "make_rng",
    "parse_smiles",
    "save_checkpoint",
    "set_default_dtype",
    "train_on_corpus",
    "tree_graph",
    "wl_distinguish",
    "wl_refine",
    "__version__",
]
