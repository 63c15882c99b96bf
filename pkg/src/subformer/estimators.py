"""Scikit-learn style estimators wrapping the model and training loop.

SubFormerRegressor / SubFormerClassifier follow the fit/predict protocol
with flat constructor hyperparameters (so get_params/set_params and
clone work); JunctionTreeDecomposer exposes the decomposition step as a
transformer.  X is a sequence of SMILES strings or Graph objects.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, RegressorMixin, TransformerMixin

from . import model as M
from . import training as T
from . import validation
from .junction import decompose
from .spectral import PEConfig


class _SubFormerBase(BaseEstimator):
    _task_type = "regression"

    def __init__(self, mp_layers=2, mp_hidden=32, transformer_layers=2,
                 transformer_hidden=32, heads=4, ffn_hidden=32,
                 mp_dropout=0.0, edge_dropout=0.0, attn_dropout=0.0,
                 pe_kinds=(), pe_dim=4, pe_merge="concat",
                 dual_readout=True, virtual_node=False, padding_dim=None,
                 readout_hidden=32, precision="float32",
                 epochs=100, lr=1e-3, optimizer="adam", weight_decay=0.01,
                 scheduler="none", batch_size=32, seed=0):
        self.mp_layers = mp_layers
        self.mp_hidden = mp_hidden
        self.transformer_layers = transformer_layers
        self.transformer_hidden = transformer_hidden
        self.heads = heads
        self.ffn_hidden = ffn_hidden
        self.mp_dropout = mp_dropout
        self.edge_dropout = edge_dropout
        self.attn_dropout = attn_dropout
        self.pe_kinds = pe_kinds
        self.pe_dim = pe_dim
        self.pe_merge = pe_merge
        self.dual_readout = dual_readout
        self.virtual_node = virtual_node
        self.padding_dim = padding_dim
        self.readout_hidden = readout_hidden
        self.precision = precision
        self.epochs = epochs
        self.lr = lr
        self.optimizer = optimizer
        self.weight_decay = weight_decay
        self.scheduler = scheduler
        self.batch_size = batch_size
        self.seed = seed

    def _model_config(self) -> M.ModelConfig:
        pe = PEConfig(tuple(self.pe_kinds), self.pe_dim, self.pe_merge) \
            if self.pe_kinds else None
        return M.ModelConfig(
            mp_layers=self.mp_layers, mp_hidden=self.mp_hidden,
            transformer_layers=self.transformer_layers,
            transformer_hidden=self.transformer_hidden, heads=self.heads,
            ffn_hidden=self.ffn_hidden, mp_dropout=self.mp_dropout,
            edge_dropout=self.edge_dropout, attn_dropout=self.attn_dropout,
            pe=pe, dual_readout=self.dual_readout,
            virtual_node=self.virtual_node, padding_dim=self.padding_dim,
            readout_hidden=self.readout_hidden, precision=self.precision)

    def fit(self, X, y):
        """Train on all of (X, y); no internal validation split."""
        corpus = validation.corpus_from_arrays(X, y, self._task_type)
        config = self._model_config()
        train_config = T.TrainConfig(
            epochs=self.epochs, lr=self.lr, optimizer=self.optimizer,
            weight_decay=self.weight_decay, scheduler=self.scheduler,
            batch_size=self.batch_size, seed=self.seed, split=(1.0, 0.0, 0.0))
        result = T.train_on_corpus(corpus, config, train_config)
        self.params_ = result.params
        self.meta_ = result.meta
        self.config_ = config
        self.cluster_vocab_ = result.meta["cluster_vocab"]
        self.atom_vocab_ = corpus.atom_vocab
        self.num_atom_types_ = corpus.num_atom_types
        self.num_tasks_ = corpus.num_tasks
        self.log_rows_ = result.log_rows
        return self

    def _scores(self, X) -> np.ndarray:
        if not hasattr(self, "params_"):
            raise RuntimeError("estimator is not fitted")
        graphs = validation.graphs_for_vocab(X, self.atom_vocab_)
        prepared = [M.prepare(g, self.config_, self.cluster_vocab_,
                              self.num_atom_types_) for g in graphs]
        return T.predict(self.params_, self.config_, prepared,
                         self.batch_size)


class SubFormerRegressor(_SubFormerBase, RegressorMixin):
    """Graph-to-scalar regressor; multi-task when y has columns."""

    _task_type = "regression"

    def predict(self, X) -> np.ndarray:
        scores = self._scores(X)
        return scores[:, 0] if scores.shape[1] == 1 else scores


class SubFormerClassifier(_SubFormerBase, ClassifierMixin):
    """Binary (optionally multi-task) graph classifier on logits."""

    _task_type = "classification"

    def fit(self, X, y):
        super().fit(X, y)
        self.classes_ = np.array([0, 1])
        return self

    def decision_function(self, X) -> np.ndarray:
        scores = self._scores(X)
        return scores[:, 0] if scores.shape[1] == 1 else scores

    def predict_proba(self, X) -> np.ndarray:
        logits = self._scores(X)
        probs = 1.0 / (1.0 + np.exp(-logits))
        if probs.shape[1] == 1:
            return np.hstack([1.0 - probs, probs])
        return probs

    def predict(self, X) -> np.ndarray:
        logits = self.decision_function(X)
        return (logits > 0).astype(np.int64)


class JunctionTreeDecomposer(BaseEstimator, TransformerMixin):
    """Stateless transformer mapping molecules to Decomposition objects."""

    def fit(self, X, y=None):
        return self

    def transform(self, X) -> list:
        graphs, _vocab, _n = validation.check_structures(X)
        return [decompose(g) for g in graphs]
