import os
from pathlib import Path

import numpy as np
import pytest

from subformer import make_graph, parse_smiles

FIXTURES = os.path.join(os.path.dirname(__file__), os.pardir, "fixtures")


@pytest.fixture(autouse=True)
def _reset_default_dtype():
    # training sets the process-wide dtype from its config; keep tests isolated
    from subformer import autograd as ag
    ag.set_default_dtype(np.float64)
    yield
    ag.set_default_dtype(np.float64)


@pytest.fixture(scope="session")
def fixtures_dir():
    return Path(FIXTURES).resolve()


@pytest.fixture
def decalin():
    return parse_smiles("C1CCC2CCCCC2C1")


@pytest.fixture
def bicyclopentyl():
    return parse_smiles("C1CCC(C1)C1CCCC1")


@pytest.fixture
def neopentane():
    return parse_smiles("CC(C)(C)C")


@pytest.fixture
def c5():
    return make_graph(5, [(0, 1, 0), (1, 2, 0), (2, 3, 0), (3, 4, 0), (0, 4, 0)],
                      [0] * 5)


@pytest.fixture
def p5():
    return make_graph(5, [(0, 1, 0), (1, 2, 0), (2, 3, 0), (3, 4, 0)], [0] * 5)


@pytest.fixture
def p3():
    return make_graph(3, [(0, 1, 0), (1, 2, 0)], [0] * 3)


@pytest.fixture
def path16():
    return make_graph(16, [(i, i + 1, 0) for i in range(15)], [0] * 16)


def tiny_model_config(**overrides):
    from subformer.model import ModelConfig
    base = dict(mp_layers=1, mp_hidden=8, transformer_layers=1,
                transformer_hidden=8, heads=2, ffn_hidden=8,
                readout_hidden=8, mp_dropout=0.0, edge_dropout=0.0,
                attn_dropout=0.0, precision="float64")
    base.update(overrides)
    return ModelConfig(**base)


@pytest.fixture
def tiny_config():
    return tiny_model_config()


def random_symmetric(n, seed):
    rng = np.random.default_rng(seed)
    a = rng.normal(size=(n, n))
    return (a + a.T) / 2.0
