import numpy as np
import pytest
from conftest import random_symmetric

from subformer import autograd as ag
from subformer import make_graph
from subformer.spectral import (
    PEConfig,
    SpectralError,
    compute_encodings,
    degree_pe,
    jacobi_eigh,
    laplacian_pe,
    merge_pe,
    normalized_laplacian,
    pe_param_shapes,
    spd_pe,
)


class TestJacobi:
    @pytest.mark.parametrize("seed", range(5))
    @pytest.mark.parametrize("n", [1, 2, 3, 7, 12])
    def test_matches_numpy(self, n, seed):
        a = random_symmetric(n, seed * 100 + n)
        w, v = jacobi_eigh(a)
        w_ref = np.linalg.eigvalsh(a)
        assert np.abs(w - w_ref).max() < 1e-9

    def test_reconstruction_and_orthogonality(self):
        a = random_symmetric(9, 4)
        w, v = jacobi_eigh(a)
        assert np.abs(v @ np.diag(w) @ v.T - a).max() < 1e-9
        assert np.abs(v.T @ v - np.eye(9)).max() < 1e-10

    def test_eigenvalues_ascending(self):
        w, _ = jacobi_eigh(random_symmetric(8, 1))
        assert (np.diff(w) >= 0).all()

    def test_asymmetric_raises(self):
        with pytest.raises(SpectralError):
            jacobi_eigh(np.array([[0.0, 1.0], [0.5, 0.0]]))

    def test_non_square_raises(self):
        with pytest.raises(SpectralError):
            jacobi_eigh(np.zeros((2, 3)))

    def test_diagonal_is_fixed_point(self):
        w, v = jacobi_eigh(np.diag([3.0, -1.0, 2.0]))
        assert np.allclose(w, [-1.0, 2.0, 3.0])

    def test_empty_matrix(self):
        w, v = jacobi_eigh(np.zeros((0, 0)))
        assert w.shape == (0,)
        assert v.shape == (0, 0)


class TestLaplacian:
    def test_row_sums_zero_on_regular_graph(self, c5):
        lap = normalized_laplacian(c5)
        assert np.abs(lap.sum(axis=1)).max() < 1e-12

    def test_isolated_node_identity_row(self):
        g = make_graph(1, [], [0])
        assert normalized_laplacian(g).tolist() == [[1.0]]

    def test_spectrum_in_unit_interval(self, p5):
        w = np.linalg.eigvalsh(normalized_laplacian(p5))
        assert w.min() > -1e-12
        assert w.max() < 2.0 + 1e-12


class TestLaplacianPE:
    def test_k2_edge(self):
        g = make_graph(2, [(0, 1, 0)], [0, 0])
        pe = laplacian_pe(g, 1)
        assert np.allclose(pe, [[np.sqrt(0.5)], [-np.sqrt(0.5)]])

    def test_sign_convention(self, p5):
        pe = laplacian_pe(p5, 3)
        for j in range(3):
            col = pe[:, j]
            assert col[np.argmax(np.abs(col))] >= 0

    def test_zero_padding_beyond_spectrum(self, p3):
        pe = laplacian_pe(p3, 5)
        assert pe.shape == (3, 5)
        # only n-1 = 2 non-constant eigenvectors exist
        assert np.abs(pe[:, 2:]).max() == 0.0

    def test_skips_constant_eigenvector(self, c5):
        pe = laplacian_pe(c5, 1)
        # first column is orthogonal to the constant vector
        assert abs(pe[:, 0].sum()) < 1e-9

    def test_invalid_k(self, p3):
        with pytest.raises(ValueError):
            laplacian_pe(p3, 0)


class TestSpdPE:
    def test_single_node_zero_matrix(self):
        g = make_graph(1, [], [0])
        assert spd_pe(g, 2).tolist() == [[0.0, 0.0]]

    def test_shape_and_padding(self, p3):
        pe = spd_pe(p3, 5)
        assert pe.shape == (3, 5)

    def test_orders_by_abs_eigenvalue(self, p5):
        dist = np.abs(np.subtract.outer(np.arange(5), np.arange(5)))
        w, v = np.linalg.eigh(dist.astype(np.float64))
        top = w[np.argmax(np.abs(w))]
        pe = spd_pe(p5, 1)
        # the leading column spans the top-|eigenvalue| eigenspace
        lead = v[:, np.argmax(np.abs(w))]
        cos = abs(float(pe[:, 0] @ lead))
        assert cos > 1 - 1e-9

    def test_positive_eigenvalue_wins_ties(self):
        # K2 distance matrix [[0,1],[1,0]] has eigenvalues +1 and -1
        g = make_graph(2, [(0, 1, 0)], [0, 0])
        pe = spd_pe(g, 2)
        lead = pe[:, 0]
        # +1 eigenvector is the constant direction
        assert abs(lead[0] - lead[1]) < 1e-9


class TestDegreePE:
    def test_caps_degree(self):
        star = make_graph(6, [(0, i, 0) for i in range(1, 6)], [0] * 6)
        ids = degree_pe(star, 3)
        assert ids[0] == 3
        assert set(ids[1:].tolist()) == {1}

    def test_invalid_cap(self, p3):
        with pytest.raises(ValueError):
            degree_pe(p3, 0)


class TestMerge:
    def setup_params(self, config, token_width, out_width):
        shapes = pe_param_shapes(config, token_width, out_width)
        rng = np.random.default_rng(0)
        return {name: ag.Tensor(rng.normal(size=shape))
                for name, shape in shapes.items()}

    def test_concat_shapes(self, c5):
        config = PEConfig(kinds=("DEG", "LPE"), dim=2, merge="concat",
                          deg_cap=4, deg_emb=3)
        encs = compute_encodings(c5, config)
        params = self.setup_params(config, 6, 8)
        tokens = ag.Tensor(np.random.default_rng(1).normal(size=(5, 6)))
        out = merge_pe(tokens, encs, config, params)
        assert out.data.shape == (5, 8)

    def test_sum_requires_matching_width(self):
        config = PEConfig(kinds=("LPE",), dim=2, merge="sum")
        with pytest.raises(ValueError):
            pe_param_shapes(config, 6, 8)

    def test_sum_adds_projection(self, c5):
        config = PEConfig(kinds=("LPE",), dim=2, merge="sum")
        encs = compute_encodings(c5, config)
        params = self.setup_params(config, 4, 4)
        tokens = ag.Tensor(np.zeros((5, 4)))
        out = merge_pe(tokens, encs, config, params)
        expected = encs[0] @ params["proj_lpe_w"].data + params["proj_lpe_b"].data
        assert np.allclose(out.data, expected)

    def test_encoding_count_mismatch(self, c5):
        config = PEConfig(kinds=("LPE", "SPDE"), dim=2)
        params = self.setup_params(config, 4, 4)
        tokens = ag.Tensor(np.zeros((5, 4)))
        with pytest.raises(ValueError):
            merge_pe(tokens, [np.zeros((5, 2))], config, params)

    def test_config_validation(self):
        with pytest.raises(ValueError):
            PEConfig(kinds=("BAD",), dim=2)
        with pytest.raises(ValueError):
            PEConfig(kinds=("LPE", "LPE"), dim=2)
        with pytest.raises(ValueError):
            PEConfig(kinds=("LPE",), dim=0)
        with pytest.raises(ValueError):
            PEConfig(kinds=("LPE",), dim=2, merge="average")

    def test_widths(self):
        config = PEConfig(kinds=("DEG", "LPE", "SPDE"), dim=3, deg_emb=7)
        assert config.widths() == [7, 3, 3]
