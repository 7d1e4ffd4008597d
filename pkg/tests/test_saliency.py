import numpy as np
import pytest

from bla.nn import build_mnist_cnn, predict
from bla.saliency import SaliencyMap, cam_scores, lime_scores, occlude, random_saliency, spearman


def occlusion_linear(a, grid=(7, 7)):
    """A model whose output is exactly ``sum_i a_i z_i`` in the occlusion bits.

    Every grid cell of the probe image is bright, so a cell is present iff
    its mean pixel value is positive.
    """
    gh, gw = grid
    a = np.asarray(a, dtype=np.float64)

    def model(batch):
        cells = batch[..., 0].reshape(len(batch), gh, 28 // gh, gw, 28 // gw).mean(axis=(2, 4))
        return (cells.reshape(len(batch), -1) > 0) @ a

    return model


class TestCam:
    def test_zero_weights(self):
        f = np.random.default_rng(0).normal(size=(7, 7, 16))
        assert np.all(cam_scores(f, np.zeros(16)).scores == 0)

    def test_dot_product(self):
        f = np.array([[1.0], [-1.0]]).reshape(1, 2, 1)
        assert cam_scores(f, [2.0]).scores.tolist() == [2.0, -2.0]
        assert cam_scores(f, [2.0], class_sign=-1).scores.tolist() == [-2.0, 2.0]

    def test_argmax_scale_invariant(self):
        rng = np.random.default_rng(1)
        f, w = rng.normal(size=(7, 7, 16)), rng.normal(size=16)
        assert np.argmax(cam_scores(f, w).scores) == np.argmax(cam_scores(f, 13.0 * w).scores)

    def test_bad_sign(self):
        with pytest.raises(ValueError):
            cam_scores(np.ones((7, 7, 2)), np.ones(2), class_sign=0)


class TestOcclude:
    def test_blacks_out_cells(self):
        x = np.ones((28, 28, 1))
        z = np.ones((1, 49))
        z[0, 8] = 0  # cell (1, 1)
        out = occlude(x, z, (7, 7))[0, ..., 0]
        assert np.all(out[4:8, 4:8] == 0) and out.sum() == 28 * 28 - 16

    def test_uneven_grid(self):
        with pytest.raises(ValueError):
            occlude(np.ones((28, 28, 1)), np.ones((1, 25)), (5, 5))


class TestLime:
    def test_exact_recovery(self):
        a = np.random.default_rng(2).normal(size=49)
        s = lime_scores(occlusion_linear(a), np.ones((28, 28, 1)), (7, 7), 1000, np.random.default_rng(3))
        np.testing.assert_allclose(s.scores, a, atol=1e-6)
        assert abs(s.intercept) < 1e-6
        assert s.method == "LIME"

    @pytest.mark.parametrize("grid", [(1, 1), (2, 2), (4, 4), (7, 7)])
    def test_recovery_on_smaller_grids(self, grid):
        n = grid[0] * grid[1]
        a = np.random.default_rng(n).normal(size=n)
        s = lime_scores(occlusion_linear(a, grid), np.ones((28, 28, 1)), grid, 4 * n + 4, np.random.default_rng(0))
        np.testing.assert_allclose(s.scores, a, atol=1e-6)

    def test_constant_model(self):
        s = lime_scores(lambda b: np.full(len(b), 0.7), np.ones((28, 28, 1)), (7, 7), 200, np.random.default_rng(0))
        np.testing.assert_allclose(s.scores, 0.0, atol=1e-9)
        assert s.intercept == pytest.approx(0.7, abs=1e-9)

    def test_deterministic(self):
        m = build_mnist_cnn(0)
        x = np.random.default_rng(5).uniform(size=(28, 28, 1))
        a = lime_scores(m, x, num_samples=100, rng=np.random.default_rng(9))
        b = lime_scores(m, x, num_samples=100, rng=np.random.default_rng(9))
        np.testing.assert_array_equal(a.scores, b.scores)

    def test_model_argument(self):
        m = build_mnist_cnn(0)
        x = np.random.default_rng(5).uniform(size=(28, 28, 1))
        a = lime_scores(m, x, num_samples=100, rng=np.random.default_rng(9))
        b = lime_scores(lambda batch: predict(m, batch), x, num_samples=100, rng=np.random.default_rng(9))
        np.testing.assert_array_equal(a.scores, b.scores)

    def test_too_few_samples(self):
        with pytest.raises(ValueError):
            lime_scores(lambda b: np.zeros(len(b)), np.ones((28, 28, 1)), (7, 7), 49)

    def test_singular_designs_are_redrawn(self):
        class Stuck:
            """Returns all-zero patterns first, then defers to a real generator."""

            def __init__(self):
                self.calls = 0
                self.inner = np.random.default_rng(0)

            def integers(self, low, high, size):
                self.calls += 1
                return np.zeros(size, dtype=int) if self.calls == 1 else self.inner.integers(low, high, size=size)

        rng = Stuck()
        s = lime_scores(occlusion_linear(np.ones(4), (2, 2)), np.ones((28, 28, 1)), (2, 2), 40, rng)
        assert rng.calls == 2
        np.testing.assert_allclose(s.scores, 1.0, atol=1e-9)


class TestSpearman:
    def test_monotone(self):
        assert spearman([1, 2, 3], [10, 20, 30]) == 1.0

    def test_reversed(self):
        assert spearman([1, 2, 3], [3, 2, 1]) == -1.0

    def test_ties(self):
        # ranks [1.5, 1.5, 3] against [1, 2, 3]: r = 1.5 / sqrt(1.5 * 2) = sqrt(3) / 2
        assert spearman([1, 1, 2], [1, 2, 3]) == pytest.approx(0.8660254037844386, abs=1e-15)

    def test_constant_is_zero(self):
        assert spearman([2, 2, 2], [1, 2, 3]) == 0.0

    def test_invariance(self):
        rng = np.random.default_rng(0)
        a, b = rng.normal(size=49), rng.normal(size=49)
        assert spearman(a, b) == pytest.approx(spearman(np.exp(a), b ** 3), abs=1e-12)
        assert spearman(a, a) == pytest.approx(1.0)

    def test_against_scipy(self):
        from scipy.stats import spearmanr

        rng = np.random.default_rng(1)
        a, b = rng.integers(0, 5, size=30), rng.normal(size=30)
        assert spearman(a, b) == pytest.approx(spearmanr(a, b).statistic, abs=1e-12)

    def test_accepts_maps(self):
        m = SaliencyMap(np.arange(4.0), (2, 2), "CAM")
        assert spearman(m, m) == pytest.approx(1.0)

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            spearman([1, 2], [1, 2, 3])


class TestRandomControl:
    def _pool(self, count=5):
        rng = np.random.default_rng(0)
        return [SaliencyMap(rng.dirichlet(np.ones(49)), (7, 7), "BLA-SOFT") for _ in range(count)]

    def test_excludes_reference(self):
        pool = self._pool()
        for seed in range(20):
            pick = random_saliency(pool[0], pool, np.random.default_rng(seed))
            assert pick.method == "RANDOM"
            assert not np.array_equal(pick.scores, pool[0].scores)
            assert pick.grid == pool[0].grid

    def test_single_other(self):
        pool = self._pool(2)
        pick = random_saliency(pool[0], pool, np.random.default_rng(0))
        np.testing.assert_array_equal(pick.scores, pool[1].scores)

    def test_empty(self):
        pool = self._pool(1)
        with pytest.raises(ValueError):
            random_saliency(pool[0], pool, np.random.default_rng(0))

    def test_deterministic(self):
        pool = self._pool()
        a = random_saliency(pool[1], pool, np.random.default_rng(4))
        b = random_saliency(pool[1], pool, np.random.default_rng(4))
        np.testing.assert_array_equal(a.scores, b.scores)


class TestSaliencyMap:
    def test_grid_mismatch(self):
        with pytest.raises(ValueError):
            SaliencyMap(np.zeros(48), (7, 7), "CAM")

    def test_unknown_method(self):
        with pytest.raises(ValueError):
            SaliencyMap(np.zeros(4), (2, 2), "SHAP")
