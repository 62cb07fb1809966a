import numpy as np
import pytest
from hypothesis import assume, given, settings, strategies as st

from aliased_percept import mixture as mx
from aliased_percept.mixture import GaussianMixture


def gm(w, mu, s):
    return GaussianMixture(np.array(w, float), np.array(mu, float), np.array(s, float))


def naive_density(g, y):
    return sum(
        w * np.exp(-0.5 * ((y - m) / s) ** 2) / (s * np.sqrt(2 * np.pi))
        for w, m, s in zip(g.weights, g.means, g.stds)
    )


@st.composite
def mixtures(draw, max_k=6):
    k = draw(st.integers(1, max_k))
    raw = draw(st.lists(st.floats(0.05, 1.0), min_size=k, max_size=k))
    w = np.array(raw) / np.sum(raw)
    mu = draw(st.lists(st.floats(-10, 10), min_size=k, max_size=k))
    s = draw(st.lists(st.floats(0.05, 3.0), min_size=k, max_size=k))
    return gm(w, mu, s)


class TestConstruction:
    def test_rejects_bad_weights(self):
        with pytest.raises(ValueError):
            gm([0.5, 0.6], [0, 1], [1, 1])
        with pytest.raises(ValueError):
            gm([-0.1, 1.1], [0, 1], [1, 1])

    def test_rejects_nonpositive_std(self):
        with pytest.raises(ValueError):
            gm([1.0], [0.0], [0.0])

    def test_rejects_length_mismatch(self):
        with pytest.raises(ValueError):
            gm([0.5, 0.5], [0.0], [1.0, 1.0])


class TestLogDensity:
    def test_standard_normal_peak(self):
        assert mx.log_density(gm([1], [0], [1]), 0.0) == pytest.approx(-0.918939, abs=1e-6)

    def test_symmetric_midpoint(self):
        g = gm([0.5, 0.5], [-1, 1], [1, 1])
        assert mx.log_density(g, 0.0) == pytest.approx(np.log(np.exp(-0.5) / np.sqrt(2 * np.pi)))
        assert mx.log_density(g, 0.0) == pytest.approx(-1.418939, abs=1e-6)

    def test_matches_naive_sum(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            g = mx.random_mixture(rng)
            y = mx.sample(g, 1, int(rng.integers(1 << 30)))[0]
            assert mx.log_density(g, y) == pytest.approx(np.log(naive_density(g, y)), abs=1e-12)

    def test_far_tail_is_finite(self):
        g = gm([0.3, 0.7], [0, 1], [1e-3, 1e-3])
        val = mx.log_density(g, 1 + 40 * 1e-3)
        assert np.isfinite(val)
        assert val == pytest.approx(np.log(0.7) - 800 - np.log(1e-3) - 0.5 * np.log(2 * np.pi))

    @settings(max_examples=40, deadline=None)
    @given(mixtures())
    def test_integrates_to_one(self, g):
        spread = np.sqrt(mx.conditional_variance(g))
        lo = g.means.min() - 10 * spread - 10 * g.stds.max()
        hi = g.means.max() + 10 * spread + 10 * g.stds.max()
        n = int(max(2e5, 40 * (hi - lo) / g.stds.min()))
        ys = np.linspace(lo, hi, n)
        assert np.trapezoid(np.exp(mx.log_density(g, ys)), ys) == pytest.approx(1.0, abs=1e-6)


class TestStatistics:
    def test_mean_single(self):
        assert mx.conditional_mean(gm([1], [3.5], [1])) == 3.5

    def test_mean_symmetric(self):
        assert mx.conditional_mean(gm([0.5, 0.5], [-1, 1], [1, 1])) == 0.0

    def test_mode_density_ratio(self):
        k, v = mx.conditional_mode_density(gm([0.3, 0.7], [2, 5], [0.1, 1.0]))
        assert (int(k), float(v)) == (0, 2.0)

    def test_mode_single(self):
        k, v = mx.conditional_mode_density(gm([1], [4.25], [0.5]))
        assert (int(k), float(v)) == (0, 4.25)
        k, v = mx.conditional_mode_weight(gm([1], [4.25], [0.5]))
        assert (int(k), float(v)) == (0, 4.25)

    def test_mode_weight_argmax(self):
        k, v = mx.conditional_mode_weight(gm([0.2, 0.5, 0.3], [1, 2, 3], [1, 1, 1]))
        assert (int(k), float(v)) == (1, 2.0)

    def test_mode_weight_tie_is_lowest_index(self):
        k, _ = mx.conditional_mode_weight(gm([0.25] * 4, [4, 3, 2, 1], [1, 2, 3, 4]))
        assert int(k) == 0

    def test_modes_agree_for_equal_stds(self):
        rng = np.random.default_rng(1)
        for _ in range(100):
            k = int(rng.integers(1, 7))
            s = rng.uniform(0.1, 3.0)
            g = gm(rng.dirichlet(np.ones(k)), rng.normal(size=k), np.full(k, s))
            assert mx.conditional_mode_density(g)[0] == mx.conditional_mode_weight(g)[0]

    def test_mode_density_near_grid_argmax_when_separated(self):
        rng = np.random.default_rng(2)
        for _ in range(20):
            s = rng.uniform(0.2, 1.0, size=4)
            mu = np.cumsum(rng.uniform(8.5, 12.0, size=4) * s.max())
            g = gm(rng.dirichlet(np.ones(4)), mu, s)
            grid = np.linspace(mu.min() - 5 * s.max(), mu.max() + 5 * s.max(), 100_000)
            best = grid[np.argmax(mx.log_density(g, grid))]
            _, mode = mx.conditional_mode_density(g)
            assert abs(mode - best) <= grid[1] - grid[0]

    def test_variance_closed_forms(self):
        assert mx.conditional_variance(gm([0.5, 0.5], [-1, 1], [1, 1])) == pytest.approx(2.0)
        assert mx.conditional_variance(gm([1], [7], [0.3])) == pytest.approx(0.09)

    def test_entropy_closed_forms(self):
        assert mx.conditional_entropy(gm([1], [0], [1])) == pytest.approx(0.918939, abs=1e-6)
        g = gm([0.5, 0.5], [-100, 100], [1, 1])
        assert mx.conditional_entropy(g) == pytest.approx(np.log(2) + 0.5 * np.log(2 * np.pi))
        assert mx.conditional_entropy(g) == pytest.approx(1.612086, abs=1e-6)

    def test_batched_statistics_match_rowwise(self):
        rng = np.random.default_rng(3)
        rows = [mx.random_mixture(rng) for _ in range(7)]
        batch = GaussianMixture(
            np.stack([r.weights for r in rows]),
            np.stack([r.means for r in rows]),
            np.stack([r.stds for r in rows]),
        )
        for fn in (mx.conditional_mean, mx.conditional_variance, mx.conditional_entropy):
            np.testing.assert_allclose(fn(batch), [fn(r) for r in rows], rtol=0, atol=1e-14)
        np.testing.assert_array_equal(
            mx.conditional_mode_density(batch)[1], [mx.conditional_mode_density(r)[1] for r in rows]
        )
        assert len(batch) == 7 and batch[2].means.tolist() == rows[2].means.tolist()


class TestMonteCarloOracles:
    def test_mean_and_variance_match_samples(self):
        rng = np.random.default_rng(4)
        for trial in range(20):
            g = mx.random_mixture(rng)
            ys = mx.sample(g, 100_000, seed=trial)
            n = ys.size
            se_mean = ys.std(ddof=1) / np.sqrt(n)
            assert abs(mx.conditional_mean(g) - ys.mean()) < 3 * se_mean
            m4 = np.mean((ys - ys.mean()) ** 4)
            se_var = np.sqrt((m4 - ys.var() ** 2) / n)
            assert abs(mx.conditional_variance(g) - ys.var(ddof=1)) < 3 * se_var

    def test_entropy_does_not_exceed_mc(self):
        rng = np.random.default_rng(5)
        for trial in range(10):
            g = mx.random_mixture(rng)
            ys = mx.sample(g, 1_000_000, seed=100 + trial)
            lp = mx.log_density(g, ys)
            mc, se = -lp.mean(), lp.std(ddof=1) / np.sqrt(ys.size)
            assert mx.conditional_entropy(g) <= mc + 3 * se


class TestSample:
    def test_empty(self):
        assert mx.sample(gm([1], [0], [1]), 0, seed=0).size == 0

    def test_degenerate_spread(self):
        ys = mx.sample(gm([1], [2.5], [1e-12]), 1000, seed=0)
        np.testing.assert_allclose(ys, 2.5, atol=1e-9)

    def test_deterministic(self):
        g = mx.random_mixture(np.random.default_rng(9))
        np.testing.assert_array_equal(mx.sample(g, 50, 3), mx.sample(g, 50, 3))

    def test_component_frequencies(self):
        # well separated components: each draw can be attributed to its source
        g = gm([0.1, 0.2, 0.3, 0.4], [0, 100, 200, 300], [1, 1, 1, 1])
        ys = mx.sample(g, 100_000, seed=11)
        counts = np.bincount(np.rint(ys / 100).astype(int), minlength=4)
        freq = counts / ys.size
        se = np.sqrt(g.weights * (1 - g.weights) / ys.size)
        assert np.all(np.abs(freq - g.weights) < 3 * se)


class TestProperties:
    @settings(max_examples=60, deadline=None)
    @given(mixtures())
    def test_variance_at_least_within(self, g):
        assert mx.conditional_variance(g) >= np.sum(g.weights * g.stds**2) - 1e-12

    @settings(max_examples=60, deadline=None)
    @given(mixtures(), st.floats(-50, 50))
    def test_shift_equivariance(self, g, c):
        h = g.shifted(c)
        assert mx.conditional_mean(h) == pytest.approx(mx.conditional_mean(g) + c, abs=1e-12)
        for mode in (mx.conditional_mode_density, mx.conditional_mode_weight):
            assert mode(h)[0] == mode(g)[0]
            assert mode(h)[1] == pytest.approx(mode(g)[1] + c, abs=1e-12)
        assert mx.conditional_variance(h) == pytest.approx(mx.conditional_variance(g), rel=1e-12, abs=1e-12)
        assert mx.conditional_entropy(h) == pytest.approx(mx.conditional_entropy(g), abs=1e-12)

    @settings(max_examples=60, deadline=None)
    @given(mixtures(), st.floats(0.1, 10.0))
    def test_scale_law(self, g, s):
        # near-ties in the argmax ratios flip under rounding; the law is about values
        for r in (g.weights / g.stds, g.weights):
            top = np.sort(r)[::-1]
            assume(top.size == 1 or top[0] - top[1] > 1e-9 * top[0])
        h = g.scaled(s)
        assert mx.conditional_mean(h) == pytest.approx(s * mx.conditional_mean(g), abs=1e-9)
        assert mx.conditional_mode_density(h)[1] == pytest.approx(s * mx.conditional_mode_density(g)[1], abs=1e-9)
        assert mx.conditional_mode_weight(h)[1] == pytest.approx(s * mx.conditional_mode_weight(g)[1], abs=1e-9)
        assert mx.conditional_variance(h) == pytest.approx(s * s * mx.conditional_variance(g), rel=1e-9)
        assert mx.conditional_entropy(h) == pytest.approx(mx.conditional_entropy(g) + np.log(s), abs=1e-9)
