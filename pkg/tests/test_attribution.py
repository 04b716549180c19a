"""Attribution methods against linear closed forms and FD oracles."""

import numpy as np
import pytest

from gradeq import attribution as at
from gradeq import autodiff as ag
from gradeq import models as md
from gradeq.seeding import seed_stream


def make_linear(seed=0, d=12):
    rng = np.random.default_rng(seed)
    return md.LinearScore.from_arrays(rng.normal(size=d), 0.3), rng


class QuadraticScore:
    """Class-1 logit is sum(x^2); its saliency 2x is linear in the input,
    which makes smoothgrad variance exactly computable."""

    classes = 2

    def bind(self, graph):
        return {}

    def graph_logits(self, x, pv):
        flat = ag.flatten(x) if len(x.shape) > 2 else x
        s = ag.sum_axes(ag.mul(flat, flat), (1,))
        return ag.matmul(s, x.graph.const(np.array([[0.0, 1.0]])))


class TestLinearClosedForms:
    def test_saliency_equals_weights(self):
        model, rng = make_linear(1)
        x = rng.uniform(0, 1, size=(3, 12))
        maps = at.saliency(model, x, np.ones(3, dtype=int))
        for m in maps:
            np.testing.assert_allclose(m.values, model.w.reshape(m.values.shape), rtol=1e-12)

    def test_input_x_gradient(self):
        model, rng = make_linear(2)
        x = rng.uniform(0, 1, size=(2, 12))
        maps = at.input_x_gradient(model, x, np.ones(2, dtype=int))
        for xi, m in zip(x, maps):
            np.testing.assert_allclose(m.values.reshape(-1), xi * model.w, rtol=1e-12)
        # pixel sum equals the bias-free score
        total = maps[0].values.sum()
        assert total == pytest.approx(float(x[0] @ model.w), rel=1e-12)

    def test_integrated_gradients_linear_any_steps(self):
        model, rng = make_linear(3)
        x = rng.uniform(0, 1, size=(2, 12))
        for steps in (8, 17, 64):
            maps = at.integrated_gradients(model, x, np.ones(2, dtype=int), steps=steps)
            for xi, m in zip(x, maps):
                np.testing.assert_allclose(m.values.reshape(-1), xi * model.w, rtol=1e-10)

    def test_smoothgrad_linear_any_sigma(self):
        model, rng = make_linear(4)
        x = rng.uniform(0, 1, size=(1, 12))
        maps = at.smoothgrad(model, x, np.array([1]), sigma=0.7, samples=5,
                             rng=seed_stream(0, "sg"))
        np.testing.assert_allclose(maps[0].values.reshape(-1), model.w, rtol=1e-10)

    def test_reduced_maps_proportional_to_abs_w(self):
        model, rng = make_linear(5)
        x = rng.uniform(0.1, 1, size=(1, 12))
        y = np.array([1])
        absw = np.abs(model.w)
        sal = at.saliency(model, x, y)[0].reduced.reshape(-1)
        ixg = at.input_x_gradient(model, x, y)[0].reduced.reshape(-1)
        ig = at.integrated_gradients(model, x, y)[0].reduced.reshape(-1)
        sg = at.smoothgrad(model, x, y, rng=seed_stream(1, "sg"))[0].reduced.reshape(-1)
        np.testing.assert_allclose(sal, absw, rtol=1e-12)
        np.testing.assert_allclose(ixg, np.abs(x[0]) * absw, rtol=1e-12)
        np.testing.assert_allclose(ig, np.abs(x[0]) * absw, rtol=1e-10)
        np.testing.assert_allclose(sg, absw, rtol=1e-10)


class TestProperties:
    def test_zero_network_flagged(self):
        m = md.MLP((6,), [4], 3, seed=0)
        for k in m.params:
            m.params[k] = np.zeros_like(m.params[k])
        amap = at.saliency(m, np.ones((1, 6)), np.array([0]))[0]
        assert amap.zero_norm
        assert np.all(amap.values == 0.0)

    def test_cnn_saliency_matches_fd(self):
        model = md.CNN((1, 8, 8), [3, 4], 3, "softplus", seed=7)
        rng = np.random.default_rng(8)
        x = rng.uniform(0.2, 0.8, size=(1, 1, 8, 8))
        y = np.array([2])
        got = at.saliency(model, x, y)[0].values
        h = 1e-5
        fd = np.zeros_like(x[0])
        for c in range(1):
            for i in range(8):
                for j in range(8):
                    xp = x.copy(); xp[0, c, i, j] += h
                    xm = x.copy(); xm[0, c, i, j] -= h
                    fd[c, i, j] = (md.class_score(model, xp[0], 2)
                                   - md.class_score(model, xm[0], 2)) / (2 * h)
        np.testing.assert_allclose(got, fd, rtol=1e-3, atol=1e-9)

    def test_ig_completeness(self):
        model = md.MLP((10,), [16, 16], 4, "softplus", seed=9)
        rng = np.random.default_rng(10)
        x = rng.uniform(0, 1, size=(3, 10))
        y = np.array([0, 3, 1])
        maps = at.integrated_gradients(model, x, y, steps=64)
        for xi, yi, m in zip(x, y, maps):
            gap = md.class_score(model, xi, int(yi)) - md.class_score(model, np.zeros(10), int(yi))
            assert m.values.sum() == pytest.approx(gap, rel=0.02, abs=1e-9)

    def test_ig_baseline_equal_input_is_zero(self):
        model = md.MLP((6,), [5], 2, seed=11)
        x = np.random.default_rng(12).uniform(0, 1, size=(2, 6))
        maps = at.integrated_gradients(model, x, np.array([0, 1]), baseline=x.copy())
        for m in maps:
            assert np.all(m.values == 0.0)

    def test_ig_rejects_few_steps(self):
        model = md.MLP((4,), [3], 2, seed=0)
        with pytest.raises(ValueError):
            at.integrated_gradients(model, np.zeros((1, 4)), np.array([0]), steps=4)

    def test_smoothgrad_zero_sigma_equals_saliency(self):
        model = md.CNN((1, 8, 8), [2, 3], 3, seed=13)
        x = np.random.default_rng(14).uniform(0, 1, size=(2, 1, 8, 8))
        y = np.array([0, 2])
        sal = at.saliency(model, x, y)
        sg = at.smoothgrad(model, x, y, sigma=0.0, samples=3, rng=seed_stream(3, "sg"))
        for a, b in zip(sal, sg):
            assert np.array_equal(a.values, b.values)

    def test_smoothgrad_variance_scales_inversely_with_samples(self):
        model = QuadraticScore()
        x = np.full((1, 6), 0.5)
        y = np.array([1])

        def estimates(samples, reps, tag):
            outs = []
            for r in range(reps):
                m = at.smoothgrad(model, x, y, sigma=0.3, samples=samples,
                                  rng=seed_stream(r, tag, samples))
                outs.append(m[0].values.reshape(-1))
            return np.var(np.stack(outs), axis=0).mean()

        v4 = estimates(4, 150, "v")
        v16 = estimates(16, 150, "v")
        assert v4 / v16 == pytest.approx(4.0, rel=0.5)

    def test_reduced_invariants_on_cnn(self):
        model = md.CNN((3, 8, 8), [3, 4], 4, seed=15)
        x = np.random.default_rng(16).uniform(0, 1, size=(2, 3, 8, 8))
        maps = at.attribute(model, x, np.array([1, 2]), "input_x_gradient")
        for m in maps:
            assert np.all(m.reduced >= 0.0)
            np.testing.assert_allclose(m.reduced, np.abs(m.values).sum(axis=0), rtol=1e-15)

    def test_dispatcher_rejects_unknown(self):
        model = md.MLP((4,), [3], 2, seed=0)
        with pytest.raises(ValueError):
            at.attribute(model, np.zeros((1, 4)), np.array([0]), "shapley")

    def test_export_round_trip(self, tmp_path):
        model = md.CNN((1, 8, 8), [2, 3], 3, seed=17)
        x = np.random.default_rng(18).uniform(0, 1, size=(1, 1, 8, 8))
        amap = at.saliency(model, x, np.array([1]))[0]
        path = tmp_path / "map.bin"
        at.save_attribution(amap, path)
        again = at.load_attribution(path)
        assert np.array_equal(again.values, amap.values)
        assert again.method == amap.method and again.target == amap.target
