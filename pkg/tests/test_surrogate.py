import numpy as np
import pytest

from alflow.geometry import Shape
from alflow.oracle import VelocityField
from alflow.surrogate import (ModelConfig, SurrogateModel, TrainConfig, TrainingError,
                              committee_predict, committee_variance, forward, init_model, loss,
                              loss_and_grad, loss_gradient, n_params, param_layout, train)


def toy_shape(rng, n=10, shape_id="toy"):
    pts = rng.uniform(-2e-3, 2e-3, size=(n, 3))
    roles = np.array([0] * (n - 3) + [1, 2, 3])
    return Shape.from_arrays(shape_id, pts, roles)


def finite_difference(model, X, Y, beta, mask_seed, eps=1e-6):
    theta = model.params
    out = np.empty_like(theta)
    for i in range(len(theta)):
        up, dn = theta.copy(), theta.copy()
        up[i] += eps
        dn[i] -= eps
        fu = loss_gradient(SurrogateModel(up, model.config), X, Y, beta, mask_seed)[0]
        fd = loss_gradient(SurrogateModel(dn, model.config), X, Y, beta, mask_seed)[0]
        out[i] = (fu - fd) / (2 * eps)
    return out


class TestConfig:
    def test_param_count_closed_form(self):
        cfg = ModelConfig(hidden_widths=(16, 16), global_context=True)
        # first layer 9->16, head sees 16 local + 16 pooled, then 16->3
        assert n_params(cfg) == (9 * 16 + 16) + (32 * 16 + 16) + (16 * 3 + 3) == 739
        assert n_params(ModelConfig(hidden_widths=(16, 16), global_context=False)) == 483
        assert n_params(cfg) == len(init_model(cfg).params)

    def test_layout_order(self):
        names = [n for n, _ in param_layout(ModelConfig(hidden_widths=(4, 5)))]
        assert names == ["W0", "b0", "W1", "b1", "Wout", "bout"]

    @pytest.mark.parametrize("kw", [{"hidden_widths": ()}, {"hidden_widths": (0,)},
                                    {"dropout_rate": 1.0}, {"dropout_rate": -0.1}])
    def test_invalid_model_config(self, kw):
        with pytest.raises(ValueError):
            ModelConfig(**kw)

    @pytest.mark.parametrize("kw", [{"steps": 0}, {"learning_rate": 0.0}, {"lr_decay": 0.0},
                                    {"lr_decay": 1.5}])
    def test_invalid_train_config(self, kw):
        with pytest.raises(ValueError):
            TrainConfig(**kw)

    def test_reference_schedule_defaults(self):
        t = TrainConfig()
        assert (t.learning_rate, t.lr_decay, t.direction_weight) == (3e-4, 0.9989, 1.0)


class TestInit:
    def test_deterministic(self):
        cfg = ModelConfig(seed=4)
        assert np.array_equal(init_model(cfg).params, init_model(cfg).params)

    def test_fan_in_bounds(self):
        m = init_model(ModelConfig(hidden_widths=(8, 8)))
        for name, arr in m.unpack().items():
            fan_in = {"W0": 9, "b0": 9, "W1": 16, "b1": 16, "Wout": 8, "bout": 8}[name]
            assert np.abs(arr).max() <= 1 / np.sqrt(fan_in)

    def test_params_read_only(self):
        m = init_model(ModelConfig())
        with pytest.raises(ValueError):
            m.params[0] = 1.0


class TestForward:
    def test_zero_params(self, small_bifurcation):
        cfg = ModelConfig()
        m = SurrogateModel(np.zeros(n_params(cfg)), cfg)
        assert np.all(forward(m, small_bifurcation).values == 0)

    def test_permutation_equivariance(self, rng):
        m = init_model(ModelConfig(seed=1))
        X = rng.normal(scale=1e-3, size=(50, 9))
        perm = rng.permutation(50)
        np.testing.assert_allclose(forward(m, X[perm]).values, forward(m, X).values[perm],
                                   rtol=1e-12, atol=1e-15)

    def test_global_context_couples_points(self, rng):
        X = rng.normal(scale=1e-3, size=(20, 9))
        for gc, coupled in ((True, True), (False, False)):
            m = init_model(ModelConfig(global_context=gc))
            Y = X.copy()
            Y[5:] += 1e-3
            changed = not np.allclose(forward(m, X).values[:5], forward(m, Y).values[:5])
            assert changed == coupled

    def test_seeded_dropout_deterministic(self, small_bifurcation):
        m = init_model(ModelConfig(dropout_rate=0.3))
        a = forward(m, small_bifurcation, dropout_mask_seed=9).values
        b = forward(m, small_bifurcation, dropout_mask_seed=9).values
        c = forward(m, small_bifurcation, dropout_mask_seed=10).values
        assert np.array_equal(a, b) and not np.array_equal(a, c)
        assert not np.array_equal(a, forward(m, small_bifurcation).values)

    def test_feature_mismatch(self):
        with pytest.raises(ValueError):
            forward(init_model(ModelConfig()), np.zeros((4, 3)))

    def test_inverted_dropout_preserves_expectation(self, rng):
        # one hidden layer, no pooling: the output is linear in the dropout mask
        m = init_model(ModelConfig(hidden_widths=(32,), global_context=False, dropout_rate=0.5, seed=2))
        X = rng.normal(scale=1e-3, size=(5, 9))
        det = forward(m, X).values
        passes = np.stack([forward(m, X, dropout_mask_seed=i).values for i in range(4000)])
        err = np.abs(passes.mean(axis=0) - det)
        sem = passes.std(axis=0) / np.sqrt(len(passes))
        assert np.all(err < 5 * sem + 1e-12)


class TestLoss:
    def test_identical(self, rng):
        y = rng.normal(size=(20, 3))
        assert loss(y, y) == pytest.approx(0.0, abs=1e-15)

    def test_negated(self, rng):
        y = rng.normal(size=(20, 3))
        assert loss(-y, y, beta=0.7) == pytest.approx(1.4, rel=1e-14)

    def test_doubled_unit(self, rng):
        y = rng.normal(size=(20, 3))
        y /= np.linalg.norm(y, axis=1, keepdims=True)
        assert loss(2 * y, y) == pytest.approx(1.0, rel=1e-14)

    def test_zero_vectors_contribute_beta(self):
        y = np.array([[0.0, 0, 0], [1.0, 0, 0]])
        # point 0: zero target (cos 0, magnitude error 1), point 1: perfect
        assert loss(np.array([[1.0, 0, 0], [1.0, 0, 0]]), y, beta=2.0) == pytest.approx(0.5 + 1.0)

    def test_gradient_matches_finite_difference(self, rng):
        y = rng.normal(size=(15, 3))
        yh = rng.normal(size=(15, 3))
        _, g = loss_and_grad(yh, y, 0.5)
        num = np.zeros_like(yh)
        for idx in np.ndindex(*yh.shape):
            up, dn = yh.copy(), yh.copy()
            up[idx] += 1e-7
            dn[idx] -= 1e-7
            num[idx] = (loss(up, y, 0.5) - loss(dn, y, 0.5)) / 2e-7
        np.testing.assert_allclose(g, num, rtol=1e-5, atol=1e-9)


class TestGradientCheck:
    def test_backprop_vs_central_differences(self):
        worst = 0.0
        for case in range(20):
            rng = np.random.default_rng(100 + case)
            depth = int(rng.integers(1, 3))
            widths = tuple(int(w) for w in rng.integers(2, 7, size=depth))
            cfg = ModelConfig(hidden_widths=widths, global_context=bool(case % 2),
                              dropout_rate=float(rng.choice([0.0, 0.2])), seed=case)
            model = init_model(cfg)
            shape = toy_shape(rng)
            target = rng.normal(scale=0.1, size=(10, 3))
            mask_seed = case if cfg.dropout_rate else None
            _, g = loss_gradient(model, shape.features, target, 0.8, mask_seed)
            num = finite_difference(model, shape.features, target, 0.8, mask_seed)
            rel = np.abs(g - num) / np.maximum(np.maximum(np.abs(g), np.abs(num)), 1e-8)
            worst = max(worst, float(rel.max()))
        assert worst < 1e-4


class TestTrain:
    def test_loss_decreases(self, small_bifurcation, small_labels):
        m = train(init_model(ModelConfig(seed=0)), [(small_bifurcation, small_labels)],
                  TrainConfig(steps=500, learning_rate=1e-2, points_per_shape=128))
        assert len(m.train_log) == 500
        assert np.mean(m.train_log[-20:]) < np.mean(m.train_log[:20])

    def test_duplicate_sample_identical(self, small_bifurcation, small_labels):
        cfg = TrainConfig(steps=30, learning_rate=1e-2, points_per_shape=64, seed=3)
        one = train(init_model(ModelConfig()), [(small_bifurcation, small_labels)], cfg)
        two = train(init_model(ModelConfig()), [(small_bifurcation, small_labels)] * 2, cfg)
        assert np.array_equal(one.params, two.params)

    def test_deterministic(self, small_bifurcation, small_labels):
        cfg = TrainConfig(steps=20, points_per_shape=64, seed=5)
        a = train(init_model(ModelConfig()), [(small_bifurcation, small_labels)], cfg)
        b = train(init_model(ModelConfig()), [(small_bifurcation, small_labels)], cfg)
        assert a.params.tobytes() == b.params.tobytes()
        assert a.train_log == b.train_log

    def test_empty(self):
        with pytest.raises(TrainingError):
            train(init_model(ModelConfig()), [])

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_non_finite_reports_step_and_shape(self, small_bifurcation):
        cfg = ModelConfig()
        params = init_model(cfg).params.copy()
        params[0] = np.inf
        bad = SurrogateModel(params, cfg)
        y = VelocityField(np.ones((len(small_bifurcation), 3)))
        with pytest.raises(TrainingError, match=r"step 0.*bif-small"):
            train(bad, [(small_bifurcation, y)], TrainConfig(steps=3))


class TestCommittee:
    def test_no_dropout_identical_members(self, small_bifurcation):
        m = init_model(ModelConfig(dropout_rate=0.0))
        fields = committee_predict(m, small_bifurcation, members=4, seed=1)
        assert all(np.array_equal(f.values, fields[0].values) for f in fields)
        assert np.all(committee_variance(fields) == 0)

    def test_single_member_zero_variance(self, small_bifurcation):
        m = init_model(ModelConfig())
        assert np.all(committee_variance(committee_predict(m, small_bifurcation, 1, 0)) == 0)

    def test_variance_matches_recomputation(self, small_bifurcation, small_labels):
        m = train(init_model(ModelConfig(dropout_rate=0.2)), [(small_bifurcation, small_labels)],
                  TrainConfig(steps=50, learning_rate=1e-2, points_per_shape=64))
        fields = committee_predict(m, small_bifurcation, members=8, seed=2)
        stack = np.stack([f.values for f in fields])
        expected = np.zeros(len(small_bifurcation))
        for p in range(len(small_bifurcation)):
            expected[p] = np.trace(np.cov(stack[:, p, :].T, ddof=1))
        np.testing.assert_allclose(committee_variance(fields), expected, rtol=1e-10, atol=1e-20)

    def test_member_order_invariant(self, small_bifurcation):
        fields = committee_predict(init_model(ModelConfig()), small_bifurcation, 6, 0)
        np.testing.assert_allclose(committee_variance(fields[::-1]), committee_variance(fields),
                                   rtol=1e-12, atol=1e-20)
