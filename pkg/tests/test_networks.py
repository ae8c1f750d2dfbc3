import numpy as np
import pytest

from clidmu.networks import (MetaNet, MlpClassifier, ParamVector, backward_weighted_ce,
                             backward_weighted_mae, classifier_forward, layer_grad_norms,
                             metanet_forward, metanet_grad, metanet_grad_matrix,
                             model_from_text, model_to_text, per_sample_ce,
                             per_sample_grad_matrix, per_sample_grads, per_sample_mae)
from clidmu.numerics import make_rng

from oracles import fd_gradient, loop_forward_mlp, rel_err


def small_model(seed=0, d=3, hidden=(5,), c=3):
    return MlpClassifier.initialize(d, hidden, c, make_rng(seed))


class TestForward:
    def test_zero_model_uniform_probs(self):
        model = small_model()
        p = model.to_params()
        p.values[:] = 0.0
        model = MlpClassifier.from_params(p)
        trace = classifier_forward(model, make_rng(1).standard_normal((4, 3)))
        np.testing.assert_allclose(trace.Q, np.full((4, 3), 1 / 3), atol=1e-15)

    def test_identity_extractor_passthrough(self):
        model = MlpClassifier([(np.eye(2), np.zeros(2))], (np.ones((2, 2)), np.zeros(2)))
        trace = classifier_forward(model, np.array([[1.0, 0.0]]))
        np.testing.assert_allclose(trace.Z, [[1.0, 0.0]], atol=1e-15)

    def test_fixed_net_matches_scripted_oracle(self):
        # 2-4-3 net, all weights 0.1, zero bias, input (1, 1)
        W1 = np.full((2, 4), 0.1)
        W2 = np.full((4, 3), 0.1)
        model = MlpClassifier([(W1, np.zeros(4))], (W2, np.zeros(3)))
        trace = classifier_forward(model, np.array([[1.0, 1.0]]))
        z_oracle, q_oracle = loop_forward_mlp([(W1.tolist(), [0.0] * 4)],
                                              (W2.tolist(), [0.0] * 3), [1.0, 1.0])
        np.testing.assert_allclose(trace.Z[0], z_oracle, atol=1e-15)
        np.testing.assert_allclose(trace.Q[0], q_oracle, atol=1e-15)
        # frozen values from the oracle: z = 0.2 each, logits equal -> uniform
        np.testing.assert_allclose(trace.Z[0], np.full(4, 0.2), atol=1e-15)
        np.testing.assert_allclose(trace.Q[0], np.full(3, 1 / 3), atol=1e-15)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            classifier_forward(small_model(), np.zeros((2, 5)))

    def test_probability_rows(self):
        model = small_model(3)
        trace = classifier_forward(model, make_rng(4).standard_normal((10, 3)) * 5)
        np.testing.assert_allclose(trace.Q.sum(axis=1), np.ones(10), atol=1e-12)
        assert np.all(trace.Q > 0)


class TestLosses:
    def test_ce_exact_hit(self):
        assert per_sample_ce(np.array([[1.0, 0.0, 0.0]]), [0])[0] == pytest.approx(0.0, abs=1e-12)

    def test_ce_uniform(self):
        q = np.full((1, 4), 0.25)
        assert per_sample_ce(q, [2])[0] == pytest.approx(np.log(4.0), abs=1e-12)

    def test_ce_hand_value(self):
        # -ln 0.2
        assert per_sample_ce(np.array([[0.7, 0.2, 0.1]]), [1])[0] == pytest.approx(
            1.6094379124341003, abs=1e-12)

    def test_ce_label_out_of_range(self):
        with pytest.raises(ValueError):
            per_sample_ce(np.array([[0.5, 0.5]]), [2])

    def test_mae_exact_match(self):
        assert per_sample_mae(np.array([[0.0, 1.0]]), [1])[0] == 0.0

    def test_mae_uniform_binary(self):
        assert per_sample_mae(np.array([[0.5, 0.5]]), [0])[0] == pytest.approx(1.0, abs=1e-15)

    def test_mae_hand_value(self):
        assert per_sample_mae(np.array([[0.7, 0.3]]), [1])[0] == pytest.approx(1.4, abs=1e-15)

    def test_mae_range(self):
        rng = make_rng(6)
        for _ in range(20):
            q = rng.dirichlet(np.ones(4), size=3)
            L = per_sample_mae(q, rng.integers(0, 4, 3))
            assert np.all(L >= 0) and np.all(L <= 2)


class TestBackwardWeightedCE:
    def test_zero_weights_zero_gradient(self):
        model = small_model(1)
        X = make_rng(2).standard_normal((4, 3))
        trace = classifier_forward(model, X)
        g = backward_weighted_ce(model, trace, [0, 1, 2, 0], np.zeros(4))
        assert np.all(g.values == 0.0)

    def test_matches_finite_differences(self):
        rng = make_rng(7)
        model = small_model(7, hidden=(4, 3))
        X = rng.standard_normal((5, 3))
        y = rng.integers(0, 3, 5)
        trace = classifier_forward(model, X)
        g = backward_weighted_ce(model, trace, y, np.ones(5))
        layout = model.layout()

        def mean_ce(theta):
            mdl = MlpClassifier.from_params(ParamVector(layout, theta))
            t = classifier_forward(mdl, X)
            return float(np.mean(per_sample_ce(t.Q, y)))

        fd = fd_gradient(mean_ce, model.to_params().values)
        assert rel_err(g.values, fd) <= 1e-5

    def test_linearity_in_weights(self):
        model = small_model(8)
        X = make_rng(9).standard_normal((3, 3))
        y = np.array([0, 1, 2])
        trace = classifier_forward(model, X)
        w = np.array([2.0, 0.0, 0.0])
        g = backward_weighted_ce(model, trace, y, w)
        trace0 = classifier_forward(model, X[:1])
        g0 = backward_weighted_ce(model, trace0, y[:1], np.ones(1))
        # (1/3) * 2 * grad_of_sample_0
        np.testing.assert_allclose(g.values, 2.0 * g0.values / 3.0, atol=1e-14)

    def test_weight_shape_mismatch(self):
        model = small_model()
        trace = classifier_forward(model, np.zeros((2, 3)))
        with pytest.raises(ValueError):
            backward_weighted_ce(model, trace, [0, 1], np.ones(3))


class TestBackwardWeightedMAE:
    def test_matches_finite_differences(self):
        rng = make_rng(17)
        model = small_model(17, hidden=(4,))
        X = rng.standard_normal((5, 3))
        y = rng.integers(0, 3, 5)
        trace = classifier_forward(model, X)
        g = backward_weighted_mae(model, trace, y, np.ones(5))
        layout = model.layout()

        def mean_mae(theta):
            mdl = MlpClassifier.from_params(ParamVector(layout, theta))
            t = classifier_forward(mdl, X)
            return float(np.mean(per_sample_mae(t.Q, y)))

        fd = fd_gradient(mean_mae, model.to_params().values)
        assert rel_err(g.values, fd) <= 1e-5


class TestPerSampleGrads:
    def test_single_sample_equals_unweighted_backward(self):
        model = small_model(10)
        X = make_rng(11).standard_normal((1, 3))
        trace = classifier_forward(model, X)
        single = per_sample_grads(model, trace, [1])[0]
        full = backward_weighted_ce(model, trace, [1], np.ones(1))
        np.testing.assert_allclose(single.values, full.values, atol=1e-15)

    def test_duplicate_samples_identical_rows(self):
        model = small_model(12)
        x = make_rng(13).standard_normal(3)
        trace = classifier_forward(model, np.stack([x, x]))
        G = per_sample_grad_matrix(model, trace, [2, 2])
        np.testing.assert_allclose(G[0], G[1], atol=1e-15)

    def test_each_row_matches_finite_differences(self):
        rng = make_rng(14)
        model = small_model(14, hidden=(4,))
        X = rng.standard_normal((3, 3))
        y = rng.integers(0, 3, 3)
        trace = classifier_forward(model, X)
        G = per_sample_grad_matrix(model, trace, y)
        layout = model.layout()
        for i in range(3):
            def loss_i(theta, i=i):
                mdl = MlpClassifier.from_params(ParamVector(layout, theta))
                t = classifier_forward(mdl, X[i:i + 1])
                return float(per_sample_ce(t.Q, y[i:i + 1])[0])

            fd = fd_gradient(loss_i, model.to_params().values)
            assert rel_err(G[i], fd) <= 1e-5

    def test_mean_equals_unit_weight_backward(self):
        rng = make_rng(15)
        model = small_model(15, hidden=(6, 4))
        X = rng.standard_normal((7, 3))
        y = rng.integers(0, 3, 7)
        trace = classifier_forward(model, X)
        G = per_sample_grad_matrix(model, trace, y)
        full = backward_weighted_ce(model, trace, y, np.ones(7))
        np.testing.assert_allclose(G.mean(axis=0), full.values, atol=1e-10)


class TestMetaNet:
    def test_fresh_net_outputs_half(self):
        meta = MetaNet.initialize(make_rng(0), hidden=16)
        w = metanet_forward(meta, np.array([0.0, 1.0, 7.5]))
        np.testing.assert_allclose(w, [0.5, 0.5, 0.5], atol=1e-15)

    def test_identical_losses_identical_weights(self):
        meta = _random_metanet(21)
        w = metanet_forward(meta, np.array([1.3, 1.3, 1.3]))
        assert w[0] == w[1] == w[2]

    def test_fixed_net_matches_scripted_oracle(self):
        rng = make_rng(22)
        meta = _random_metanet(22, hidden=8)
        loss = 1.0
        hidden = [max(meta.hidden_w[0, j] * loss + meta.hidden_b[j], 0.0) for j in range(8)]
        o = sum(hidden[j] * meta.out_w[j, 0] for j in range(8)) + meta.out_b[0]
        expected = 1.0 / (1.0 + np.exp(-o))
        assert metanet_forward(meta, np.array([loss]))[0] == pytest.approx(expected, abs=1e-14)

    def test_outputs_strictly_inside_unit_interval(self):
        rng = make_rng(23)
        for seed in range(10):
            meta = _random_metanet(seed)
            w = metanet_forward(meta, rng.uniform(0, 10, 32))
            assert np.all(w > 0.0) and np.all(w < 1.0)

    def test_grad_zero_hidden_gives_quarter_bias(self):
        meta = MetaNet(np.zeros((1, 4)), np.zeros(4), np.zeros((4, 1)), np.zeros(1))
        g = metanet_grad(meta, 2.0)
        assert g.block("out.b")[0] == pytest.approx(0.25, abs=1e-15)
        for name in ("hidden.w", "hidden.b", "out.w"):
            assert np.all(g.block(name) == 0.0)

    def test_grad_matches_finite_differences(self):
        for seed in range(5):
            meta = _random_metanet(seed, hidden=6)
            loss = float(make_rng(seed + 100).uniform(0.1, 3.0))
            g = metanet_grad(meta, loss)
            layout = meta.layout()

            def out(psi):
                m = MetaNet.from_params(ParamVector(layout, psi))
                return float(metanet_forward(m, np.array([loss]))[0])

            fd = fd_gradient(out, meta.to_params().values)
            assert rel_err(g.values, fd) <= 1e-5

    def test_saturated_net_gradient_vanishes(self):
        meta = _random_metanet(30)
        p = meta.to_params()
        p.block("out.b")[0] = 500.0
        meta = MetaNet.from_params(p)
        g = metanet_grad(meta, 1.0)
        assert np.linalg.norm(g.values) < 1e-100

    def test_grad_matrix_rows_match_scalar_grad(self):
        meta = _random_metanet(31)
        losses = np.array([0.2, 1.7, 3.3])
        M = metanet_grad_matrix(meta, losses)
        for i, l in enumerate(losses):
            np.testing.assert_allclose(M[i], metanet_grad(meta, l).values, atol=1e-15)


def _random_metanet(seed, hidden=5):
    rng = make_rng(seed)
    meta = MetaNet.initialize(rng, hidden)
    p = meta.to_params()
    p.values[:] = rng.normal(0.0, 0.7, size=p.values.shape)
    return MetaNet.from_params(p)


class TestLayerGradNorms:
    def test_zero_gradient(self):
        model = small_model()
        g = ParamVector.zeros(model.layout())
        assert all(v == 0.0 for v in layer_grad_norms(g).values())

    def test_single_nonzero_block(self):
        model = small_model()
        g = ParamVector.zeros(model.layout())
        g.block("head.b")[:] = 3.0
        norms = layer_grad_norms(g)
        assert norms["head.b"] > 0
        assert all(v == 0.0 for k, v in norms.items() if k != "head.b")

    def test_pythagoras_over_blocks(self):
        model = small_model(2, hidden=(4, 4))
        rng = make_rng(33)
        g = ParamVector(model.layout(), rng.standard_normal(model.layout().size))
        norms = layer_grad_norms(g)
        total = sum(v * v for v in norms.values())
        assert total == pytest.approx(float(np.sum(g.values ** 2)), abs=1e-9)


class TestParamRoundTrips:
    def test_param_vector_round_trip_bit_identical(self):
        model = small_model(40, hidden=(6, 5), c=4)
        rebuilt = MlpClassifier.from_params(model.to_params())
        assert model.to_params().values.tobytes() == rebuilt.to_params().values.tobytes()

    def test_text_serialization_lossless(self):
        model = small_model(41, hidden=(4, 7), c=3)
        text = model_to_text(model)
        rebuilt = model_from_text(text)
        assert model.to_params().values.tobytes() == rebuilt.to_params().values.tobytes()
        assert rebuilt.hidden_sizes == model.hidden_sizes
        assert rebuilt.n_classes == model.n_classes

    def test_text_rejects_garbage(self):
        with pytest.raises(ValueError):
            model_from_text("not a model\n")

    def test_metanet_round_trip(self):
        meta = _random_metanet(42)
        rebuilt = MetaNet.from_params(meta.to_params())
        assert meta.to_params().values.tobytes() == rebuilt.to_params().values.tobytes()
