import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from delome.errors import DivergenceError, FormatError, ShapeError
from delome.model import (InitSampler, LinearSgcModel, OptimizerConfig, adjusted_cross_entropy,
                          cross_entropy, fit, forward, grad_theta, load_model, predict,
                          save_model, widen)


def central_diff(f, params, h=1e-6):
    """Finite-difference gradient of scalar f(params) over every block."""
    out = {}
    for k, v in params.items():
        g = np.zeros_like(v)
        for idx in np.ndindex(v.shape):
            old = v[idx]
            v[idx] = old + h
            up = f(params)
            v[idx] = old - h
            down = f(params)
            v[idx] = old
            g[idx] = (up - down) / (2 * h)
        out[k] = g
    return out


def rel_err(a, b):
    num = np.sqrt(sum(np.sum((a[k] - b[k]) ** 2) for k in a))
    den = np.sqrt(sum(np.sum(b[k] ** 2) for k in b))
    return num / max(den, 1e-12)


def random_instance(rng, hidden=None):
    f, c, n = rng.integers(1, 9), rng.integers(2, 6), rng.integers(1, 33)
    model = InitSampler(int(rng.integers(1 << 30))).model(f, c, hidden_dim=hidden)
    model.bias[:] = rng.normal(size=c)
    x = rng.normal(size=(n, f))
    y = rng.integers(0, c, n)
    return model, x, y


class TestForward:
    def test_zero_model(self):
        m = LinearSgcModel(np.zeros((3, 4)), np.zeros(4))
        np.testing.assert_array_equal(forward(m, np.ones((2, 3))), np.zeros((2, 4)))

    def test_identity_weight(self):
        m = LinearSgcModel(np.eye(2), np.zeros(2))
        np.testing.assert_array_equal(forward(m, [[1.0, 2.0]]), [[1.0, 2.0]])

    def test_hand_dot(self):
        m = LinearSgcModel([[1.0], [-1.0]], [0.5])
        np.testing.assert_allclose(forward(m, [[2.0, 3.0]]), [[-0.5]])

    def test_shape_mismatch(self):
        m = LinearSgcModel(np.zeros((3, 2)), np.zeros(2))
        with pytest.raises(ShapeError):
            forward(m, np.zeros((1, 4)))

    def test_rejects_nonfinite_weights(self):
        with pytest.raises(ValueError):
            LinearSgcModel([[np.nan]], [0.0])


class TestCrossEntropy:
    @pytest.mark.parametrize("c", [2, 3, 7])
    def test_uniform_logits(self, c):
        assert cross_entropy(np.full((3, c), 0.3), [0, 1, 1]) == pytest.approx(np.log(c), abs=1e-15)

    def test_hand_value(self):
        assert cross_entropy([[0.0, np.log(3)]], [1]) == pytest.approx(-np.log(0.75), abs=1e-12)
        assert -np.log(0.75) == pytest.approx(0.287682, abs=1e-6)

    def test_limit(self):
        assert cross_entropy([[1e4, 0.0, 0.0]], [0]) < 1e-12

    def test_label_out_of_range(self):
        with pytest.raises(ValueError):
            cross_entropy([[0.0, 0.0]], [2])

    def test_adjusted_constant_offsets(self, rng):
        z = rng.normal(size=(6, 4))
        y = rng.integers(0, 4, 6)
        for kappa in (-3.0, 0.0, 2.5):
            assert adjusted_cross_entropy(z, y, np.full(4, kappa)) == pytest.approx(
                cross_entropy(z, y), abs=1e-12)
        assert adjusted_cross_entropy(z, y, np.zeros(4)) == cross_entropy(z, y)

    def test_adjusted_hand_value(self):
        loss = adjusted_cross_entropy([[0.0, 0.0]], [0], [np.log(1), np.log(3)])
        assert loss == pytest.approx(-np.log(0.25), abs=1e-12)
        assert loss == pytest.approx(1.386294, abs=1e-6)

    def test_offset_length_checked(self):
        with pytest.raises(ShapeError):
            adjusted_cross_entropy([[0.0, 0.0]], [0], [0.0])


class TestGradTheta:
    @pytest.mark.parametrize("with_offsets", [False, True])
    def test_finite_differences(self, with_offsets):
        rng = np.random.default_rng(7 + with_offsets)
        worst = 0.0
        for _ in range(100):
            model, x, y = random_instance(rng)
            off = rng.normal(size=model.class_count) if with_offsets else None
            analytic = grad_theta(model, x, y, off)
            params = {k: v.copy() for k, v in model.params().items()}
            numeric = central_diff(
                lambda p: adjusted_cross_entropy(forward(model.with_params(p), x), y, off), params)
            worst = max(worst, rel_err(analytic, numeric))
        assert worst < 1e-5

    def test_finite_differences_hidden_head(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            model, x, y = random_instance(rng, hidden=5)
            analytic = grad_theta(model, x, y)
            params = {k: v.copy() for k, v in model.params().items()}
            numeric = central_diff(
                lambda p: cross_entropy(forward(model.with_params(p), x), y), params)
            assert rel_err(analytic, numeric) < 1e-5

    def test_zero_at_perfect_fit(self):
        m = LinearSgcModel(np.eye(3) * 1e3, np.zeros(3))
        g = grad_theta(m, np.eye(3), [0, 1, 2])
        assert max(np.abs(v).max() for v in g.values()) < 1e-12

    def test_duplicated_rows(self, rng):
        model, x, y = random_instance(rng)
        g1 = grad_theta(model, x, y)
        g2 = grad_theta(model, np.vstack([x, x]), np.concatenate([y, y]))
        for k in g1:
            np.testing.assert_allclose(g1[k], g2[k], rtol=1e-12, atol=1e-15)


class TestFit:
    def test_separable_fixture(self, separable_task):
        task = separable_task
        x = task.propagated(2)[task.train_mask]
        y = task.labels[task.train_mask]
        model = InitSampler(0).model(x.shape[1], 2)
        hist = []
        trained = fit(model, x, y, opt=OptimizerConfig(learning_rate=0.005, epochs=200),
                      history=hist)
        assert np.mean(predict(forward(trained, x)) == y) == 1.0
        assert hist[-1] < hist[0]

    def test_zero_epochs_rejected(self):
        with pytest.raises(ValueError):
            OptimizerConfig(epochs=0)

    @pytest.mark.parametrize("kw", [dict(learning_rate=0), dict(kind="rmsprop"),
                                    dict(adam_beta1=1.0)])
    def test_invalid_config(self, kw):
        with pytest.raises(ValueError):
            OptimizerConfig(**kw)

    def test_deterministic(self, separable_task):
        x = separable_task.propagated(2)
        y = separable_task.labels
        runs = [fit(InitSampler(5).model(x.shape[1], 2), x, y,
                    opt=OptimizerConfig(epochs=30)) for _ in range(2)]
        assert runs[0].weight.tobytes() == runs[1].weight.tobytes()
        assert runs[0].bias.tobytes() == runs[1].bias.tobytes()

    def test_sgd_decreases_loss(self, rng):
        model, x, y = random_instance(rng)
        hist = []
        fit(model, x, y, opt=OptimizerConfig(kind="sgd", learning_rate=0.1, epochs=50),
            history=hist)
        assert hist[-1] < hist[0]

    def test_divergence_names_epoch(self):
        m = LinearSgcModel(np.zeros((1, 2)), np.zeros(2))
        with pytest.raises(DivergenceError, match="epoch 1"):
            fit(m, [[np.inf]], [0], opt=OptimizerConfig(epochs=3))

    def test_input_model_untouched(self, rng):
        model, x, y = random_instance(rng)
        before = model.weight.copy()
        fit(model, x, y, opt=OptimizerConfig(epochs=5))
        np.testing.assert_array_equal(model.weight, before)


class TestPredict:
    def test_argmax(self):
        assert predict([[2, 3, 1, 0.5]]).tolist() == [1]

    def test_masked(self):
        z = [[2, 1, 3, 0.5]]
        assert predict(z, {0, 1}).tolist() == [0]
        assert predict(z).tolist() == [2]

    def test_tie_break(self):
        assert predict([[1.0, 1.0]]).tolist() == [0]
        assert predict([[0.0, 1.0, 1.0]], {1, 2}).tolist() == [1]

    def test_empty_mask(self):
        with pytest.raises(ValueError):
            predict([[1.0, 2.0]], set())

    @settings(max_examples=200, deadline=None)
    @given(st.integers(0, 10_000), st.floats(-50, 50))
    def test_shift_invariance(self, seed, shift):
        z = np.random.default_rng(seed).normal(size=(5, 4))
        np.testing.assert_array_equal(predict(z), predict(z + shift))

    def test_til_dominates_cil_exhaustive(self):
        rng = np.random.default_rng(0)
        for _ in range(2000):
            c = rng.integers(2, 7)
            z = rng.normal(size=(1, c))
            y = int(rng.integers(c))
            mask = {y} | set(rng.choice(c, size=rng.integers(0, c), replace=False).tolist())
            if predict(z)[0] == y:
                assert predict(z, mask)[0] == y


class TestWidenAndCheckpoint:
    def test_widen_keeps_columns(self):
        s = InitSampler(1)
        m = s.model(4, 2)
        w = widen(m, 5, s)
        assert w.class_count == 5
        np.testing.assert_array_equal(w.weight[:, :2], m.weight)
        np.testing.assert_array_equal(w.bias, [*m.bias, 0, 0, 0])
        with pytest.raises(ValueError):
            widen(w, 3, s)

    @pytest.mark.parametrize("hidden", [None, 6])
    def test_roundtrip(self, tmp_path, hidden):
        m = InitSampler(3).model(4, 3, prop_depth=2, hidden_dim=hidden)
        save_model(m, tmp_path)
        back = load_model(tmp_path)
        for k, v in m.params().items():
            assert v.tobytes() == back.params()[k].tobytes()
        assert back.prop_depth == 2

    def test_truncated_weights(self, tmp_path):
        save_model(InitSampler(3).model(4, 3), tmp_path)
        data = (tmp_path / "weights.bin").read_bytes()
        (tmp_path / "weights.bin").write_bytes(data[:-8])
        with pytest.raises(FormatError):
            load_model(tmp_path)
