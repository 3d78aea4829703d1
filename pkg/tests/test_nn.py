import numpy as np
import pytest

from sigclust import kernels, losses, nn
from sigclust.errors import (
    BadMagicError,
    ShapeTableError,
    TruncatedFileError,
    VersionMismatchError,
)

FD_STEP = 1e-5
FD_RTOL = 1e-4
FD_ATOL = 1e-8


def fd_close(analytic, numeric, rtol=FD_RTOL, atol=FD_ATOL):
    denom = max(abs(analytic), abs(numeric))
    return abs(analytic - numeric) <= max(rtol * denom, atol)


def composite_loss(model, batch, pairs, lam):
    feats = nn.forward(model, batch, train_mode=True)
    sim = losses.similarity_matrix(feats)
    return losses.pairwise_loss(sim, pairs, lam)


def fd_gradient_at(model, batch, pairs, lam, name, index):
    """Central finite difference of the composite loss in one parameter coordinate."""
    out = []
    for sign in (1.0, -1.0):
        probe = model.copy()
        probe.params[name][index] += sign * FD_STEP
        out.append(composite_loss(probe, batch, pairs, lam).loss)
    return (out[0] - out[1]) / (2 * FD_STEP)


class TestInitModel:
    def test_shapes_and_forward_contract(self):
        model = nn.init_model(128, 10, seed=0)
        x = np.random.default_rng(0).normal(size=(3, 2, 128))
        feats = nn.forward(model, x)
        assert feats.shape == (3, 10)
        np.testing.assert_allclose(np.linalg.norm(feats, axis=1), 1.0, atol=1e-9)
        assert feats.min() >= 0.0

    def test_deterministic(self):
        a = nn.init_model(32, 4, seed=9)
        b = nn.init_model(32, 4, seed=9)
        for name in a.params:
            np.testing.assert_array_equal(a.params[name], b.params[name])

    def test_rejects_too_short_and_small_k(self):
        with pytest.raises(ValueError):
            nn.init_model(2, 10, seed=0)
        with pytest.raises(ValueError):
            nn.init_model(3, 10, seed=0)
        nn.init_model(4, 10, seed=0)  # just long enough
        with pytest.raises(ValueError):
            nn.init_model(16, 1, seed=0)

    def test_pooled_length(self):
        assert nn.pooled_length(16) == 4
        assert nn.pooled_length(17) == 4
        assert nn.pooled_length(19) == 4
        assert nn.pooled_length(4) == 1


class TestForward:
    def test_zero_head_gives_uniform_rows(self):
        model = nn.init_model(16, 4, seed=1)
        model.params["dense2_w"][:] = 0.0
        model.params["dense2_b"][:] = 0.0
        x = np.random.default_rng(1).normal(size=(5, 2, 16))
        feats = nn.forward(model, x)
        np.testing.assert_allclose(feats, 0.5, atol=1e-12)  # 1/sqrt(4)

    def test_eval_mode_is_pure(self):
        model = nn.init_model(24, 3, seed=2)
        x = np.random.default_rng(2).normal(size=(4, 2, 24))
        a = nn.forward(model, x)
        b = nn.forward(model, x)
        np.testing.assert_array_equal(a, b)

    def test_train_mode_updates_running_stats(self):
        model = nn.init_model(24, 3, seed=3)
        x = np.random.default_rng(3).normal(size=(6, 2, 24))
        before = model.stats["bn1_mean"].copy()
        nn.forward(model, x, train_mode=True)
        assert not np.array_equal(before, model.stats["bn1_mean"])

    def test_rejects_bad_shapes_and_nonfinite(self):
        model = nn.init_model(16, 3, seed=4)
        with pytest.raises(ValueError):
            nn.forward(model, np.zeros((2, 2, 8)))
        bad = np.zeros((2, 2, 16))
        bad[0, 0, 0] = np.nan
        with pytest.raises(ValueError):
            nn.forward(model, bad)


class TestBatchNorm:
    def test_train_mode_output_statistics(self):
        rng = np.random.default_rng(5)
        x = rng.normal(loc=3.0, scale=2.5, size=(8, 6, 20))
        gamma = rng.uniform(0.5, 2.0, size=6)
        beta = rng.normal(size=6)
        run_mean = np.zeros(6)
        run_var = np.ones(6)
        y, _ = nn._bn_forward(x, gamma, beta, run_mean, run_var, train_mode=True)
        np.testing.assert_allclose(y.mean(axis=(0, 2)), beta, atol=1e-6)
        np.testing.assert_allclose(y.var(axis=(0, 2)), gamma ** 2, rtol=1e-3)

    def test_backward_matches_finite_differences(self):
        rng = np.random.default_rng(6)
        x = rng.normal(size=(4, 3, 7))
        gamma = rng.uniform(0.5, 1.5, size=3)
        beta = rng.normal(size=3)
        dy = rng.normal(size=x.shape)

        def run(xv, gv, bv):
            y, _ = nn._bn_forward(xv, gv, bv, np.zeros(3), np.ones(3), train_mode=True)
            return float(np.sum(y * dy))

        y, cache = nn._bn_forward(x, gamma, beta, np.zeros(3), np.ones(3), train_mode=True)
        dx, dgamma, dbeta = nn._bn_backward(dy, gamma, cache)
        h = 1e-6
        for arr, grad, which in ((x, dx, "x"), (gamma, dgamma, "gamma"), (beta, dbeta, "beta")):
            it = np.ndindex(arr.shape)
            for idx in list(it)[::5]:
                plus = [x.copy(), gamma.copy(), beta.copy()]
                minus = [x.copy(), gamma.copy(), beta.copy()]
                slot = {"x": 0, "gamma": 1, "beta": 2}[which]
                plus[slot][idx] += h
                minus[slot][idx] -= h
                fd = (run(*plus) - run(*minus)) / (2 * h)
                assert fd_close(grad[idx], fd, rtol=1e-5, atol=1e-9)


class TestKernelGradients:
    def test_conv_backward_matches_finite_differences(self):
        rng = np.random.default_rng(7)
        x = rng.normal(size=(3, 4, 9))
        w = rng.normal(size=(5, 4, 3))
        b = rng.normal(size=5)
        dy = rng.normal(size=(3, 5, 9))
        dx, dw, db = kernels.conv1d_backward(x, w, dy)
        h = 1e-6

        def loss(xv, wv, bv):
            return float(np.sum(kernels.conv1d_forward(xv, wv, bv) * dy))

        for idx in [(0, 1, 2), (2, 3, 0), (1, 0, 8)]:
            xp = x.copy(); xp[idx] += h
            xm = x.copy(); xm[idx] -= h
            assert fd_close(dx[idx], (loss(xp, w, b) - loss(xm, w, b)) / (2 * h), rtol=1e-6)
        for idx in [(0, 0, 0), (4, 3, 2), (2, 1, 1)]:
            wp = w.copy(); wp[idx] += h
            wm = w.copy(); wm[idx] -= h
            assert fd_close(dw[idx], (loss(x, wp, b) - loss(x, wm, b)) / (2 * h), rtol=1e-6)
        bp = b.copy(); bp[2] += h
        bm = b.copy(); bm[2] -= h
        assert fd_close(db[2], (loss(x, w, bp) - loss(x, w, bm)) / (2 * h), rtol=1e-6)

    def test_pool_backward_routes_to_argmax(self):
        x = np.array([[[1.0, 3.0, 2.0, 2.0, 5.0]]])
        y, sw = kernels.maxpool2_forward(x)
        np.testing.assert_array_equal(y[0, 0], [3.0, 2.0])
        # tie in the second window resolves to the left element
        np.testing.assert_array_equal(sw[0, 0], [1, 0])
        dx = kernels.maxpool2_backward(np.array([[[10.0, 20.0]]]), sw, 5)
        np.testing.assert_array_equal(dx[0, 0], [0.0, 10.0, 20.0, 0.0, 0.0])

    def test_backends_agree(self):
        if kernels.active_backend() == "numpy":
            pytest.skip("numba backend unavailable")
        rng = np.random.default_rng(8)
        x = rng.normal(size=(4, 6, 12))
        w = rng.normal(size=(7, 6, 3))
        b = rng.normal(size=7)
        ynp = kernels.conv1d_forward_numpy(x, w, b)
        ynb = kernels.conv1d_forward_numba(x, w, b)
        np.testing.assert_allclose(ynb, ynp, rtol=1e-12, atol=1e-12)
        dy = rng.normal(size=ynp.shape)
        for gnp, gnb in zip(kernels.conv1d_backward_numpy(x, w, dy),
                            kernels.conv1d_backward_numba(x, w, dy)):
            np.testing.assert_allclose(gnb, gnp, rtol=1e-11, atol=1e-12)


class TestBackward:
    def setup_method(self):
        self.model = nn.init_model(16, 3, seed=10)
        rng = np.random.default_rng(10)
        self.batch = rng.normal(size=(4, 2, 16))
        self.pairs = losses.pairs_from_labels([0, 1, 2, 0], 3)
        self.lam = 0.8

    def test_requires_matching_forward(self):
        model = nn.init_model(16, 3, seed=11)
        with pytest.raises(RuntimeError):
            nn.backward(model, self.batch, np.zeros((4, 3)))
        nn.forward(model, self.batch, train_mode=True)
        other = np.random.default_rng(1).normal(size=(4, 2, 16))
        with pytest.raises(RuntimeError):
            nn.backward(model, other, np.zeros((4, 3)))

    def test_zero_upstream_gradient_gives_zero_grads(self):
        nn.forward(self.model, self.batch, train_mode=True)
        grads = nn.backward(self.model, self.batch, np.zeros((4, 3)))
        for name, g in grads.items():
            assert not g.any(), name

    def test_sampled_coordinates_match_finite_differences(self):
        model = self.model.copy()
        res = composite_loss(model, self.batch, self.pairs, self.lam)
        grad_feats = losses.feature_gradient(model._cache.features, res.grad)
        grads = nn.backward(model, self.batch, grad_feats)

        rng = np.random.default_rng(12)
        checked = 0
        for name, g in grads.items():
            flat = g.reshape(-1)
            take = min(6, flat.size)
            for pos in rng.choice(flat.size, size=take, replace=False):
                index = np.unravel_index(pos, g.shape)
                fd = fd_gradient_at(self.model, self.batch, self.pairs, self.lam, name, index)
                assert fd_close(g[index], fd), (name, index, g[index], fd)
                checked += 1
        assert checked > 100

    def test_duplicated_batch_doubles_gradients(self):
        batch2 = np.concatenate([self.batch, self.batch])
        pairs2 = losses.pairs_from_labels([0, 1, 2, 0, 0, 1, 2, 0], 3)

        model_a = self.model.copy()
        feats = nn.forward(model_a, self.batch, train_mode=True)
        res = losses.pairwise_loss(losses.similarity_matrix(feats), self.pairs, self.lam)
        ga = nn.backward(model_a, self.batch, losses.feature_gradient(feats, res.grad * res.num_selected))

        model_b = self.model.copy()
        feats2 = nn.forward(model_b, batch2, train_mode=True)
        res2 = losses.pairwise_loss(losses.similarity_matrix(feats2), pairs2, self.lam)
        gb = nn.backward(model_b, batch2, losses.feature_gradient(feats2, res2.grad * res2.num_selected))

        # sum-form loss over a duplicated batch counts each original pair four
        # times (two copies of each endpoint)
        for name in ga:
            np.testing.assert_allclose(gb[name], 4.0 * ga[name], rtol=1e-8, atol=1e-10)


class TestAdam:
    def test_zero_gradient_is_noop(self):
        model = nn.init_model(16, 3, seed=13)
        before = {n: v.copy() for n, v in model.params.items()}
        nn.adam_step(model, {n: np.zeros_like(v) for n, v in model.params.items()}, lr=0.1)
        for name in before:
            np.testing.assert_array_equal(model.params[name], before[name])
        assert model.step == 1

    def test_first_step_magnitude(self):
        model = nn.init_model(16, 3, seed=14)
        grads = {n: np.zeros_like(v) for n, v in model.params.items()}
        grads["dense2_b"][0] = 1.0
        before = model.params["dense2_b"][0]
        nn.adam_step(model, grads, lr=0.1)
        step = before - model.params["dense2_b"][0]
        assert abs(step - 0.1) < 1e-8

    def test_converges_on_quadratic_and_matches_textbook_oracle(self):
        # textbook Adam on f(theta) = theta^2
        theta_ref = 1.0
        m = v = 0.0
        lr, b1, b2, eps = 0.05, 0.9, 0.999, 1e-8
        trajectory = []
        for t in range(1, 201):
            g = 2.0 * theta_ref
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            theta_ref -= lr * (m / (1 - b1 ** t)) / (np.sqrt(v / (1 - b2 ** t)) + eps)
            trajectory.append(theta_ref)
        assert abs(theta_ref) < 0.05

        model = nn.init_model(16, 3, seed=15)
        model.params["dense2_b"][0] = 1.0
        for t in range(200):
            grads = {n: np.zeros_like(p) for n, p in model.params.items()}
            grads["dense2_b"][0] = 2.0 * model.params["dense2_b"][0]
            nn.adam_step(model, grads, lr=0.05)
        assert abs(model.params["dense2_b"][0] - trajectory[-1]) < 1e-12

    def test_rejects_nonfinite_gradients(self):
        model = nn.init_model(16, 3, seed=16)
        grads = {n: np.zeros_like(v) for n, v in model.params.items()}
        grads["conv1_w"][0, 0, 0] = np.inf
        with pytest.raises(ValueError):
            nn.adam_step(model, grads, lr=0.1)


class TestCheckpoint:
    def make_trained(self, seed=17):
        model = nn.init_model(16, 4, seed=seed)
        rng = np.random.default_rng(seed)
        x = rng.normal(size=(6, 2, 16))
        feats = nn.forward(model, x, train_mode=True)
        pairs = losses.pairs_from_labels([0, 1, 2, 3, 0, 1], 4)
        res = losses.pairwise_loss(losses.similarity_matrix(feats), pairs, 0.5)
        grads = nn.backward(model, x, losses.feature_gradient(feats, res.grad))
        nn.adam_step(model, grads, lr=1e-3)
        return model

    def test_round_trip_bit_exact(self, tmp_path):
        model = self.make_trained()
        path = tmp_path / "model.ckpt"
        nn.save_checkpoint(model, path)
        loaded = nn.load_checkpoint(path)
        x = np.random.default_rng(0).normal(size=(3, 2, 16))
        np.testing.assert_array_equal(nn.forward(model, x), nn.forward(loaded, x))
        assert loaded.step == model.step
        for name in model.adam_m:
            np.testing.assert_array_equal(loaded.adam_m[name], model.adam_m[name])
            np.testing.assert_array_equal(loaded.adam_v[name], model.adam_v[name])
        for name in model.stats:
            np.testing.assert_array_equal(loaded.stats[name], model.stats[name])

    def test_truncated_file(self, tmp_path):
        model = self.make_trained()
        path = tmp_path / "model.ckpt"
        nn.save_checkpoint(model, path)
        raw = path.read_bytes()
        path.write_bytes(raw[:len(raw) // 2])
        with pytest.raises(TruncatedFileError):
            nn.load_checkpoint(path)

    def test_class_count_mismatch(self, tmp_path):
        model = nn.init_model(16, 10, seed=18)
        path = tmp_path / "model.ckpt"
        nn.save_checkpoint(model, path)
        with pytest.raises(ShapeTableError):
            nn.load_checkpoint(path, expect_num_classes=4)

    def test_bad_magic_and_version(self, tmp_path):
        model = nn.init_model(16, 4, seed=19)
        path = tmp_path / "model.ckpt"
        nn.save_checkpoint(model, path)
        raw = bytearray(path.read_bytes())
        good = bytes(raw)
        raw[0] = 0x58
        path.write_bytes(bytes(raw))
        with pytest.raises(BadMagicError):
            nn.load_checkpoint(path)
        raw = bytearray(good)
        raw[8] = 7
        path.write_bytes(bytes(raw))
        with pytest.raises(VersionMismatchError):
            nn.load_checkpoint(path)

    def test_reinit_head_changes_class_count(self):
        model = nn.init_model(16, 4, seed=20)
        nn.reinit_head(model, 6, seed=1)
        assert model.num_classes == 6
        assert model.params["dense2_w"].shape == (6, 64)
        x = np.random.default_rng(2).normal(size=(2, 2, 16))
        assert nn.forward(model, x).shape == (2, 6)
