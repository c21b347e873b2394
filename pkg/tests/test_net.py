import numpy as np
import pytest

from noisedistill.codec import SparseTargets, softmax_t, sparse_from_logits
from noisedistill.net import (
    DivergedTrainingError,
    Layer,
    NetParams,
    TrainConfig,
    _loss_and_grads,
    flatten_params,
    forward,
    hard_ce_loss,
    init_params,
    load_model,
    save_model,
    soft_ce_loss,
    train,
    unflatten_params,
    window_features,
)

from oracles import relative_error


def targets_from(matrix, k):
    return SparseTargets.from_frames([sparse_from_logits(row, k) for row in matrix])


def flatten_grads(grads):
    chunks = []
    for g in grads:
        chunks.append(g["weight"].ravel())
        chunks.append(g["bias"].ravel())
        if g["recurrent"] is not None:
            chunks.append(g["recurrent"].ravel())
    return np.concatenate(chunks)


def fd_check(params, feats, target, cfg, eps=1e-5):
    loss0, grads = _loss_and_grads(params, feats, target, cfg)
    analytic = flatten_grads(grads)
    vec = flatten_params(params)
    fd = np.zeros_like(vec)
    for i in range(vec.shape[0]):
        vp, vm = vec.copy(), vec.copy()
        vp[i] += eps
        vm[i] -= eps
        lp, _ = _loss_and_grads(unflatten_params(params, vp), feats, target, cfg)
        lm, _ = _loss_and_grads(unflatten_params(params, vm), feats, target, cfg)
        fd[i] = (lp - lm) / (2 * eps)
    return relative_error(analytic, fd), loss0


class TestForward:
    def test_zero_parameters_give_zero_logits(self):
        net = NetParams([Layer(np.zeros((5, 8)), np.zeros(5), "identity")])
        logits = forward(net, np.ones((6, 8)))
        assert np.all(logits == 0.0)
        np.testing.assert_allclose(softmax_t(logits[0], 1.0), np.full(5, 0.2), atol=1e-15)

    def test_identity_layer_passes_input_through(self):
        net = NetParams([Layer(np.eye(4), np.zeros(4), "identity")])
        x = np.arange(12.0).reshape(3, 4)
        np.testing.assert_array_equal(forward(net, x), x)

    def test_context_window_edge_replication(self):
        x = np.array([[1.0], [2.0], [3.0]])
        win = window_features(x, 1)
        np.testing.assert_array_equal(win, [[1, 1, 2], [1, 2, 3], [2, 3, 3]])

    def test_recurrent_matches_scalar_reference(self):
        rng = np.random.default_rng(0)
        net = init_params(3, [4, 4], 2, recurrent=True, seed=1)
        x = rng.standard_normal((7, 3))
        got = forward(net, x)

        # Step-by-step scalar re-implementation.
        h_in = x
        for layer in net.layers:
            n_out = layer.out_dim
            h_out = np.zeros((x.shape[0], n_out))
            state = np.zeros(n_out)
            for t in range(x.shape[0]):
                pre = np.zeros(n_out)
                for i in range(n_out):
                    pre[i] = layer.bias[i] + float(layer.weight[i] @ h_in[t])
                    if layer.recurrent is not None:
                        pre[i] += float(layer.recurrent[i] @ state)
                state = np.tanh(pre) if layer.activation == "tanh" else pre
                h_out[t] = state
            h_in = h_out
        np.testing.assert_allclose(got, h_in, atol=1e-12)

    def test_empty_input(self):
        net = init_params(4, [3], 2, seed=0)
        assert forward(net, np.zeros((0, 4))).shape == (0, 2)

    def test_dim_mismatch_rejected(self):
        net = init_params(4, [3], 2, seed=0)
        with pytest.raises(ValueError, match="input dim"):
            forward(net, np.zeros((5, 7)))


class TestHardLoss:
    def test_uniform_logits_loss_is_log_n(self):
        logits = np.zeros((6, 4))
        loss, _ = hard_ce_loss(logits, np.zeros(6, dtype=int))
        assert loss == pytest.approx(np.log(4.0), abs=1e-12)

    def test_confident_correct_logits_approach_zero(self):
        logits = np.full((5, 3), -40.0)
        labels = np.array([0, 1, 2, 1, 0])
        logits[np.arange(5), labels] = 40.0
        loss, _ = hard_ce_loss(logits, labels)
        assert loss < 1e-12

    def test_label_delay_shifts_pairing(self):
        # With delay d, logits[d + i] scores labels[i].
        logits = np.full((4, 2), -30.0)
        labels = np.array([1, 0, 0, 0])
        logits[3, 1] = 30.0  # matches labels[0] under delay 3
        loss, _ = hard_ce_loss(logits, labels, label_delay=3)
        assert loss < 1e-12

    def test_out_of_range_label(self):
        with pytest.raises(ValueError, match="label"):
            hard_ce_loss(np.zeros((3, 2)), np.array([0, 2, 0]))

    def test_too_few_frames_for_delay(self):
        with pytest.raises(ValueError, match="label_delay"):
            hard_ce_loss(np.zeros((3, 2)), np.zeros(3, dtype=int), label_delay=3)

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(2)
        net = init_params(5, [4], 3, context=1, label_delay=1, seed=3)
        feats = rng.standard_normal((6, 5))
        labels = rng.integers(0, 3, 6)
        cfg = TrainConfig(learning_rate=0.1, epochs=1, loss="hard")
        err, _ = fd_check(net, feats, labels, cfg)
        assert err < 1e-4


class TestSoftLoss:
    def test_matching_student_loss_equals_teacher_entropy(self):
        rng = np.random.default_rng(3)
        teacher_logits = rng.standard_normal((5, 6))
        targets = targets_from(teacher_logits, 3)
        t = 2.0
        # Student that reproduces the sparse teacher distribution exactly:
        # the preserved logits verbatim, massive negatives elsewhere (their
        # mass underflows to zero at this temperature).
        student = np.full((5, 6), -1e5)
        entropies = []
        for i in range(5):
            frame = targets[i]
            z = frame.logits.astype(np.float64)
            student[i, frame.indices] = z
            q = np.exp((z - z.max()) / t)
            q /= q.sum()
            entropies.append(-(q * np.log(q)).sum())
        loss, _ = soft_ce_loss(student, targets, t)
        assert loss == pytest.approx(np.mean(entropies), abs=1e-9)

    def test_k1_target_equals_hard_loss_at_t1(self):
        rng = np.random.default_rng(4)
        logits = rng.standard_normal((7, 5))
        teacher = rng.standard_normal((7, 5))
        targets = targets_from(teacher, 1)
        labels = np.argmax(teacher, axis=1)
        soft, dsoft = soft_ce_loss(logits, targets, 1.0)
        hard, dhard = hard_ce_loss(logits, labels)
        assert soft == pytest.approx(hard, abs=1e-12)
        np.testing.assert_allclose(dsoft, dhard, atol=1e-12)

    def test_k1_target_at_temperature(self):
        rng = np.random.default_rng(5)
        logits = rng.standard_normal((4, 6))
        teacher = rng.standard_normal((4, 6))
        targets = targets_from(teacher, 1)
        labels = np.argmax(teacher, axis=1)
        t = 2.5
        loss, _ = soft_ce_loss(logits, targets, t)
        manual = np.mean([-np.log(softmax_t(logits[i], t)[labels[i]]) for i in range(4)])
        assert loss == pytest.approx(manual, abs=1e-12)

    def test_decomposes_into_entropy_plus_kl(self):
        rng = np.random.default_rng(6)
        student = rng.standard_normal((6, 8))
        targets = targets_from(rng.standard_normal((6, 8)), 4)
        t = 2.0
        loss, _ = soft_ce_loss(student, targets, t)
        h_total = 0.0
        kl_total = 0.0
        for i in range(6):
            frame = targets[i]
            z = frame.logits.astype(np.float64)
            q = np.exp((z - z.max()) / t)
            q /= q.sum()
            p = softmax_t(student[i], t)[frame.indices]
            h_total += -(q * np.log(q)).sum()
            kl_total += (q * np.log(q / p)).sum()
        assert loss == pytest.approx((h_total + kl_total) / 6, abs=1e-9)
        assert kl_total >= 0.0

    def test_loss_exceeds_entropy_with_off_support_mass(self):
        rng = np.random.default_rng(7)
        student = rng.standard_normal((5, 9))
        targets = targets_from(rng.standard_normal((5, 9)), 3)
        t = 1.0
        loss, _ = soft_ce_loss(student, targets, t)
        h = 0.0
        for i in range(5):
            z = targets[i].logits.astype(np.float64)
            q = np.exp((z - z.max()) / t)
            q /= q.sum()
            h += -(q * np.log(q)).sum()
        off_mass = min(
            1.0 - softmax_t(student[i], t)[targets[i].indices].sum() for i in range(5)
        )
        assert off_mass > 1e-12
        assert loss > h / 5

    def test_frame_count_mismatch(self):
        targets = targets_from(np.zeros((3, 4)), 2)
        with pytest.raises(ValueError, match="frames"):
            soft_ce_loss(np.zeros((4, 4)), targets, 1.0)

    @pytest.mark.parametrize("temperature", [0.5, 2.0])
    def test_gradient_matches_finite_differences(self, temperature):
        rng = np.random.default_rng(8)
        net = init_params(4, [5], 6, context=0, seed=9)
        feats = rng.standard_normal((5, 4))
        targets = targets_from(rng.standard_normal((5, 6)), 3)
        cfg = TrainConfig(learning_rate=0.1, epochs=1, loss="soft", temperature=temperature)
        err, _ = fd_check(net, feats, targets, cfg)
        assert err < 1e-4


class TestGradientsThroughRecurrence:
    def test_recurrent_hard_loss_gradient(self):
        rng = np.random.default_rng(10)
        net = init_params(3, [4], 3, recurrent=True, label_delay=1, seed=11)
        feats = rng.standard_normal((6, 3))
        labels = rng.integers(0, 3, 6)
        cfg = TrainConfig(learning_rate=0.1, epochs=1, loss="hard")
        err, _ = fd_check(net, feats, labels, cfg)
        assert err < 1e-4

    def test_recurrent_soft_loss_gradient(self):
        rng = np.random.default_rng(12)
        net = init_params(3, [4, 3], 5, recurrent=True, seed=13)
        feats = rng.standard_normal((5, 3))
        targets = targets_from(rng.standard_normal((5, 5)), 2)
        cfg = TrainConfig(learning_rate=0.1, epochs=1, loss="soft", temperature=2.0)
        err, _ = fd_check(net, feats, targets, cfg)
        assert err < 1e-4


class TestTrain:
    def _toy_dataset(self, rng, n_utts=3, n_frames=12, dim=4, n_classes=3):
        data = []
        for _ in range(n_utts):
            labels = rng.integers(0, n_classes, n_frames)
            feats = rng.standard_normal((n_frames, dim)) * 0.1
            feats[np.arange(n_frames), labels % dim] += 2.0
            data.append((feats, labels))
        return data

    def test_zero_learning_rate_is_noop(self):
        rng = np.random.default_rng(14)
        net = init_params(4, [5], 3, seed=15)
        data = self._toy_dataset(rng)
        before = flatten_params(net)
        after, _ = train(net, data, TrainConfig(learning_rate=0.0, epochs=3, loss="hard"))
        np.testing.assert_array_equal(flatten_params(after), before)

    def test_loss_decreases_on_fixture(self):
        rng = np.random.default_rng(16)
        net = init_params(4, [8], 3, seed=17)
        data = self._toy_dataset(rng, n_utts=1)
        _, trace = train(net, data, TrainConfig(learning_rate=0.3, epochs=5, momentum=0.0, loss="hard", seed=5))
        assert all(a > b for a, b in zip(trace, trace[1:]))

    def test_training_is_deterministic(self):
        rng = np.random.default_rng(18)
        net = init_params(4, [6], 3, seed=19)
        data = self._toy_dataset(rng)
        cfg = TrainConfig(learning_rate=0.2, epochs=3, loss="hard", seed=7)
        a, _ = train(net, data, cfg)
        b, _ = train(net, data, cfg)
        assert np.array_equal(flatten_params(a), flatten_params(b))
        assert not np.array_equal(flatten_params(a), flatten_params(net))

    def test_divergence_raises(self):
        rng = np.random.default_rng(20)
        net = init_params(4, [6], 3, seed=21)
        data = self._toy_dataset(rng)
        with np.errstate(all="ignore"), pytest.raises(DivergedTrainingError):
            train(net, data, TrainConfig(learning_rate=1e308, epochs=50, loss="hard"))


class TestModelFile:
    def test_roundtrip_bit_exact(self, tmp_path):
        net = init_params(6, [5, 4], 3, context=2, recurrent=False, label_delay=3, seed=22)
        path = tmp_path / "model.dnet"
        manifest = {"seed": 1, "data_hash": "abc"}
        save_model(path, net, manifest)
        back, got_manifest = load_model(path)
        assert got_manifest == manifest
        assert back.context == 2 and back.label_delay == 3
        assert np.array_equal(flatten_params(back), flatten_params(net))
        assert [l.activation for l in back.layers] == ["tanh", "tanh", "identity"]

    def test_input_affine_roundtrip(self, tmp_path):
        rng = np.random.default_rng(30)
        net = init_params(6, [5], 3, context=1, seed=31,
                          input_shift=rng.standard_normal(6),
                          input_scale=rng.uniform(0.5, 2.0, 6))
        path = tmp_path / "a.dnet"
        save_model(path, net)
        back, _ = load_model(path)
        np.testing.assert_array_equal(back.input_shift, net.input_shift)
        np.testing.assert_array_equal(back.input_scale, net.input_scale)
        feats = rng.standard_normal((7, 6))
        np.testing.assert_array_equal(forward(back, feats), forward(net, feats))
        # The affine actually standardizes: shifting inputs by the shift
        # vector must reproduce the zero-shift logits.
        plain = init_params(6, [5], 3, context=1, seed=31)
        np.testing.assert_allclose(
            forward(net, feats * net.input_scale + net.input_shift),
            forward(plain, feats), atol=1e-12)

    def test_recurrent_roundtrip(self, tmp_path):
        net = init_params(6, [5], 3, recurrent=True, seed=23)
        path = tmp_path / "r.dnet"
        save_model(path, net)
        back, manifest = load_model(path)
        assert manifest is None
        assert back.layers[0].recurrent is not None
        assert np.array_equal(flatten_params(back), flatten_params(net))

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "x.dnet"
        path.write_bytes(b"XNET" + bytes(16))
        with pytest.raises(ValueError, match="magic"):
            load_model(path)

    def test_save_is_deterministic(self, tmp_path):
        net = init_params(4, [3], 2, seed=24)
        save_model(tmp_path / "a.dnet", net, {"k": 1})
        save_model(tmp_path / "b.dnet", net, {"k": 1})
        assert (tmp_path / "a.dnet").read_bytes() == (tmp_path / "b.dnet").read_bytes()
        assert (tmp_path / "a.dnet.json").read_bytes() == (tmp_path / "b.dnet.json").read_bytes()
