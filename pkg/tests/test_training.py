import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import random_loss_sequence, reference_adam, stop_oracle
from ugnn.checkpoint import load_checkpoint
from ugnn.data import SynthTreeParams, generate_synthetic_tree
from ugnn.gradcheck import gradcheck
from ugnn.network import NetworkSpec, valid_input_dims
from ugnn.tensor import Tensor
from ugnn.training import (
    AdamState,
    StopDecision,
    TrainConfig,
    TrainHistory,
    adam_step,
    default_learning_rate,
    dice_loss,
    network_from_checkpoint,
    should_stop,
    train,
)


class TestDiceLoss:
    def test_perfect(self):
        gt = np.zeros((6, 6, 6))
        gt[1:3, 1:4, 2:5] = 1
        n = gt.sum()
        loss = dice_loss(Tensor(gt.copy()), gt, np.ones_like(gt), eps=1.0)
        assert float(loss.data) == pytest.approx(1 - 2 * n / (2 * n + 1.0), abs=1e-15)

    def test_disjoint(self):
        p, g = np.zeros((4, 4, 4)), np.zeros((4, 4, 4))
        p[0], g[3] = 1.0, 1.0
        assert float(dice_loss(Tensor(p), g, np.ones_like(g)).data) == 1.0

    def test_empty_roi_guarded_by_eps(self):
        g = np.zeros((4, 4, 4))
        g[0] = 1
        roi = 1 - g
        assert float(dice_loss(Tensor(np.zeros_like(g)), g, roi).data) == 1.0

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 10_000), st.floats(1e-3, 10.0))
    def test_range_and_roi_invariance(self, seed, eps):
        rng = np.random.default_rng(seed)
        p = rng.random((5, 5, 5))
        g = (rng.random(p.shape) > 0.5).astype(float)
        roi = (rng.random(p.shape) > 0.4).astype(float)
        a = float(dice_loss(Tensor(p), g, roi, eps).data)
        assert 0.0 <= a <= 1.0
        q = np.where(roi == 1, p, rng.random(p.shape))
        assert float(dice_loss(Tensor(q), g, roi, eps).data) == a

    def test_gradient_6cubed(self):
        rng = np.random.default_rng(0)
        g = (rng.random((6, 6, 6)) > 0.5).astype(float)
        roi = (rng.random((6, 6, 6)) > 0.3).astype(float)
        p = Tensor(rng.uniform(0.05, 0.95, (6, 6, 6)))
        assert gradcheck(lambda x: dice_loss(x, g, roi, 1.0), [p], h=1e-5) < 1e-4

    def test_channel_axis_broadcast(self):
        g = np.ones((3, 3, 3))
        a = dice_loss(Tensor(np.full((1, 3, 3, 3), 0.5)), g, g)
        b = dice_loss(Tensor(np.full((3, 3, 3), 0.5)), g, g)
        assert float(a.data) == float(b.data)

    def test_errors(self):
        with pytest.raises(ValueError):
            dice_loss(Tensor(np.zeros((3, 3, 3))), np.zeros((3, 3, 4)), np.ones((3, 3, 4)))
        with pytest.raises(ValueError):
            dice_loss(Tensor(np.zeros((3, 3, 3))), np.full((3, 3, 3), 0.5), np.ones((3, 3, 3)))


class TestAdam:
    def test_zero_gradient_first_step(self):
        p = [np.array([1.0, -2.0])]
        new, st_ = adam_step(p, [np.zeros(2)], AdamState.zeros_like(p), lr=0.1)
        np.testing.assert_array_equal(new[0], p[0])
        assert st_.step == 1

    def test_first_step_sign(self):
        p = [np.array([0.5])]
        new, _ = adam_step(p, [np.array([3.7])], AdamState.zeros_like(p), lr=1e-3, eps=1e-14)
        assert new[0][0] == pytest.approx(0.5 - 1e-3, abs=1e-12)

    def test_quadratic_trajectory(self):
        a = np.array([1.0, 4.0, 0.5])
        grad = lambda th: 2 * a * (th - 1.0)  # noqa: E731
        theta0 = np.array([3.0, -1.0, 0.2])
        ref = reference_adam(theta0, grad, 10, lr=0.05)
        p, state = [theta0.copy()], AdamState.zeros_like([theta0])
        for k in range(10):
            p, state = adam_step(p, [grad(p[0])], state, lr=0.05)
            assert np.max(np.abs(p[0] - ref[k])) < 1e-10
        assert state.step == 10

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            adam_step([np.zeros(2)], [np.zeros(3)], AdamState.zeros_like([np.zeros(2)]), lr=0.1)


def _history(losses, window=50):
    h = TrainHistory(window=window)
    for v in losses:
        h.record(v, v)
    return h


def _first_stop(losses, cfg=TrainConfig()):
    h = TrainHistory(window=cfg.window)
    for t, v in enumerate(losses, start=1):
        h.record(v, v)
        d = should_stop(h, cfg)
        if d is not StopDecision.CONTINUE:
            return t, d.value
    return None, "continue"


class TestStopping:
    def test_geometric_decrease(self):
        assert _first_stop([0.95 ** t for t in range(300)]) == (None, "continue")

    def test_constant_plateau(self):
        assert _first_stop([0.4] * 70) == (70, "stop_plateau")
        assert _first_stop([0.4] * 69) == (None, "continue")

    def test_rise(self):
        losses = [1.0] * 60 + [1.3] * 40
        t, why = _first_stop(losses)
        assert why == "stop_rise" or why == "stop_plateau"
        assert (t, why) == stop_oracle(losses)
        # a steep decline then a jump: exactly the rise branch
        losses = [0.9 ** k for k in range(100)] + [3.0] * 30
        assert _first_stop(losses) == stop_oracle(losses) == (101, "stop_rise")

    def test_moving_average_definition(self):
        rng = np.random.default_rng(0)
        vals = rng.random(80).tolist()
        h = _history(vals)
        for t in range(1, 81):
            assert h.moving_avg[t - 1] == pytest.approx(np.mean(vals[max(0, t - 50):t]), abs=1e-15)

    def test_random_sequences_match_oracle(self):
        rng = np.random.default_rng(1)
        outcomes = set()
        for _ in range(300):
            seq = random_loss_sequence(rng)
            got = _first_stop(seq)
            assert got == stop_oracle(seq)
            outcomes.add(got[1])
        assert outcomes == {"continue", "stop_rise", "stop_plateau"}


def test_default_learning_rates():
    assert default_learning_rate("UGnnReg") == default_learning_rate("UGnnDyn") == 1e-4
    assert default_learning_rate("UNetLev3") == default_learning_rate("UNetLev5") == 5e-5
    assert TrainConfig().lr_for("UNetLev3") == 5e-5
    with pytest.raises(ValueError):
        TrainConfig(learning_rate=-1.0)
    with pytest.raises(ValueError):
        TrainConfig.from_dict({"nope": 1})


@pytest.fixture(scope="module")
def small_data():
    vols = [generate_synthetic_tree(SynthTreeParams(dims=(32, 32, 32), generations=3, seed=s)) for s in range(3)]
    n = valid_input_dims("UGnnReg", 32)
    spec = NetworkSpec("UGnnReg", input_dims=(n, n, n), first_level_features=4)
    return spec, vols[:2], vols[2:]


class TestTrainLoop:
    def test_zero_epochs(self, tmp_path, small_data):
        spec, tr, va = small_data
        res = train(spec, tr, va, TrainConfig(max_epochs=0, dtype="float64"), out_dir=tmp_path)
        assert len(res.history) == 0 and res.stop is StopDecision.CONTINUE
        ck = load_checkpoint(tmp_path / "final.ckpt")
        from ugnn.network import build_network
        init = build_network(spec, 0)
        for k, p in init.params.items():
            np.testing.assert_array_equal(ck.params[k], p.data)

    def test_deterministic_and_resumable(self, tmp_path, small_data):
        spec, tr, va = small_data
        cfg = TrainConfig(max_epochs=4, learning_rate=3e-4, dtype="float64", seed=2)
        a = train(spec, tr, va, cfg, out_dir=tmp_path / "a")
        b = train(spec, tr, va, cfg, out_dir=tmp_path / "b")
        assert a.history.to_dict() == b.history.to_dict()
        for name in ("best.ckpt", "final.ckpt", "history.csv"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

        half = TrainConfig(max_epochs=2, learning_rate=3e-4, dtype="float64", seed=2)
        train(spec, tr, va, half, out_dir=tmp_path / "c")
        resumed = train(spec, tr, va, cfg, out_dir=tmp_path / "c", resume=load_checkpoint(tmp_path / "c" / "final.ckpt"))
        assert resumed.history.to_dict() == a.history.to_dict()
        assert (tmp_path / "c" / "final.ckpt").read_bytes() == (tmp_path / "a" / "final.ckpt").read_bytes()
        final = load_checkpoint(tmp_path / "a" / "final.ckpt")
        assert final.adam_step == 4 * len(tr)

        best = load_checkpoint(tmp_path / "a" / "best.ckpt")
        assert best.epoch == a.history.best_epoch
        assert best.valid_loss == min(a.history.valid_loss)
        net = network_from_checkpoint(best)
        for k, p in net.params.items():
            np.testing.assert_array_equal(p.data, a.network.params[k].data)

    def test_empty_sets(self, small_data):
        spec, tr, va = small_data
        with pytest.raises(ValueError):
            train(spec, [], va, TrainConfig(max_epochs=1))

    def test_augmented_epochs_differ_but_repeat(self, small_data):
        spec, tr, va = small_data
        cfg = TrainConfig(max_epochs=2, learning_rate=3e-4, augment=True, dtype="float64", seed=4)
        a, b = train(spec, tr, va, cfg), train(spec, tr, va, cfg)
        assert a.history.to_dict() == b.history.to_dict()
