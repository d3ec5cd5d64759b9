import math

import numpy as np
import pytest

from cbfocal.data import SynthSpec, generate_synthetic
from cbfocal.losses import FocalConfig, LossKind, loss_gradient, loss_value
from cbfocal.nn import (MiniNet, NetConfig, Stage, StagePlan, StaleCacheError,
                        available_backends, class_activation_map, get_backend, load_checkpoint,
                        make_optimizer, run_plan, set_backend, train_stage)
from cbfocal.nn import _kernels, optim
from cbfocal.nn.cam import heatmap_peak
from cbfocal.nn.checkpoint import Checkpoint, CheckpointError, dumps, loads, save_checkpoint
from cbfocal.weights import WeightTable


@pytest.fixture
def backend():
    """Restore the active backend after a test switches it."""
    before = get_backend()
    yield
    set_backend(before)


def tiny_config(dtype="float64", activation="swish", classes=3):
    return NetConfig(in_channels=1, num_classes=classes, channels=(2, 3), strides=(1, 2),
                     activation=activation, dtype=dtype)


# ---------------------------------------------------------------- kernels


@pytest.mark.skipif("numba" not in available_backends(), reason="numba unavailable")
@pytest.mark.parametrize("stride", [1, 2])
@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_backends_agree(stride, dtype):
    rng = np.random.default_rng(stride)
    x = rng.standard_normal((3, 9, 8, 4)).astype(dtype)
    w = rng.standard_normal((3, 3, 4, 5)).astype(dtype)
    b = rng.standard_normal(5).astype(dtype)
    outs = {}
    for name in ("numpy", "numba"):
        fwd, bwd = _kernels._BACKENDS[name]
        y, saved = fwd(x, w, b, stride)
        dy = np.cos(np.arange(y.size)).reshape(y.shape).astype(dtype)
        outs[name] = (y, *bwd(dy, saved, w, x.shape, stride))
    tol = 1e-5 if dtype == np.float32 else 1e-12
    for a, c in zip(outs["numpy"], outs["numba"]):
        np.testing.assert_allclose(a, c, rtol=tol, atol=tol)


def test_convolution_against_direct_sum():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((2, 5, 6, 2))
    w = rng.standard_normal((3, 3, 2, 3))
    b = rng.standard_normal(3)
    y, _ = _kernels.conv_forward(x, w, b, 2)
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)), mode="edge")
    ref = np.zeros((2, 3, 3, 3))
    for i in range(3):
        for j in range(3):
            ref[:, i, j] = np.einsum("nhwc,hwco->no", xp[:, 2 * i:2 * i + 3, 2 * j:2 * j + 3], w) + b
    np.testing.assert_allclose(y, ref, rtol=1e-12)


def test_backend_switch(backend):
    for name in available_backends():
        set_backend(name)
        assert get_backend() == name
    with pytest.raises(ValueError):
        set_backend("cuda")


# ---------------------------------------------------------------- forward / backward


class TestForward:
    def test_zero_weights_give_half(self):
        net = MiniNet.zeros(NetConfig(num_classes=4))
        p, _ = net.forward(np.random.default_rng(0).standard_normal((2, 12, 12, 1)))
        np.testing.assert_array_equal(p, 0.5)

    def test_any_resolution(self):
        net = MiniNet.init(NetConfig(num_classes=14), seed=1)
        n = net.num_parameters
        for size in (4, 14, 28, 33):
            p, _ = net.forward(np.zeros((2, size, size, 1), np.float32))
            assert p.shape == (2, 14) and ((p > 0) & (p < 1)).all()
        assert net.num_parameters == n

    def test_undersized_input(self):
        net = MiniNet.init(NetConfig(), seed=0)
        with pytest.raises(ValueError, match="minimum size 4x4"):
            net.forward(np.zeros((1, 3, 3, 1)))

    def test_bit_identical_reruns(self):
        x = np.random.default_rng(2).standard_normal((4, 16, 16, 1)).astype(np.float32)
        a = MiniNet.init(NetConfig(num_classes=6), seed=3).forward(x)[0]
        b = MiniNet.init(NetConfig(num_classes=6), seed=3).forward(x)[0]
        assert a.tobytes() == b.tobytes()

    def test_predict_matches_forward(self):
        net = MiniNet.init(NetConfig(num_classes=6), seed=3)
        x = np.random.default_rng(2).standard_normal((7, 8, 8, 1)).astype(np.float32)
        # BLAS blocking depends on the batch, so only float32 rounding may differ
        np.testing.assert_allclose(net.predict(x, batch_size=3), net.forward(x)[0], rtol=1e-6)


def finite_difference_check(net, x, y, w, cfg, kind, h):
    probs, cache = net.forward(x)
    grads = net.backward(cache, loss_gradient(probs, y, w, cfg, kind))
    worst = 0.0
    for name, param in net.params.items():
        fd = np.zeros_like(param, dtype=np.float64)
        for idx in np.ndindex(param.shape):
            saved = param[idx]
            param[idx] = saved + h
            up = loss_value(net.forward(x)[0], y, w, cfg, kind)
            param[idx] = saved - h
            dn = loss_value(net.forward(x)[0], y, w, cfg, kind)
            param[idx] = saved
            fd[idx] = (up - dn) / (2 * h)
        err = np.linalg.norm(grads[name] - fd) / max(np.linalg.norm(fd), 1e-12)
        worst = max(worst, err)
    return worst


class TestBackward:
    @pytest.mark.parametrize("activation", ["swish", "relu", "relu6"])
    def test_double_precision(self, activation):
        rng = np.random.default_rng(11)
        net = MiniNet.init(tiny_config(activation=activation), seed=4)
        x = rng.standard_normal((2, 8, 8, 1))
        y = np.array([[1, 0, 1], [0, 0, 1]])
        w = WeightTable.from_omegas([2.0, 0.5, 1.0], [0.3, 1.0, 0.0])
        err = finite_difference_check(net, x, y, w, FocalConfig(gamma=2.0), LossKind.FOCAL, 1e-6)
        assert err < 1e-6

    def test_single_precision(self):
        rng = np.random.default_rng(12)
        net = MiniNet.init(tiny_config(dtype="float32"), seed=5)
        x = rng.standard_normal((2, 8, 8, 1)).astype(np.float32)
        y = np.array([[1, 0, 1], [0, 1, 0]])
        w = WeightTable.uniform(3)
        # the loss is evaluated in double from float32 outputs; h balances truncation and rounding
        err = finite_difference_check(net, x, y, w, FocalConfig(), LossKind.BCE, 1e-2)
        assert err < 1e-3

    def test_zero_and_linear(self):
        net = MiniNet.init(tiny_config(), seed=6)
        x = np.random.default_rng(0).standard_normal((3, 8, 8, 1))
        probs, cache = net.forward(x)
        zero = net.backward(cache, np.zeros_like(probs))
        assert all(not g.any() for g in zero.values())
        g = np.random.default_rng(1).standard_normal(probs.shape)
        one, two = net.backward(cache, g), net.backward(cache, 2 * g)
        for k in one:
            np.testing.assert_allclose(two[k], 2 * one[k], rtol=1e-13, atol=1e-300)

    def test_stale_cache(self):
        net = MiniNet.init(tiny_config(), seed=6)
        probs, cache = net.forward(np.zeros((1, 8, 8, 1)))
        net.set_params(net.params)
        with pytest.raises(StaleCacheError):
            net.backward(cache, np.zeros_like(probs))

    def test_gradient_shape_mismatch(self):
        net = MiniNet.init(tiny_config(), seed=6)
        probs, cache = net.forward(np.zeros((1, 8, 8, 1)))
        with pytest.raises(ValueError):
            net.backward(cache, np.zeros((2, 3)))


# ---------------------------------------------------------------- optimizers


def bowl_params():
    rng = np.random.default_rng(0)
    return {"x": rng.standard_normal(10), "y": rng.standard_normal((2, 3))}, \
           {"x": rng.standard_normal(10), "y": rng.standard_normal((2, 3))}


def bowl_loss(params, centre):
    return 0.5 * sum(float(np.sum((params[k] - centre[k]) ** 2)) for k in params)


def bowl_grad(params, centre):
    return {k: params[k] - centre[k] for k in params}


# Steps Ranger (lr 0.05, default betas, k=5, alpha=0.5) needs on the seeded bowl
# to bring the loss below 1e-6; recorded from the first correct run.
RANGER_BOWL_BUDGET = 678


class TestOptimizers:
    @pytest.mark.parametrize("kind", list(optim.OptimizerKind))
    def test_zero_gradient_is_a_fixed_point(self, kind):
        params, _ = bowl_params()
        state = make_optimizer(kind, params, lr=0.1)
        cur = params
        for _ in range(12):
            cur = optim.step(state, cur, {k: np.zeros_like(v) for k, v in cur.items()})
        for k in params:
            np.testing.assert_array_equal(cur[k], params[k])

    def test_degenerate_lookahead_is_radam(self):
        params, centre = bowl_params()
        ranger = make_optimizer("ranger", params, lr=0.05, lookahead_k=1, lookahead_alpha=1.0)
        radam = make_optimizer("radam", params, lr=0.05)
        a = b = params
        for _ in range(40):
            a = optim.step(ranger, a, bowl_grad(a, centre))
            b = optim.step(radam, b, bowl_grad(b, centre))
            for k in a:
                np.testing.assert_array_equal(a[k], b[k])

    def test_lookahead_sync_interpolates(self):
        params, centre = bowl_params()
        state = make_optimizer("ranger", params, lr=0.05, lookahead_k=3, lookahead_alpha=0.5)
        inner = make_optimizer("radam", params, lr=0.05)
        a = b = params
        for _ in range(3):
            a = optim.step(state, a, bowl_grad(a, centre))
            b = optim.step(inner, b, bowl_grad(b, centre))
        for k in a:
            np.testing.assert_allclose(a[k], params[k] + 0.5 * (b[k] - params[k]), rtol=1e-14)
            np.testing.assert_array_equal(state.slow[k], a[k])

    def test_radam_warm_up_is_momentum_sgd(self):
        params, centre = bowl_params()
        state = make_optimizer("radam", params, lr=0.01)
        g = bowl_grad(params, centre)
        out = optim.radam_step(state, params, g)
        for k in params:
            np.testing.assert_allclose(out[k], params[k] - 0.01 * g[k], rtol=1e-14)
        assert optim.radam_rectifier(1, 0.999) is None
        first = next(t for t in range(1, 50) if optim.sma_length(t, 0.999) > 5)
        assert first == 6 and optim.radam_rectifier(first, 0.999) > 0

    def test_adam_first_step_is_sign_like(self):
        params, centre = bowl_params()
        state = make_optimizer("adam", params, lr=0.01)
        g = bowl_grad(params, centre)
        out = optim.adam_step(state, params, g)
        for k in params:
            np.testing.assert_allclose(out[k], params[k] - 0.01 * np.sign(g[k]), rtol=1e-6)

    def test_ranger_bowl_budget(self):
        params, centre = bowl_params()
        state = make_optimizer("ranger", params, lr=0.05)
        cur = params
        steps = 0
        while bowl_loss(cur, centre) >= 1e-6 and steps < 10 * RANGER_BOWL_BUDGET:
            cur = optim.step(state, cur, bowl_grad(cur, centre))
            steps += 1
        assert steps == RANGER_BOWL_BUDGET

    def test_monotone_after_warm_up(self):
        params, centre = bowl_params()
        state = make_optimizer("radam", params, lr=1e-3)
        cur = params
        losses = []
        for _ in range(200):
            cur = optim.step(state, cur, bowl_grad(cur, centre))
            losses.append(bowl_loss(cur, centre))
        assert all(b < a for a, b in zip(losses[10:], losses[11:]))

    def test_shape_mismatch(self):
        params, _ = bowl_params()
        state = make_optimizer("adam", params)
        with pytest.raises(ValueError, match="shape"):
            optim.step(state, params, {"x": np.zeros(3), "y": np.zeros((2, 3))})
        with pytest.raises(ValueError, match="names"):
            optim.step(state, params, {"x": np.zeros(10)})


# ---------------------------------------------------------------- checkpoints and training


def small_dataset(n=64, size=16, seed=0):
    ds = generate_synthetic(SynthSpec(n_samples=n, image_size=size, prevalences=(0.2, 0.3, 0.5),
                                      pattern_names=("a", "b", "c"), seed=seed))
    return ds.images, ds.labels


class TestCheckpoint:
    def test_byte_round_trip(self, tmp_path):
        net = MiniNet.init(NetConfig(num_classes=3), seed=1)
        state = make_optimizer("ranger", net.params, lr=0.01)
        x, y = small_dataset(8)
        probs, cache = net.forward(x)
        net.set_params(optim.step(state, net.params,
                                  net.backward(cache, loss_gradient(probs, y, WeightTable.uniform(3)))))
        ckpt = Checkpoint(net, state, 2, 7, 42, 16, {"val_macro_auroc": 0.5})
        path = save_checkpoint(tmp_path / "a.ckpt", ckpt)
        back = load_checkpoint(path)
        assert dumps(back) == path.read_bytes() == dumps(ckpt)
        assert (back.stage, back.epoch, back.seed, back.input_size) == (2, 7, 42, 16)
        assert back.optimizer.step == 1 and back.optimizer.kind is optim.OptimizerKind.RANGER
        for k in net.params:
            np.testing.assert_array_equal(back.net.params[k], net.params[k])
            np.testing.assert_array_equal(back.optimizer.slow[k], state.slow[k])

    def test_missing_and_foreign(self, tmp_path):
        with pytest.raises(CheckpointError, match="not found"):
            load_checkpoint(tmp_path / "nope.ckpt")
        from cbfocal import tensorfile
        with pytest.raises(CheckpointError):
            loads(tensorfile.dumps({"a": np.zeros(2)}, {"format": "other"}))


class TestTraining:
    def test_one_epoch_stage(self, tmp_path):
        x, y = small_dataset(32)
        net = MiniNet.init(NetConfig(num_classes=3), seed=0)
        res = train_stage(net, Stage(16, 8, 1), 1, (x, y), (x, y), WeightTable.uniform(3),
                          checkpoint_path=tmp_path / "s.ckpt")
        assert len(res.log_rows) == 1 and res.best_epoch == 1
        data = (tmp_path / "s.ckpt").read_bytes()
        assert dumps(load_checkpoint(tmp_path / "s.ckpt")) == data

    def test_two_stage_hand_off(self, tmp_path):
        x, y = small_dataset(48, size=28)
        plan = StagePlan((Stage(14, 16, 2), Stage(28, 8, 1, init="best_checkpoint")))
        net = MiniNet.init(NetConfig(num_classes=3), seed=0)
        res = run_plan(net, plan, (x, y), (x, y), WeightTable.uniform(3), out_dir=tmp_path)
        assert [r.stage for r in res] == [1, 2]
        first = res[1].log_rows[0]["val_macro_auroc"]
        assert math.isfinite(first) and 0.0 <= first <= 1.0
        assert load_checkpoint(tmp_path / "stage2_best.ckpt").input_size == 28

    def test_stage_two_starts_from_stage_one_best(self, tmp_path, monkeypatch):
        x, y = small_dataset(48, size=28)
        plan = StagePlan((Stage(14, 16, 2), Stage(28, 8, 1, init="best_checkpoint")))
        seen = {}
        original = train_stage.__globals__["train_stage"]

        def spy(net, stage, index, *a, **kw):
            seen[index] = {k: v.copy() for k, v in net.params.items()}
            return original(net, stage, index, *a, **kw)

        monkeypatch.setitem(run_plan.__globals__, "train_stage", spy)
        run_plan(MiniNet.init(NetConfig(num_classes=3), seed=0), plan, (x, y), (x, y),
                 WeightTable.uniform(3), out_dir=tmp_path)
        best = load_checkpoint(tmp_path / "stage1_best.ckpt").net.params
        for k in best:
            np.testing.assert_array_equal(seen[2][k], best[k])

    def test_reproducible(self, tmp_path):
        x, y = small_dataset(32)
        rows = []
        for run in ("a", "b"):
            net = MiniNet.init(NetConfig(num_classes=3), seed=5)
            res = train_stage(net, Stage(16, 8, 2), 1, (x, y), (x, y), WeightTable.uniform(3),
                              seed=9, checkpoint_path=tmp_path / f"{run}.ckpt")
            rows.append([(r["train_loss"], r["val_macro_auroc"]) for r in res.log_rows])
        assert rows[0] == rows[1]
        assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_non_finite_loss_aborts(self, tmp_path):
        from cbfocal.nn import TrainingError
        x, y = small_dataset(16)
        net = MiniNet.init(NetConfig(num_classes=3), seed=0)
        bad = WeightTable.from_omegas([np.inf, 1, 1], [1, 1, 1])
        with pytest.raises(TrainingError, match="stage 1 epoch 1"):
            train_stage(net, Stage(16, 8, 1), 1, (x, y), (x, y), bad,
                        checkpoint_path=tmp_path / "s.ckpt")

    @pytest.mark.parametrize("sizes", [(32, 16), (16, 16)])
    def test_plan_sizes_must_increase(self, sizes):
        with pytest.raises(ValueError, match="increase"):
            StagePlan((Stage(sizes[0], 8, 1), Stage(sizes[1], 8, 1, init="best_checkpoint")))

    def test_first_stage_cannot_resume(self):
        with pytest.raises(ValueError):
            StagePlan((Stage(16, 8, 1, init="best_checkpoint"),))


# ---------------------------------------------------------------- CAM


class TestCam:
    def test_constant_input_gives_constant_map(self):
        net = MiniNet.init(NetConfig(num_classes=4), seed=3)
        for value in (0.0, 1.7):
            hm = class_activation_map(net, np.full((16, 16, 1), value, np.float32), 2)
            assert hm.shape == (16, 16) and np.ptp(hm) == 0

    def test_range_and_peak(self):
        net = MiniNet.init(NetConfig(num_classes=4), seed=3)
        rng = np.random.default_rng(0)
        for _ in range(5):
            hm = class_activation_map(net, rng.standard_normal((16, 16, 1)).astype(np.float32), 1)
            assert hm.min() == 0.0 and hm.max() == 1.0
            r, c = heatmap_peak(hm)
            assert 0 <= r <= 16 and 0 <= c <= 16

    def test_bad_class(self):
        net = MiniNet.init(NetConfig(num_classes=4), seed=3)
        with pytest.raises(IndexError):
            class_activation_map(net, np.zeros((8, 8, 1)), 4)

    def test_peak_of_single_hot_pixel(self):
        hm = np.zeros((8, 8))
        hm[2, 5] = 1
        assert heatmap_peak(hm) == (2.5, 5.5)
