import math

import numpy as np
import pytest

from catattn import training
from catattn.autograd import Variable
from catattn.backbone import ModelSpec, init_model
from catattn.config import load_config
from catattn.data import DatasetHandle
from catattn.training import (
    ABLATION_ARMS,
    OptimState,
    augment_batch,
    decay_exempt,
    evaluate,
    factor_rows,
    lr_schedule,
    prepare_data,
    resolve_arms,
    run_ablation,
    sgd_step,
    train,
)

TINY = ["stage_widths=4,8,8", "reduction=2", "n_samples=80", "batch_size=16", "epochs=1"]


class Store(dict):
    """Minimal stand-in exposing the optimiser-facing ParamStore method."""

    def trainable(self):
        return dict(self)


def single(name, value, grad):
    p = Variable(np.asarray(value, dtype=np.float64))
    p.grad = np.asarray(grad, dtype=np.float64)
    return Store({name: p})


class TestSgd:
    def test_plain_step(self):
        store = single("conv.weight", [1.0, 2.0], [0.5, -1.0])
        sgd_step(store, OptimState(lr=1.0, momentum=0.0, weight_decay=0.0))
        np.testing.assert_allclose(store["conv.weight"].value, [0.5, 3.0])

    def test_momentum_accumulates(self):
        g = np.array([0.2, -0.4])
        store = single("fc.weight", [0.0, 0.0], g)
        state = OptimState(lr=1.0, momentum=0.9, weight_decay=0.0)
        sgd_step(store, state)
        store["fc.weight"].grad = g.copy()
        sgd_step(store, state)
        # displacement after two steps: g + (0.9 g + g)
        np.testing.assert_allclose(store["fc.weight"].value, -2.9 * g)

    def test_weight_decay_term(self):
        store = single("fc.weight", [2.0], [0.0])
        sgd_step(store, OptimState(lr=0.1, momentum=0.0, weight_decay=0.5))
        np.testing.assert_allclose(store["fc.weight"].value, [2.0 - 0.1 * 0.5 * 2.0])

    @pytest.mark.parametrize("name", ["stage1.block1.cat.C_w", "stage2.block1.cat.S_gamma", "stem.bn.gamma", "stage1.block1.bn2.beta"])
    def test_exempt_names_untouched_by_decay(self, name):
        assert decay_exempt(name)
        store = single(name, 0.7, 0.0)
        sgd_step(store, OptimState(lr=0.1, momentum=0.9, weight_decay=0.0005))
        assert store[name].value == 0.7

    @pytest.mark.parametrize("name", ["stem.conv.weight", "fc.bias", "stage1.block1.cat.conv_w"])
    def test_decayed_names(self, name):
        assert not decay_exempt(name)

    def test_missing_gradient(self):
        store = Store({"fc.weight": Variable(np.zeros(2))})
        with pytest.raises(RuntimeError, match="fc.weight"):
            sgd_step(store, OptimState(lr=0.1))

    def test_rejects_non_positive_lr(self):
        with pytest.raises(ValueError):
            OptimState(lr=0.0)


class TestSchedule:
    @pytest.mark.parametrize("epoch, expect", [(0, 0.1), (4, 0.1), (5, 0.01), (12, 0.001)])
    def test_step_decay(self, epoch, expect):
        assert lr_schedule(epoch, 0.1, 5) == pytest.approx(expect, rel=1e-12)

    def test_negative_epoch(self):
        with pytest.raises(ValueError):
            lr_schedule(-1, 0.1, 5)


class TestAugment:
    def test_shape_and_content(self, rng):
        x = rng.normal(size=(6, 3, 32, 32)).astype(np.float32)
        out = augment_batch(x, np.random.default_rng(0))
        assert out.shape == x.shape and out.dtype == x.dtype
        # a crop of a zero-padded image keeps at least a 28x28 window of real pixels
        for i in range(6):
            assert np.count_nonzero(out[i]) >= 3 * 28 * 28


class TestTraining:
    def test_smoothed_loss_decreases_on_fixed_batch(self):
        # one full batch per epoch removes sampling noise, leaving only the gradient chain
        cfg = load_config(overrides=["epochs=20"])
        tr, va = prepare_data(cfg)
        fixed = DatasetHandle(tr.images[:64], tr.labels[:64], 2)
        losses = np.array(train(cfg, data=(fixed, va)).step_losses)
        assert len(losses) == 20
        smooth = np.convolve(losses, np.ones(5) / 5, mode="valid")
        assert np.all(np.diff(smooth) < 0), np.round(smooth, 4)

    def test_shuffled_loss_trends_down(self):
        # minibatch noise exceeds the early trend, so only the endpoints are compared
        losses = np.array(train(load_config(overrides=["max_steps=20"])).step_losses)
        smooth = np.convolve(losses, np.ones(5) / 5, mode="valid")
        assert smooth[-1] < smooth[0] - 0.05

    def test_factor_rows_are_a_distribution(self):
        result = train(load_config(overrides=TINY + ["epochs=2"]))
        assert [r["epoch"] for r in result.factors] == [0, 0, 0, 1, 1, 1]
        for row in result.factors:
            assert row["w_c"] + row["w_s"] == pytest.approx(1.0, abs=1e-6)
            assert 0 < row["w_c"] < 1
        first = result.factors[0]
        assert (first["C_w"], first["S_w"], first["w_c"]) == (0.0, 0.0, 0.5)

    def test_metrics_rows(self):
        result = train(load_config(overrides=TINY + ["epochs=2"]))
        assert [m["epoch"] for m in result.metrics] == [0, 1]
        assert result.metrics[-1]["step"] == result.steps == 2 * math.ceil(64 / 16)
        assert result.n_eval == 16

    def test_max_steps_caps_training(self):
        result = train(load_config(overrides=TINY + ["epochs=5", "max_steps=3"]))
        assert result.steps == 3 and len(result.metrics) == 1

    def test_baseline_deterministic(self):
        cfg = load_config(overrides=TINY + ["attention=none"])
        a, b = train(cfg), train(cfg)
        assert a.step_losses == b.step_losses
        assert a.factors == []

    def test_verify_mode_bitwise(self):
        cfg = load_config(overrides=TINY + ["verify=true"])
        a, b = train(cfg), train(cfg)
        assert a.step_losses == b.step_losses
        assert a.store["fc.weight"].value.dtype == np.float64
        for k in a.store:
            np.testing.assert_array_equal(a.store[k].value, b.store[k].value)

    def test_evaluate_counts(self, rng):
        spec = ModelSpec(stage_widths=(4, 8, 8), blocks_per_stage=1, num_classes=2, reduction=2)
        store = init_model(spec)
        store["fc.weight"].value[:] = 0
        store["fc.bias"].value[:] = [1.0, 0.0]
        y = np.array([0, 0, 1, 0])
        acc, loss, n = evaluate(store, spec, rng.normal(size=(4, 3, 32, 32)), y, batch_size=3)
        assert (acc, n) == (0.75, 4)
        assert loss == pytest.approx(np.mean([-math.log(1 / (1 + math.exp(-1)))] * 3 + [1 - math.log(1 / (1 + math.exp(-1)))]), rel=1e-5)

    def test_factor_rows_skip_blocks_without_exterior_pair(self):
        spec = ModelSpec(stage_widths=(4, 8, 8), blocks_per_stage=1, attention="channel_only", reduction=2)
        assert factor_rows(init_model(spec), spec, 0) == []


class TestAblation:
    def test_default_arm_order(self):
        arms = resolve_arms("default")
        assert len(arms) == 10
        assert arms[0][:2] == ("spatial_only", True) and arms[-1][:2] == ("full_cat", True)
        assert resolve_arms("all")[0][0] == "none"

    def test_arm_list(self):
        assert resolve_arms("full_cat, channel_only:nogep") == [ABLATION_ARMS[-1], ABLATION_ARMS[3]]
        with pytest.raises(ValueError):
            resolve_arms("cat_exterior:nogep")
        with pytest.raises(ValueError):
            resolve_arms("full_cat:maybe")

    def test_two_arms(self):
        rows = run_ablation(load_config(overrides=TINY + ["ablation_arms=full_cat,spatial_only:nogep"]))
        assert [(r.mode, r.gep) for r in rows] == [("full_cat", True), ("spatial_only", False)]
        for r in rows:
            assert 0 <= r.accuracy <= 1 and r.params > 0 and r.seconds > 0
        assert rows[0].params > rows[1].params

    def test_failed_arm_reports_nan(self, monkeypatch):
        real = training._train

        def flaky(cfg, spec, data, on_epoch):
            if spec.attention == "channel_only":
                raise FloatingPointError("training loss diverged at step 1")
            return real(cfg, spec, data, on_epoch)

        monkeypatch.setattr(training, "_train", flaky)
        rows = run_ablation(load_config(overrides=TINY + ["ablation_arms=channel_only,full_cat"]))
        assert math.isnan(rows[0].accuracy) and "diverged" in rows[0].error
        assert rows[0].csv_fields()[3] == "nan"
        assert not math.isnan(rows[1].accuracy)
