import json
import math
import os

import numpy as np
import pytest

from cacconv import InvalidArgument, NumericFailure, finite_diff_grad, madds_cac, model_cost
from cacconv.cli import RunConfig
from cacconv.data import synth_dataset
from cacconv.layers import Linear, Network
from cacconv.train import (
    OptimizerConfig,
    OptimizerState,
    evaluate,
    forward_backward,
    load_checkpoint,
    save_checkpoint,
    sgd_step,
    train_model,
    weighted_product_loss,
)


class _OneParamNet:
    """Minimal named_params provider for exercising the optimizer."""

    def __init__(self, theta, grad, no_decay=False):
        self.layer = Linear(theta.shape[0], theta.shape[1],
                            bias=False, rng=np.random.default_rng(0), dtype=np.float64)
        self.layer.weight[...] = theta
        self.layer.grads = {"weight": grad}
        self._nd = {"weight"} if no_decay else set()
        self.layer.no_decay = lambda: self._nd

    def named_params(self):
        return [("w", self.layer, "weight", self.layer.weight)]

    @property
    def theta(self):
        return self.layer.weight


def _opt(**kw):
    return OptimizerState(config=OptimizerConfig(**kw))


class TestSgd:
    def test_plain_gradient_step(self):
        theta = np.array([[1.0], [2.0]])
        g = np.array([[0.5], [-1.0]])
        net = _OneParamNet(theta.copy(), g)
        sgd_step(net, _opt(momentum=0.0, weight_decay=0.0), lr=0.1)
        assert np.allclose(net.theta, theta - 0.1 * g)

    def test_two_nesterov_steps_match_hand_recurrence(self):
        theta = np.array([[1.0]])
        g = np.array([[0.4]])
        net = _OneParamNet(theta.copy(), g.copy())
        state = _opt(momentum=0.9, weight_decay=0.0, nesterov=True)
        sgd_step(net, state, lr=0.1)
        # v1 = g; step1 = g + 0.9 v1 = 1.9 g
        t1 = 1.0 - 0.1 * 1.9 * 0.4
        assert net.theta[0, 0] == pytest.approx(t1, rel=1e-12)
        net.layer.grads = {"weight": g.copy()}
        sgd_step(net, state, lr=0.1)
        # v2 = 0.9 g + g = 1.9 g; step2 = g + 0.9 v2 = 2.71 g
        t2 = t1 - 0.1 * 2.71 * 0.4
        assert net.theta[0, 0] == pytest.approx(t2, rel=1e-12)

    def test_decay_only_step(self):
        theta = np.array([[2.0]])
        net = _OneParamNet(theta.copy(), np.array([[0.0]]))
        sgd_step(net, _opt(momentum=0.0, weight_decay=1e-4), lr=0.5)
        assert net.theta[0, 0] == pytest.approx(2.0 - 0.5 * 1e-4 * 2.0, rel=1e-12)

    def test_no_decay_params_skip_weight_decay(self):
        theta = np.array([[2.0]])
        net = _OneParamNet(theta.copy(), np.array([[0.0]]), no_decay=True)
        sgd_step(net, _opt(momentum=0.0, weight_decay=1e-4), lr=0.5)
        assert net.theta[0, 0] == 2.0

    def test_nonfinite_update_raises(self):
        net = _OneParamNet(np.array([[1.0]]), np.array([[float("inf")]]))
        with pytest.raises(NumericFailure, match="w"):
            sgd_step(net, _opt(), lr=0.1)

    def test_lr_schedule_decays_at_60_and_80_percent(self):
        cfg = OptimizerConfig(lr=0.05)
        lrs = [cfg.lr_at(e, 20) for e in range(20)]
        assert lrs[0] == 0.05 and lrs[11] == 0.05
        assert lrs[12] == pytest.approx(0.005)
        assert lrs[16] == pytest.approx(0.0005)


class TestWeightedProductLoss:
    def test_lambda_zero(self):
        L, dl_dell, dl_dr = weighted_product_loss(2.0, 0.123, 0.0)
        assert L == 2.0 and dl_dell == 1.0 and dl_dr == 0.0

    def test_linear_lambda(self):
        L, _, _ = weighted_product_loss(2.0, 0.5, 1.0)
        assert L == 1.0

    def test_fractional_lambda(self):
        L, dl_dell, dl_dr = weighted_product_loss(1.5, 0.8, 0.3)
        assert L == pytest.approx(1.40288, abs=1e-4)
        assert dl_dell == pytest.approx(0.8**0.3)
        assert dl_dr == pytest.approx(1.5 * 0.3 * 0.8 ** (-0.7))

    def test_invalid_ranges(self):
        with pytest.raises(InvalidArgument):
            weighted_product_loss(-1.0, 0.5, 0.3)
        with pytest.raises(InvalidArgument):
            weighted_product_loss(1.0, 0.0, 0.3)
        with pytest.raises(InvalidArgument):
            weighted_product_loss(1.0, 0.5, -0.3)


TINY = {
    "input": {"channels": 3, "size": 8},
    "num_classes": 2,
    "layers": [
        {"type": "cac_conv", "out": 4, "k": 3},
        {"type": "relu"},
        {"type": "global_avgpool"},
        {"type": "linear", "out": 2},
        {"type": "softmax_ce"},
    ],
}


class TestForwardBackward:
    def test_lambda_zero_equals_plain_task_gradient(self):
        rng = np.random.default_rng(0)
        net = Network.build(TINY, rng=rng)
        x = rng.standard_normal((4, 3, 8, 8)).astype(np.float32)
        labels = np.array([0, 1, 1, 0])

        net.zero_grads()
        forward_backward(net, x, labels, lam=0.0)
        with_penalty_off = {
            name: layer.grads[p].copy() for name, layer, p, _ in net.named_params()
        }

        net.zero_grads()
        logits = net.forward(x, train=True)
        ell, probs = net.head.loss(logits, labels)
        net.backward(net.head.grad(probs, labels), None)
        for name, layer, p, _ in net.named_params():
            assert np.array_equal(with_penalty_off[name], layer.grads[p]), name

    def test_full_objective_gate_gradient_matches_finite_diff(self):
        rng = np.random.default_rng(1)
        net = Network.build(TINY, rng=rng, dtype=np.float64)
        x = rng.standard_normal((2, 3, 8, 8))
        labels = np.array([0, 1])
        lam = 0.5
        net.zero_grads()
        forward_backward(net, x, labels, lam)
        cac = net.layers[0]
        got = float(cac.grads["gate_beta"][0])

        def f(b):
            cac.gate_beta[0] = b[0]
            logits = net.forward(x, train=True)
            ell, _ = net.head.loss(logits, labels)
            specs = net.cost_specs()
            rhos = [cac.rho_soft() if s.cac else 1.0 for s in specs]
            return ell * model_cost(specs, rhos).ratio ** lam

        b0 = float(cac.gate_beta[0])
        num = finite_diff_grad(f, np.array([b0]), eps=1e-5)[0]
        cac.gate_beta[0] = b0
        assert abs(got - num) <= 1e-3 * max(abs(num), 1e-10)

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_nonfinite_loss_attributed(self):
        rng = np.random.default_rng(2)
        net = Network.build(TINY, rng=rng)
        net.layers[0].weight[...] = np.inf
        x = rng.standard_normal((2, 3, 8, 8)).astype(np.float32)
        with pytest.raises(NumericFailure, match="00_cac_conv"):
            forward_backward(net, x, np.array([0, 1]), lam=0.0)


def tiny_cfg(tmp_path, **kw):
    base = {
        "seed": 3,
        "model": "cac_tiny_synth",
        "lambda": 0.4,
        "epochs": 3,
        "batch_size": 32,
        "output_dir": str(tmp_path / "run"),
        "dataset": {"kind": "synthetic", "synth_n": 128, "synth_test_n": 64},
        "optimizer": {"lr": 0.05},
    }
    base.update(kw)
    return RunConfig.from_dict(base)


def run_tiny(tmp_path, **kw):
    cfg = tiny_cfg(tmp_path, **kw)
    train = synth_dataset("smooth_vs_textured", 128, 0)
    test = synth_dataset("smooth_vs_textured", 64, 1)
    return cfg, train_model(cfg, train.images, train.labels, test.images, test.labels)


class TestTrainLoop:
    def test_metrics_objective_consistency(self, tmp_path):
        cfg, result = run_tiny(tmp_path)
        with open(result.metrics_path) as f:
            entries = [json.loads(line) for line in f]
        assert len(entries) == cfg.epochs
        for e in entries:
            assert e["L"] == e["ell"] * e["cost_ratio_soft"] ** e["lambda"]
            assert set(e["rho_soft"]) == {"00_cac_conv"}

    def test_loss_decreases_on_separable_data(self, tmp_path):
        _, result = run_tiny(tmp_path, epochs=5, **{"lambda": 0.0})
        ells = [m["ell"] for m in result.metrics]
        assert all(b < a for a, b in zip(ells, ells[1:]))

    def test_determinism_byte_identical_outputs(self, tmp_path):
        _, r1 = run_tiny(tmp_path / "a")
        _, r2 = run_tiny(tmp_path / "b")
        with open(r1.metrics_path, "rb") as f:
            m1 = f.read()
        with open(r2.metrics_path, "rb") as f:
            m2 = f.read()
        assert m1 == m2
        with open(r1.checkpoint_path, "rb") as f:
            c1 = f.read()
        with open(r2.checkpoint_path, "rb") as f:
            c2 = f.read()
        assert c1 == c2

    def test_frozen_lambda0_matches_conv_baseline_bitwise(self, tmp_path):
        conv_tiny = {
            "input": {"channels": 3, "size": 32},
            "num_classes": 2,
            "layers": [
                {"type": "conv", "out": 8, "k": 3},
                {"type": "batchnorm"},
                {"type": "relu"},
                {"type": "global_avgpool"},
                {"type": "linear", "out": 2},
                {"type": "softmax_ce"},
            ],
        }
        train = synth_dataset("smooth_vs_textured", 96, 5)
        test = synth_dataset("smooth_vs_textured", 32, 6)
        cfg_frozen = tiny_cfg(tmp_path / "frozen", **{
            "lambda": 0.0, "freeze_gates_sharp": True, "epochs": 2,
        })
        cfg_conv = tiny_cfg(tmp_path / "conv", **{
            "lambda": 0.0, "model": conv_tiny, "epochs": 2,
        })
        r_frozen = train_model(cfg_frozen, train.images, train.labels,
                               test.images, test.labels)
        r_conv = train_model(cfg_conv, train.images, train.labels,
                             test.images, test.labels)
        assert r_frozen.step_losses == r_conv.step_losses
        assert [m["ell"] for m in r_frozen.metrics] == [m["ell"] for m in r_conv.metrics]
        assert all(m["cost_ratio_hard"] == 1.0 for m in r_frozen.metrics)

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_aborts_keeping_last_checkpoint(self, tmp_path):
        with pytest.raises(NumericFailure):
            run_tiny(tmp_path, epochs=4,
                     optimizer={"lr": 0.05, "decay_epochs": [1], "decay_factor": 1e14})
        ckpt = tmp_path / "run" / "model.ckpt"
        assert ckpt.exists()
        tensors = load_checkpoint(ckpt)
        assert all(np.isfinite(v).all() for v in tensors.values())

    def test_penalty_warmup_defers_cost_pressure(self, tmp_path):
        _, result = run_tiny(tmp_path, epochs=2, penalty_warmup_epochs=1)
        assert result.metrics[0]["lambda"] == 0.0
        assert result.metrics[1]["lambda"] == 0.4


class TestEvaluate:
    def _trained(self, tmp_path, **kw):
        _, result = run_tiny(tmp_path, **kw)
        return result.net

    def test_empty_dataset_rejected(self, tmp_path):
        net = self._trained(tmp_path, epochs=1)
        with pytest.raises(InvalidArgument):
            evaluate(net, np.zeros((0, 3, 32, 32), dtype=np.float32),
                     np.zeros(0, dtype=np.int64))

    def test_constant_images_close_gate_when_beta_negative(self, tmp_path):
        net = self._trained(tmp_path, epochs=1)
        cac = net.layers[0]
        cac.gate_beta[0] = -1.0
        x = np.full((4, 3, 32, 32), 0.3, dtype=np.float32)
        res = evaluate(net, x, np.zeros(4, dtype=np.int64))
        assert res.rho_hard["00_cac_conv"] == 0.0

    def test_saturated_gate_costs_baseline_plus_overhead(self, tmp_path):
        net = self._trained(tmp_path, epochs=1)
        cac = net.layers[0]
        cac.gate_beta[0] = 10.0
        ds = synth_dataset("smooth_vs_textured", 16, 9)
        res = evaluate(net, ds.images, ds.labels)
        specs = net.cost_specs()
        baseline = sum(
            __import__("cacconv").madds_standard(s) for s in specs
        )
        overhead = sum(13 * s.n * s.n for s in specs if s.cac)
        assert res.per_sample_madds.std() == 0.0
        assert res.per_sample_madds[0] == baseline + overhead

    def test_mean_madds_equals_model_cost_at_mean_rho(self, tmp_path):
        net = self._trained(tmp_path, epochs=2)
        ds = synth_dataset("smooth_vs_textured", 32, 11)
        res = evaluate(net, ds.images, ds.labels)
        specs = net.cost_specs()
        rhos = [res.per_sample_rho[s.layer_id] if s.cac else 1.0 for s in specs]
        report = model_cost(specs, rhos)
        assert res.madds_mean == pytest.approx(report.c_model, rel=1e-12)


class TestCheckpoint:
    def test_round_trip_preserves_values_and_shapes(self, tmp_path):
        rng = np.random.default_rng(12)
        tensors = {
            "a.weight": rng.standard_normal((3, 3, 2, 4)).astype(np.float32),
            "b.bias": rng.standard_normal(7).astype(np.float32),
            "scalar": np.array([2.5], dtype=np.float32),
        }
        path = tmp_path / "t.ckpt"
        save_checkpoint(path, tensors)
        back = load_checkpoint(path)
        assert set(back) == set(tensors)
        for k in tensors:
            assert np.array_equal(back[k], tensors[k])
            assert back[k].dtype == np.float32

    def test_eval_identical_after_reload(self, tmp_path):
        _, result = run_tiny(tmp_path, epochs=2)
        ds = synth_dataset("smooth_vs_textured", 32, 13)
        before = evaluate(result.net, ds.images, ds.labels)

        rng = np.random.default_rng(777)
        from cacconv.cli import resolve_model_spec
        net2 = Network.build(resolve_model_spec("cac_tiny_synth"), rng=rng)
        net2.load_state_dict(load_checkpoint(result.checkpoint_path))
        after = evaluate(net2, ds.images, ds.labels)
        assert before.top1_error == after.top1_error
        assert np.array_equal(before.per_sample_madds, after.per_sample_madds)

    def test_corruption_diagnostics(self, tmp_path):
        path = tmp_path / "c.ckpt"
        save_checkpoint(path, {"w": np.ones((2, 2), dtype=np.float32)})
        raw = path.read_bytes()

        bad_magic = tmp_path / "m.ckpt"
        bad_magic.write_bytes(b"XXXX" + raw[4:])
        with pytest.raises(Exception, match="magic"):
            load_checkpoint(bad_magic)

        truncated = tmp_path / "t.ckpt"
        truncated.write_bytes(raw[:-6])
        with pytest.raises(Exception, match="tensor 0"):
            load_checkpoint(truncated)

        trailing = tmp_path / "x.ckpt"
        trailing.write_bytes(raw + b"\x00\x00")
        with pytest.raises(Exception, match="trailing"):
            load_checkpoint(trailing)

        # dtype tag byte sits right after the 4-byte name length + name
        bad_tag = bytearray(raw)
        tag_off = 4 + 4 + 4 + 4 + len(b"w")
        bad_tag[tag_off] = 9
        tagged = tmp_path / "d.ckpt"
        tagged.write_bytes(bytes(bad_tag))
        with pytest.raises(Exception, match="dtype tag"):
            load_checkpoint(tagged)
