import math

import numpy as np
import pytest

from bridgelab import data, train
from bridgelab.fewshot import InsufficientDataError
from bridgelab.gradcheck import tiny_model_config
from bridgelab.simpaux import SimpAuxModel
from bridgelab.tensor import NonFiniteError, SeededRng
from bridgelab.train import (
    EvalReport,
    OptimizerConfig,
    TrainConfig,
    apply_update,
    ci_half_width,
    flag_outliers,
    seed_sweep,
)


@pytest.fixture(scope="module")
def tiny_data():
    return data.generate_synthetic(data.SyntheticGenConfig(classes=10, per_class=8, image_size=9, attributes=5, embed_dim=4))


def tiny_train(steps=3, lr=1e-3, **kw):
    return TrainConfig(way=2, shot=2, query=2, steps=steps, val_every=0, optimizer=OptimizerConfig(lr=lr), **kw)


class TestApplyUpdate:
    def test_sgd_plain_step(self):
        p = {"w": np.array([1.0, 2.0])}
        apply_update(p, {"w": np.ones(2)}, {}, OptimizerConfig(kind="sgd", lr=0.1, momentum=0.0, weight_decay=0.0))
        np.testing.assert_allclose(p["w"], [0.9, 1.9], atol=1e-15)

    def test_decay_shrinks_weight_not_bias(self):
        p = {"layer.weight": np.array([2.0]), "layer.bias": np.array([2.0]), "bn.gamma": np.array([2.0])}
        g = {k: np.zeros(1) for k in p}
        apply_update(p, g, {}, OptimizerConfig(kind="sgd", lr=0.1, momentum=0.0, weight_decay=0.5))
        np.testing.assert_allclose(p["layer.weight"], [2.0 - 0.1 * 0.5 * 2.0], atol=1e-15)
        assert p["layer.bias"][0] == 2.0 and p["bn.gamma"][0] == 2.0

    @pytest.mark.parametrize("kind", ["sgd", "adam"])
    def test_excluded_update_independent_of_decay(self, kind):
        rng = SeededRng(0)
        names = ["a.weight", "a.bias", "bn.gamma", "bn.beta"]
        init = {n: rng.randn(3) for n in names}
        grads = [{n: rng.randn(3) for n in names} for _ in range(4)]
        finals = []
        for wd in (0.0, 0.3):
            p, state = {n: v.copy() for n, v in init.items()}, {}
            for g in grads:
                apply_update(p, g, state, OptimizerConfig(kind=kind, lr=0.05, weight_decay=wd))
            finals.append(p)
        for n in names[1:]:
            np.testing.assert_array_equal(finals[0][n], finals[1][n])
        assert not np.array_equal(finals[0]["a.weight"], finals[1]["a.weight"])

    def test_adam_hand_stepped_quadratic(self):
        # f(p) = 0.5 * p^2 per coordinate, so grad = p
        lr, b1, b2, eps = 0.1, 0.9, 0.999, 1e-8
        p = {"w": np.array([1.0, -3.0])}
        state = {}
        ref = [1.0, -3.0]
        m, v = [0.0, 0.0], [0.0, 0.0]
        for t in range(1, 4):
            apply_update(p, {"w": p["w"].copy()}, state, OptimizerConfig(kind="adam", lr=lr, weight_decay=0.0))
            for i in range(2):
                g = ref[i]
                m[i] = b1 * m[i] + (1 - b1) * g
                v[i] = b2 * v[i] + (1 - b2) * g * g
                ref[i] -= lr * (m[i] / (1 - b1**t)) / (math.sqrt(v[i] / (1 - b2**t)) + eps)
            np.testing.assert_allclose(p["w"], ref, rtol=1e-14)

    def test_sgd_momentum(self):
        p = {"w": np.array([0.0])}
        state = {}
        cfg = OptimizerConfig(kind="sgd", lr=1.0, momentum=0.5, weight_decay=0.0)
        for _ in range(3):
            apply_update(p, {"w": np.array([1.0])}, state, cfg)
        assert p["w"][0] == -(1 + 1.5 + 1.75)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            apply_update({"w": np.zeros(2)}, {"w": np.zeros(3)}, {}, OptimizerConfig())

    def test_config_validation(self):
        with pytest.raises(ValueError):
            OptimizerConfig(kind="rmsprop")
        with pytest.raises(ValueError):
            OptimizerConfig(lr=-1.0)


class TestStatistics:
    def test_constant_accuracies(self):
        r = EvalReport.from_accuracies([0.8] * 5, seed=0)
        assert r.mean == pytest.approx(0.8, abs=1e-15) and r.ci == 0.0

    def test_two_value_case(self):
        r = EvalReport.from_accuracies([0.8, 0.9], seed=0)
        assert abs(r.mean - 0.85) < 1e-15
        assert abs(r.ci - 0.0980) < 1e-4
        assert abs(r.ci - 1.96 * 0.07071067811865482 / math.sqrt(2)) < 1e-12

    def test_ci_independent_recomputation(self):
        acc = SeededRng(1).uniform(size=37)
        n = len(acc)
        mean = sum(acc) / n
        sd = math.sqrt(sum((a - mean) ** 2 for a in acc) / (n - 1))
        r = EvalReport.from_accuracies(acc, seed=0)
        assert abs(r.ci - 1.96 * sd / math.sqrt(n)) <= 1e-12
        assert r.count == n

    def test_degenerate(self):
        assert math.isnan(ci_half_width([0.5]))
        with pytest.raises(ValueError):
            EvalReport.from_accuracies([], seed=0)

    def test_outlier_example(self):
        means = dict(zip(range(1, 6), [0.7, 0.72, 0.71, 0.69, 0.95]))
        assert flag_outliers(means) == [5]

    def test_too_few_seeds_never_flag(self):
        assert flag_outliers({0: 0.5, 1: 0.51, 2: 0.9}) == []

    def test_no_outliers_when_tight(self):
        assert flag_outliers({s: 0.7 + 0.001 * s for s in range(5)}) == []


class TestSeedSweep:
    def test_single_seed_rejected(self):
        with pytest.raises(ValueError):
            seed_sweep(lambda s: EvalReport.from_accuracies([0.5, 0.5], s), [0])

    def test_failures_recorded(self):
        def run(s):
            if s == 2:
                raise RuntimeError("boom")
            return EvalReport.from_accuracies([0.5 + 0.1 * s, 0.5], s)

        sweep = seed_sweep(run, [0, 1, 2])
        assert sorted(sweep.reports) == [0, 1] and "boom" in sweep.errors[2]
        assert sweep.min == 0.5 and sweep.max == pytest.approx(0.55)

    def test_zero_lr_runs_have_zero_spread(self, tiny_data):
        # five identical degenerate runs: no updates from a shared init
        def run(s):
            result = train.train("baseline", tiny_data, tiny_model_config(), tiny_train(lr=0.0), seed=7)
            return train.evaluate(result.model, tiny_data, "test", 5, 2, 2, 2, seed=11)

        sweep = seed_sweep(run, range(5))
        assert sweep.std == 0.0 and sweep.min == sweep.max and sweep.outliers == []


class TestEvaluate:
    def test_deterministic_and_worker_independent(self, tiny_data):
        model = SimpAuxModel(tiny_model_config(), "simpaux", SeededRng(0))
        a = train.evaluate(model, tiny_data, "test", 12, 2, 2, 2, seed=5)
        b = train.evaluate(model, tiny_data, "test", 12, 2, 2, 2, seed=5, workers=3)
        np.testing.assert_array_equal(a.accuracies, b.accuracies)
        assert a.count == 12 and model.training

    def test_paired_streams_across_variants(self, tiny_data, monkeypatch):
        seen = {}
        original = train.score_episode

        def spy(model, dataset, episode):
            seen.setdefault(model.variant, []).append(episode.instances.tolist())
            return original(model, dataset, episode)

        monkeypatch.setattr(train, "score_episode", spy)
        for i, variant in enumerate(("baseline", "simpaux", "ablation", "oracle")):
            train.evaluate(SimpAuxModel(tiny_model_config(), variant, SeededRng(i)), tiny_data, "test", 6, 2, 2, 2, seed=9)
        assert seen["baseline"] == seen["simpaux"] == seen["ablation"] == seen["oracle"]

    def test_insufficient_split(self, tiny_data):
        model = SimpAuxModel(tiny_model_config(), "baseline", SeededRng(0))
        with pytest.raises(InsufficientDataError):
            train.evaluate(model, tiny_data, "test", 3, 5, 2, 2, seed=0)


class TestTrain:
    def test_zero_lr_leaves_parameters(self, tiny_data):
        a = train.train("simpaux", tiny_data, tiny_model_config(), tiny_train(lr=0.0), seed=3)
        b = SimpAuxModel(tiny_model_config(), "simpaux", SeededRng(3).child("init"))
        pa, pb = a.model.named_parameters(), b.named_parameters()
        assert pa.keys() == pb.keys()
        for k in pa:
            np.testing.assert_array_equal(pa[k].data, pb[k].data)

    def test_checkpoint_bytes_deterministic(self, tiny_data, tmp_path):
        for name in ("a", "b"):
            r = train.train("simpaux", tiny_data, tiny_model_config(), tiny_train(), seed=4)
            train.save_checkpoint(tmp_path / f"{name}.smpx", r.model)
        assert (tmp_path / "a.smpx").read_bytes() == (tmp_path / "b.smpx").read_bytes()

    def test_checkpoint_round_trip(self, tiny_data, tmp_path):
        r = train.train("oracle", tiny_data, tiny_model_config(), tiny_train(), seed=5)
        train.save_checkpoint(tmp_path / "c.smpx", r.model, {"seed": 5})
        model, meta = train.load_checkpoint(tmp_path / "c.smpx")
        assert meta["variant"] == "oracle" and meta["seed"] == 5
        x = train.evaluate(r.model, tiny_data, "test", 4, 2, 2, 2, seed=0)
        y = train.evaluate(model, tiny_data, "test", 4, 2, 2, 2, seed=0)
        np.testing.assert_array_equal(x.accuracies, y.accuracies)

    def test_log_and_validation(self, tiny_data):
        lines = []
        cfg = TrainConfig(way=2, shot=2, query=2, steps=4, val_every=2, val_episodes=3)
        r = train.train("baseline", tiny_data, tiny_model_config(), cfg, seed=6, on_log=lines.append)
        assert lines == r.log and len(lines) == 4
        assert lines[0].split("\t")[2] == "nan" and lines[1].split("\t")[2] != "nan"
        assert r.best_step in (2, 4) and 0 <= r.best_val <= 1

    def test_divergence_raises_with_record(self, tiny_data, monkeypatch):
        def bad_loss(self, *args, **kwargs):
            raise NonFiniteError("loss is nan")

        monkeypatch.setattr(SimpAuxModel, "episode_loss", bad_loss)
        with pytest.raises(train.DivergenceError) as info:
            train.train("baseline", tiny_data, tiny_model_config(), tiny_train(), seed=0)
        assert info.value.record["step"] == 1 and info.value.record["variant"] == "baseline"

    def test_training_reduces_fixed_episode_loss(self, tiny_data):
        r = train.train("baseline", tiny_data, tiny_model_config(), tiny_train(steps=60, lr=1e-2, fixed_episodes=2), seed=0)
        assert np.mean(r.losses[-5:]) < np.mean(r.losses[:5])
        assert len(r.fixed_episodes) == 2

    def test_config_validation(self):
        with pytest.raises(ValueError):
            TrainConfig(steps=-1)


def test_weight_decay_exclusion_predicate():
    assert train.excluded_from_decay("classifier.block0.bn0.gamma")
    assert train.excluded_from_decay("bridge.out.bias")
    assert not train.excluded_from_decay("bridge.out.weight")
