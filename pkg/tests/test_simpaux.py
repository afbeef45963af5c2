import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bridgelab import autodiff as ad
from bridgelab import gradcheck
from bridgelab.autodiff import Tensor
from bridgelab.fewshot import protonet_loss
from bridgelab.layers import BackboneConfig
from bridgelab.simpaux import (
    BridgeMLP,
    BridgeSource,
    ModelConfig,
    ModulationPlan,
    SimpAuxModel,
    aux_forward,
    bridge_forward,
    combined_loss,
    cosine_embedding_loss,
    multilabel_soft_margin_loss,
    simpaux_forward,
)
from bridgelab.tensor import SeededRng

tiny_config = gradcheck.tiny_model_config


def images(n, seed=0, size=8):
    return SeededRng(seed).uniform(size=(n, 3, size, size))


def randomize_bridge_output(model, seed=0, scale=0.3):
    rng = SeededRng(seed)
    model.bridge.out.weight.data[...] = rng.randn(*model.bridge.out.weight.shape, scale=scale)
    model.bridge.out.bias.data[...] = rng.randn(*model.bridge.out.bias.shape, scale=scale)


class TestMultilabelLoss:
    def test_zero_logits(self):
        targets = SeededRng(0).uniform(size=(3, 5))
        assert abs(multilabel_soft_margin_loss(Tensor(np.zeros((3, 5))), targets).item() - math.log(2)) <= 1e-12

    def test_saturation(self):
        assert multilabel_soft_margin_loss(Tensor([[20.0]]), [[1.0]]).item() <= 1e-8

    def test_hand_case(self):
        loss = multilabel_soft_margin_loss(Tensor([[1.0, -1.0]]), [[1.0, 0.0]]).item()
        assert abs(loss - 0.3133) < 1e-4
        assert abs(loss - math.log(1 + math.exp(-1))) < 1e-15

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 10_000))
    def test_symmetry(self, seed):
        rng = SeededRng(seed)
        logits, targets = rng.randn(3, 4, scale=3.0), rng.uniform(size=(3, 4))
        a = multilabel_soft_margin_loss(Tensor(logits), targets).item()
        b = multilabel_soft_margin_loss(Tensor(-logits), 1 - targets).item()
        assert abs(a - b) <= 1e-12

    def test_matches_bce_definition(self):
        rng = SeededRng(1)
        x, y = rng.randn(4, 3), rng.uniform(size=(4, 3))
        s = 1 / (1 + np.exp(-x))
        ref = -np.mean(y * np.log(s) + (1 - y) * np.log(1 - s))
        assert abs(multilabel_soft_margin_loss(Tensor(x), y).item() - ref) < 1e-12

    def test_validation(self):
        with pytest.raises(ValueError):
            multilabel_soft_margin_loss(Tensor(np.zeros((2, 2))), np.full((2, 2), 1.5))
        with pytest.raises(ValueError):
            multilabel_soft_margin_loss(Tensor(np.zeros((2, 2))), np.zeros((2, 3)))


class TestCosineLoss:
    def test_closed_forms(self):
        v = np.array([[1.0, 2.0, -0.5]])
        assert abs(cosine_embedding_loss(Tensor(v), v).item()) <= 1e-12
        assert abs(cosine_embedding_loss(Tensor([[1.0, 0.0]]), [[0.0, 3.0]]).item() - 1.0) <= 1e-12
        assert abs(cosine_embedding_loss(Tensor(v), -2 * v).item() - 2.0) <= 1e-12

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 10_000), st.floats(0.01, 100), st.floats(0.01, 100))
    def test_scale_invariance(self, seed, a, b):
        rng = SeededRng(seed)
        p, t = rng.randn(3, 4), rng.randn(3, 4)
        base = cosine_embedding_loss(Tensor(p), t).item()
        assert abs(cosine_embedding_loss(Tensor(a * p), b * t).item() - base) <= 1e-12

    def test_zero_target_rejected(self):
        with pytest.raises(ValueError):
            cosine_embedding_loss(Tensor(np.ones((2, 2))), np.array([[1.0, 0.0], [0.0, 0.0]]))


class TestCombinedLoss:
    def test_values(self):
        proto, aux = Tensor(1.0), Tensor(0.5)
        assert combined_loss(proto, aux, 0.0).item() == 1.0
        assert combined_loss(proto, aux, 1.0).item() == 1.5
        with pytest.raises(ValueError):
            combined_loss(proto, aux, -0.1)

    def test_gradient_linearity(self):
        w = Tensor(SeededRng(2).randn(4, 3), requires_grad=True)
        x = Tensor(SeededRng(3).randn(5, 4))
        lam = 0.3

        def proto():
            return ad.sum_(ad.silu(x @ w))

        def aux():
            return multilabel_soft_margin_loss(x @ w, np.full((5, 3), 0.5))

        proto().backward()
        gp = w.grad.copy()
        w.zero_grad()
        aux().backward()
        ga = w.grad.copy()
        w.zero_grad()
        combined_loss(proto(), aux(), lam).backward()
        np.testing.assert_allclose(w.grad, gp + lam * ga, atol=1e-12)


class TestBridge:
    def test_output_dim_for_widths(self):
        assert ModulationPlan.from_layers([("a", 8), ("b", 16)]).output_dim == 48
        cfg = BackboneConfig(widths=(8, 16), convs_per_block=1)
        bridge = BridgeMLP(5, cfg, SeededRng(0), hidden=7)
        assert bridge.output_dim == 2 * sum(c for _, c in cfg.bn_layers())

    @settings(max_examples=20, deadline=None)
    @given(st.lists(st.integers(1, 9), min_size=1, max_size=4), st.integers(1, 3))
    def test_coverage(self, widths, convs):
        cfg = BackboneConfig(widths=tuple(widths), convs_per_block=convs)
        plan = ModulationPlan.from_config(cfg)
        np.testing.assert_array_equal(plan.coverage(), np.ones(plan.output_dim))
        assert [c for _, _, c in plan.layers] == [c for _, c in cfg.bn_layers()]
        offsets = [off for _, off, _ in plan.layers]
        assert offsets == sorted(offsets)

    def test_slices_follow_plan(self):
        cfg = BackboneConfig(widths=(2, 3), convs_per_block=1)
        bridge = BridgeMLP(4, cfg, SeededRng(1), hidden=5, zero_init=False)
        v = Tensor(SeededRng(2).randn(3, 4))
        deltas = bridge_forward(bridge, v)
        deltas.validate(cfg, 3)
        flat = bridge.out(ad.silu(bridge.hidden[1](ad.silu(bridge.hidden[0](v))))).data
        rebuilt = np.concatenate([np.concatenate([g.data, b.data], axis=1) for g, b in deltas.layers], axis=1)
        np.testing.assert_array_equal(rebuilt, flat)

    def test_zero_init_gives_zero_deltas(self):
        cfg = BackboneConfig(widths=(2, 3), convs_per_block=1)
        deltas = BridgeMLP(4, cfg, SeededRng(3))(Tensor(SeededRng(4).randn(2, 4)))
        assert all(not g.data.any() and not b.data.any() for g, b in deltas.layers)

    def test_distinct_inputs_distinct_deltas(self):
        cfg = BackboneConfig(widths=(2, 3), convs_per_block=1)
        bridge = BridgeMLP(4, cfg, SeededRng(5), zero_init=False)
        deltas = bridge(Tensor(SeededRng(6).randn(2, 4)))
        assert not np.allclose(deltas.layers[0][0].data[0], deltas.layers[0][0].data[1])

    def test_input_checked(self):
        bridge = BridgeMLP(4, BackboneConfig(widths=(2,)), SeededRng(7))
        with pytest.raises(ValueError):
            bridge(Tensor(np.ones((2, 5))))


class TestAuxiliary:
    def test_separate_parameters(self):
        model = SimpAuxModel(tiny_config(), "simpaux", SeededRng(0))
        cls_ids = {id(p) for p in model.classifier.named_parameters().values()}
        aux_ids = {id(p) for p in model.aux.named_parameters().values()}
        assert not cls_ids & aux_ids

    def test_zero_head_gives_half(self):
        model = SimpAuxModel(tiny_config(), "simpaux", SeededRng(1))
        model.aux.attr_head.weight.data[...] = 0.0
        _, logits, _ = aux_forward(model.aux, Tensor(images(3)))
        np.testing.assert_array_equal(logits.data, 0.0)
        np.testing.assert_array_equal(ad.sigmoid(logits).data, 0.5)

    def test_duplicate_rows_eval(self):
        model = SimpAuxModel(tiny_config(), "simpaux", SeededRng(2)).eval()
        x = images(1, seed=3)
        outs = aux_forward(model.aux, Tensor(np.concatenate([x, x])))
        for o in outs:
            np.testing.assert_array_equal(o.data[0], o.data[1])

    def test_gradient_through_heads(self):
        assert gradcheck.check_aux_heads(SeededRng(4)) <= 1e-4


class TestSimpAuxModel:
    @pytest.mark.parametrize("source", list(BridgeSource))
    def test_zero_bridge_reduces_to_baseline(self, source):
        model = SimpAuxModel(tiny_config(), "simpaux", SeededRng(5))
        x = images(4, seed=6)
        attrs = (SeededRng(7).uniform(size=(4, 5)) > 0.5).astype(float)
        base = simpaux_forward(model, x, None).data
        cond = simpaux_forward(model, x, source, attrs).data
        np.testing.assert_allclose(cond, base, atol=1e-12)

    def test_zero_constant_zero_bridge(self):
        model = SimpAuxModel(tiny_config(), "ablation", SeededRng(8))
        model.constant.data[...] = 0.0
        x = images(4, seed=9)
        np.testing.assert_allclose(model(x).embeddings.data, simpaux_forward(model, x, None).data, atol=1e-12)

    def test_sources_differ_with_random_bridge(self):
        model = SimpAuxModel(tiny_config(), "simpaux", SeededRng(10))
        randomize_bridge_output(model)
        x = images(4, seed=11)
        aux = simpaux_forward(model, x, BridgeSource.AUXILIARY).data
        const = simpaux_forward(model, x, BridgeSource.CONSTANT).data
        assert np.abs(aux - const).max() > 1e-6

    def test_conditioning_is_per_instance(self):
        model = SimpAuxModel(tiny_config(), "simpaux", SeededRng(12)).eval()
        randomize_bridge_output(model)
        x = images(5, seed=13)
        perm = np.array([4, 2, 0, 3, 1])
        np.testing.assert_allclose(model(x[perm]).embeddings.data, model(x).embeddings.data[perm], atol=1e-12)

    def test_oracle_needs_attributes(self):
        model = SimpAuxModel(tiny_config(), "oracle", SeededRng(14))
        with pytest.raises(ValueError):
            model(images(2))
        with pytest.raises(ValueError):
            model(images(2), attributes=np.ones((2, 4)))

    def test_unknown_variant(self):
        with pytest.raises(ValueError):
            SimpAuxModel(tiny_config(), "bogus", SeededRng(0))

    def test_config_validation(self):
        with pytest.raises(ValueError):
            ModelConfig(lambda_aux=-1.0)
        with pytest.raises(ValueError):
            ModelConfig(distance="manhattan")

    @pytest.mark.parametrize("variant", ["baseline", "ablation", "oracle"])
    def test_non_simpaux_variants_use_proto_loss_only(self, variant):
        model = SimpAuxModel(tiny_config(), variant, SeededRng(15))
        x = images(8, seed=16)
        attrs = (SeededRng(17).uniform(size=(8, 5)) > 0.5).astype(float)
        s, q = np.repeat(np.arange(2), 2), np.repeat(np.arange(2), 2)
        loss, probs = model.episode_loss(x, s, q, 2, attrs)
        assert loss.item() == protonet_loss(probs, q).item()

    def test_simpaux_loss_adds_weighted_aux(self):
        cfg = tiny_config(lambda_aux=0.3)
        model = SimpAuxModel(cfg, "simpaux", SeededRng(18))
        x = images(8, seed=19)
        attrs = (SeededRng(20).uniform(size=(8, 5)) > 0.5).astype(float)
        s, q = np.repeat(np.arange(2), 2), np.repeat(np.arange(2), 2)
        loss, probs = model.episode_loss(x, s, q, 2, attrs)
        # training-mode BN normalizes with batch statistics, so a second forward reproduces the heads
        out = model(x, attributes=attrs)
        aux = multilabel_soft_margin_loss(out.attribute_logits, attrs).item()
        assert abs(loss.item() - (protonet_loss(probs, q).item() + 0.3 * aux)) < 1e-12

    def test_caption_loss_when_no_attributes(self):
        model = SimpAuxModel(tiny_config(aux_loss="captions"), "simpaux", SeededRng(21))
        x = images(8, seed=22)
        caps = SeededRng(23).randn(8, 4)
        s, q = np.repeat(np.arange(2), 2), np.repeat(np.arange(2), 2)
        loss, _ = model.episode_loss(x, s, q, 2, captions=caps)
        assert math.isfinite(loss.item())
        with pytest.raises(ValueError):
            model.episode_loss(x, s, q, 2)

    def test_stop_gradient_blocks_proto_path(self):
        model = SimpAuxModel(tiny_config(stop_gradient=True, lambda_aux=0.0), "simpaux", SeededRng(24))
        randomize_bridge_output(model)
        x = images(8, seed=25)
        s, q = np.repeat(np.arange(2), 2), np.repeat(np.arange(2), 2)
        model.zero_grad()
        loss, _ = model.episode_loss(x, s, q, 2, (SeededRng(26).uniform(size=(8, 5)) > 0.5).astype(float))
        loss.backward()
        assert all(not p.grad.any() for p in model.aux.named_parameters().values())
        assert any(p.grad.any() for p in model.bridge.named_parameters().values())

    def test_end_to_end_gradient(self):
        assert gradcheck.check_combined(SeededRng(27)) <= 1e-4
