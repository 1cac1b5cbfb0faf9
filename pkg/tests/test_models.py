import numpy as np
import pytest
import torch

from continual_defense.errors import CapacityError, ModelError, NumericalWarning
from continual_defense.models import (
    ConvBackbone,
    CosineClassifier,
    DefenseModel,
    ModelConfig,
    build_models,
    cosine_logits,
    load_checkpoint,
    save_checkpoint,
)
from continual_defense.utils import module_digest, seed_for


def small_backbone_config(**overrides):
    base = dict(
        num_classes=4, stages=2, in_channels=3,
        backbone_channels=(8, 16), embedding_dim=12, split_index=1,
        input_mean=(0.5, 0.5, 0.5), input_std=(0.25, 0.25, 0.25),
    )
    base.update(overrides)
    return ModelConfig(**base)


class TestBackboneSplit:
    def test_h1_h2_composition(self):
        torch.manual_seed(0)
        net = ConvBackbone(small_backbone_config())
        net.eval()
        x = torch.rand(5, 3, 12, 12)
        with torch.no_grad():
            assert torch.equal(net.forward_h2(net.forward_h1(x)), net(x))

    def test_zero_weight_bias_free_gives_zero(self):
        net = ConvBackbone(small_backbone_config(norm="none", bias=False))
        with torch.no_grad():
            for p in net.parameters():
                p.zero_()
        net.eval()
        out = net(torch.rand(2, 3, 12, 12))
        assert torch.equal(out, torch.zeros_like(out))

    def test_batch_shape_contract(self):
        net = ConvBackbone(small_backbone_config())
        net.eval()
        hidden = net.forward_h1(torch.rand(7, 3, 12, 12))
        assert hidden.shape[0] == 7
        emb = net.forward_h2(hidden)
        assert emb.shape == (7, 12)

    def test_bad_split_index(self):
        with pytest.raises(ModelError, match="split_index"):
            ConvBackbone(small_backbone_config(split_index=5))


class TestCosineClassifier:
    def test_orthonormal_example(self):
        clf = CosineClassifier(2, 2, 0, scale=1.0)
        with torch.no_grad():
            clf.blocks[0].copy_(torch.tensor([[1.0, 0.0], [0.0, 1.0]]))
        logits = clf(torch.tensor([[1.0, 0.0]]))
        assert torch.allclose(logits, torch.tensor([[1.0, 0.0]]), atol=1e-6)

    def test_positive_scale_invariance(self):
        torch.manual_seed(1)
        clf = CosineClassifier(8, 5, 3)
        e = torch.randn(4, 8)
        assert torch.allclose(clf(e), clf(10.0 * e), atol=1e-5)

    def test_against_brute_force_cosine(self):
        torch.manual_seed(2)
        clf = CosineClassifier(6, 4, 2, scale=16.0)
        e = torch.randn(3, 6)
        logits = cosine_logits(clf, e, include_virtual=True).detach().numpy()
        weight = torch.cat([clf.real_weight(), clf.active_virtual_weight()]).detach().numpy()
        emb = e.numpy()
        expected = np.zeros((3, 6))
        for i in range(3):
            for j in range(6):
                expected[i, j] = 16.0 * emb[i] @ weight[j] / (
                    np.linalg.norm(emb[i]) * np.linalg.norm(weight[j])
                )
        assert np.allclose(logits, expected, atol=1e-5)

    def test_zero_norm_embedding_warns_and_zeroes(self):
        clf = CosineClassifier(4, 3, 0)
        with pytest.warns(NumericalWarning):
            logits = clf(torch.zeros(1, 4))
        assert torch.equal(logits, torch.zeros(1, 3))

    def test_include_virtual_appends(self):
        clf = CosineClassifier(4, 3, 5)
        e = torch.randn(2, 4)
        assert clf(e).shape == (2, 3)
        assert clf(e, include_virtual=True).shape == (2, 8)


class TestExpansion:
    def test_expand_appends_and_preserves_prefix(self):
        torch.manual_seed(3)
        clf = CosineClassifier(8, 4, 8)
        before = clf.blocks[0].detach().clone()
        virtual_before = clf.virtual.detach().clone()
        clf.expand(4)
        assert clf.num_real == 8
        assert torch.equal(clf.blocks[0], before)
        assert torch.equal(clf.blocks[1], virtual_before[:4])
        assert clf.num_virtual_remaining == 4

    def test_old_class_logits_unchanged(self):
        torch.manual_seed(4)
        clf = CosineClassifier(8, 4, 8)
        e = torch.randn(6, 8)
        old = clf(e)
        clf.expand(4)
        assert torch.equal(clf(e)[:, :4], old)

    def test_old_argmax_preserved(self):
        torch.manual_seed(5)
        clf = CosineClassifier(8, 4, 8)
        e = torch.randn(64, 8)
        old_argmax = clf(e).argmax(dim=1)
        clf.expand(4)
        assert torch.equal(clf(e)[:, :4].argmax(dim=1), old_argmax)

    def test_capacity_error_when_virtual_exhausted(self):
        clf = CosineClassifier(8, 10, 20)
        clf.expand(10)
        clf.expand(10)
        with pytest.raises(CapacityError):
            clf.expand(10)

    def test_real_count_stays_multiple_of_base(self):
        clf = CosineClassifier(8, 5, 10)
        clf.expand(5)
        assert clf.num_real % 5 == 0


class TestBuildModels:
    def test_virtual_count_is_classes_times_stages(self):
        config = ModelConfig(num_classes=10, stages=8, backbone_channels=(8,), split_index=1,
                             embedding_dim=8)
        _, defense, _ = build_models(config, 0)
        assert defense.classifier.num_virtual_total == 80

    def test_same_seed_same_digests(self, tiny_model_config):
        models_a = build_models(tiny_model_config, seed_for(1, "models"))
        models_b = build_models(tiny_model_config, seed_for(1, "models"))
        for a, b in zip(models_a, models_b):
            assert module_digest(a) == module_digest(b)

    def test_different_seed_different_digests(self, tiny_model_config):
        a = build_models(tiny_model_config, 1)[0]
        b = build_models(tiny_model_config, 2)[0]
        assert module_digest(a) != module_digest(b)

    def test_dim_mismatch_rejected(self):
        extractor = ConvBackbone(small_backbone_config(embedding_dim=12))
        classifier = CosineClassifier(8, 4, 4)
        with pytest.raises(ModelError, match="d="):
            DefenseModel(extractor, classifier)

    def test_stat_length_validated(self):
        config = small_backbone_config(input_mean=(0.5,))
        with pytest.raises(ModelError, match="input_mean"):
            build_models(config, 0)


class TestWeightEstimator:
    def test_outputs_form_probability_vector(self, fresh_models):
        _, _, estimator = fresh_models
        estimator.eval()
        out = estimator(torch.rand(16, 3, 12, 12))
        assert bool((out >= 0).all())
        assert torch.allclose(out.sum(dim=1), torch.ones(16), atol=1e-6)

    def test_untrained_outputs_near_half(self, fresh_models):
        _, _, estimator = fresh_models
        estimator.eval()
        out = estimator(torch.rand(64, 3, 12, 12))
        assert abs(float(out[:, 0].mean()) - 0.5) < 0.2


class TestCheckpoints:
    def test_roundtrip_with_expansion(self, tiny_model_config, tmp_path):
        _, defense, _ = build_models(tiny_model_config, 3)
        defense.classifier.expand(tiny_model_config.num_classes)
        digest = module_digest(defense)
        save_checkpoint(tmp_path / "d.pt", defense, "defense", defense.stage, "hash")
        _, fresh, _ = build_models(tiny_model_config, 4)
        meta = load_checkpoint(tmp_path / "d.pt", fresh, "defense")
        assert meta["stage"] == 1
        assert module_digest(fresh) == digest

    def test_kind_mismatch_rejected(self, tiny_model_config, tmp_path):
        target, defense, _ = build_models(tiny_model_config, 3)
        save_checkpoint(tmp_path / "t.pt", target, "target", 0, "hash")
        with pytest.raises(ModelError, match="kind"):
            load_checkpoint(tmp_path / "t.pt", defense, "defense")

    def test_frozen_extractor_digest_stable(self, fresh_models):
        _, defense, _ = fresh_models
        defense.freeze_extractor()
        before = module_digest(defense.extractor)
        defense.classifier.expand(4)
        assert module_digest(defense.extractor) == before
