import numpy as np
import pytest
from PIL import Image

from continual_defense.attacks import make_attack, verify_perturbation, with_seed
from continual_defense.data import (
    BudgetIndexSet,
    LabeledDataset,
    SyntheticSpec,
    apply_attack_to_budget,
    load_dataset,
    make_synthetic,
    sample_budget,
)
from continual_defense.errors import BudgetError, DatasetError


class TestSyntheticDataset:
    def test_counts_match_spec(self):
        spec = SyntheticSpec(classes=10, train_per_class=100, test_per_class=20, seed=7)
        train = make_synthetic(spec, "train")
        test = make_synthetic(spec, "test")
        assert len(train) == 1000 and len(test) == 200
        assert train.num_classes == 10
        for c in range(10):
            assert len(train.class_indices(c)) == 100
            assert len(test.class_indices(c)) == 20

    def test_deterministic_regeneration(self):
        spec = SyntheticSpec(classes=5, train_per_class=10, test_per_class=4, seed=7)
        a = make_synthetic(spec, "train")
        b = make_synthetic(spec, "train")
        assert np.array_equal(a.images, b.images)
        assert np.array_equal(a.labels, b.labels)

    def test_different_seeds_differ(self):
        a = make_synthetic(SyntheticSpec(classes=3, train_per_class=5, seed=1), "train")
        b = make_synthetic(SyntheticSpec(classes=3, train_per_class=5, seed=2), "train")
        assert not np.array_equal(a.images, b.images)

    def test_pixels_in_unit_interval(self):
        data = make_synthetic(SyntheticSpec(classes=3, train_per_class=8, contrast=0.4), "train")
        assert data.images.min() >= 0.0 and data.images.max() <= 1.0

    def test_train_test_splits_independent(self):
        spec = SyntheticSpec(classes=3, train_per_class=8, test_per_class=8, seed=5)
        train = make_synthetic(spec, "train")
        test = make_synthetic(spec, "test")
        assert not np.array_equal(train.images[:8], test.images[:8])


class TestLabeledDataset:
    def test_label_out_of_range_rejected(self):
        images = np.zeros((3, 4, 4, 1), dtype=np.float32)
        with pytest.raises(DatasetError, match="label outside"):
            LabeledDataset(images, np.array([0, 1, 5]), "train", 3)

    def test_pixel_out_of_range_rejected(self):
        images = np.full((2, 4, 4, 1), 1.2, dtype=np.float32)
        with pytest.raises(DatasetError, match="0, 1"):
            LabeledDataset(images, np.array([0, 1]), "train", 2)

    def test_bad_split_rejected(self):
        images = np.zeros((1, 4, 4, 1), dtype=np.float32)
        with pytest.raises(DatasetError):
            LabeledDataset(images, np.array([0]), "validation", 1)


class TestLoadDataset:
    def test_missing_source_errors(self):
        with pytest.raises(DatasetError, match="does not exist"):
            load_dataset("/nonexistent/dataset/path", "train")

    def test_unknown_kind_errors(self):
        with pytest.raises(DatasetError, match="unknown dataset kind"):
            load_dataset({"kind": "imagenet"}, "train")

    def test_directory_roundtrip(self, tmp_path):
        rng = np.random.default_rng(0)
        for label in range(2):
            class_dir = tmp_path / "train" / str(label)
            class_dir.mkdir(parents=True)
            for i in range(3):
                arr = rng.integers(0, 255, size=(8, 8, 3), dtype=np.uint8)
                Image.fromarray(arr).save(class_dir / f"{i}.png")
        ds = load_dataset({"kind": "directory", "root": str(tmp_path)}, "train")
        assert len(ds) == 6 and ds.num_classes == 2
        assert ds.images.shape == (6, 8, 8, 3)

    def test_directory_label_beyond_declared_classes(self, tmp_path):
        class_dir = tmp_path / "train" / "12"
        class_dir.mkdir(parents=True)
        Image.fromarray(np.zeros((4, 4, 3), dtype=np.uint8)).save(class_dir / "a.png")
        with pytest.raises(DatasetError, match="label 12"):
            load_dataset({"kind": "directory", "root": str(tmp_path), "num_classes": 10}, "train")


class TestSampleBudget:
    def test_paper_budget_shape(self, tiny_train):
        budget = sample_budget(tiny_train, 4, 10, stage=1, seed=3)
        assert len(budget) == 40
        for c in range(4):
            assert len(budget.indices_by_class[c]) == 10
            assert all(tiny_train.labels[i] == c for i in budget.indices_by_class[c])

    def test_zero_budget(self, tiny_train):
        budget = sample_budget(tiny_train, 4, 0, stage=1, seed=3)
        assert len(budget) == 0

    def test_insufficient_class_errors(self):
        images = np.zeros((3, 4, 4, 1), dtype=np.float32)
        ds = LabeledDataset(images, np.array([0, 0, 1]), "train", 2)
        with pytest.raises(BudgetError, match="class 1"):
            sample_budget(ds, 2, 2, stage=0, seed=0)

    def test_without_replacement_and_deterministic(self, tiny_train):
        a = sample_budget(tiny_train, 4, 8, stage=2, seed=9)
        b = sample_budget(tiny_train, 4, 8, stage=2, seed=9)
        assert a.indices_by_class == b.indices_by_class
        for indices in a.indices_by_class.values():
            assert len(set(indices)) == len(indices)

    def test_stages_draw_independently(self, tiny_train):
        a = sample_budget(tiny_train, 4, 8, stage=1, seed=9)
        b = sample_budget(tiny_train, 4, 8, stage=2, seed=9)
        assert a.indices_by_class != b.indices_by_class

    def test_partition_property(self, tiny_train):
        rng = np.random.default_rng(0)
        for _ in range(10):
            k = int(rng.integers(1, 8))
            budget = sample_budget(tiny_train, 4, k, stage=int(rng.integers(0, 5)), seed=int(rng.integers(0, 100)))
            labels = budget.labels
            for c in range(4):
                assert (labels == c).sum() == k

    def test_save_load_roundtrip(self, tiny_train, tmp_path):
        budget = sample_budget(tiny_train, 4, 5, stage=3, seed=17)
        path = tmp_path / "budget.json"
        budget.save(path)
        loaded = BudgetIndexSet.load(path)
        assert loaded.stage == 3 and loaded.seed == 17
        assert loaded.indices_by_class == budget.indices_by_class


class TestApplyAttackToBudget:
    def test_zero_eps_keeps_images(self, tiny_train, trained_target):
        budget = sample_budget(tiny_train, 4, 3, stage=1, seed=0)
        spec = make_attack("bim", eps=0.0, step_size=0.0)
        out = apply_attack_to_budget(budget, spec, tiny_train, trained_target)
        assert np.array_equal(out.images, tiny_train.images[budget.flat_indices])

    def test_labels_preserved(self, tiny_train, trained_target):
        budget = sample_budget(tiny_train, 4, 3, stage=1, seed=0)
        spec = with_seed(make_attack("pgd"), 1)
        out = apply_attack_to_budget(budget, spec, tiny_train, trained_target)
        assert np.array_equal(out.labels, tiny_train.labels[budget.flat_indices])

    def test_perturbations_within_ball(self, tiny_train, trained_target):
        budget = sample_budget(tiny_train, 4, 5, stage=1, seed=0)
        spec = with_seed(make_attack("pgd"), 1)
        out = apply_attack_to_budget(budget, spec, tiny_train, trained_target)
        ok, violation = verify_perturbation(
            tiny_train.images[budget.flat_indices], out.images, spec
        )
        assert ok, f"violation {violation}"
