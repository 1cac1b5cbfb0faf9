"""Dataset ingestion, synthetic data generation, and defense-budget sampling.

Images are kept in raw [0,1] pixel units at the dataset boundary; per-channel
normalization happens inside the models so that attack budgets stay expressed
in pixel units end to end.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import BudgetError, DatasetError

DATA_ROOT_ENV = "CONTINUAL_DEFENSE_DATA_ROOT"


@dataclass(frozen=True)
class SyntheticSpec:
    """Low-frequency class-template image generator.

    Each class is a smooth random template (a few 2D cosine modes); samples add
    smooth within-class jitter. `contrast` controls the RMS amplitude of the
    class templates and therefore how far apart classes sit relative to an
    attacker's perturbation budget; `jitter` controls within-class spread.
    """

    classes: int = 10
    train_per_class: int = 100
    test_per_class: int = 20
    image_size: int = 16
    channels: int = 3
    contrast: float = 0.05
    jitter: float = 0.02
    modes: int = 4
    seed: int = 7


@dataclass
class LabeledDataset:
    """Images in NHWC float32 [0,1] with integer labels in [0, num_classes)."""

    images: np.ndarray
    labels: np.ndarray
    split: str
    num_classes: int

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise DatasetError(f"images must be NHWC, got shape {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise DatasetError("images and labels length mismatch")
        if self.split not in ("train", "test"):
            raise DatasetError(f"split must be train|test, got {self.split!r}")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise DatasetError(
                f"label outside [0, {self.num_classes}): found {int(self.labels.max())}"
            )
        if len(self.images) and (self.images.min() < 0.0 or self.images.max() > 1.0):
            raise DatasetError("pixel values must lie in [0, 1]")

    def __len__(self) -> int:
        return len(self.images)

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def class_indices(self, label: int) -> np.ndarray:
        return np.nonzero(self.labels == label)[0]

    def channel_stats(self) -> tuple[np.ndarray, np.ndarray]:
        """Per-channel mean/std over the whole split (used by model-side normalization)."""
        mean = self.images.mean(axis=(0, 1, 2))
        std = self.images.std(axis=(0, 1, 2))
        return mean, np.maximum(std, 1e-3)


def _cosine_basis(size: int, modes: int) -> np.ndarray:
    """Low-frequency 2D cosine basis images, shape (n_modes, size, size)."""
    coords = (np.arange(size) + 0.5) / size
    basis = []
    for p in range(modes):
        for q in range(modes):
            if p == 0 and q == 0:
                continue
            basis.append(np.outer(np.cos(np.pi * p * coords), np.cos(np.pi * q * coords)))
    return np.stack(basis)


def _render(coeffs: np.ndarray, basis: np.ndarray, rms: float) -> np.ndarray:
    """Render coefficient stacks (..., n_modes, channels) to images with target RMS."""
    img = np.einsum("...mc,mhw->...hwc", coeffs, basis)
    norm = np.sqrt(np.mean(np.square(img), axis=(-3, -2, -1), keepdims=True))
    return img * (rms / np.maximum(norm, 1e-12))


def make_synthetic(spec: SyntheticSpec, split: str) -> LabeledDataset:
    """Deterministically generate one split of the synthetic dataset."""
    rng = np.random.default_rng([spec.seed, 0 if split == "train" else 1])
    basis = _cosine_basis(spec.image_size, spec.modes)
    n_modes = len(basis)

    # Class templates are drawn from a split-independent stream so train and
    # test share the same class geometry.
    template_rng = np.random.default_rng([spec.seed, 2])
    templates = _render(
        template_rng.standard_normal((spec.classes, n_modes, spec.channels)),
        basis,
        spec.contrast,
    )

    per_class = spec.train_per_class if split == "train" else spec.test_per_class
    labels = np.repeat(np.arange(spec.classes), per_class)
    jitter = _render(
        rng.standard_normal((len(labels), n_modes, spec.channels)), basis, spec.jitter
    )
    images = np.clip(0.5 + templates[labels] + jitter, 0.0, 1.0).astype(np.float32)
    return LabeledDataset(images, labels, split, spec.classes)


def _load_directory(root: Path, split: str, num_classes: int | None) -> LabeledDataset:
    from PIL import Image

    split_dir = root / split if (root / split).is_dir() else root
    class_dirs = sorted(
        (d for d in split_dir.iterdir() if d.is_dir() and d.name.isdigit()),
        key=lambda d: int(d.name),
    )
    if not class_dirs:
        raise DatasetError(f"no class subdirectories under {split_dir}")
    if num_classes is None:
        num_classes = max(int(d.name) for d in class_dirs) + 1
    images, labels = [], []
    for class_dir in class_dirs:
        label = int(class_dir.name)
        if label >= num_classes:
            raise DatasetError(
                f"directory label {label} outside [0, {num_classes}) in {split_dir}"
            )
        for path in sorted(class_dir.iterdir()):
            with Image.open(path) as img:
                arr = np.asarray(img.convert("RGB"), dtype=np.float32) / 255.0
            images.append(arr)
            labels.append(label)
    shapes = {img.shape for img in images}
    if len(shapes) > 1:
        raise DatasetError(f"inconsistent image shapes in {split_dir}: {shapes}")
    return LabeledDataset(np.stack(images), np.asarray(labels), split, num_classes)


def _load_cifar10(root: str | None, split: str) -> LabeledDataset:
    try:
        from torchvision.datasets import CIFAR10
    except ImportError as exc:
        raise DatasetError("cifar10 requires torchvision") from exc
    root = root or os.environ.get(DATA_ROOT_ENV, "./data")
    try:
        ds = CIFAR10(root=root, train=(split == "train"), download=False)
    except RuntimeError as exc:
        raise DatasetError(f"cifar10 not found under {root}: {exc}") from exc
    images = ds.data.astype(np.float32) / 255.0
    return LabeledDataset(images, np.asarray(ds.targets), split, 10)


def load_dataset(source, split: str, data_root: str | None = None) -> LabeledDataset:
    """Load one split from a synthetic spec, a class-labeled directory, or a named set.

    `source` may be a SyntheticSpec, a dict (`kind`: synthetic|directory|cifar10),
    or a filesystem path to a directory of integer-named class subdirectories.
    """
    if isinstance(source, SyntheticSpec):
        return make_synthetic(source, split)
    if isinstance(source, dict):
        kind = source.get("kind", "synthetic")
        if kind == "synthetic":
            return make_synthetic(SyntheticSpec(**{k: v for k, v in source.items() if k != "kind"}), split)
        if kind == "directory":
            root = Path(source.get("root") or data_root or os.environ.get(DATA_ROOT_ENV, "."))
            if not root.exists():
                raise DatasetError(f"dataset directory {root} does not exist")
            return _load_directory(root, split, source.get("num_classes"))
        if kind == "cifar10":
            return _load_cifar10(source.get("root") or data_root, split)
        raise DatasetError(f"unknown dataset kind {kind!r}")
    if isinstance(source, (str, Path)):
        path = Path(source)
        if path.exists():
            return _load_directory(path, split, None)
        if str(source) == "cifar10":
            return _load_cifar10(data_root, split)
        raise DatasetError(f"dataset source {source!r} does not exist")
    raise DatasetError(f"unsupported dataset source {type(source).__name__}")


@dataclass
class BudgetIndexSet:
    """Deterministic K-per-class draw of train indices for one adaptation stage."""

    stage: int
    seed: int
    samples_per_class: int
    indices_by_class: dict[int, list[int]] = field(default_factory=dict)

    @property
    def flat_indices(self) -> np.ndarray:
        out = []
        for label in sorted(self.indices_by_class):
            out.extend(self.indices_by_class[label])
        return np.asarray(out, dtype=np.int64)

    @property
    def labels(self) -> np.ndarray:
        out = []
        for label in sorted(self.indices_by_class):
            out.extend([label] * len(self.indices_by_class[label]))
        return np.asarray(out, dtype=np.int64)

    def __len__(self) -> int:
        return sum(len(v) for v in self.indices_by_class.values())

    def save(self, path: str | Path) -> None:
        payload = {
            "stage": self.stage,
            "seed": self.seed,
            "samples_per_class": self.samples_per_class,
            "indices_by_class": {str(k): list(map(int, v)) for k, v in self.indices_by_class.items()},
        }
        Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True))

    @classmethod
    def load(cls, path: str | Path) -> "BudgetIndexSet":
        payload = json.loads(Path(path).read_text())
        return cls(
            stage=payload["stage"],
            seed=payload["seed"],
            samples_per_class=payload["samples_per_class"],
            indices_by_class={int(k): v for k, v in payload["indices_by_class"].items()},
        )


def sample_budget(
    dataset: LabeledDataset, num_classes: int, k: int, stage: int, seed: int
) -> BudgetIndexSet:
    """Draw K train indices per class, without replacement within the stage."""
    if dataset.num_classes != num_classes:
        raise BudgetError(
            f"dataset has {dataset.num_classes} classes, budget requested {num_classes}"
        )
    rng = np.random.default_rng([seed, stage])
    indices_by_class: dict[int, list[int]] = {}
    for label in range(num_classes):
        pool = dataset.class_indices(label)
        if len(pool) < k:
            raise BudgetError(
                f"class {label} has {len(pool)} samples, budget needs {k}"
            )
        chosen = rng.choice(pool, size=k, replace=False) if k else np.empty(0, dtype=np.int64)
        indices_by_class[label] = sorted(int(i) for i in chosen)
    return BudgetIndexSet(stage=stage, seed=seed, samples_per_class=k, indices_by_class=indices_by_class)


@dataclass
class DefenseBudget:
    """The N x K labeled adversarial samples delivered to the defender at a stage."""

    stage: int
    images: np.ndarray
    labels: np.ndarray
    source_indices: np.ndarray
    attack_names: tuple[str, ...]

    def __len__(self) -> int:
        return len(self.images)


def apply_attack_to_budget(budget: BudgetIndexSet, attack_spec, dataset: LabeledDataset, target_model) -> DefenseBudget:
    """Replace the selected clean samples by their adversarial counterparts.

    Ground-truth labels are preserved; the attacked images are exactly what the
    attacker would publish, with no augmentation applied.
    """
    from .attacks import generate

    indices = budget.flat_indices
    clean = dataset.images[indices]
    labels = dataset.labels[indices]
    adv = generate(attack_spec, target_model, clean, labels)
    return DefenseBudget(
        stage=budget.stage,
        images=adv.images,
        labels=labels,
        source_indices=indices,
        attack_names=(attack_spec.name,),
    )


def merge_budgets(budgets: list[DefenseBudget]) -> DefenseBudget:
    """Concatenate same-stage budgets from multiple attacks into one block."""
    if not budgets:
        raise BudgetError("cannot merge zero budgets")
    stages = {b.stage for b in budgets}
    if len(stages) > 1:
        raise BudgetError(f"cannot merge budgets from different stages {stages}")
    return DefenseBudget(
        stage=budgets[0].stage,
        images=np.concatenate([b.images for b in budgets]),
        labels=np.concatenate([b.labels for b in budgets]),
        source_indices=np.concatenate([b.source_indices for b in budgets]),
        attack_names=tuple(name for b in budgets for name in b.attack_names),
    )
