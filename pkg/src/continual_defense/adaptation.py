"""Stage-wise adaptation: label reassignment, redundant-budget filtering,
classifier expansion, few-shot fine-tuning with prototype augmentation, and
the prototype cache that is the only memory carried across stages.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .data import DefenseBudget
from .errors import CacheError
from .models import ConvBackbone, DefenseModel
from .utils import batched, images_to_tensor, labels_to_tensor


@dataclass
class PrototypeEntry:
    """One class-mean embedding; deliberately carries no image data."""

    class_id: int
    stage: int
    vector: np.ndarray


class PrototypeCache:
    """Append-only store of per-(attack, class) mean embeddings.

    Memory is bounded by capacity * embedding_dim floats regardless of how many
    budget samples were seen; at most one prototype exists per expanded class id.
    """

    def __init__(self, embedding_dim: int, capacity: int):
        self.embedding_dim = embedding_dim
        self.capacity = capacity
        self.entries: list[PrototypeEntry] = []

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def nbytes(self) -> int:
        return sum(entry.vector.nbytes for entry in self.entries)

    def class_ids(self) -> np.ndarray:
        return np.asarray([e.class_id for e in self.entries], dtype=np.int64)

    def vectors(self) -> np.ndarray:
        if not self.entries:
            return np.zeros((0, self.embedding_dim), dtype=np.float32)
        return np.stack([e.vector for e in self.entries])

    def append(self, entries: list[PrototypeEntry]) -> None:
        existing = set(int(c) for c in self.class_ids())
        for entry in entries:
            if entry.vector.shape != (self.embedding_dim,):
                raise CacheError(
                    f"prototype dim {entry.vector.shape} != ({self.embedding_dim},)"
                )
            if entry.class_id in existing:
                raise CacheError(f"duplicate prototype for class {entry.class_id}")
            existing.add(entry.class_id)
        if len(self.entries) + len(entries) > self.capacity:
            raise CacheError(
                f"cache capacity {self.capacity} exceeded by {len(entries)} new entries"
            )
        self.entries.extend(
            PrototypeEntry(int(e.class_id), int(e.stage), np.asarray(e.vector, dtype=np.float32))
            for e in entries
        )

    def save(self, path: str | Path) -> None:
        """Binary container (.npz) plus a human-readable sidecar index."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        np.savez(
            path,
            class_ids=self.class_ids(),
            stages=np.asarray([e.stage for e in self.entries], dtype=np.int64),
            vectors=self.vectors(),
            capacity=np.asarray([self.capacity]),
        )
        index = [
            {"class_id": e.class_id, "stage": e.stage, "norm": round(float(np.linalg.norm(e.vector)), 6)}
            for e in self.entries
        ]
        path.with_suffix(".json").write_text(json.dumps(
            {"embedding_dim": self.embedding_dim, "capacity": self.capacity, "entries": index},
            indent=2,
        ))

    @classmethod
    def load(cls, path: str | Path, embedding_dim: int | None = None) -> "PrototypeCache":
        with np.load(Path(path)) as payload:
            vectors = payload["vectors"]
            dim = embedding_dim or (vectors.shape[1] if vectors.size else 0)
            cache = cls(dim, int(payload["capacity"][0]))
            cache.entries = [
                PrototypeEntry(int(c), int(s), v)
                for c, s, v in zip(payload["class_ids"], payload["stages"], vectors)
            ]
        return cache


def reassign_label(y, num_classes: int, stage: int):
    """Map original labels into the expanded label space: y + N * stage."""
    y_arr = np.asarray(y)
    if stage < 0:
        raise ValueError("stage must be >= 0")
    if y_arr.size and (y_arr.min() < 0 or y_arr.max() >= num_classes):
        raise ValueError(f"label outside [0, {num_classes})")
    out = y_arr + num_classes * stage
    return out if y_arr.ndim else int(out)


@dataclass
class FilterReport:
    total: int
    kept: int
    removed: int
    kept_indices: np.ndarray


def filter_redundant(budget: DefenseBudget, predict_fn, num_classes: int) -> tuple[DefenseBudget, FilterReport]:
    """Drop budget samples the current ensemble already classifies correctly.

    `predict_fn` maps an NHWC image array to class-space predictions (already
    folded mod N); survivors keep their original labels and ordering.
    """
    preds = np.asarray(predict_fn(budget.images))
    keep = preds != budget.labels
    kept_idx = np.nonzero(keep)[0]
    survivors = DefenseBudget(
        stage=budget.stage,
        images=budget.images[keep],
        labels=budget.labels[keep],
        source_indices=budget.source_indices[keep],
        attack_names=budget.attack_names,
    )
    report = FilterReport(total=len(budget), kept=int(keep.sum()), removed=int((~keep).sum()), kept_indices=kept_idx)
    return survivors, report


def compute_prototypes(
    extractor: ConvBackbone, budget: DefenseBudget, stage: int, num_classes: int, batch_size: int = 256
) -> list[PrototypeEntry]:
    """Per-class mean embedding of the (pre-filter) budget, in expanded label space."""
    if len(budget) == 0:
        return []
    embeddings = embed_images(extractor, budget.images, batch_size)
    reassigned = reassign_label(budget.labels, num_classes, stage)
    entries = []
    for class_id in np.unique(reassigned):
        mask = reassigned == class_id
        entries.append(
            PrototypeEntry(int(class_id), stage, embeddings[mask].mean(axis=0).astype(np.float32))
        )
    return entries


def embed_images(extractor: ConvBackbone, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
    was_training = extractor.training
    extractor.eval()
    chunks = []
    with torch.no_grad():
        for start, stop in batched(len(images), batch_size):
            chunks.append(extractor(images_to_tensor(images[start:stop])).cpu().numpy())
    extractor.train(was_training)
    return np.concatenate(chunks) if chunks else np.zeros((0, extractor.embedding_dim), dtype=np.float32)


def oversample_prototypes(
    cache: PrototypeCache, batch_size: int, rng: np.random.Generator, noise_sigma: float = 0.0
) -> tuple[np.ndarray, np.ndarray]:
    """Uniformly sample `batch_size` prototypes with replacement (optionally
    jittered with isotropic Gaussian noise)."""
    if len(cache) == 0:
        raise CacheError("cannot oversample from an empty prototype cache")
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    picks = rng.integers(0, len(cache), size=batch_size)
    vectors = cache.vectors()[picks]
    if noise_sigma > 0:
        vectors = vectors + rng.normal(0.0, noise_sigma, size=vectors.shape).astype(np.float32)
    labels = cache.class_ids()[picks]
    return vectors, labels


def adaptation_loss(
    model: DefenseModel,
    budget_images: torch.Tensor,
    budget_labels: torch.Tensor,
    proto_vectors: torch.Tensor,
    proto_labels: torch.Tensor,
    lam: float,
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Fine-tuning loss: CE on budget samples plus lam * CE on oversampled
    prototypes fed straight into the classifier (extractor bypassed)."""
    num_real = model.classifier.num_real
    if bool((budget_labels >= num_real).any()) or bool((proto_labels >= num_real).any()):
        raise ValueError(f"label outside the current {num_real}-class space")
    if proto_vectors is None or len(proto_vectors) == 0:
        raise CacheError("adaptation loss requires a nonempty prototype batch")
    loss_ce = F.cross_entropy(model(budget_images), budget_labels)
    loss_proto = F.cross_entropy(model.classifier(proto_vectors), proto_labels)
    return loss_ce, loss_proto, loss_ce + lam * loss_proto


@dataclass
class AdaptationReport:
    """What one adaptation stage did: filtering, expansion, loss trajectory."""

    stage: int
    attack_names: tuple[str, ...]
    budget_before: int
    budget_after: int
    expanded: bool
    skipped: bool
    prototypes_added: int
    epochs: list[dict] = field(default_factory=list)
    wall_time: float = 0.0


@dataclass
class AdaptationSettings:
    epochs: int = 4
    lr: float = 0.05
    momentum: float = 0.9
    batch_size: int = 64
    lam: float = 0.5
    proto_noise_sigma: float = 0.0
    min_survivors: int = 1
    init_from_virtual: bool = True
    finetune_old_columns: bool = False
    use_prototype_loss: bool = True


def adapt_stage(
    model: DefenseModel,
    cache: PrototypeCache,
    budget: DefenseBudget,
    stage: int,
    settings: AdaptationSettings,
    *,
    predict_fn,
    rng: np.random.Generator,
) -> AdaptationReport:
    """Run one adaptation stage in place.

    Pipeline: reassign labels -> filter redundant samples -> (if enough
    survivors) expand the classifier from virtual columns, fine-tune only the
    new block, then cache prototypes computed on the full pre-filter budget.
    A fully redundant budget skips the stage and leaves every parameter and the
    cache untouched.
    """
    if stage != model.stage + 1:
        raise ValueError(f"stage {stage} does not follow model stage {model.stage}")
    if not model.extractor.frozen:
        raise ValueError("extractor must be frozen before adaptation")
    started = time.perf_counter()
    num_classes = model.classifier.base_classes

    survivors, filter_report = filter_redundant(budget, predict_fn, num_classes)
    if filter_report.kept < settings.min_survivors:
        return AdaptationReport(
            stage=stage,
            attack_names=budget.attack_names,
            budget_before=filter_report.total,
            budget_after=filter_report.kept,
            expanded=False,
            skipped=True,
            prototypes_added=0,
            wall_time=time.perf_counter() - started,
        )

    model.classifier.expand(num_classes, init_from_virtual=settings.init_from_virtual)
    trainable = [model.classifier.blocks[-1]]
    if settings.finetune_old_columns:
        trainable = list(model.classifier.blocks)
    opt = torch.optim.SGD(trainable, lr=settings.lr, momentum=settings.momentum)

    x_all = images_to_tensor(survivors.images)
    y_all = labels_to_tensor(reassign_label(survivors.labels, num_classes, stage))
    epoch_log: list[dict] = []
    for epoch in range(settings.epochs):
        order = rng.permutation(len(x_all))
        sums = {"loss_ce": 0.0, "loss_proto": 0.0, "loss_total": 0.0}
        batch_count = 0
        for start in range(0, len(order), settings.batch_size):
            idx = torch.from_numpy(order[start : start + settings.batch_size])
            batch, targets = x_all[idx], y_all[idx]
            opt.zero_grad()
            if settings.use_prototype_loss:
                proto_vec, proto_lab = oversample_prototypes(
                    cache, len(batch), rng, settings.proto_noise_sigma
                )
                loss_ce, loss_proto, loss = adaptation_loss(
                    model,
                    batch,
                    targets,
                    torch.from_numpy(proto_vec),
                    labels_to_tensor(proto_lab),
                    settings.lam,
                )
            else:
                loss_ce = F.cross_entropy(model(batch), targets)
                loss_proto = torch.zeros(())
                loss = loss_ce
            loss.backward()
            opt.step()
            sums["loss_ce"] += loss_ce.item()
            sums["loss_proto"] += loss_proto.item()
            sums["loss_total"] += loss.item()
            batch_count += 1
        record = {key: value / max(batch_count, 1) for key, value in sums.items()}
        record["epoch"] = epoch
        epoch_log.append(record)

    new_entries = compute_prototypes(model.extractor, budget, stage, num_classes)
    cache.append(new_entries)
    return AdaptationReport(
        stage=stage,
        attack_names=budget.attack_names,
        budget_before=filter_report.total,
        budget_after=filter_report.kept,
        expanded=True,
        skipped=False,
        prototypes_added=len(new_entries),
        epochs=epoch_log,
        wall_time=time.perf_counter() - started,
    )
