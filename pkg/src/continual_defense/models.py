"""Target model, defense model (split extractor + expandable cosine classifier),
and the lightweight routing weight estimator.

The defense classifier keeps one parameter block per adaptation stage plus a
bank of virtual columns reserved for future stages. Old blocks are never
touched after their stage, which is what makes the non-forgetting guarantees
checkable as digest equality.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from pathlib import Path

import torch
import torch.nn.functional as F
from torch import nn

from .errors import CapacityError, ModelError, NumericalWarning
from .utils import module_digest

CHECKPOINT_FORMAT_VERSION = 1


@dataclass
class ModelConfig:
    """Architecture hyperparameters shared by the model builders."""

    num_classes: int = 10
    stages: int = 8
    in_channels: int = 3
    backbone_channels: tuple[int, ...] = (32, 64, 128, 128)
    embedding_dim: int = 128
    split_index: int = 3
    norm: str = "group"
    gn_groups: int = 8
    bias: bool = True
    classifier_scale: float = 16.0
    estimator_channels: tuple[int, ...] = (16, 32, 64, 64)
    input_mean: tuple[float, ...] = (0.5, 0.5, 0.5)
    input_std: tuple[float, ...] = (0.25, 0.25, 0.25)

    @property
    def num_virtual(self) -> int:
        return self.num_classes * self.stages


def _norm_layer(kind: str, channels: int, gn_groups: int) -> nn.Module:
    if kind == "none":
        return nn.Identity()
    if kind == "group":
        groups = max(g for g in range(1, gn_groups + 1) if channels % g == 0)
        return nn.GroupNorm(groups, channels)
    raise ModelError(f"unknown norm kind {kind!r}")


class ConvBackbone(nn.Module):
    """Small convolutional feature extractor with a declared h1/h2 split point.

    `split_index` counts how many conv blocks belong to the lower half h1; the
    remaining blocks plus global pooling and the embedding projection form h2,
    so that extract(x) == forward_h2(forward_h1(x)) holds by construction.
    """

    def __init__(self, config: ModelConfig):
        super().__init__()
        channels = tuple(config.backbone_channels)
        if not 1 <= config.split_index <= len(channels):
            raise ModelError(
                f"split_index {config.split_index} outside [1, {len(channels)}]"
            )
        self.split_index = config.split_index
        self.embedding_dim = config.embedding_dim
        blocks = []
        prev = config.in_channels
        for width in channels:
            blocks.append(
                nn.Sequential(
                    nn.Conv2d(prev, width, 3, padding=1, bias=config.bias),
                    _norm_layer(config.norm, width, config.gn_groups),
                    nn.ReLU(),
                    nn.AvgPool2d(2, ceil_mode=True),
                )
            )
            prev = width
        self.blocks = nn.ModuleList(blocks)
        self.project = nn.Linear(channels[-1], config.embedding_dim, bias=config.bias)
        # Standardizing the embedding keeps the shared (input-independent)
        # feature component from dominating the cosine similarity.
        self.embed_norm = nn.BatchNorm1d(config.embedding_dim)
        mean = torch.tensor(config.input_mean, dtype=torch.float32).view(1, -1, 1, 1)
        std = torch.tensor(config.input_std, dtype=torch.float32).view(1, -1, 1, 1)
        self.register_buffer("input_mean", mean)
        self.register_buffer("input_std", std)

    def forward_h1(self, batch: torch.Tensor) -> torch.Tensor:
        out = (batch - self.input_mean) / self.input_std
        for block in self.blocks[: self.split_index]:
            out = block(out)
        return out

    def forward_h2(self, hidden: torch.Tensor) -> torch.Tensor:
        out = hidden
        for block in self.blocks[self.split_index :]:
            out = block(out)
        out = out.mean(dim=(2, 3))
        return self.embed_norm(self.project(out))

    def forward(self, batch: torch.Tensor) -> torch.Tensor:
        return self.forward_h2(self.forward_h1(batch))

    def freeze(self) -> None:
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()

    @property
    def frozen(self) -> bool:
        return not any(p.requires_grad for p in self.parameters())


def forward_h1(extractor: ConvBackbone, batch: torch.Tensor) -> torch.Tensor:
    return extractor.forward_h1(batch)


def forward_h2(extractor: ConvBackbone, hidden: torch.Tensor) -> torch.Tensor:
    return extractor.forward_h2(hidden)


class CosineClassifier(nn.Module):
    """Cosine-similarity classifier with per-stage weight blocks + virtual columns.

    Logits are s * cos(w_j, e). Real columns live in `blocks` (one parameter
    tensor per stage, appended by `expand`); virtual columns are pre-assigned at
    construction and consumed as initializers when new stages arrive.
    """

    def __init__(self, embedding_dim: int, num_classes: int, num_virtual: int, scale: float = 16.0):
        super().__init__()
        self.embedding_dim = embedding_dim
        self.base_classes = num_classes
        self.blocks = nn.ParameterList([self._fresh_block(num_classes)])
        self.virtual = nn.Parameter(self._fresh_block(num_virtual).data)
        self.register_buffer("virtual_used", torch.tensor(0, dtype=torch.long))
        self.register_buffer("scale", torch.tensor(float(scale)))

    def _fresh_block(self, rows: int) -> nn.Parameter:
        std = (2.0 / self.embedding_dim) ** 0.5
        return nn.Parameter(torch.randn(rows, self.embedding_dim) * std)

    @property
    def num_real(self) -> int:
        return sum(block.shape[0] for block in self.blocks)

    @property
    def num_virtual_total(self) -> int:
        return self.virtual.shape[0]

    @property
    def num_virtual_remaining(self) -> int:
        return self.num_virtual_total - int(self.virtual_used)

    def real_weight(self) -> torch.Tensor:
        return torch.cat(list(self.blocks), dim=0)

    def active_virtual_weight(self) -> torch.Tensor:
        return self.virtual[int(self.virtual_used) :]

    def forward(self, embeddings: torch.Tensor, include_virtual: bool = False) -> torch.Tensor:
        # One matmul per block keeps each block's logits bitwise stable across
        # later expansions (a single growing GEMM would re-tile and re-round).
        weights = list(self.blocks)
        if include_virtual:
            weights.append(self.active_virtual_weight())
        if embeddings.shape[-1] != self.embedding_dim:
            raise ModelError(
                f"embedding dim {embeddings.shape[-1]} != classifier dim {self.embedding_dim}"
            )
        norms = embeddings.norm(dim=-1)
        if (norms < 1e-8).any():
            warnings.warn("zero-norm embedding; cosine logits fall back to 0", NumericalWarning)
        emb = F.normalize(embeddings, dim=-1, eps=1e-12)
        scale = float(self.scale)
        cols = [scale * emb @ F.normalize(w, dim=-1, eps=1e-12).t() for w in weights]
        return torch.cat(cols, dim=-1)

    def expand(self, num_new: int, init_from_virtual: bool = True) -> None:
        """Append `num_new` real columns; previous blocks stay bit-identical."""
        if init_from_virtual:
            if self.num_virtual_remaining < num_new:
                raise CapacityError(
                    f"need {num_new} virtual columns, only {self.num_virtual_remaining} remain"
                )
            used = int(self.virtual_used)
            new_block = nn.Parameter(self.virtual.data[used : used + num_new].clone())
            self.virtual_used += num_new
        else:
            new_block = nn.Parameter(self._fresh_block(num_new).data * 0.01)
        self.blocks.append(new_block)

    def block_digests(self) -> list[str]:
        from .utils import tensor_digest

        return [tensor_digest(block) for block in self.blocks]


def cosine_logits_against(embeddings: torch.Tensor, weight: torch.Tensor, scale: float) -> torch.Tensor:
    if embeddings.shape[-1] != weight.shape[-1]:
        raise ModelError(
            f"embedding dim {embeddings.shape[-1]} != classifier dim {weight.shape[-1]}"
        )
    norms = embeddings.norm(dim=-1)
    if (norms < 1e-8).any():
        warnings.warn("zero-norm embedding; cosine logits fall back to 0", NumericalWarning)
    emb = F.normalize(embeddings, dim=-1, eps=1e-12)
    w = F.normalize(weight, dim=-1, eps=1e-12)
    return scale * emb @ w.t()


def cosine_logits(classifier: CosineClassifier, embeddings: torch.Tensor, include_virtual: bool = False) -> torch.Tensor:
    return classifier(embeddings, include_virtual=include_virtual)


def expand_classifier(classifier: CosineClassifier, num_new: int, init_from_virtual: bool = True) -> CosineClassifier:
    classifier.expand(num_new, init_from_virtual=init_from_virtual)
    return classifier


class DefenseModel(nn.Module):
    """Feature extractor + expandable cosine classifier; stage = expansions so far."""

    def __init__(self, extractor: ConvBackbone, classifier: CosineClassifier):
        super().__init__()
        if extractor.embedding_dim != classifier.embedding_dim:
            raise ModelError(
                f"extractor d={extractor.embedding_dim} != classifier d={classifier.embedding_dim}"
            )
        self.extractor = extractor
        self.classifier = classifier

    @property
    def stage(self) -> int:
        return len(self.classifier.blocks) - 1

    def embed(self, batch: torch.Tensor) -> torch.Tensor:
        return self.extractor(batch)

    def forward(self, batch: torch.Tensor, include_virtual: bool = False) -> torch.Tensor:
        return self.classifier(self.extractor(batch), include_virtual=include_virtual)

    def freeze_extractor(self) -> None:
        self.extractor.freeze()

    def digests(self) -> dict:
        return {
            "extractor": module_digest(self.extractor),
            "classifier_blocks": self.classifier.block_digests(),
        }


class TargetModel(nn.Module):
    """The protected classifier: backbone + linear head, immutable once trained."""

    def __init__(self, extractor: ConvBackbone, num_classes: int):
        super().__init__()
        self.extractor = extractor
        self.head = nn.Linear(extractor.embedding_dim, num_classes)
        self.num_classes = num_classes

    def forward(self, batch: torch.Tensor) -> torch.Tensor:
        return self.head(self.extractor(batch))

    def freeze(self) -> None:
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()


class WeightEstimator(nn.Module):
    """4-layer ConvNet emitting a 2-way routing weight (target vs defense).

    The head starts small and symmetric, so an untrained estimator outputs
    weights near (0.5, 0.5) on average.
    """

    def __init__(self, config: ModelConfig):
        super().__init__()
        layers = []
        prev = config.in_channels
        for i, width in enumerate(config.estimator_channels):
            stride = 2 if i < len(config.estimator_channels) - 1 else 1
            layers += [
                nn.Conv2d(prev, width, 3, stride=stride, padding=1),
                nn.BatchNorm2d(width),
                nn.ReLU(),
            ]
            prev = width
        self.features = nn.Sequential(*layers)
        self.feature_norm = nn.BatchNorm1d(prev)
        self.head = nn.Linear(prev, 2)
        nn.init.normal_(self.head.weight, std=0.01)
        nn.init.zeros_(self.head.bias)
        mean = torch.tensor(config.input_mean, dtype=torch.float32).view(1, -1, 1, 1)
        std = torch.tensor(config.input_std, dtype=torch.float32).view(1, -1, 1, 1)
        self.register_buffer("input_mean", mean)
        self.register_buffer("input_std", std)

    def forward_logits(self, batch: torch.Tensor) -> torch.Tensor:
        out = self.features((batch - self.input_mean) / self.input_std)
        return self.head(self.feature_norm(out.mean(dim=(2, 3))))

    def forward(self, batch: torch.Tensor) -> torch.Tensor:
        """Normalized weight vector: nonnegative, rows sum to 1."""
        return torch.softmax(self.forward_logits(batch), dim=-1)


def build_models(config: ModelConfig, seed: int = 0) -> tuple[TargetModel, DefenseModel, WeightEstimator]:
    """Construct the three freshly initialized models from one seed.

    Two calls with the same config and seed produce digest-identical models.
    """
    if len(config.input_mean) != config.in_channels or len(config.input_std) != config.in_channels:
        raise ModelError("input_mean/input_std length must match in_channels")
    torch.manual_seed(seed)
    target = TargetModel(ConvBackbone(config), config.num_classes)
    defense = DefenseModel(
        ConvBackbone(config),
        CosineClassifier(
            config.embedding_dim,
            config.num_classes,
            config.num_virtual,
            scale=config.classifier_scale,
        ),
    )
    estimator = WeightEstimator(config)
    return target, defense, estimator


def save_checkpoint(path: str | Path, model: nn.Module, kind: str, stage: int, config_hash: str, extra: dict | None = None) -> None:
    """Versioned checkpoint container: parameter blobs + provenance metadata."""
    payload = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "kind": kind,
        "state_dict": model.state_dict(),
        "meta": {
            "stage": stage,
            "config_hash": config_hash,
            "digest": module_digest(model),
            **(extra or {}),
        },
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(payload, path)


def load_checkpoint(path: str | Path, model: nn.Module, kind: str) -> dict:
    """Load a checkpoint into `model`, validating container version and kind.

    For defense models the classifier is expanded to the recorded stage before
    the weights are restored. Returns the checkpoint metadata.
    """
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise ModelError(f"unsupported checkpoint version in {path}")
    if payload.get("kind") != kind:
        raise ModelError(f"checkpoint kind {payload.get('kind')!r} != expected {kind!r}")
    if isinstance(model, DefenseModel):
        recorded_stage = payload["meta"]["stage"]
        while model.stage < recorded_stage:
            model.classifier.expand(model.classifier.base_classes, init_from_virtual=False)
    model.load_state_dict(payload["state_dict"])
    if module_digest(model) != payload["meta"]["digest"]:
        raise ModelError(f"checkpoint digest mismatch after loading {path}")
    return payload["meta"]
