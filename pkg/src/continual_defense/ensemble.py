"""Fusing the target and defense models through the routing weight estimator.

The defense model emits one logit per (attack, class) copy; those are max-folded
back to the N base classes (which preserves the argmax-mod-N prediction
exactly) before being convexly combined with the target logits.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .errors import ModelError
from .utils import batched, images_to_tensor


@dataclass
class FusedPrediction:
    """Full per-input fusion record."""

    input_id: int
    weights: np.ndarray
    target_logits: np.ndarray
    defense_logits: np.ndarray
    folded_defense_logits: np.ndarray
    fused_logits: np.ndarray
    y_pred: int

    def to_dict(self) -> dict:
        return {
            "input_id": self.input_id,
            "weights": [round(float(v), 6) for v in self.weights],
            "target_logits": [round(float(v), 6) for v in self.target_logits],
            "defense_logits": [round(float(v), 6) for v in self.defense_logits],
            "folded_defense_logits": [round(float(v), 6) for v in self.folded_defense_logits],
            "fused_logits": [round(float(v), 6) for v in self.fused_logits],
            "y_pred": self.y_pred,
        }


def fold_defense_logits(logits: torch.Tensor, num_classes: int) -> torch.Tensor:
    """Max over the per-stage class copies: folded[c] = max_g logits[c + N*g].

    argmax(folded) == argmax(full) mod N holds exactly under max-folding.
    """
    width = logits.shape[-1]
    if width % num_classes != 0:
        raise ModelError(f"logit width {width} is not a multiple of {num_classes}")
    groups = width // num_classes
    return logits.reshape(*logits.shape[:-1], groups, num_classes).amax(dim=-2)


def fuse_logits(target_logits: torch.Tensor, defense_logits: torch.Tensor, weights: torch.Tensor) -> torch.Tensor:
    """Convex combination w1 * target + w2 * defense, row-wise.

    Exactly one-hot weights return the corresponding branch bitwise.
    """
    if target_logits.shape != defense_logits.shape:
        raise ModelError(
            f"branch shapes differ: {tuple(target_logits.shape)} vs {tuple(defense_logits.shape)}"
        )
    w1 = weights[..., 0:1]
    w2 = weights[..., 1:2]
    fused = w1 * target_logits + w2 * defense_logits
    fused = torch.where((w1 == 1.0) & (w2 == 0.0), target_logits, fused)
    fused = torch.where((w1 == 0.0) & (w2 == 1.0), defense_logits, fused)
    return fused


def predict_batch(
    images: np.ndarray,
    target,
    defense,
    estimator,
    num_classes: int,
    *,
    scales: tuple[float, float] = (1.0, 1.0),
    space: str = "logit",
    force_weights: tuple[float, float] | None = None,
    batch_size: int = 512,
) -> dict:
    """Run the full fusion pipeline over an image array.

    With `estimator=None` and no forced weights, everything routes to the
    defense branch (the no-ensemble ablation). Returns arrays keyed by the
    FusedPrediction field names.
    """
    outs = {"weights": [], "target_logits": [], "defense_logits": [], "folded": [], "fused": [], "y_pred": []}
    target.eval()
    defense.eval()
    if estimator is not None:
        estimator.eval()
    with torch.no_grad():
        for start, stop in batched(len(images), batch_size):
            batch = images_to_tensor(images[start:stop])
            t_logits = target(batch)
            d_logits = defense(batch)
            folded = fold_defense_logits(d_logits, num_classes)
            if force_weights is not None:
                weights = torch.tensor(force_weights).repeat(len(batch), 1)
            elif estimator is None:
                weights = torch.tensor([0.0, 1.0]).repeat(len(batch), 1)
            else:
                weights = estimator(batch)
            t_branch = scales[0] * t_logits
            d_branch = scales[1] * folded
            if space == "prob":
                t_branch = torch.softmax(t_branch, dim=-1)
                d_branch = torch.softmax(d_branch, dim=-1)
            fused = fuse_logits(t_branch, d_branch, weights)
            outs["weights"].append(weights.cpu().numpy())
            outs["target_logits"].append(t_logits.cpu().numpy())
            outs["defense_logits"].append(d_logits.cpu().numpy())
            outs["folded"].append(folded.cpu().numpy())
            outs["fused"].append(fused.cpu().numpy())
            outs["y_pred"].append(fused.argmax(dim=-1).cpu().numpy())
    return {key: np.concatenate(value) if value else np.empty(0) for key, value in outs.items()}


def predict(
    images: np.ndarray,
    target,
    defense,
    estimator,
    num_classes: int,
    **kwargs,
) -> list[FusedPrediction]:
    """Per-input FusedPrediction records (the dump-friendly form of predict_batch)."""
    arrays = predict_batch(images, target, defense, estimator, num_classes, **kwargs)
    return [
        FusedPrediction(
            input_id=i,
            weights=arrays["weights"][i],
            target_logits=arrays["target_logits"][i],
            defense_logits=arrays["defense_logits"][i],
            folded_defense_logits=arrays["folded"][i],
            fused_logits=arrays["fused"][i],
            y_pred=int(arrays["y_pred"][i]),
        )
        for i in range(len(images))
    ]


def make_predict_fn(
    target,
    defense,
    estimator,
    num_classes: int,
    *,
    scales: tuple[float, float] = (1.0, 1.0),
    space: str = "logit",
    force_weights: tuple[float, float] | None = None,
    batch_size: int = 512,
):
    """Images -> predicted base-class labels, with the fusion settings baked in."""

    def predict_fn(images: np.ndarray) -> np.ndarray:
        return predict_batch(
            images,
            target,
            defense,
            estimator,
            num_classes,
            scales=scales,
            space=space,
            force_weights=force_weights,
            batch_size=batch_size,
        )["y_pred"]

    return predict_fn


def calibrate_logit_scales(
    target, defense, images: np.ndarray, num_classes: int, batch_size: int = 512
) -> tuple[float, float]:
    """Match mean top-logit magnitudes of the two branches on a held-out clean set.

    The target branch keeps scale 1.0; the defense branch is rescaled so its
    mean top logit magnitude equals the target's. Identical branches yield (1, 1).
    """
    target.eval()
    defense.eval()
    tops_t, tops_d = [], []
    with torch.no_grad():
        for start, stop in batched(len(images), batch_size):
            batch = images_to_tensor(images[start:stop])
            tops_t.append(target(batch).max(dim=-1).values.abs().cpu().numpy())
            folded = fold_defense_logits(defense(batch), num_classes)
            tops_d.append(folded.max(dim=-1).values.abs().cpu().numpy())
    mean_t = float(np.concatenate(tops_t).mean())
    mean_d = float(np.concatenate(tops_d).mean())
    return 1.0, mean_t / max(mean_d, 1e-12)
