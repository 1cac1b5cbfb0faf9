"""Iterative gradient attacks sharing one kernel: PGD, BIM, RFGSM, MIM, NIM,
SNIM, DIM, VNIM, VMIM under the l-inf norm, plus PGD-l2.

All attacks run in raw [0,1] pixel space against a differentiable model, step
with the (momentum / Nesterov / variance-tuned / diversity / scale-averaged)
input gradient of the cross-entropy loss, and project onto the epsilon ball
intersected with the valid pixel box after every step. Every stochastic choice
draws from an explicit generator seeded by the spec.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .errors import AttackError, NumericalWarning
from .utils import images_to_tensor, labels_to_tensor, tensor_to_images, torch_generator

# Named l-inf pool + the l2 representative. Each entry is a unique flag
# combination; the registry is the single source of truth for what each
# attack name means.
ATTACK_REGISTRY: dict[str, dict] = {
    "pgd": {"norm": "linf", "random_start": "uniform"},
    "bim": {"norm": "linf"},
    "rfgsm": {"norm": "linf", "random_start": "gaussian"},
    "mim": {"norm": "linf", "momentum": 1.0},
    "nim": {"norm": "linf", "momentum": 1.0, "nesterov": True},
    "snim": {"norm": "linf", "momentum": 1.0, "nesterov": True, "scale_copies": 3},
    "dim": {"norm": "linf", "diversity_prob": 0.5},
    "vnim": {"norm": "linf", "momentum": 1.0, "nesterov": True, "variance_count": 5, "variance_radius": 1.5},
    "vmim": {"norm": "linf", "momentum": 1.0, "variance_count": 5, "variance_radius": 1.5},
    "pgd_l2": {"norm": "l2", "eps": 0.5, "step_size": 0.125, "random_start": "uniform"},
}

# Attack names from other norm families that the interface admits but this
# library does not ship; configs referencing them fail loudly.
RESERVED_ATTACKS = frozenset({"cw", "deepfool", "ead", "eaden", "onepixel", "sparsefool"})


@dataclass(frozen=True)
class AttackSpec:
    """Declarative description of one attack run."""

    name: str
    norm: str = "linf"
    eps: float = 8 / 255
    step_size: float = 2 / 255
    steps: int = 10
    random_start: str = "none"  # none | uniform | gaussian
    momentum: float = 0.0  # decay mu; 0 disables the accumulator
    nesterov: bool = False
    diversity_prob: float = 0.0
    resize_range: tuple[float, float] = (0.75, 0.95)
    scale_copies: int = 1
    variance_count: int = 0
    variance_radius: float = 0.0  # neighborhood half-width in units of eps
    seed: int = 0

    def __post_init__(self):
        if self.norm not in ("linf", "l2"):
            raise ValueError(f"norm must be linf|l2, got {self.norm!r}")
        if self.eps < 0:
            raise ValueError("eps must be >= 0")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.random_start not in ("none", "uniform", "gaussian"):
            raise ValueError(f"bad random_start {self.random_start!r}")
        if not 0.0 <= self.diversity_prob <= 1.0:
            raise ValueError("diversity_prob must be in [0, 1]")
        if self.scale_copies < 1:
            raise ValueError("scale_copies must be >= 1")
        if self.variance_count < 0 or self.variance_radius < 0 or self.momentum < 0:
            raise ValueError("momentum/variance knobs must be >= 0")

    def flag_signature(self) -> tuple:
        """The flag combination that identifies the attack family."""
        return (
            self.norm,
            self.random_start,
            self.momentum > 0,
            self.nesterov,
            self.diversity_prob > 0,
            self.scale_copies > 1,
            self.variance_count > 0 and self.variance_radius > 0,
        )

    def to_dict(self) -> dict:
        out = asdict(self)
        out["resize_range"] = list(self.resize_range)
        return out


def make_attack(name: str, **overrides) -> AttackSpec:
    """Build the canonical spec for a named attack; overrides adjust eps etc."""
    key = name.lower().replace("-", "_")
    if key in RESERVED_ATTACKS:
        raise NotImplementedError(f"attack {name!r} is reserved but not implemented")
    if key not in ATTACK_REGISTRY:
        raise KeyError(f"unknown attack {name!r}; known: {sorted(ATTACK_REGISTRY)}")
    params = {**ATTACK_REGISTRY[key], **overrides}
    return AttackSpec(name=key, **params)


def attack_from_dict(payload: dict) -> AttackSpec:
    payload = dict(payload)
    name = payload.pop("name")
    if "resize_range" in payload:
        payload["resize_range"] = tuple(payload["resize_range"])
    return make_attack(name, **payload)


def implemented_attacks() -> list[str]:
    return sorted(ATTACK_REGISTRY)


@dataclass
class AdversarialBatch:
    """Attacked images plus provenance; every element satisfies the spec's ball."""

    images: np.ndarray
    labels: np.ndarray
    source_indices: np.ndarray
    spec: AttackSpec
    max_violation: float = 0.0


def momentum_update(g_prev: torch.Tensor, g_raw: torch.Tensor, mu: float) -> torch.Tensor:
    """Accumulator update g <- mu * g_prev + g_raw / ||g_raw||_1 (per sample).

    Samples with an all-zero raw gradient keep their previous accumulator and
    trigger a numerical warning.
    """
    if g_prev.shape != g_raw.shape:
        raise ValueError(f"shape mismatch {g_prev.shape} vs {g_raw.shape}")
    dims = tuple(range(1, g_raw.ndim))
    norms = g_raw.abs().sum(dim=dims, keepdim=True)
    zero = norms == 0
    if bool(zero.any()):
        warnings.warn("zero gradient in momentum update; accumulator unchanged", NumericalWarning)
    updated = mu * g_prev + g_raw / norms.clamp_min(1e-12)
    return torch.where(zero, g_prev, updated)


def input_diversity(x: torch.Tensor, prob: float, resize_range: tuple[float, float], rng: torch.Generator) -> torch.Tensor:
    """With probability `prob`, randomly shrink and re-pad back to the input shape."""
    if prob <= 0 or float(torch.rand((), generator=rng)) >= prob:
        return x
    h, w = x.shape[-2:]
    lo = max(1, int(round(resize_range[0] * h)))
    hi = max(lo, int(round(resize_range[1] * h)))
    new_h = int(torch.randint(lo, hi + 1, (), generator=rng))
    new_w = max(1, int(round(new_h * w / h)))
    resized = F.interpolate(x, size=(new_h, new_w), mode="bilinear", align_corners=False)
    pad_h, pad_w = h - new_h, w - new_w
    top = int(torch.randint(0, pad_h + 1, (), generator=rng))
    left = int(torch.randint(0, pad_w + 1, (), generator=rng))
    return F.pad(resized, (left, pad_w - left, top, pad_h - top), value=0.5)


def _input_gradient(model, x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    leaf = x.detach().requires_grad_(True)
    loss = F.cross_entropy(model(leaf), y)
    (grad,) = torch.autograd.grad(loss, leaf)
    return grad


def scale_invariant_gradient(model, x: torch.Tensor, y: torch.Tensor, m: int) -> torch.Tensor:
    """Average input gradient of the loss over the scaled copies x / 2^k, k < m."""
    if m < 1:
        raise ValueError("m must be >= 1")
    leaf = x.detach().requires_grad_(True)
    loss = sum(F.cross_entropy(model(leaf / 2**k), y) for k in range(m)) / m
    (grad,) = torch.autograd.grad(loss, leaf)
    return grad


def variance_tuned_gradient(model, x: torch.Tensor, y: torch.Tensor, count: int, radius: float, rng: torch.Generator) -> tuple[torch.Tensor, torch.Tensor]:
    """Plain gradient plus the variance correction from `count` uniform
    neighbors within an l-inf box of half-width `radius` (absolute pixel units)."""
    if count < 1:
        raise ValueError("count must be >= 1")
    grad = _input_gradient(model, x, y)
    if radius == 0:
        return grad, torch.zeros_like(grad)
    acc = torch.zeros_like(grad)
    for _ in range(count):
        noise = (torch.rand(x.shape, generator=rng) * 2 - 1) * radius
        acc = acc + _input_gradient(model, x + noise, y)
    return grad, acc / count - grad


def _diverse_scaled_gradient(model, x: torch.Tensor, y: torch.Tensor, spec: AttackSpec, rng: torch.Generator) -> torch.Tensor:
    leaf = x.detach().requires_grad_(True)
    total = 0.0
    for k in range(spec.scale_copies):
        inp = leaf / 2**k
        if spec.diversity_prob > 0:
            inp = input_diversity(inp, spec.diversity_prob, spec.resize_range, rng)
        total = total + F.cross_entropy(model(inp), y)
    (grad,) = torch.autograd.grad(total / spec.scale_copies, leaf)
    return grad


def _init_delta(spec: AttackSpec, x0: torch.Tensor, rng: torch.Generator) -> torch.Tensor:
    if spec.random_start == "none":
        return torch.zeros_like(x0)
    if spec.random_start == "gaussian":
        noise = torch.randn(x0.shape, generator=rng)
        return spec.step_size * noise.sign()
    if spec.norm == "linf":
        return (torch.rand(x0.shape, generator=rng) * 2 - 1) * spec.eps
    direction = torch.randn(x0.shape, generator=rng)
    flat = direction.flatten(1)
    flat = flat / flat.norm(dim=1, keepdim=True).clamp_min(1e-12)
    radii = torch.rand((x0.shape[0], 1), generator=rng) ** (1.0 / flat.shape[1])
    return (flat * radii * spec.eps).view_as(x0)


def _project(delta: torch.Tensor, spec: AttackSpec) -> torch.Tensor:
    if spec.norm == "linf":
        return delta.clamp(-spec.eps, spec.eps)
    flat = delta.flatten(1)
    norms = flat.norm(dim=1, keepdim=True)
    factor = (spec.eps / norms.clamp_min(1e-12)).clamp(max=1.0)
    return (flat * factor).view_as(delta)


def _step(delta: torch.Tensor, direction: torch.Tensor, spec: AttackSpec) -> torch.Tensor:
    if spec.norm == "linf":
        return delta + spec.step_size * direction.sign()
    flat = direction.flatten(1)
    unit = flat / flat.norm(dim=1, keepdim=True).clamp_min(1e-12)
    return delta + spec.step_size * unit.view_as(direction)


def generate(spec: AttackSpec, model, images, labels, generator: torch.Generator | None = None) -> AdversarialBatch:
    """Run the iterative attack described by `spec` against `model`.

    `images` is an NHWC array (or NCHW tensor) in [0,1]; labels are the ground
    truth used in the cross-entropy objective. The returned batch is verified
    against the epsilon ball and the pixel box before being handed back.
    """
    if spec.name in RESERVED_ATTACKS:
        raise NotImplementedError(f"attack {spec.name!r} is reserved but not implemented")
    if isinstance(images, torch.Tensor):
        x0 = images.detach().clone().float()
    else:
        x0 = images_to_tensor(np.asarray(images))
    y = labels if isinstance(labels, torch.Tensor) else labels_to_tensor(labels)
    rng = generator if generator is not None else torch_generator(spec.seed)

    was_training = model.training
    model.eval()
    try:
        delta = _project(_init_delta(spec, x0, rng), spec)
        delta = (x0 + delta).clamp(0.0, 1.0) - x0
        g_mom = torch.zeros_like(x0)
        v = torch.zeros_like(x0)
        for step in range(spec.steps):
            x = x0 + delta
            if spec.nesterov and spec.momentum > 0:
                x = x + spec.step_size * spec.momentum * g_mom
            if spec.variance_count > 0 and spec.variance_radius > 0:
                grad, v_new = variance_tuned_gradient(
                    model, x, y, spec.variance_count, spec.variance_radius * spec.eps, rng
                )
                g_hat = grad + v
                v = v_new
            else:
                g_hat = _diverse_scaled_gradient(model, x, y, spec, rng)
            if not bool(torch.isfinite(g_hat).all()):
                raise AttackError(f"non-finite gradient at step {step} of attack {spec.name!r}")
            direction = momentum_update(g_mom, g_hat, spec.momentum) if spec.momentum > 0 else g_hat
            if spec.momentum > 0:
                g_mom = direction
            delta = _project(_step(delta, direction, spec), spec)
            delta = (x0 + delta).clamp(0.0, 1.0) - x0
        x_adv = x0 + delta
    finally:
        model.train(was_training)

    adv_images = tensor_to_images(x_adv)
    clean_images = tensor_to_images(x0)
    ok, violation = verify_perturbation(clean_images, adv_images, spec)
    if not ok:
        raise AttackError(f"attack {spec.name!r} violated its budget by {violation:.3e}")
    return AdversarialBatch(
        images=adv_images,
        labels=np.asarray(y.cpu().numpy(), dtype=np.int64),
        source_indices=np.arange(len(adv_images)),
        spec=spec,
        max_violation=violation,
    )


def verify_perturbation(x, x_adv, spec: AttackSpec) -> tuple[bool, float]:
    """Check norm(delta) <= eps + 1e-6 and x_adv inside [0,1] for every sample."""
    x = np.asarray(x, dtype=np.float64)
    x_adv = np.asarray(x_adv, dtype=np.float64)
    if x.shape != x_adv.shape:
        raise ValueError(f"shape mismatch {x.shape} vs {x_adv.shape}")
    delta = (x_adv - x).reshape(len(x), -1)
    if spec.norm == "linf":
        norms = np.abs(delta).max(axis=1) if delta.size else np.zeros(len(x))
    else:
        norms = np.sqrt(np.square(delta).sum(axis=1))
    norm_violation = float(norms.max() - spec.eps) if len(norms) else 0.0
    range_violation = float(max(x_adv.max() - 1.0, -x_adv.min())) if x_adv.size else 0.0
    violation = max(norm_violation, range_violation, 0.0)
    return violation <= 1e-6, violation


def save_adversarial_batch(batch: AdversarialBatch, path: str | Path) -> None:
    """Archive images + labels + spec + verification report as one .npz file."""
    report = {"max_violation": batch.max_violation, "count": len(batch.images), "verified": True}
    np.savez(
        Path(path),
        images=batch.images,
        labels=batch.labels,
        source_indices=batch.source_indices,
        spec_json=json.dumps(batch.spec.to_dict(), sort_keys=True),
        report_json=json.dumps(report, sort_keys=True),
    )


def load_adversarial_batch(path: str | Path) -> AdversarialBatch:
    with np.load(Path(path), allow_pickle=False) as payload:
        spec = attack_from_dict(json.loads(str(payload["spec_json"])))
        report = json.loads(str(payload["report_json"]))
        return AdversarialBatch(
            images=payload["images"],
            labels=payload["labels"],
            source_indices=payload["source_indices"],
            spec=spec,
            max_violation=float(report["max_violation"]),
        )


def with_seed(spec: AttackSpec, seed: int) -> AttackSpec:
    return replace(spec, seed=seed)
