"""Initial full training of the defense model with embedding-space reservation,
plus self-perturbation training of the routing weight estimator.

The reservation loss combines four cross-entropy terms: the adversarial batch
against its true labels, the same batch with the true logit masked against its
best virtual class, mixup virtual instances against their best virtual class,
and the masked virtual instances against their best real class. Training with
it compacts the real-class embeddings and reserves space for future attacks.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .errors import DegenerateBatchError
from .models import DefenseModel, WeightEstimator, cosine_logits_against
from .utils import images_to_tensor, labels_to_tensor, tensor_to_images

MASK_SENTINEL = -1e9


def mixup_hidden(h_r: torch.Tensor, h_s: torch.Tensor, omega) -> torch.Tensor:
    """Convex combination of two hidden activations: omega*h_r + (1-omega)*h_s."""
    if h_r.shape != h_s.shape:
        raise ValueError(f"shape mismatch {h_r.shape} vs {h_s.shape}")
    omega_t = torch.as_tensor(omega, dtype=h_r.dtype)
    if bool((omega_t < 0).any()) or bool((omega_t > 1).any()):
        raise ValueError("mixup weight must lie in [0, 1]")
    omega_t = omega_t.view(-1, *([1] * (h_r.ndim - 1))) if omega_t.ndim else omega_t
    return omega_t * h_r + (1 - omega_t) * h_s


def mask_logits(logits: torch.Tensor, y) -> torch.Tensor:
    """Replace the logit of class y with a large negative sentinel.

    The masked class gets exactly zero softmax probability; all other entries
    are untouched, and masking is idempotent.
    """
    y_t = torch.as_tensor(y, dtype=torch.long)
    single = logits.ndim == 1
    out = logits.unsqueeze(0).clone() if single else logits.clone()
    y_t = y_t.view(-1)
    if y_t.numel() == 1 and out.shape[0] > 1:
        y_t = y_t.expand(out.shape[0])
    if bool((y_t < 0).any()) or bool((y_t >= out.shape[-1]).any()):
        raise IndexError(f"mask index out of range for {out.shape[-1]} logits")
    out[torch.arange(out.shape[0]), y_t] = MASK_SENTINEL
    return out.squeeze(0) if single else out


def pseudo_label_virtual(model: DefenseModel, x_adv: torch.Tensor) -> torch.Tensor:
    """Index of the best virtual column, offset into the combined label space."""
    classifier = model.classifier
    if classifier.num_virtual_remaining < 1:
        raise ValueError("no virtual columns remain")
    emb = model.embed(x_adv)
    logits = cosine_logits_against(emb, classifier.active_virtual_weight(), float(classifier.scale))
    return logits.argmax(dim=-1) + classifier.num_real


def pseudo_label_known(model: DefenseModel, z: torch.Tensor) -> torch.Tensor:
    """Index of the best real column for an embedding-space instance."""
    classifier = model.classifier
    logits = cosine_logits_against(z, classifier.real_weight(), float(classifier.scale))
    return logits.argmax(dim=-1)


def _mixup_pairs(labels: torch.Tensor, rng: np.random.Generator, max_retries: int = 10) -> tuple[torch.Tensor, torch.Tensor]:
    """Random derangement with resampling until pair labels differ; undecidable
    pairs are dropped after `max_retries` rounds."""
    n = len(labels)
    r = np.arange(n)
    s = rng.permutation(n)
    labels_np = labels.cpu().numpy()
    for _ in range(max_retries):
        bad = labels_np[r] == labels_np[s]
        if not bad.any():
            break
        s[bad] = rng.integers(0, n, size=int(bad.sum()))
    keep = labels_np[r] != labels_np[s]
    return torch.from_numpy(r[keep]).long(), torch.from_numpy(s[keep]).long()


@dataclass
class MixupDraw:
    """Audit record of one batch of manifold-mixup virtual instances."""

    indices_r: np.ndarray
    indices_s: np.ndarray
    omega: np.ndarray
    virtual_targets: np.ndarray


@dataclass
class ReservationLossTerms:
    """The four cross-entropy terms of the reservation loss and their total."""

    ce_real: torch.Tensor
    ce_real_masked: torch.Tensor
    ce_virtual: torch.Tensor
    ce_virtual_masked: torch.Tensor
    gamma: float
    total: torch.Tensor
    mixup: MixupDraw
    logits_adv: torch.Tensor
    logits_mix: torch.Tensor
    real_pseudo: torch.Tensor
    known_pseudo: torch.Tensor

    def scalars(self) -> dict:
        return {
            "ce_real": self.ce_real.item(),
            "ce_real_masked": self.ce_real_masked.item(),
            "ce_virtual": self.ce_virtual.item(),
            "ce_virtual_masked": self.ce_virtual_masked.item(),
            "total": self.total.item(),
        }


def reservation_loss(
    model: DefenseModel,
    images: torch.Tensor,
    labels: torch.Tensor,
    gamma: float,
    alpha: float,
    beta: float,
    rng: np.random.Generator,
) -> ReservationLossTerms:
    """Compute the four-term reservation loss on one adversarial batch."""
    if len(images) < 2 or len(torch.unique(labels)) < 2:
        raise DegenerateBatchError("reservation loss needs >= 2 samples from >= 2 classes")
    r, s = _mixup_pairs(labels, rng)
    if len(r) == 0:
        raise DegenerateBatchError("no cross-class mixup pair found")
    omega = rng.beta(alpha, beta, size=len(r))
    return _reservation_loss_fixed(model, images, labels, gamma, r, s, omega)


def _reservation_loss_fixed(
    model: DefenseModel,
    images: torch.Tensor,
    labels: torch.Tensor,
    gamma: float,
    idx_r: torch.Tensor,
    idx_s: torch.Tensor,
    omega: np.ndarray,
) -> ReservationLossTerms:
    """Deterministic core of the reservation loss given fixed pairs and weights
    (split out so gradient checks can hold the randomness constant)."""
    classifier = model.classifier
    n_real = classifier.num_real
    hidden = model.extractor.forward_h1(images)
    emb = model.extractor.forward_h2(hidden)
    logits_adv = classifier(emb, include_virtual=True)

    with torch.no_grad():
        virtual_pseudo = logits_adv[:, n_real:].argmax(dim=-1) + n_real

    ce_real = F.cross_entropy(logits_adv, labels)
    ce_real_masked = F.cross_entropy(mask_logits(logits_adv, labels), virtual_pseudo)

    omega_t = torch.as_tensor(omega, dtype=hidden.dtype)
    mixed = mixup_hidden(hidden[idx_r], hidden[idx_s], omega_t)
    z = model.extractor.forward_h2(mixed)
    logits_mix = classifier(z, include_virtual=True)

    with torch.no_grad():
        mix_virtual = logits_mix[:, n_real:].argmax(dim=-1) + n_real
        mix_known = logits_mix[:, :n_real].argmax(dim=-1)

    ce_virtual = F.cross_entropy(logits_mix, mix_virtual)
    ce_virtual_masked = F.cross_entropy(mask_logits(logits_mix, mix_virtual), mix_known)

    total = ce_real + gamma * ce_real_masked + ce_virtual + gamma * ce_virtual_masked
    draw = MixupDraw(
        indices_r=idx_r.cpu().numpy(),
        indices_s=idx_s.cpu().numpy(),
        omega=np.asarray(omega, dtype=np.float64),
        virtual_targets=mix_virtual.cpu().numpy(),
    )
    return ReservationLossTerms(
        ce_real=ce_real,
        ce_real_masked=ce_real_masked,
        ce_virtual=ce_virtual,
        ce_virtual_masked=ce_virtual_masked,
        gamma=gamma,
        total=total,
        mixup=draw,
        logits_adv=logits_adv.detach(),
        logits_mix=logits_mix.detach(),
        real_pseudo=virtual_pseudo,
        known_pseudo=mix_known,
    )


def _cosine_lr(base_lr: float, epoch: int, total_epochs: int) -> float:
    if total_epochs <= 1:
        return base_lr
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * epoch / total_epochs))


def _augment_batch(batch: torch.Tensor, rng: np.random.Generator) -> torch.Tensor:
    flip = rng.random(len(batch)) < 0.5
    if flip.any():
        batch = batch.clone()
        idx = torch.from_numpy(np.nonzero(flip)[0])
        batch[idx] = torch.flip(batch[idx], dims=(-1,))
    return batch


def train_stage0(
    model: DefenseModel,
    images: np.ndarray,
    labels: np.ndarray,
    epochs: int,
    optim_cfg,
    *,
    gamma: float = 0.01,
    alpha: float = 2.0,
    beta: float = 2.0,
    rng: np.random.Generator,
    use_reservation: bool = True,
    augment: bool = False,
) -> list[dict]:
    """Full supervised training of the initial defense model on attacked data.

    Returns the per-epoch training log; the feature extractor is frozen when
    training finishes (also for epochs=0, which leaves parameters untouched).
    """
    x_all = images_to_tensor(images)
    y_all = labels_to_tensor(labels)
    params = list(model.extractor.parameters()) + [model.classifier.blocks[0]]
    if use_reservation:
        params.append(model.classifier.virtual)
    opt = torch.optim.SGD(
        params, lr=optim_cfg.lr, momentum=optim_cfg.momentum, weight_decay=optim_cfg.weight_decay
    )
    log: list[dict] = []
    model.train()
    for epoch in range(epochs):
        if optim_cfg.cosine_decay:
            for group in opt.param_groups:
                group["lr"] = _cosine_lr(optim_cfg.lr, epoch, epochs)
        order = rng.permutation(len(x_all))
        sums = {"ce_real": 0.0, "ce_real_masked": 0.0, "ce_virtual": 0.0, "ce_virtual_masked": 0.0, "total": 0.0}
        correct = 0
        batches = 0
        for start in range(0, len(order), optim_cfg.batch_size):
            idx = torch.from_numpy(order[start : start + optim_cfg.batch_size])
            batch, targets = x_all[idx], y_all[idx]
            if augment:
                batch = _augment_batch(batch, rng)
            opt.zero_grad()
            if use_reservation:
                terms = reservation_loss(model, batch, targets, gamma, alpha, beta, rng)
                loss = terms.total
                for key, value in terms.scalars().items():
                    sums[key] += value
                logits = terms.logits_adv[:, : model.classifier.num_real]
            else:
                raw_logits = model(batch, include_virtual=False)
                loss = F.cross_entropy(raw_logits, targets)
                sums["ce_real"] += loss.item()
                sums["total"] += loss.item()
                logits = raw_logits.detach()
            if not torch.isfinite(loss):
                raise FloatingPointError(f"non-finite stage-0 loss at epoch {epoch}")
            loss.backward()
            opt.step()
            correct += int((logits.argmax(dim=-1) == targets).sum())
            batches += 1
        record = {key: value / max(batches, 1) for key, value in sums.items()}
        record.update(epoch=epoch, lr=opt.param_groups[0]["lr"], train_acc=correct / len(order))
        log.append(record)
    model.freeze_extractor()
    model.eval()
    return log


def make_self_perturbations(
    images: np.ndarray,
    eps: float,
    rng: np.random.Generator,
    *,
    model_factory=None,
    mixture_weights: tuple[float, float, float] = (1 / 3, 1 / 3, 1 / 3),
) -> np.ndarray:
    """Attack-agnostic perturbations inside the l-inf eps ball.

    Per image, one of three modes is drawn: uniform ball noise, Gaussian noise
    projected to the ball, or a one-step gradient ascent against a freshly
    re-initialized copy of the target architecture (skipped if no factory).
    """
    x = images_to_tensor(np.asarray(images))
    if eps == 0:
        return tensor_to_images(x)
    weights = np.asarray(mixture_weights, dtype=np.float64)
    if model_factory is None:
        weights = weights * np.array([1.0, 1.0, 0.0])
    weights = weights / weights.sum()
    modes = rng.choice(3, size=len(x), p=weights)
    delta = torch.zeros_like(x)

    uniform = np.nonzero(modes == 0)[0]
    if len(uniform):
        noise = rng.uniform(-eps, eps, size=(len(uniform), *x.shape[1:]))
        delta[torch.from_numpy(uniform)] = torch.from_numpy(noise).float()

    gaussian = np.nonzero(modes == 1)[0]
    if len(gaussian):
        noise = rng.normal(0.0, eps / 2, size=(len(gaussian), *x.shape[1:])).clip(-eps, eps)
        delta[torch.from_numpy(gaussian)] = torch.from_numpy(noise.astype(np.float32))

    gradient = np.nonzero(modes == 2)[0]
    if len(gradient):
        torch.manual_seed(int(rng.integers(0, 2**31)))
        probe = model_factory()
        probe.eval()
        idx = torch.from_numpy(gradient)
        base = x[idx]
        adv = base.clone()
        # A short sign-ascent walk against a random network mimics the
        # saturated, spatially structured footprint of iterative attacks.
        steps = int(rng.integers(1, 4))
        for _ in range(steps):
            leaf = adv.detach().requires_grad_(True)
            logits = probe(leaf)
            loss = F.cross_entropy(logits, logits.argmax(dim=-1).detach())
            (grad,) = torch.autograd.grad(loss, leaf)
            adv = (adv + (eps / max(steps - 1, 1)) * grad.sign()).clamp(base - eps, base + eps)
        scale = torch.from_numpy(
            rng.uniform(0.6, 1.0, size=(len(idx), 1, 1, 1)).astype(np.float32)
        )
        delta[idx] = scale * (adv - base)

    out = (x + delta).clamp(0.0, 1.0)
    return tensor_to_images(out)


def train_weight_estimator(
    estimator: WeightEstimator,
    clean_images: np.ndarray,
    eps: float,
    epochs: int,
    optim_cfg,
    *,
    rng: np.random.Generator,
    model_factory=None,
) -> list[dict]:
    """Train the 2-way router: clean inputs toward (1,0), perturbed toward (0,1).

    Self-perturbations are redrawn every epoch so the estimator learns the
    perturbation family rather than a single noise instance.
    """
    opt = torch.optim.SGD(
        estimator.parameters(), lr=optim_cfg.lr, momentum=optim_cfg.momentum,
        weight_decay=optim_cfg.weight_decay,
    )
    log: list[dict] = []
    estimator.train()
    clean_t = images_to_tensor(clean_images)
    for epoch in range(epochs):
        if optim_cfg.cosine_decay:
            for group in opt.param_groups:
                group["lr"] = _cosine_lr(optim_cfg.lr, epoch, epochs)
        perturbed = images_to_tensor(
            make_self_perturbations(clean_images, eps, rng, model_factory=model_factory)
        )
        order = rng.permutation(len(clean_t))
        total_loss = 0.0
        correct = 0
        count = 0
        half = max(1, optim_cfg.batch_size // 2)
        for start in range(0, len(order), half):
            idx = torch.from_numpy(order[start : start + half])
            batch = torch.cat([clean_t[idx], perturbed[idx]])
            targets = torch.cat([torch.zeros(len(idx), dtype=torch.long), torch.ones(len(idx), dtype=torch.long)])
            opt.zero_grad()
            logits = estimator.forward_logits(batch)
            loss = F.cross_entropy(logits, targets)
            if not torch.isfinite(loss):
                raise FloatingPointError(f"non-finite estimator loss at epoch {epoch}")
            loss.backward()
            opt.step()
            total_loss += loss.item() * len(batch)
            correct += int((logits.argmax(dim=-1) == targets).sum())
            count += len(batch)
        log.append(
            {"epoch": epoch, "loss": total_loss / max(count, 1), "route_acc": correct / max(count, 1),
             "lr": opt.param_groups[0]["lr"]}
        )
    estimator.eval()
    return log
