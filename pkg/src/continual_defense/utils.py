"""Seeding, hashing, and tensor conversion helpers."""

from __future__ import annotations

import hashlib
import json

import numpy as np
import torch


def seed_for(master_seed: int, tag: str) -> int:
    """Derive a stable 63-bit substream seed from a master seed and a purpose tag.

    Every stochastic component of a scenario (model init, budget draws,
    per-attack noise, ...) pulls its own seed through this function so that
    runs are replayable and streams never collide.
    """
    digest = hashlib.sha256(f"{master_seed}:{tag}".encode()).digest()
    return int.from_bytes(digest[:8], "big") >> 1


def torch_generator(seed: int) -> torch.Generator:
    gen = torch.Generator(device="cpu")
    gen.manual_seed(seed)
    return gen


def array_digest(*arrays: np.ndarray) -> str:
    """sha256 over the raw bytes of one or more arrays (order-sensitive)."""
    h = hashlib.sha256()
    for arr in arrays:
        h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()


def module_digest(module: torch.nn.Module) -> str:
    """sha256 over all parameters and buffers of a module, in state_dict order.

    Bit-identical parameters produce identical digests, which is how the
    frozen-extractor and frozen-column guarantees are verified.
    """
    h = hashlib.sha256()
    for name, tensor in module.state_dict().items():
        h.update(name.encode())
        h.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def tensor_digest(tensor: torch.Tensor) -> str:
    return hashlib.sha256(tensor.detach().cpu().contiguous().numpy().tobytes()).hexdigest()


def images_to_tensor(images: np.ndarray) -> torch.Tensor:
    """NHWC float arrays in [0,1] -> NCHW float32 tensor (the model-side layout)."""
    if images.ndim != 4:
        raise ValueError(f"expected NHWC array, got shape {images.shape}")
    return torch.from_numpy(np.ascontiguousarray(images)).float().permute(0, 3, 1, 2).contiguous()


def tensor_to_images(batch: torch.Tensor) -> np.ndarray:
    """NCHW tensor -> NHWC float32 array (the dataset-side layout)."""
    return batch.detach().cpu().permute(0, 2, 3, 1).contiguous().numpy().astype(np.float32)


def labels_to_tensor(labels: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.asarray(labels)).long()


def canonical_json(obj) -> str:
    """Deterministic JSON encoding: sorted keys, no whitespace drift."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def stable_hash(obj) -> str:
    """sha256 of the canonical JSON encoding; invariant to dict key order."""
    return hashlib.sha256(canonical_json(obj).encode()).hexdigest()


def batched(n: int, batch_size: int):
    """Yield (start, stop) index pairs covering range(n)."""
    for start in range(0, n, batch_size):
        yield start, min(start + batch_size, n)
