"""Deterministic seed derivation.

Every run owns a single root seed. Subsystems (data generation, model init,
training noise, sampling) get independent child seeds derived from the root
plus a label, so each subsystem is reproducible on its own no matter what the
others consume.
"""

import hashlib

import numpy as np
import torch

_SEED_MOD = 2**63 - 1


def derive_seed(root: int, label: str) -> int:
    """Stable child seed from (root, label), identical across platforms."""
    digest = hashlib.sha256(f"{root}:{label}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") % _SEED_MOD


def torch_generator(root: int, label: str) -> torch.Generator:
    gen = torch.Generator()
    gen.manual_seed(derive_seed(root, label))
    return gen


def numpy_generator(root: int, label: str) -> np.random.Generator:
    return np.random.default_rng(derive_seed(root, label))


def seed_module_init(root: int, label: str = "init") -> None:
    """Seed torch's global RNG before constructing a model."""
    torch.manual_seed(derive_seed(root, label))
