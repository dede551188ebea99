"""Deterministic seed derivation.

Every run takes one master seed; all subsystem randomness is derived from it
by hashing (master, label path) so that a seeds record fully determines
behavior. Derivation scheme: sha256 over "master/label0/label1/..." taken as
the first 8 bytes, masked to 63 bits.
"""

from __future__ import annotations

import hashlib

import torch

_MASK = (1 << 63) - 1


def derive_seed(master: int, *labels: int | str) -> int:
    """Derive a child seed from a master seed and a label path."""
    key = "/".join([str(int(master))] + [str(l) for l in labels])
    digest = hashlib.sha256(key.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") & _MASK


def torch_generator(seed: int) -> torch.Generator:
    gen = torch.Generator()
    gen.manual_seed(int(seed))
    return gen
