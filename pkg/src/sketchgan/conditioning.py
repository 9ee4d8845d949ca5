"""Attribute vocabulary and label-plane conditioning.

Attribute vectors are length-5 integer arrays ordered as :data:`VOCAB`.
Inside images the bits are encoded as constant planes at ``-1`` / ``+1``.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np
import torch

# frozen order; manifests and checkpoints repeat it verbatim
VOCAB = ("black_hair", "blond_hair", "brown_hair", "young", "rec")
HAIR_COLORS = VOCAB[:3]
NUM_ATTRS = len(VOCAB)
YOUNG, REC = 3, 4

# every valid (hair, young) combination as semantic bit patterns
SEMANTIC_COMBOS = [
    tuple(int(i == h) for i in range(3)) + (y,) for h in range(3) for y in (0, 1)
]


def validate_attrs(attrs, ground_truth: bool = True) -> np.ndarray:
    """Return ``attrs`` as an int array of shape ``(..., 5)`` after checking it."""
    a = np.asarray(attrs)
    if a.shape[-1:] != (NUM_ATTRS,):
        raise ValueError(f"attribute vectors have {NUM_ATTRS} entries, got shape {a.shape}")
    if not np.all((a == 0) | (a == 1)):
        raise ValueError("attribute bits must be 0 or 1")
    if ground_truth and not np.all(a[..., :3].sum(axis=-1) == 1):
        raise ValueError("exactly one hair bit must be set")
    return a.astype(np.int64)


def attrs_from_names(text: str, rec: int = 0) -> np.ndarray:
    """Parse ``"black_hair=1,young=1"`` into a bit vector; unnamed bits are 0."""
    bits = np.zeros(NUM_ATTRS, dtype=np.int64)
    bits[REC] = rec
    for item in filter(None, (s.strip() for s in text.split(","))):
        name, _, value = item.partition("=")
        name = name.strip()
        if name not in VOCAB:
            raise ValueError(f"unknown attribute {name!r}; vocabulary is {', '.join(VOCAB)}")
        if value.strip() not in ("0", "1"):
            raise ValueError(f"attribute {name} needs value 0 or 1, got {value!r}")
        bits[VOCAB.index(name)] = int(value)
    return validate_attrs(bits)


def attrs_to_tag(attrs: Sequence[int]) -> str:
    return "".join(str(int(b)) for b in attrs)


def replicate_labels(attrs, size: tuple[int, int]) -> torch.Tensor:
    """Spread attribute bits into constant planes.

    A single vector gives ``(5, H, W)``, a batch ``(N, 5)`` gives ``(N, 5, H, W)``.
    """
    h, w = size
    if h <= 0 or w <= 0:
        raise ValueError(f"size must be positive, got {size}")
    a = torch.as_tensor(validate_attrs(attrs, ground_truth=False), dtype=torch.float32)
    planes = 2.0 * a - 1.0
    return planes[..., None, None].expand(*planes.shape, h, w).contiguous()


def read_planes(planes: torch.Tensor) -> np.ndarray:
    """Inverse of :func:`replicate_labels` by plane means."""
    means = planes.float().mean(dim=(-2, -1))
    return (means > 0).long().numpy()


def concat_condition(image, attrs) -> torch.Tensor:
    """Append label planes to a 1- or 3-channel image batch."""
    x = torch.as_tensor(image)
    if x.ndim != 4 or x.shape[1] not in (1, 3):
        raise ValueError(f"expected an (N, 1|3, H, W) image batch, got {tuple(x.shape)}")
    a = np.asarray(attrs)
    if a.ndim == 1:
        a = np.broadcast_to(a, (x.shape[0], NUM_ATTRS))
    if a.shape[0] != x.shape[0]:
        raise ValueError(f"{x.shape[0]} images but {a.shape[0]} attribute vectors")
    planes = replicate_labels(a, tuple(x.shape[-2:])).to(dtype=x.dtype, device=x.device)
    return torch.cat([x, planes], dim=1)


def sample_target_attrs(original, rng_seed) -> np.ndarray:
    """Draw a valid target vector whose (hair, young) differs from ``original``.

    The target's rec bit is 0: it describes a translation, not a
    reconstruction. ``rng_seed`` may be an int or a ``numpy`` Generator.
    """
    orig = validate_attrs(original)
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    own = tuple(int(b) for b in orig[:4])
    choices = [c for c in SEMANTIC_COMBOS if c != own]
    pick = choices[int(rng.integers(len(choices)))]
    return np.array(pick + (0,), dtype=np.int64)


def sample_target_batch(originals, rng: np.random.Generator) -> np.ndarray:
    return np.stack([sample_target_attrs(o, rng) for o in validate_attrs(originals)])


def with_rec(attrs, rec: int) -> np.ndarray:
    a = np.array(attrs, dtype=np.int64, copy=True)
    a[..., REC] = rec
    return a
