"""Training objectives. Every function maps tensors to a scalar tensor."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import NamedTuple, Sequence

import torch
import torch.nn.functional as F

from .conditioning import NUM_ATTRS, REC, YOUNG, validate_attrs, with_rec

# which loss term each coefficient scales in the generator total
TERM_MAP = {
    "lambda1": "rec",
    "lambda2": "cont",
    "lambda3": "content+style",
    "lambda4": "quality",
    "lambda5": "cls_f (generator) / cls_r (discriminator)",
    "lambda6": "id_f",
}

LOG_COLUMNS = [
    "step", "adv_g", "adv_d", "rec", "cont", "style", "content",
    "quality", "cls_r", "cls_f", "total_g", "total_d", "id_f",
]


@dataclass(frozen=True)
class LossWeights:
    lambda1: float = 10.0
    lambda2: float = 1.0
    lambda3: float = 1.0
    lambda4: float = 1.0
    lambda5: float = 1.0
    lambda6: float = 1.0
    margin_m: float = 1.0
    pixelnorm_eps: float = 1e-8

    def __post_init__(self):
        for name, value in asdict(self).items():
            if not value >= 0:
                raise ValueError(f"{name} must be non-negative, got {value}")
        if not self.margin_m > 0:
            raise ValueError(f"margin_m must be positive, got {self.margin_m}")
        if not self.pixelnorm_eps > 0:
            raise ValueError(f"pixelnorm_eps must be positive, got {self.pixelnorm_eps}")


class ContrastivePair(NamedTuple):
    emb_a: torch.Tensor
    emb_b: torch.Tensor
    Y: torch.Tensor  # 0 genuine, 1 impostor


def _check_lists(a: Sequence[torch.Tensor], b: Sequence[torch.Tensor]) -> None:
    if len(a) != len(b):
        raise ValueError(f"feature lists differ in length: {len(a)} vs {len(b)}")
    for i, (x, y) in enumerate(zip(a, b)):
        if x.shape != y.shape:
            raise ValueError(f"layer {i}: shape {tuple(x.shape)} vs {tuple(y.shape)}")


# --------------------------------------------------------------------------
# adversarial


def adversarial_loss_D(real_scores: torch.Tensor, fake_scores: torch.Tensor) -> torch.Tensor:
    """-log sigmoid(real) - log(1 - sigmoid(fake)), averaged over the batch."""
    return F.softplus(-real_scores).mean() + F.softplus(fake_scores).mean()


def adversarial_loss_G(fake_scores: torch.Tensor) -> torch.Tensor:
    """Non-saturating generator loss -log sigmoid(fake)."""
    return F.softplus(-fake_scores).mean()


# --------------------------------------------------------------------------
# feature losses


def quality_feature_loss(taps_real: Sequence[torch.Tensor], taps_fake: Sequence[torch.Tensor]) -> torch.Tensor:
    """Mean over taps of the mean squared difference."""
    _check_lists(taps_real, taps_fake)
    if not taps_real:
        raise ValueError("no taps given")
    return torch.stack([F.mse_loss(a, b) for a, b in zip(taps_real, taps_fake)]).mean()


def content_loss(feats_a: Sequence[torch.Tensor], feats_b: Sequence[torch.Tensor]) -> torch.Tensor:
    """Sum over layers of the L1 distance normalised by C*H*W (and averaged over the batch)."""
    _check_lists(feats_a, feats_b)
    return sum((a - b).abs().mean() for a, b in zip(feats_a, feats_b))


def gram_matrix(feat: torch.Tensor) -> torch.Tensor:
    """Channel correlation matrix normalised by C*H*W; accepts (C,H,W) or (N,C,H,W)."""
    single = feat.ndim == 3
    if single:
        feat = feat.unsqueeze(0)
    n, c, h, w = feat.shape
    flat = feat.reshape(n, c, h * w)
    g = flat @ flat.transpose(1, 2) / (c * h * w)
    return g[0] if single else g


def style_loss(feats_a: Sequence[torch.Tensor], feats_b: Sequence[torch.Tensor]) -> torch.Tensor:
    """Sum over layers of the mean absolute difference between Gram matrices."""
    _check_lists(feats_a, feats_b)
    return sum((gram_matrix(a) - gram_matrix(b)).abs().mean() for a, b in zip(feats_a, feats_b))


# --------------------------------------------------------------------------
# identity


def euclidean(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    d2 = (a - b).pow(2).sum(dim=-1)
    positive = d2 > 0
    return torch.where(positive, torch.sqrt(torch.where(positive, d2, torch.ones_like(d2))), torch.zeros_like(d2))


def contrastive_loss(emb_a, emb_b=None, Y=None, margin: float = 1.0) -> torch.Tensor:
    """Margin contrastive loss averaged over pairs.

    Accepts either a :class:`ContrastivePair` or the three tensors. Genuine
    pairs (``Y = 0``) pay ``D**2 / 2``; impostors pay
    ``max(0, margin - D)**2 / 2``.
    """
    if isinstance(emb_a, ContrastivePair):
        emb_a, emb_b, Y = emb_a
    if not margin > 0:
        raise ValueError(f"margin must be positive, got {margin}")
    if emb_a.shape != emb_b.shape:
        raise ValueError(f"embedding shapes differ: {tuple(emb_a.shape)} vs {tuple(emb_b.shape)}")
    Y = torch.as_tensor(Y, dtype=emb_a.dtype, device=emb_a.device)
    if not torch.all((Y == 0) | (Y == 1)):
        raise ValueError("Y must be 0 (genuine) or 1 (impostor)")
    d = euclidean(emb_a, emb_b)
    per_pair = (1 - Y) * 0.5 * d.pow(2) + Y * 0.5 * torch.clamp(margin - d, min=0).pow(2)
    return per_pair.mean()


def identity_pairs(real_emb: torch.Tensor, fake_emb: torch.Tensor, subject_ids=None) -> ContrastivePair:
    """Genuine pairs (i, i) plus impostors (i, i+1 mod N) from one batch.

    With ``subject_ids`` a rolled pair that happens to share a subject is
    labelled genuine.
    """
    n = real_emb.shape[0]
    rolled = torch.roll(fake_emb, shifts=-1, dims=0)
    if subject_ids is None:
        imp = torch.ones(n)
    else:
        ids = torch.as_tensor(subject_ids)
        imp = (ids != torch.roll(ids, shifts=-1)).to(real_emb.dtype)
    Y = torch.cat([torch.zeros(n), imp.float()]).to(real_emb.dtype)
    return ContrastivePair(torch.cat([real_emb, real_emb]), torch.cat([fake_emb, rolled]), Y)


# --------------------------------------------------------------------------
# attribute classification


def cls_loss(attr_logits: torch.Tensor, attrs) -> torch.Tensor:
    """3-way cross-entropy on hair plus binary cross-entropy on young and rec."""
    if attr_logits.ndim != 2 or attr_logits.shape[1] != NUM_ATTRS:
        raise ValueError(f"expected (N, {NUM_ATTRS}) logits, got {tuple(attr_logits.shape)}")
    a = torch.as_tensor(validate_attrs(attrs)).to(attr_logits.device)
    if a.shape[0] != attr_logits.shape[0]:
        raise ValueError(f"{attr_logits.shape[0]} logit rows but {a.shape[0]} attribute vectors")
    hair = F.cross_entropy(attr_logits[:, :3], a[:, :3].argmax(dim=1))
    bits = a[:, [YOUNG, REC]].to(attr_logits.dtype)
    binary = F.binary_cross_entropy_with_logits(attr_logits[:, [YOUNG, REC]], bits, reduction="none")
    return hair + binary.sum(dim=1).mean()


def cls_loss_real(attr_logits: torch.Tensor, true_attrs) -> torch.Tensor:
    return cls_loss(attr_logits, true_attrs)


def cls_loss_fake(attr_logits_on_fake: torch.Tensor, target_attrs) -> torch.Tensor:
    """Score a translated photo against the requested semantic bits.

    The rec bit steers the generator and is not visible in the image, so the
    fake is scored with rec = 1, the label every real photo carries.
    """
    return cls_loss(attr_logits_on_fake, with_rec(target_attrs, 1))


# --------------------------------------------------------------------------
# cycle


def reconstruction_loss(real: torch.Tensor, cycled: torch.Tensor, P) -> torch.Tensor:
    """Perceptual L1 between an image and its cycle reconstruction (one domain)."""
    if real.shape != cycled.shape:
        raise ValueError(f"shape mismatch: {tuple(real.shape)} vs {tuple(cycled.shape)}")
    return content_loss(P.taps(real), P.taps(cycled))


# --------------------------------------------------------------------------
# totals


def total_loss_G(terms: dict, weights: LossWeights) -> torch.Tensor:
    if not isinstance(weights, LossWeights):
        weights = LossWeights(**weights)
    w = weights
    return (
        terms["adv_g"]
        + w.lambda1 * terms["rec"]
        + w.lambda2 * terms["cont"]
        + w.lambda3 * (terms["content"] + terms["style"])
        + w.lambda4 * terms["quality"]
        + w.lambda5 * terms["cls_f"]
        + w.lambda6 * terms["id_f"]
    )


def total_loss_D(terms: dict, weights: LossWeights) -> torch.Tensor:
    if not isinstance(weights, LossWeights):
        weights = LossWeights(**weights)
    return terms["adv_d"] + weights.lambda5 * terms["cls_r"]
