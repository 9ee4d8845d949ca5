"""Frozen stand-in feature extractors and their pretraining.

``PerceptualNet`` plays the role of the multi-layer perceptual network used
by the content, style and reconstruction losses; ``IdentityNet`` plays the
face verifier behind the identity losses. Both are trained once on an
auxiliary toy population (its own seed, disjoint from any training set) and
shipped as small weight files in ``sketchgan/assets``.
"""

from __future__ import annotations

import logging
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .data import render_population

log = logging.getLogger(__name__)

ASSET_DIR = Path(__file__).parent / "assets"
PERCEPTUAL_ASSET = "perceptual.pt"
IDENTITY_ASSET = "identity.pt"
AUX_SEED = 20_201_013
NATIVE_RESOLUTION = 64


def _block(cin, cout):
    return nn.Sequential(nn.Conv2d(cin, cout, 3, padding=1), nn.LeakyReLU(0.2), nn.AvgPool2d(2))


def as_rgb(image: torch.Tensor) -> torch.Tensor:
    return image.expand(-1, 3, -1, -1) if image.shape[1] == 1 else image


class PerceptualNet(nn.Module):
    """Four conv blocks with a tap after each; heads predict hair (3-way) and young.

    ``taps`` returns the input image itself as the first feature map when
    ``include_input`` is set, so the L1 losses built on it contain a pixel
    term. Block taps are multiplied by ``tap_scale`` (calibrated to unit RMS
    on the auxiliary population). Sketches are expanded to three identical
    channels.
    """

    def __init__(self, widths=(16, 32, 64, 64), include_input: bool = True):
        super().__init__()
        chans = (3,) + tuple(widths)
        self.blocks = nn.ModuleList([_block(a, b) for a, b in zip(chans, chans[1:])])
        self.head = nn.Linear(widths[-1], 4)
        self.include_input = include_input
        self.register_buffer("tap_scale", torch.ones(len(widths)))

    def taps(self, image: torch.Tensor) -> list[torch.Tensor]:
        h = as_rgb(image)
        out = [h] if self.include_input else []
        for i, block in enumerate(self.blocks):
            h = block(h)
            out.append(h * self.tap_scale[i])
        return out

    @torch.no_grad()
    def calibrate(self, images: torch.Tensor) -> None:
        """Set ``tap_scale`` so each block tap has unit RMS on ``images``."""
        self.tap_scale.fill_(1.0)
        feats = self.taps(images)[1:] if self.include_input else self.taps(images)
        self.tap_scale.copy_(torch.stack([1.0 / f.pow(2).mean().sqrt() for f in feats]))

    def pooled(self, image: torch.Tensor) -> torch.Tensor:
        """Global-average-pooled last-block features (the FID embedding)."""
        h = as_rgb(image)
        for block in self.blocks:
            h = block(h)
        return h.mean(dim=(2, 3))

    def forward(self, image: torch.Tensor) -> torch.Tensor:
        """Logits: 3 hair classes then the young bit."""
        return self.head(self.pooled(image))

    def hair_probs(self, image: torch.Tensor) -> torch.Tensor:
        return torch.softmax(self(image)[:, :3], dim=1)


class IdentityNet(nn.Module):
    """Unit-norm face embedder. Inputs are resized to its native 64x64."""

    def __init__(self, widths=(16, 32, 64, 96), dim: int = 64):
        super().__init__()
        chans = (3,) + tuple(widths)
        self.blocks = nn.Sequential(*[_block(a, b) for a, b in zip(chans, chans[1:])])
        self.proj = nn.Linear(widths[-1] * 4 * 4, dim)
        self.dim = dim

    def forward(self, image: torch.Tensor) -> torch.Tensor:
        if image.ndim != 4 or image.shape[1] != 3:
            raise ValueError(f"identity embedding needs (N, 3, H, W) photos, got {tuple(image.shape)}")
        if image.shape[-1] != NATIVE_RESOLUTION or image.shape[-2] != NATIVE_RESOLUTION:
            image = F.interpolate(image, size=(NATIVE_RESOLUTION, NATIVE_RESOLUTION), mode="bilinear", align_corners=False)
        z = self.proj(self.blocks(image).flatten(1))
        return F.normalize(z, dim=1, eps=1e-12)


def identity_embed(phi: IdentityNet, image: torch.Tensor) -> torch.Tensor:
    return phi(image)


# --------------------------------------------------------------------------
# pretraining


def _augment(x: torch.Tensor, gen: torch.Generator) -> torch.Tensor:
    # colour jitter so features do not key on exact palette values
    gain = 1.0 + 0.1 * (torch.rand(x.shape[0], 3, 1, 1, generator=gen) - 0.5)
    return (x * gain).clamp(-1, 1)


def pretrain_perceptual(
    seed: int = AUX_SEED, subjects: int = 200, per_subject: int = 6, epochs: int = 6, batch: int = 32
) -> PerceptualNet:
    """Train the perceptual stand-in on attribute classification (photos and downscales)."""
    images, attrs, _ = render_population(subjects, per_subject, (NATIVE_RESOLUTION,) * 2, seed)
    torch.manual_seed(seed)
    gen = torch.Generator().manual_seed(seed)
    net = PerceptualNet()
    x = torch.from_numpy(images)
    hair = torch.from_numpy(attrs[:, :3].argmax(1))
    young = torch.from_numpy(attrs[:, 3]).float()
    opt = torch.optim.Adam(net.parameters(), lr=2e-3)
    for epoch in range(epochs):
        perm = torch.randperm(len(x), generator=gen)
        for i in range(0, len(x), batch):
            idx = perm[i : i + batch]
            xb = _augment(x[idx], gen)
            if epoch % 2:
                xb = F.interpolate(F.avg_pool2d(xb, 2), scale_factor=2, mode="nearest")
            logits = net(xb)
            loss = F.cross_entropy(logits[:, :3], hair[idx]) + F.binary_cross_entropy_with_logits(
                logits[:, 3], young[idx]
            )
            opt.zero_grad()
            loss.backward()
            opt.step()
        log.info("perceptual epoch %d loss %.4f", epoch, loss.item())
    net.eval()
    net.calibrate(x)
    return net


def pretrain_identity(
    seed: int = AUX_SEED + 1,
    subjects: int = 300,
    per_subject: int = 8,
    epochs: int = 30,
    batch: int = 64,
    scale: float = 16.0,
) -> IdentityNet:
    """Train the identity stand-in as a cosine-softmax subject classifier."""
    images, _, ids = render_population(subjects, per_subject, (NATIVE_RESOLUTION,) * 2, seed)
    torch.manual_seed(seed)
    gen = torch.Generator().manual_seed(seed)
    net = IdentityNet()
    centers = nn.Parameter(torch.randn(subjects, net.dim))
    x = torch.from_numpy(images)
    y = torch.from_numpy(ids)
    opt = torch.optim.Adam(list(net.parameters()) + [centers], lr=2e-3)
    for epoch in range(epochs):
        perm = torch.randperm(len(x), generator=gen)
        for i in range(0, len(x), batch):
            idx = perm[i : i + batch]
            z = net(_augment(x[idx], gen))
            logits = scale * z @ F.normalize(centers, dim=1).T
            loss = F.cross_entropy(logits, y[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
        log.info("identity epoch %d loss %.4f", epoch, loss.item())
    return net.eval()


def _asset_path(name: str) -> Path:
    return ASSET_DIR / name


def load_pretrained(train_if_missing: bool = True) -> tuple[PerceptualNet, IdentityNet]:
    """Load the shipped extractors (frozen), training and caching them if absent."""
    nets = []
    for name, cls, trainer in (
        (PERCEPTUAL_ASSET, PerceptualNet, pretrain_perceptual),
        (IDENTITY_ASSET, IdentityNet, pretrain_identity),
    ):
        path = _asset_path(name)
        if path.exists():
            net = cls()
            net.load_state_dict(torch.load(path, map_location="cpu", weights_only=True))
        elif train_if_missing:
            log.warning("%s missing; pretraining (one-off, a few minutes)", name)
            net = trainer()
            path.parent.mkdir(parents=True, exist_ok=True)
            torch.save(net.state_dict(), path)
        else:
            raise FileNotFoundError(path)
        net.eval()
        for p in net.parameters():
            p.requires_grad_(False)
        nets.append(net)
    return nets[0], nets[1]


def embed_numpy(phi: IdentityNet, images: np.ndarray, batch: int = 64) -> np.ndarray:
    out = []
    with torch.no_grad():
        for i in range(0, len(images), batch):
            out.append(phi(torch.as_tensor(images[i : i + batch])).numpy())
    return np.concatenate(out).astype(np.float64)
