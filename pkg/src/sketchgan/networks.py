"""Generators, hybrid discriminators and the quality-guided encoder.

All three are progressive: they are built for ``max_resolution`` but run at
any power-of-two stage between ``base_resolution`` and ``max_resolution``,
blending the newest stage in with a :class:`~sketchgan.layers.FadeInState`.

Encoder levels are numbered from the full resolution downwards: level ``i``
works at ``max_resolution / 2**i``. Down block ``i`` maps level ``i`` to
level ``i + 1``; the decoder mirrors it with transposed convolutions and
additive skips from the encoder.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .conditioning import NUM_ATTRS
from .layers import FadeInState, MinibatchStdDev, PixelNorm, blend

LRELU = 0.2


def conv_pn(cin: int, cout: int, k: int = 3, stride: int = 1, eps: float = 1e-8) -> nn.Sequential:
    pad = (k - 1) // 2 if stride == 1 else 1
    return nn.Sequential(nn.Conv2d(cin, cout, k, stride, pad), nn.LeakyReLU(LRELU), PixelNorm(eps))


def up_pn(cin: int, cout: int, eps: float = 1e-8) -> nn.Sequential:
    return nn.Sequential(nn.ConvTranspose2d(cin, cout, 4, 2, 1), nn.LeakyReLU(LRELU), PixelNorm(eps))


def conv_act(cin: int, cout: int, k: int = 3, stride: int = 1) -> nn.Sequential:
    pad = (k - 1) // 2 if stride == 1 else 1
    return nn.Sequential(nn.Conv2d(cin, cout, k, stride, pad), nn.LeakyReLU(LRELU))


class _Levels(nn.Module):
    """Shared bookkeeping for the level/resolution arithmetic."""

    def __init__(self, widths, max_resolution: int, base_resolution: int):
        super().__init__()
        if max_resolution & (max_resolution - 1) or base_resolution & (base_resolution - 1):
            raise ValueError("resolutions must be powers of two")
        self.widths = tuple(int(w) for w in widths)
        self.n_down = len(self.widths)
        self.max_resolution = max_resolution
        self.base_resolution = base_resolution
        self.base_level = int(math.log2(max_resolution // base_resolution))
        if self.base_level >= self.n_down:
            raise ValueError(
                f"base_resolution {base_resolution} leaves no down block "
                f"({self.n_down} blocks from {max_resolution})"
            )

    def channels(self, level: int) -> int:
        return self.widths[min(level, self.n_down - 1)]

    def level_of(self, resolution: int) -> int:
        if resolution & (resolution - 1) or not (self.base_resolution <= resolution <= self.max_resolution):
            raise ValueError(
                f"resolution {resolution} outside [{self.base_resolution}, {self.max_resolution}]"
            )
        return int(math.log2(self.max_resolution // resolution))

    def _check(self, x: torch.Tensor, fade: FadeInState, in_channels: int) -> int:
        if x.ndim != 4 or x.shape[1] != in_channels:
            raise ValueError(f"expected (N, {in_channels}, H, W) input, got {tuple(x.shape)}")
        if x.shape[-1] != fade.current_resolution or x.shape[-2] != fade.current_resolution:
            raise ValueError(
                f"input is {x.shape[-2]}x{x.shape[-1]} but the fade state is at "
                f"{fade.current_resolution}"
            )
        return self.level_of(fade.current_resolution)

    def fading(self, level: int, fade: FadeInState) -> bool:
        return level < self.base_level and fade.alpha < 1.0


class Generator(_Levels):
    """Conditioned encoder-decoder with pixel norm after every hidden convolution."""

    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        widths=(32, 64, 128),
        max_resolution: int = 64,
        base_resolution: int = 16,
        epsilon: float = 1e-8,
    ):
        super().__init__(widths, max_resolution, base_resolution)
        self.in_channels = in_channels
        self.out_channels = out_channels
        n, c = self.n_down, self.channels
        levels = range(self.base_level + 1)
        self.stems = nn.ModuleDict({str(i): conv_pn(in_channels, c(i), 3, eps=epsilon) for i in levels})
        self.down = nn.ModuleList([conv_pn(c(i), c(i + 1), 4, stride=2, eps=epsilon) for i in range(n)])
        self.bottleneck = conv_pn(c(n), c(n), 3, eps=epsilon)
        self.up = nn.ModuleList([up_pn(c(i + 1), c(i), eps=epsilon) for i in range(n)])
        self.to_image = nn.ModuleDict({str(i): nn.Conv2d(c(i), out_channels, 1) for i in levels})

    def encode(self, x: torch.Tensor, fade: FadeInState) -> tuple[int, dict[int, torch.Tensor]]:
        """Run the encoder; returns the start level and the state at every active level."""
        level = self._check(x, fade, self.in_channels)
        states = {level: self.stems[str(level)](x)}
        for i in range(level, self.n_down):
            nxt = self.down[i](states[i])
            if i == level and self.fading(level, fade):
                old = self.stems[str(level + 1)](F.avg_pool2d(x, 2))
                nxt = blend(old, nxt, fade.alpha)
            states[i + 1] = nxt
        return level, states

    def forward(self, x: torch.Tensor, fade: FadeInState, return_taps: bool = False):
        level, states = self.encode(x, fade)
        d = self.bottleneck(states[self.n_down])
        old = None
        for i in range(self.n_down - 1, level - 1, -1):
            if i == level and self.fading(level, fade):
                old = torch.tanh(self.to_image[str(level + 1)](d))
            d = self.up[i](d) + states[i]
        out = torch.tanh(self.to_image[str(level)](d))
        if old is not None:
            out = blend(F.interpolate(old, scale_factor=2, mode="nearest"), out, fade.alpha)
        if return_taps:
            return out, [states[i + 1] for i in range(level, self.n_down)]
        return out


class QualityEncoder(_Levels):
    """Photo encoder whose down blocks *are* the generator's down blocks.

    Only the input stems belong to this module; ``self.down`` is the same
    ``ModuleList`` object as ``generator.down``.
    """

    def __init__(self, generator: Generator, in_channels: int, epsilon: float = 1e-8, taps=None):
        super().__init__(generator.widths, generator.max_resolution, generator.base_resolution)
        self.in_channels = in_channels
        self.down = generator.down
        self.stems = nn.ModuleDict(
            {k: conv_pn(in_channels, self.channels(int(k)), 3, eps=epsilon) for k in generator.stems}
        )
        self.taps = None if taps is None else tuple(int(t) for t in taps)

    def own_parameters(self):
        shared = {id(p) for p in self.down.parameters()}
        return [p for p in self.parameters() if id(p) not in shared]

    def forward(self, x: torch.Tensor, fade: FadeInState) -> list[torch.Tensor]:
        level = self._check(x, fade, self.in_channels)
        h = self.stems[str(level)](x)
        taps = []
        for i in range(level, self.n_down):
            h_next = self.down[i](h)
            if i == level and self.fading(level, fade):
                h_next = blend(self.stems[str(level + 1)](F.avg_pool2d(x, 2)), h_next, fade.alpha)
            h = h_next
            taps.append(h)
        return select_taps(taps, level, self.taps)


def select_taps(taps: list[torch.Tensor], level: int, indices) -> list[torch.Tensor]:
    """Keep the taps whose down-block index is in ``indices`` (all when None)."""
    if indices is None:
        return taps
    return [t for i, t in zip(range(level, level + len(taps)), taps) if i in indices]


class Discriminator(_Levels):
    """Critic with a realness head and 5 attribute logits (3 hair + young + rec)."""

    def __init__(self, in_channels: int, widths=(32, 64, 128), max_resolution: int = 64, base_resolution: int = 16):
        super().__init__(widths, max_resolution, base_resolution)
        self.in_channels = in_channels
        n, c = self.n_down, self.channels
        levels = range(self.base_level + 1)
        self.from_image = nn.ModuleDict({str(i): conv_act(in_channels, c(i), 1) for i in levels})
        self.down = nn.ModuleList([conv_act(c(i), c(i + 1), 4, stride=2) for i in range(n)])
        final = max_resolution >> n
        self.stddev = MinibatchStdDev()
        self.final = nn.Sequential(
            conv_act(c(n) + 1, c(n), 3),
            nn.Conv2d(c(n), c(n), final),
            nn.LeakyReLU(LRELU),
            nn.Flatten(),
        )
        self.realness = nn.Linear(c(n), 1)
        self.attributes = nn.Linear(c(n), NUM_ATTRS)

    def forward(self, image: torch.Tensor, fade: FadeInState):
        level = self._check(image, fade, self.in_channels)
        if image.shape[0] < 2:
            raise ValueError("the discriminator needs a batch of at least 2 (minibatch stddev)")
        h = self.from_image[str(level)](image)
        for i in range(level, self.n_down):
            h_next = self.down[i](h)
            if i == level and self.fading(level, fade):
                h_next = blend(self.from_image[str(level + 1)](F.avg_pool2d(image, 2)), h_next, fade.alpha)
            h = h_next
        h = self.final(self.stddev(h))
        return self.realness(h).squeeze(1), self.attributes(h)


class MultiCritic(nn.ModuleList):
    """``m`` independently initialised critics whose adversarial terms are summed."""

    def forward(self, image, fade):
        return [d(image, fade) for d in self]


def discriminator_forward(D: nn.Module, image: torch.Tensor, fade: FadeInState):
    return D(image, fade)


def generator_forward(G: Generator, x: torch.Tensor, fade: FadeInState) -> torch.Tensor:
    return G(x, fade)


def encoder_tap_features(E: QualityEncoder, image: torch.Tensor, fade: FadeInState) -> list[torch.Tensor]:
    return E(image, fade)


def freeze(module: nn.Module) -> nn.Module:
    module.eval()
    for p in module.parameters():
        p.requires_grad_(False)
    return module


def parameter_hash(module: nn.Module) -> str:
    digest = hashlib.sha256()
    for name, tensor in module.state_dict().items():
        digest.update(name.encode())
        digest.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return digest.hexdigest()


@dataclass
class NetworkBundle:
    G_x: Generator  # sketch + labels -> photo
    G_y: Generator  # photo + labels -> sketch
    D_x: MultiCritic
    D_y: MultiCritic
    E_x: QualityEncoder
    P: nn.Module
    Phi: nn.Module

    TRAINABLE = ("G_x", "G_y", "D_x", "D_y", "E_x")

    def generator_parameters(self) -> list[nn.Parameter]:
        return list(self.G_x.parameters()) + list(self.G_y.parameters()) + self.E_x.own_parameters()

    def discriminator_parameters(self) -> list[nn.Parameter]:
        return list(self.D_x.parameters()) + list(self.D_y.parameters())

    def modules(self) -> dict[str, nn.Module]:
        return {k: getattr(self, k) for k in ("G_x", "G_y", "D_x", "D_y", "E_x", "P", "Phi")}

    def frozen_hashes(self) -> dict[str, str]:
        return {"P": parameter_hash(self.P), "Phi": parameter_hash(self.Phi)}


def build_bundle(
    widths=(32, 64, 128),
    max_resolution: int = 64,
    base_resolution: int = 16,
    num_critics: int = 1,
    epsilon: float = 1e-8,
    taps=None,
    perceptual: nn.Module | None = None,
    identity: nn.Module | None = None,
    seed: int | None = None,
) -> NetworkBundle:
    """Construct all networks. Without pretrained extractors, random frozen ones are used."""
    from .extractors import IdentityNet, PerceptualNet

    if seed is not None:
        torch.manual_seed(seed)
    kw = dict(widths=widths, max_resolution=max_resolution, base_resolution=base_resolution)
    G_x = Generator(1 + NUM_ATTRS, 3, epsilon=epsilon, **kw)
    G_y = Generator(3 + NUM_ATTRS, 1, epsilon=epsilon, **kw)
    D_x = MultiCritic([Discriminator(3, **kw) for _ in range(num_critics)])
    D_y = MultiCritic([Discriminator(1, **kw) for _ in range(num_critics)])
    E_x = QualityEncoder(G_x, 3 + NUM_ATTRS, epsilon=epsilon, taps=taps)
    P = freeze(perceptual if perceptual is not None else PerceptualNet())
    Phi = freeze(identity if identity is not None else IdentityNet())
    return NetworkBundle(G_x, G_y, D_x, D_y, E_x, P, Phi)
