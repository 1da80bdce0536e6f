"""UNet-VAE generator with reconstruction and segmentation heads, a PatchGAN
discriminator, and the frozen perceptual feature extractor."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Optional, Protocol, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .localizer import PatchPair

LOGVAR_MIN, LOGVAR_MAX = -10.0, 10.0
PERCEPTUAL_SEED = 20160  # fixed forever; the extractor is never trained
SEG_PRIOR_BIAS = -2.0


@dataclass(frozen=True)
class ModelConfig:
    ps: int = 64
    channels: tuple = (32, 64, 128)
    latent_dim: int = 128
    disc_channels: tuple = (32, 64, 128)
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        object.__setattr__(self, "disc_channels", tuple(int(c) for c in self.disc_channels))
        if not self.channels or not self.disc_channels:
            raise ValueError("channel lists must be non-empty")
        if min(self.channels + self.disc_channels) < 1 or self.latent_dim < 1:
            raise ValueError("channel counts and latent_dim must be >= 1")
        if self.ps % (2 ** self.levels):
            raise ValueError(f"ps={self.ps} not divisible by 2^{self.levels}")
        if self.ps % (2 ** len(self.disc_channels)):
            raise ValueError(f"ps={self.ps} not divisible by 2^{len(self.disc_channels)}")

    @property
    def levels(self) -> int:
        return len(self.channels)

    @property
    def bottleneck(self) -> int:
        return self.ps // 2 ** self.levels

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channels"] = list(self.channels)
        d["disc_channels"] = list(self.disc_channels)
        return d


@dataclass
class LatentStats:
    mu: torch.Tensor
    logvar: torch.Tensor


@dataclass
class ModelOutput:
    recon: torch.Tensor
    seg_prob: torch.Tensor
    latent: LatentStats


def _groups(ch: int) -> int:
    return math.gcd(8, ch)


def _block(cin: int, cout: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, padding=1),
        nn.GroupNorm(_groups(cout), cout),
        nn.LeakyReLU(0.2),
    )


def reparameterize(latent: LatentStats, eps: torch.Tensor) -> torch.Tensor:
    """z = mu + exp(logvar / 2) * eps."""
    return latent.mu + torch.exp(0.5 * latent.logvar) * eps


class UNetVAE(nn.Module):
    """Patch encoder/decoder with skip connections and two output heads.

    The encoder keeps the pre-downsampling feature map of every level as a
    skip, then compresses the bottleneck into ``mu`` and ``logvar``. The
    decoder mirrors it; a shared trunk feeds a Tanh reconstruction head and
    a Sigmoid segmentation head.
    """

    def __init__(self, config: ModelConfig = ModelConfig()):
        super().__init__()
        self.config = config
        ch = config.channels
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(config.seed)
            self.stages = nn.ModuleList()
            self.downs = nn.ModuleList()
            cin = 1
            for i, c in enumerate(ch):
                self.stages.append(_block(cin, c))
                cnext = ch[i + 1] if i + 1 < len(ch) else ch[-1]
                self.downs.append(nn.Sequential(nn.Conv2d(c, cnext, 4, stride=2, padding=1), nn.LeakyReLU(0.2)))
                cin = cnext
            b = config.bottleneck
            flat = ch[-1] * b * b
            self.fc_mu = nn.Linear(flat, config.latent_dim)
            self.fc_logvar = nn.Linear(flat, config.latent_dim)
            self.fc_dec = nn.Linear(config.latent_dim, flat)

            self.ups = nn.ModuleList()
            self.merges = nn.ModuleList()
            cin = ch[-1]
            for c in reversed(ch):
                self.ups.append(nn.Sequential(nn.ConvTranspose2d(cin, c, 4, stride=2, padding=1), nn.LeakyReLU(0.2)))
                self.merges.append(_block(2 * c, c))
                cin = c
            self.trunk = _block(ch[0], ch[0])
            self.recon_head = nn.Conv2d(ch[0], 1, 1)
            self.seg_head = nn.Conv2d(ch[0], 1, 1)
            # start from a small foreground prior instead of p = 0.5 everywhere
            nn.init.constant_(self.seg_head.bias, SEG_PRIOR_BIAS)

    def _check(self, x: torch.Tensor) -> None:
        ps = self.config.ps
        if x.dim() != 4 or tuple(x.shape[1:]) != (1, ps, ps):
            raise ValueError(f"expected input (N, 1, {ps}, {ps}), got {tuple(x.shape)}")

    def encode(self, x: torch.Tensor):
        """Returns (LatentStats, skips); skips[i] has spatial size ps / 2**i."""
        self._check(x)
        skips = []
        h = x
        for stage, down in zip(self.stages, self.downs):
            h = stage(h)
            skips.append(h)
            h = down(h)
        h = h.flatten(1)
        logvar = torch.clamp(self.fc_logvar(h), LOGVAR_MIN, LOGVAR_MAX)
        return LatentStats(self.fc_mu(h), logvar), skips

    def zero_skips(self, n: int, like: Optional[torch.Tensor] = None) -> list:
        """The generation-mode sentinel: all-zero skip features."""
        dtype = like.dtype if like is not None else next(self.parameters()).dtype
        ps = self.config.ps
        return [torch.zeros(n, c, ps >> i, ps >> i, dtype=dtype) for i, c in enumerate(self.config.channels)]

    def decode(self, z: torch.Tensor, skips: Optional[Sequence[torch.Tensor]] = None):
        cfg = self.config
        if z.dim() != 2 or z.shape[1] != cfg.latent_dim:
            raise ValueError(f"expected latent (N, {cfg.latent_dim}), got {tuple(z.shape)}")
        if skips is None:
            skips = self.zero_skips(z.shape[0], z)
        if len(skips) != cfg.levels:
            raise ValueError(f"expected {cfg.levels} skip tensors, got {len(skips)}")
        b = cfg.bottleneck
        h = F.leaky_relu(self.fc_dec(z), 0.2).view(z.shape[0], cfg.channels[-1], b, b)
        for up, merge, skip in zip(self.ups, self.merges, reversed(skips)):
            h = up(h)
            if skip.shape != h.shape:
                raise ValueError(f"skip shape {tuple(skip.shape)} does not match decoder {tuple(h.shape)}")
            h = merge(torch.cat([h, skip], dim=1))
        h = self.trunk(h)
        return torch.tanh(self.recon_head(h)), torch.sigmoid(self.seg_head(h))

    def forward(self, x: torch.Tensor, eps: Optional[torch.Tensor] = None,
                generator: Optional[torch.Generator] = None) -> ModelOutput:
        """Encode, sample, decode. Eval mode uses eps = 0 unless one is given."""
        single = x.dim() == 3
        if single:
            x = x.unsqueeze(0)
        latent, skips = self.encode(x)
        if eps is None:
            if self.training:
                eps = torch.randn(latent.mu.shape, generator=generator, dtype=latent.mu.dtype)
            else:
                eps = torch.zeros_like(latent.mu)
        recon, seg = self.decode(reparameterize(latent, eps), skips)
        if single:
            recon, seg = recon[0], seg[0]
        return ModelOutput(recon, seg, latent)

    @torch.no_grad()
    def generate_synthetic(self, source: PatchPair, tau: float = 1.0, seed: int = 0,
                           threshold: float = 0.5) -> PatchPair:
        """Perturb the source's latent code and decode with the source's skips.

        z = mu + tau * sigma * eps with eps drawn from a generator seeded by
        ``seed``; the pseudo-mask is the segmentation head thresholded at
        ``threshold``.
        """
        if tau <= 0:
            raise ValueError("tau must be > 0")
        dtype = next(self.parameters()).dtype
        x = torch.as_tensor(source.image, dtype=dtype).view(1, 1, *source.image.shape)
        latent, skips = self.encode(x)
        gen = torch.Generator().manual_seed(int(seed))
        eps = torch.randn(latent.mu.shape, generator=gen, dtype=dtype)
        z = latent.mu + tau * torch.exp(0.5 * latent.logvar) * eps
        recon, seg = self.decode(z, skips)
        image = recon[0, 0].clamp(-1.0, 1.0).float().numpy()
        mask = (seg[0, 0] > threshold).to(torch.uint8).numpy()
        return PatchPair(image, mask, source.source, "synthetic")


class PatchDiscriminator(nn.Module):
    """Unconditional PatchGAN: one raw logit per receptive-field patch.

    Each stride-2 conv halves the resolution, so a 64 px input yields an
    8 x 8 grid for three levels.
    """

    def __init__(self, config: ModelConfig = ModelConfig()):
        super().__init__()
        self.config = config
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(config.seed + 1)
            layers = []
            cin = 1
            for i, c in enumerate(config.disc_channels):
                layers.append(nn.Conv2d(cin, c, 4, stride=2, padding=1))
                if i > 0:
                    layers.append(nn.GroupNorm(_groups(c), c))
                layers.append(nn.LeakyReLU(0.2))
                cin = c
            layers.append(nn.Conv2d(cin, 1, 3, padding=1))
            self.model = nn.Sequential(*layers)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        single = x.dim() == 3
        if single:
            x = x.unsqueeze(0)
        ps = self.config.ps
        if x.dim() != 4 or tuple(x.shape[1:]) != (1, ps, ps):
            raise ValueError(f"expected input (N, 1, {ps}, {ps}), got {tuple(x.shape)}")
        out = self.model(x)
        return out[0] if single else out


class PerceptualExtractor(Protocol):
    """Any frozen callable mapping (N, 1, H, W) images in [-1, 1] to a list
    of feature maps. A pretrained network can be wrapped to satisfy it."""

    def __call__(self, x: torch.Tensor) -> list: ...


class ToyPerceptualExtractor(nn.Module):
    """Three-level conv pyramid with weights fixed by a hard-coded seed.

    Weights are buffers rather than parameters so no optimizer can pick them
    up. Maps come out at full, half and quarter resolution.
    """

    def __init__(self, widths: Sequence[int] = (8, 16, 32), seed: int = PERCEPTUAL_SEED):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        self.n_levels = len(widths)
        cin = 1
        for i, c in enumerate(widths):
            fan_in = cin * 9
            self.register_buffer(f"w{i}", torch.randn(c, cin, 3, 3, generator=gen) * (1.5 / math.sqrt(fan_in)))
            self.register_buffer(f"b{i}", torch.randn(c, generator=gen) * 0.1)
            cin = c
        self.requires_grad_(False)

    def forward(self, x: torch.Tensor) -> list:
        feats = []
        h = x
        for i in range(self.n_levels):
            h = torch.tanh(F.conv2d(h, getattr(self, f"w{i}"), getattr(self, f"b{i}"),
                                    stride=1 if i == 0 else 2, padding=1))
            feats.append(h)
        return feats


def perceptual_features(image: torch.Tensor, extractor: Optional[PerceptualExtractor] = None) -> list:
    extractor = extractor if extractor is not None else ToyPerceptualExtractor()
    single = image.dim() == 3
    feats = extractor(image.unsqueeze(0) if single else image)
    return [f[0] for f in feats] if single else feats


def weights_bytes(module: nn.Module) -> bytes:
    """Concatenated raw bytes of every parameter and buffer, in state-dict order."""
    return b"".join(t.detach().cpu().contiguous().numpy().tobytes() for t in module.state_dict().values())
