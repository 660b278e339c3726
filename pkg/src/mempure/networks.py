"""Two-scale memory autoencoder and the patch discriminator it trains against."""

import torch
import torch.nn as nn
import torch.nn.functional as F

from .memory import MemoryModule


class ResidualBlock(nn.Module):
    """Two 3x3 convs with an additive skip; ReLU after the sum."""

    def __init__(self, channels):
        super().__init__()
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1)

    def forward(self, x):
        h = F.relu(self.conv1(x))
        h = self.conv2(h)
        return F.relu(x + h)


class TopEncoder(nn.Module):
    """Image -> quarter-resolution feature map (two stride-2 convs, then residuals)."""

    def __init__(self, in_channels, channels):
        super().__init__()
        half = max(channels // 2, 1)
        self.down1 = nn.Conv2d(in_channels, half, 4, stride=2, padding=1)
        self.down2 = nn.Conv2d(half, channels, 4, stride=2, padding=1)
        self.conv = nn.Conv2d(channels, channels, 3, padding=1)
        self.res1 = ResidualBlock(channels)
        self.res2 = ResidualBlock(channels)

    def forward(self, x):
        h = F.relu(self.down1(x))
        h = F.relu(self.down2(h))
        h = F.relu(self.conv(h))
        return self.res2(self.res1(h))


class BottomEncoder(nn.Module):
    """Quarter-scale features -> eighth-resolution features (one stride-2 conv)."""

    def __init__(self, in_channels, channels):
        super().__init__()
        self.down = nn.Conv2d(in_channels, channels, 4, stride=2, padding=1)
        self.conv = nn.Conv2d(channels, channels, 3, padding=1)
        self.res1 = ResidualBlock(channels)
        self.res2 = ResidualBlock(channels)

    def forward(self, x):
        h = F.relu(self.down(x))
        h = F.relu(self.conv(h))
        return self.res2(self.res1(h))


class BottomDecoder(nn.Module):
    """Eighth-scale memory output -> quarter-scale map for fusion with z_t."""

    def __init__(self, in_channels, out_channels):
        super().__init__()
        self.conv = nn.Conv2d(in_channels, in_channels, 3, padding=1)
        self.res1 = ResidualBlock(in_channels)
        self.res2 = ResidualBlock(in_channels)
        self.up = nn.ConvTranspose2d(in_channels, out_channels, 4, stride=2, padding=1)

    def forward(self, x):
        h = F.relu(self.conv(x))
        h = self.res2(self.res1(h))
        return F.relu(self.up(h))


class TopDecoder(nn.Module):
    """Fused quarter-scale features -> image in [0, 1] (two stride-2 deconvs)."""

    def __init__(self, in_channels, channels, out_channels):
        super().__init__()
        half = max(channels // 2, 1)
        self.conv = nn.Conv2d(in_channels, channels, 3, padding=1)
        self.res1 = ResidualBlock(channels)
        self.res2 = ResidualBlock(channels)
        self.up1 = nn.ConvTranspose2d(channels, half, 4, stride=2, padding=1)
        self.up2 = nn.ConvTranspose2d(half, out_channels, 4, stride=2, padding=1)

    def forward(self, x):
        h = F.relu(self.conv(x))
        h = self.res2(self.res1(h))
        h = F.relu(self.up1(h))
        return torch.sigmoid(self.up2(h))


class MsMemAutoencoder(nn.Module):
    """Purifier: encode at two scales, rewrite both scales from memory, decode.

    The bottom memory sees the coarsest (eighth-scale) features; its decoded
    output is concatenated with the quarter-scale features and the result is
    rewritten by the top memory. The decoder fuses the top memory output with
    an upsampled copy of the bottom memory output. Sparse addressing at both
    scales is what removes adversarial detail: reconstructions are built only
    from combinations of stored prototypes.
    """

    def __init__(self, image_size=64, in_channels=1, top_channels=64,
                 bottom_channels=None, n_items=1000, reduce_top=4,
                 reduce_bottom=8, gamma=None, alpha_shrink=1e-12,
                 scorer_hidden=None, metric="learned"):
        super().__init__()
        if image_size % 8 != 0:
            raise ValueError("image_size must be a multiple of 8")
        if bottom_channels is None:
            bottom_channels = top_channels
        self.hparams = dict(
            image_size=image_size, in_channels=in_channels,
            top_channels=top_channels, bottom_channels=bottom_channels,
            n_items=n_items, reduce_top=reduce_top, reduce_bottom=reduce_bottom,
            gamma=gamma, alpha_shrink=alpha_shrink, scorer_hidden=scorer_hidden,
            metric=metric)
        self.image_size = image_size
        self.in_channels = in_channels
        self.top_channels = top_channels
        self.bottom_channels = bottom_channels
        q = image_size // 4
        e = image_size // 8
        self.encoder_top = TopEncoder(in_channels, top_channels)
        self.encoder_bottom = BottomEncoder(top_channels, bottom_channels)
        self.memory_bottom = MemoryModule(
            bottom_channels, e, e, n_items, reduce_bottom, gamma=gamma,
            alpha_shrink=alpha_shrink, scorer_hidden=scorer_hidden, metric=metric)
        self.decoder_bottom = BottomDecoder(bottom_channels, top_channels)
        self.memory_top = MemoryModule(
            2 * top_channels, q, q, n_items, reduce_top, gamma=gamma,
            alpha_shrink=alpha_shrink, scorer_hidden=scorer_hidden, metric=metric)
        self.upsample_bottom = nn.ConvTranspose2d(
            bottom_channels, top_channels, 4, stride=2, padding=1)
        self.decoder_top = TopDecoder(3 * top_channels, top_channels, in_channels)

    @property
    def last_layer_weight(self):
        """Final deconv weight; reference point for the adaptive loss balance."""
        return self.decoder_top.up2.weight

    def encode(self, x):
        """Both latent scales: (quarter-resolution z_t, eighth-resolution z_b)."""
        z_t = self.encoder_top(x)
        return z_t, self.encoder_bottom(z_t)

    def forward(self, x, bypass=False, override_bottom=None, override_top=None):
        """Return (reconstruction, [bottom weights, top weights]).

        `bypass` routes both memories through their identity path (plain
        autoencoder; both weight entries are None). The override arguments
        force fixed addressing weights at either scale — an analysis hook for
        probing what the decoder does with specific memory mixtures.
        """
        if x.shape[-2:] != (self.image_size, self.image_size):
            raise ValueError(
                f"model built for {self.image_size}x{self.image_size} input, "
                f"got {tuple(x.shape[-2:])}")
        z_t, z_b = self.encode(x)
        z_bm, w_b = self.memory_bottom(z_b, bypass=bypass, weights_override=override_bottom)
        z_tf = torch.cat([z_t, self.decoder_bottom(z_bm)], dim=1)
        z_tm, w_t = self.memory_top(z_tf, bypass=bypass, weights_override=override_top)
        fused = torch.cat([z_tm, F.relu(self.upsample_bottom(z_bm))], dim=1)
        return self.decoder_top(fused), [w_b, w_t]

    def purify(self, x):
        """Reconstruction only, for inference call sites."""
        return self.forward(x)[0]

    @torch.no_grad()
    def seed_memory(self, x, generator=None, jitter=0.1):
        """Warm-start both banks from encoder latents of the given images.

        Bottom is seeded first so the top queries (which pass through the
        bottom retrieval) are computed against the already-seeded bank.
        """
        z_t, z_b = self.encode(x)
        q_b = self.memory_bottom.reduce(z_b).flatten(1)
        self._seed_bank(self.memory_bottom.bank, q_b, generator, jitter)
        z_bm, _ = self.memory_bottom(z_b)
        z_tf = torch.cat([z_t, self.decoder_bottom(z_bm)], dim=1)
        q_t = self.memory_top.reduce(z_tf).flatten(1)
        self._seed_bank(self.memory_top.bank, q_t, generator, jitter)

    @staticmethod
    def _seed_bank(bank, queries, generator, jitter):
        bank.seed_items(queries, generator=generator, jitter=jitter)
        if bank.metric == "learned":
            bank.calibrate_scorer(queries)


class PatchDiscriminator(nn.Module):
    """Five-conv discriminator scoring overlapping patches, not whole images.

    Two stride-2 downsamplings then three stride-1 convs: each output score
    has a 34-pixel receptive field, so the map judges local texture. No norm
    on the first layer or the score layer.
    """

    def __init__(self, in_channels=1, base_channels=64):
        super().__init__()
        self.hparams = dict(in_channels=in_channels, base_channels=base_channels)
        nf = base_channels
        self.layer1 = nn.Conv2d(in_channels, nf, 4, stride=2, padding=1)
        self.layer2 = nn.Conv2d(nf, 2 * nf, 4, stride=2, padding=1)
        self.bn2 = nn.BatchNorm2d(2 * nf)
        self.layer3 = nn.Conv2d(2 * nf, 4 * nf, 3, stride=1, padding=1)
        self.bn3 = nn.BatchNorm2d(4 * nf)
        self.layer4 = nn.Conv2d(4 * nf, 4 * nf, 3, stride=1, padding=1)
        self.bn4 = nn.BatchNorm2d(4 * nf)
        self.layer5 = nn.Conv2d(4 * nf, 1, 3, stride=1, padding=1)

    def forward(self, x):
        h = F.leaky_relu(self.layer1(x), 0.2)
        h = F.leaky_relu(self.bn2(self.layer2(h)), 0.2)
        h = F.leaky_relu(self.bn3(self.layer3(h)), 0.2)
        h = F.leaky_relu(self.bn4(self.layer4(h)), 0.2)
        return self.layer5(h)
