"""Training loop for the purifier: warmup, cosine decay, adaptive GAN weight."""

import csv
import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import losses
from .memory import addressing_entropy
from .networks import MsMemAutoencoder, PatchDiscriminator
from .validation import check_image_batch, to_nchw

CHECKPOINT_VERSION = 1


@dataclass
class TrainConfig:
    """Optimization settings for the purifier.

    The learning rate ramps linearly for `warmup_epochs` epochs, then decays
    along a cosine to `lr_final` at the last epoch. The GAN (discriminator
    updates and the generator's adversarial term) starts at
    `gan_start_epoch`, by default right after lr warmup; from then on the
    adversarial weight adapts to the ratio of reconstruction- to
    adversarial-gradient norms at the generator's final layer. Starting the
    GAN later than warmup lets reconstruction converge first — with few
    images the discriminator memorizes the training set quickly, and
    gradient-parity adversarial pressure on a still-blurry generator moves
    it toward generic texture instead of input fidelity.
    """

    epochs: int = 300
    batch_size: int = 32
    lr_init: float = 1e-3
    lr_final: float = 1e-4
    warmup_epochs: int = 10
    weight_decay: float = 0.05
    entropy_alpha: float = 2e-4
    sigma: float = 1e-4
    beta_max: float = 1e4
    use_adversarial: bool = True
    gan_start_epoch: int = None
    perceptual_weights: str = None
    checkpoint_every: int = 0
    seed: int = 0
    model_params: dict = field(default_factory=dict)
    disc_params: dict = field(default_factory=dict)

    def validate(self):
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.lr_init <= 0 or self.lr_final <= 0:
            raise ValueError("learning rates must be positive")
        if self.lr_final > self.lr_init:
            raise ValueError("lr_final must not exceed lr_init")
        if self.warmup_epochs < 0:
            raise ValueError("warmup_epochs must be >= 0")
        if self.epochs > 0 and self.warmup_epochs >= self.epochs:
            raise ValueError("warmup_epochs must be smaller than epochs")
        if self.gan_start_epoch is not None and self.gan_start_epoch < 0:
            raise ValueError("gan_start_epoch must be >= 0")
        if self.weight_decay < 0 or self.entropy_alpha < 0:
            raise ValueError("weights must be non-negative")
        if self.sigma <= 0:
            raise ValueError("sigma must be positive")
        if self.checkpoint_every < 0:
            raise ValueError("checkpoint_every must be >= 0")
        return self

    def hash(self):
        """Stable digest of the resolved configuration, stamped into artifacts."""
        blob = json.dumps(asdict(self), sort_keys=True, default=str)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def learning_rate(epoch, config):
    """Per-epoch learning rate: linear warmup, then cosine decay to lr_final."""
    if epoch < 0 or epoch >= config.epochs:
        raise ValueError(f"epoch {epoch} outside [0, {config.epochs})")
    w = config.warmup_epochs
    if w > 0 and epoch < w:
        return config.lr_init * (epoch + 1) / w
    span = max(config.epochs - 1 - w, 1)
    progress = (epoch - w) / span
    return config.lr_final + 0.5 * (config.lr_init - config.lr_final) * (
        1.0 + math.cos(math.pi * progress))


def epoch_batches(n, batch_size, seed, epoch):
    """Deterministic shuffled minibatch index arrays for one epoch."""
    order = np.random.default_rng(np.random.SeedSequence([seed, epoch])).permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def _check_finite(value, name, epoch):
    if not torch.isfinite(value).all():
        raise RuntimeError(f"non-finite {name} loss at epoch {epoch}; aborting")


LOSS_REPORT_COLUMNS = ("epoch", "l1", "perceptual", "entropy_top", "entropy_bottom",
                       "gen_adv", "disc", "beta", "total")


def build_models(config, image_size, in_channels):
    """Seeded construction of the purifier and (optionally) its discriminator."""
    with torch.random.fork_rng():
        torch.manual_seed(config.seed)
        params = dict(config.model_params)
        params.setdefault("image_size", image_size)
        params.setdefault("in_channels", in_channels)
        model = MsMemAutoencoder(**params)
        disc = None
        if config.use_adversarial:
            disc = PatchDiscriminator(in_channels=in_channels, **config.disc_params)
    return model, disc


def train_purifier(images, config, model=None, discriminator=None,
                   optimizer_states=None, start_epoch=0, bypass=False,
                   epoch_hook=None):
    """Train the memory autoencoder on clean images.

    Returns (model, discriminator, history, optimizer_states); history has one
    dict per trained epoch with the mean loss components. Pass the model,
    discriminator and optimizer_states from a previous run together with
    `start_epoch` to resume exactly where it stopped. `bypass=True` trains the
    plain autoencoder path with both memories skipped. `epoch_hook(row, save)`
    runs after every epoch; calling `save(path)` writes a resumable checkpoint.
    """
    config.validate()
    images = check_image_batch(images)
    x_all = to_nchw(images)
    n, channels = x_all.shape[0], x_all.shape[1]

    if model is None:
        model, discriminator = build_models(config, x_all.shape[-1], channels)
    if x_all.shape[-1] != model.image_size:
        raise ValueError(f"images are {x_all.shape[-1]}px but model wants {model.image_size}px")

    if start_epoch == 0 and not bypass and config.epochs > 0:
        # Fresh run: warm-start the memory banks from latents of a slice of
        # the training set, so addressing has contrast before the first step.
        # Evenly spaced indices keep the slice spread over every class of a
        # class-ordered dataset. Resumed runs keep their trained items.
        take = np.unique(np.linspace(0, n - 1, min(n, 256)).round().astype(np.int64))
        seed_gen = torch.Generator().manual_seed(
            int(np.random.SeedSequence([config.seed, 7]).generate_state(1)[0]))
        model.seed_memory(x_all[torch.from_numpy(take)], generator=seed_gen)

    perceptual = losses.PerceptualLoss(weights_path=config.perceptual_weights)
    opt_g = torch.optim.AdamW(model.parameters(), lr=config.lr_init,
                              weight_decay=config.weight_decay)
    opt_d = (torch.optim.AdamW(discriminator.parameters(), lr=config.lr_init,
                               weight_decay=config.weight_decay)
             if discriminator is not None else None)
    if optimizer_states is not None:
        opt_g.load_state_dict(optimizer_states["generator"])
        if opt_d is not None and optimizer_states.get("discriminator") is not None:
            opt_d.load_state_dict(optimizer_states["discriminator"])

    def current_states():
        return {"generator": opt_g.state_dict(),
                "discriminator": opt_d.state_dict() if opt_d is not None else None}

    gan_start = (config.warmup_epochs if config.gan_start_epoch is None
                 else config.gan_start_epoch)
    history = []
    for epoch in range(start_epoch, config.epochs):
        lr = learning_rate(epoch, config)
        for opt in filter(None, (opt_g, opt_d)):
            for group in opt.param_groups:
                group["lr"] = lr
        adversarial_on = discriminator is not None and epoch >= gan_start
        model.train()
        sums = {k: 0.0 for k in LOSS_REPORT_COLUMNS[1:]}
        n_batches = 0
        for idx in epoch_batches(n, config.batch_size, config.seed, epoch):
            x = x_all[torch.from_numpy(idx.copy())]

            if adversarial_on:
                discriminator.train()
                with torch.no_grad():
                    fake = model(x, bypass=bypass)[0]
                opt_d.zero_grad()
                loss_d = losses.discriminator_hinge_loss(discriminator(x), discriminator(fake))
                _check_finite(loss_d, "discriminator", epoch)
                loss_d.backward()
                opt_d.step()
            else:
                loss_d = torch.zeros(())

            opt_g.zero_grad()
            x_rec, (w_bottom, w_top) = model(x, bypass=bypass)
            l1 = losses.l1_reconstruction(x, x_rec)
            lp = perceptual(x, x_rec)
            ent_top = (addressing_entropy(w_top).mean() if w_top is not None
                       else torch.zeros(()))
            ent_bottom = (addressing_entropy(w_bottom).mean() if w_bottom is not None
                          else torch.zeros(()))
            _check_finite(l1, "l1", epoch)
            _check_finite(lp, "perceptual", epoch)
            _check_finite(ent_top, "top entropy", epoch)
            _check_finite(ent_bottom, "bottom entropy", epoch)
            if adversarial_on:
                lg = losses.generator_adversarial_loss(discriminator(x_rec))
                _check_finite(lg, "adversarial", epoch)
                beta = losses.adaptive_weight_from_losses(
                    l1 + lp, lg, model.last_layer_weight,
                    sigma=config.sigma, max_weight=config.beta_max)
                _check_finite(beta, "adaptive weight", epoch)
            else:
                lg = torch.zeros(())
                beta = torch.zeros(())
            total = losses.total_generator_loss(
                l1, lp, ent_top + ent_bottom, lg,
                alpha=config.entropy_alpha, beta=beta)
            _check_finite(total, "total", epoch)
            total.backward()
            opt_g.step()

            n_batches += 1
            for key, val in (("l1", l1), ("perceptual", lp), ("entropy_top", ent_top),
                             ("entropy_bottom", ent_bottom), ("gen_adv", lg),
                             ("disc", loss_d), ("beta", beta), ("total", total)):
                sums[key] += float(val.detach())
        row = {"epoch": epoch, "lr": lr}
        row.update({k: sums[k] / n_batches for k in sums})
        history.append(row)
        if epoch_hook is not None:
            def save(path, _epoch=epoch):
                return save_checkpoint(path, model, discriminator, config=config,
                                       extra={"epoch": _epoch,
                                              "optimizer_states": current_states()})
            epoch_hook(row, save)
    model.eval()
    if discriminator is not None:
        discriminator.eval()
    return model, discriminator, history, current_states()


def write_loss_report(path, history):
    """Per-epoch loss table as CSV; fixed float formatting keeps bytes stable."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="\n") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(LOSS_REPORT_COLUMNS)
        for row in history:
            writer.writerow([row["epoch"]] +
                            [f"{row[k]:.10g}" for k in LOSS_REPORT_COLUMNS[1:]])
    return path


def read_loss_report(path):
    with open(path, newline="") as fh:
        rows = []
        for row in csv.DictReader(fh):
            parsed = {"epoch": int(row["epoch"])}
            parsed.update({k: float(row[k]) for k in LOSS_REPORT_COLUMNS[1:]})
            rows.append(parsed)
    return rows


def save_checkpoint(path, model, discriminator=None, config=None, extra=None):
    """One-file checkpoint: weights, rebuild hyperparameters, version, config hash."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "version": CHECKPOINT_VERSION,
        "config_hash": config.hash() if config is not None else "",
        "model_state": model.state_dict(),
        "model_hparams": dict(model.hparams),
        "config": asdict(config) if config is not None else None,
        "extra": extra or {},
    }
    if discriminator is not None:
        payload["disc_state"] = discriminator.state_dict()
        payload["disc_hparams"] = dict(discriminator.hparams)
    torch.save(payload, path)
    return path


def load_checkpoint(path):
    """Rebuild (model, discriminator | None, payload) from save_checkpoint output."""
    payload = torch.load(path, map_location="cpu", weights_only=True)
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {payload.get('version')!r}")
    model = MsMemAutoencoder(**payload["model_hparams"])
    model.load_state_dict(payload["model_state"])
    model.eval()
    disc = None
    if "disc_state" in payload:
        disc = PatchDiscriminator(**payload["disc_hparams"])
        disc.load_state_dict(payload["disc_state"])
        disc.eval()
    return model, disc, payload
