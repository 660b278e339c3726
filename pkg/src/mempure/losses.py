"""Loss terms for training the purifier and its patch discriminator."""

import torch
import torch.nn as nn
import torch.nn.functional as F
import torchvision.models as tv_models


def l1_reconstruction(x, x_rec):
    """Mean absolute error between input and reconstruction."""
    if x.shape != x_rec.shape:
        raise ValueError(f"shape mismatch {tuple(x.shape)} vs {tuple(x_rec.shape)}")
    return (x - x_rec).abs().mean()


class PerceptualLoss(nn.Module):
    """Mean squared distance between feature taps of a frozen resnet18.

    Five taps are compared (the stem and the four residual stages); each
    tap contributes the element-wise mean of the squared difference and the
    taps are averaged. By default the extractor uses deterministic randomly
    initialized weights (seeded, so every run agrees); pass `weights_path`
    to load a trained resnet18 state dict instead. Grayscale input is
    repeated to three channels before extraction. The extractor is frozen
    and kept in eval mode, but gradients still flow to the images.
    """

    def __init__(self, weights_path=None, seed=0):
        super().__init__()
        with torch.random.fork_rng():
            torch.manual_seed(seed)
            backbone = tv_models.resnet18(weights=None)
        if weights_path is not None:
            state = torch.load(weights_path, map_location="cpu", weights_only=True)
            backbone.load_state_dict(state)
        self.stem = nn.Sequential(backbone.conv1, backbone.bn1, backbone.relu, backbone.maxpool)
        self.stages = nn.ModuleList(
            [backbone.layer1, backbone.layer2, backbone.layer3, backbone.layer4])
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()

    def train(self, mode=True):
        # stay frozen in eval mode no matter what the parent module does
        return super().train(False)

    def _taps(self, x):
        if x.shape[1] == 1:
            x = x.repeat(1, 3, 1, 1)
        elif x.shape[1] != 3:
            raise ValueError(f"expected 1 or 3 channels, got {x.shape[1]}")
        feats = []
        h = self.stem(x)
        feats.append(h)
        for stage in self.stages:
            h = stage(h)
            feats.append(h)
        return feats

    def forward(self, x, x_rec):
        if x.shape != x_rec.shape:
            raise ValueError(f"shape mismatch {tuple(x.shape)} vs {tuple(x_rec.shape)}")
        taps_a = self._taps(x)
        taps_b = self._taps(x_rec)
        per_tap = [(a - b).pow(2).mean() for a, b in zip(taps_a, taps_b)]
        return torch.stack(per_tap).mean()


def discriminator_hinge_loss(d_real, d_fake):
    """Hinge loss on patch score maps: real pushed above 1, fake below -1."""
    return F.relu(1.0 - d_real).mean() + F.relu(1.0 + d_fake).mean()


def generator_adversarial_loss(d_fake):
    """Generator wants large discriminator scores on its outputs."""
    return -d_fake.mean()


def entropy_regularizer(weight_list, eps=1e-12):
    """Mean addressing entropy, summed over the memories that produced weights.

    Skips None entries (bypassed memories) so the same call site works in
    every wiring mode.
    """
    from .memory import addressing_entropy
    terms = [addressing_entropy(w, eps=eps).mean() for w in weight_list if w is not None]
    if not terms:
        return torch.zeros(())
    return torch.stack(terms).sum()


def adaptive_weight(rec_grad_norm, gen_grad_norm, sigma=1e-4, max_weight=1e4):
    """Balance the adversarial term against the reconstruction terms.

    Ratio of the two gradient norms at the generator's last layer, clamped
    to [0, max_weight]. Inputs may be floats or 0-d tensors; the result is
    a detached 0-d tensor (the weight itself is never trained through).
    """
    rec = torch.as_tensor(rec_grad_norm, dtype=torch.get_default_dtype())
    gen = torch.as_tensor(gen_grad_norm, dtype=torch.get_default_dtype())
    return torch.clamp(rec / (gen + sigma), 0.0, max_weight).detach()


def adaptive_weight_from_losses(l_rec, l_gen, last_layer_weight, sigma=1e-4, max_weight=1e4):
    """Adaptive weight computed from the actual loss gradients.

    Differentiates both losses with respect to the generator's final layer
    weight (graphs retained so the subsequent backward pass still works).
    """
    rec_grad = torch.autograd.grad(l_rec, last_layer_weight, retain_graph=True)[0]
    gen_grad = torch.autograd.grad(l_gen, last_layer_weight, retain_graph=True)[0]
    return adaptive_weight(rec_grad.norm(), gen_grad.norm(), sigma=sigma, max_weight=max_weight)


def total_generator_loss(l1, lp, ls, lg, alpha=2e-4, beta=1.0):
    """Full generator objective: l1 + lp + alpha * ls + beta * lg."""
    return l1 + lp + alpha * ls + beta * lg
