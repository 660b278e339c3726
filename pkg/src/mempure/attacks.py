"""White- and black-box evasion attacks with exact L-infinity budgets.

All attacks consume a `logit_fn` mapping an image batch [B, C, H, W] in
[0, 1] to class logits [B, K], plus integer labels. They maximize
cross-entropy within an epsilon ball around the clean batch, intersected
with the valid pixel range. Budgets are exact: measured in float64, no
pixel of the result ever sits more than epsilon away from its original.
"""

from dataclasses import dataclass

import torch
import torch.nn.functional as F


def enforce_linf_budget(x_adv, x, epsilon):
    """Project x_adv into the L-inf ball of radius epsilon around x, within [0, 1].

    The ball bounds are formed in float64 and then rounded to the working
    dtype; a bound that rounding pushed outside the true ball is pulled back
    by one representable step. The result therefore satisfies
    |out - x| <= epsilon exactly even when measured in float64.
    """
    if epsilon < 0:
        raise ValueError("epsilon must be non-negative")
    if x_adv.shape != x.shape:
        raise ValueError(f"shape mismatch {tuple(x_adv.shape)} vs {tuple(x.shape)}")
    if epsilon == 0:
        return x.detach().clone()
    x = x.detach()
    x64 = x.double()
    lo64 = torch.clamp(x64 - epsilon, 0.0, 1.0)
    hi64 = torch.clamp(x64 + epsilon, 0.0, 1.0)
    lo = lo64.to(x.dtype)
    hi = hi64.to(x.dtype)
    lo = torch.where(lo.double() < lo64, torch.nextafter(lo, torch.ones_like(lo)), lo)
    hi = torch.where(hi.double() > hi64, torch.nextafter(hi, -torch.ones_like(hi)), hi)
    return torch.clamp(x_adv.detach(), min=lo, max=hi)


def _ce_gradient(logit_fn, x, y):
    x_req = x.detach().clone().requires_grad_(True)
    loss = F.cross_entropy(logit_fn(x_req), y)
    return torch.autograd.grad(loss, x_req)[0]


def fgsm_attack(logit_fn, x, y, epsilon):
    """Single-step sign-gradient attack."""
    x = x.detach()
    grad = _ce_gradient(logit_fn, x, y)
    return enforce_linf_budget(x + epsilon * grad.sign(), x, epsilon)


def pgd_attack(logit_fn, x, y, epsilon, steps=10, step_size=None,
               random_start=True, generator=None):
    """Iterated sign-gradient attack with projection after every step.

    With random_start=False, steps=1 and step_size=epsilon this reduces
    exactly to the single-step attack.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    if step_size is None:
        step_size = epsilon / 4.0
    x = x.detach()
    if random_start and epsilon > 0:
        noise = torch.rand(x.shape, generator=generator, dtype=x.dtype, device=x.device)
        x_adv = enforce_linf_budget(x + (2.0 * noise - 1.0) * epsilon, x, epsilon)
    else:
        x_adv = x.clone()
    for _ in range(steps):
        grad = _ce_gradient(logit_fn, x_adv, y)
        x_adv = enforce_linf_budget(x_adv + step_size * grad.sign(), x, epsilon)
    return x_adv


def spsa_gradient(loss_fn, x, n_probes, delta, generator=None):
    """Two-sided finite-difference gradient estimate along random sign vectors.

    `loss_fn` must return one loss value per sample ([B]); each probe draws a
    Bernoulli +-1 direction, evaluates the loss at x +- delta * direction and
    accumulates (difference / 2 delta) * direction. The average over
    `n_probes` probes converges to the true gradient.
    """
    if n_probes < 1:
        raise ValueError("n_probes must be >= 1")
    if delta <= 0:
        raise ValueError("delta must be positive")
    estimate = torch.zeros_like(x)
    lead = (-1,) + (1,) * (x.dim() - 1)
    with torch.no_grad():
        for _ in range(n_probes):
            direction = torch.randint(
                0, 2, x.shape, generator=generator, device=x.device).to(x.dtype) * 2.0 - 1.0
            gap = loss_fn(x + delta * direction) - loss_fn(x - delta * direction)
            estimate += (gap / (2.0 * delta)).reshape(lead) * direction
    return estimate / n_probes


def spsa_attack(logit_fn, x, y, epsilon, steps=10, batch_q=32, delta=0.01,
                learning_rate=0.01, generator=None):
    """Gradient-free attack: sign ascent on the SPSA gradient estimate.

    Returns (adversarial batch, number of logit_fn calls); every step costs
    batch_q probes with two evaluations each, so the count is
    steps * batch_q * 2.
    """
    queries = 0

    def loss_vec(batch):
        nonlocal queries
        queries += 1
        return F.cross_entropy(logit_fn(batch), y, reduction="none")

    x = x.detach()
    x_adv = x.clone()
    for _ in range(steps):
        grad = spsa_gradient(loss_vec, x_adv, batch_q, delta, generator=generator)
        x_adv = enforce_linf_budget(x_adv + learning_rate * grad.sign(), x, epsilon)
    return x_adv, queries


ATTACK_FAMILIES = ("fgsm", "pgd", "spsa")


@dataclass
class AttackSpec:
    """Everything needed to reproduce one attack run.

    `steps` applies to pgd and spsa; `step_size` to pgd (None means
    epsilon / 4); `learning_rate`, `perturbation_scale` and `batch_q` to
    spsa only. `seed` pins the attack's internal randomness.
    """

    family: str
    epsilon: float
    steps: int = 10
    step_size: float = None
    learning_rate: float = 0.01
    perturbation_scale: float = 0.01
    batch_q: int = 32
    seed: int = 0

    def validate(self):
        if self.family not in ATTACK_FAMILIES:
            raise ValueError(f"unknown attack family {self.family!r}; "
                             f"choose from {ATTACK_FAMILIES}")
        if self.epsilon < 0:
            raise ValueError("epsilon must be non-negative")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.step_size is not None and self.step_size <= 0:
            raise ValueError("step_size must be positive")
        if self.learning_rate <= 0 or self.perturbation_scale <= 0:
            raise ValueError("learning_rate and perturbation_scale must be positive")
        if self.batch_q < 1:
            raise ValueError("batch_q must be >= 1")
        return self

    def run(self, logit_fn, x, y, seed_offset=0):
        """Execute the attack; returns only the adversarial batch."""
        self.validate()
        generator = torch.Generator().manual_seed(int(self.seed) + int(seed_offset))
        if self.family == "fgsm":
            return fgsm_attack(logit_fn, x, y, self.epsilon)
        if self.family == "pgd":
            return pgd_attack(logit_fn, x, y, self.epsilon, steps=self.steps,
                              step_size=self.step_size, generator=generator)
        return spsa_attack(logit_fn, x, y, self.epsilon, steps=self.steps,
                           batch_q=self.batch_q, delta=self.perturbation_scale,
                           learning_rate=self.learning_rate, generator=generator)[0]
