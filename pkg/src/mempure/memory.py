"""Learnable memory dictionary with sparse addressing.

A memory bank holds N prototype vectors. A query is scored against every
item (either by cosine similarity or by a small shared scoring MLP), the
scores are softmaxed into addressing weights, small weights are zeroed by
hard shrinkage, and the query is rewritten as the resulting convex
combination of memory items.
"""

import torch
import torch.nn as nn
import torch.nn.functional as F


def address_softmax(scores):
    """Turn similarity scores into addressing weights on the simplex.

    Softmax over the last dimension, computed stably (max subtraction), so
    arbitrarily large finite scores do not overflow.
    """
    if not torch.isfinite(scores).all():
        raise ValueError("addressing scores must be finite")
    return torch.softmax(scores, dim=-1)


def hard_shrink(w, gamma, alpha_shrink=1e-12):
    """Sparsify addressing weights: zero entries <= gamma, then L1-renormalize.

    Each surviving entry is rescaled as relu(w - gamma) * w / (|w - gamma| +
    alpha_shrink); entries at or below the threshold become exactly zero. If
    every entry shrinks away (e.g. a uniform w with gamma = 1/N), the result
    falls back to a one-hot at the largest pre-shrink weight, ties broken by
    lowest index.
    """
    if alpha_shrink <= 0:
        raise ValueError("alpha_shrink must be positive")
    shifted = w - gamma
    pre = F.relu(shifted) * w / (shifted.abs() + alpha_shrink)
    total = pre.sum(dim=-1, keepdim=True)
    dead = total <= 0
    # safe denominator first, then patch dead rows: torch.where alone would
    # backprop NaN from the 0/0 branch
    normalized = pre / torch.where(dead, torch.ones_like(total), total)
    if bool(dead.any()):
        fallback = F.one_hot(w.detach().argmax(dim=-1), w.shape[-1]).to(w.dtype)
        normalized = torch.where(dead, fallback, normalized)
    return normalized


def retrieve(w, items):
    """Convex combination of memory rows: w [.., N] x items [N, d] -> [.., d]."""
    return w @ items


def addressing_entropy(w, eps=1e-12):
    """Shannon entropy of addressing weights (natural log, 0 log 0 = 0).

    The eps inside the log keeps gradients finite at the exact zeros produced
    by hard shrinkage; the clamp absorbs the resulting -eps-order residue so
    the value stays in [0, log N].
    """
    return torch.clamp(-(w * torch.log(w + eps)).sum(dim=-1), min=0.0)


class ScoringNet(nn.Module):
    """Shared MLP scoring one (query, memory item) pair.

    Input is the concatenation [query ; item] of width 2d; two ReLU hidden
    layers feed a Tanh output, so every score lies in (-1, 1). The same
    parameters score all N items.
    """

    def __init__(self, dim, hidden=None):
        super().__init__()
        if hidden is None:
            hidden = max(64, dim // 4)
        self.dim = dim
        self.hidden = hidden
        self.fc1 = nn.Linear(2 * dim, hidden)
        self.fc2 = nn.Linear(hidden, hidden)
        self.fc3 = nn.Linear(hidden, 1)
        # Tie the two input halves of fc1 at init so each hidden unit sees
        # w.(q + m): the ReLU features then carry query-item interaction from
        # the first step. With independent halves the query shifts every
        # item's score by nearly the same amount, the softmax cancels it, and
        # addressing gets no usable gradient. Training may untie the halves.
        with torch.no_grad():
            self.fc1.weight[:, dim:] = self.fc1.weight[:, :dim]

    def pre_activation(self, pairs):
        """Score before the final Tanh; used by data-dependent calibration."""
        if pairs.shape[-1] != 2 * self.dim:
            raise ValueError(f"scorer expects pair width {2 * self.dim}, got {pairs.shape[-1]}")
        h = F.relu(self.fc1(pairs))
        h = F.relu(self.fc2(h))
        return self.fc3(h).squeeze(-1)

    def forward(self, pairs):
        return torch.tanh(self.pre_activation(pairs))


class MemoryBank(nn.Module):
    """N learnable prototype vectors plus scoring network and shrinkage settings.

    `metric` selects how queries are scored: "learned" uses the scoring MLP,
    "cosine" the handcrafted cosine similarity (kept as an ablation).
    """

    def __init__(self, n_items, dim, gamma=None, alpha_shrink=1e-12,
                 scorer_hidden=None, metric="learned"):
        super().__init__()
        if n_items < 2:
            raise ValueError("memory needs at least 2 items")
        if dim < 1:
            raise ValueError("memory item dimension must be >= 1")
        if gamma is None:
            gamma = 1.0 / n_items
        if not (1.0 / n_items - 1e-12 <= gamma <= 3.0 / n_items + 1e-12):
            raise ValueError(f"gamma={gamma} outside [1/N, 3/N] for N={n_items}")
        if alpha_shrink <= 0:
            raise ValueError("alpha_shrink must be positive")
        if metric not in ("learned", "cosine"):
            raise ValueError(f"unknown metric {metric!r}")
        self.n_items = n_items
        self.dim = dim
        self.gamma = float(gamma)
        self.alpha_shrink = float(alpha_shrink)
        self.metric = metric
        bound = 1.0 / dim ** 0.5
        self.items = nn.Parameter(torch.empty(n_items, dim).uniform_(-bound, bound))
        self.scorer = ScoringNet(dim, scorer_hidden)

    def _check_query(self, query):
        if query.shape[-1] != self.dim:
            raise ValueError(f"query dim {query.shape[-1]} != memory dim {self.dim}")

    @torch.no_grad()
    def seed_items(self, queries, generator=None, jitter=0.1):
        """Re-initialize the rows from example queries plus small jitter.

        Fresh rows are orders of magnitude smaller than real encoder latents,
        so early scores barely depend on which item is paired with the query
        and addressing starts out uniform. Seeding rows from the query
        distribution gives every metric contrast from the first step. With
        more queries than rows, an evenly spaced subsample is used so the
        rows cover the whole span of the examples (taking a prefix would
        leave the tail — e.g. later classes of a class-ordered set — with no
        nearby prototype); with fewer, rows are tiled over the examples.
        Jitter (a fraction of the query std) keeps duplicate rows distinct.
        """
        if queries.ndim != 2 or queries.shape[1] != self.dim:
            raise ValueError(
                f"seed queries must be [n, {self.dim}], got {tuple(queries.shape)}")
        if queries.shape[0] < 1:
            raise ValueError("need at least one seed query")
        queries = queries.detach().to(self.items.dtype)
        if queries.shape[0] >= self.n_items:
            idx = torch.linspace(0, queries.shape[0] - 1, self.n_items).round().long()
        else:
            idx = torch.arange(self.n_items) % queries.shape[0]
        base = queries[idx]
        scale = jitter * queries.std() + 1e-6
        noise = torch.randn(self.n_items, self.dim, generator=generator,
                            dtype=self.items.dtype, device=self.items.device)
        self.items.copy_(base + scale * noise)

    def cosine_scores(self, query):
        """Cosine similarity of the query against every memory row, in [-1, 1]."""
        self._check_query(query)
        qn = torch.linalg.vector_norm(query, dim=-1, keepdim=True)
        if not bool((qn > 0).all()):
            raise ValueError("degenerate vector: zero-norm query")
        mn = torch.linalg.vector_norm(self.items, dim=-1)
        if not bool((mn > 0).all()):
            raise ValueError("degenerate vector: zero-norm memory item")
        return (query @ self.items.T) / (qn * mn)

    def _pairs(self, query):
        batch_shape = query.shape[:-1]
        q = query.unsqueeze(-2).expand(*batch_shape, self.n_items, self.dim)
        m = self.items.expand(*batch_shape, self.n_items, self.dim)
        return torch.cat([q, m], dim=-1)

    def learned_scores(self, query):
        """Score the query against every row with the shared MLP, in (-1, 1)."""
        self._check_query(query)
        return self.scorer(self._pairs(query))

    @torch.no_grad()
    def calibrate_scorer(self, queries, max_queries=64):
        """Standardize each scorer layer over real (query, item) pairs.

        Encoder latents have per-coordinate scale far from the unit variance
        the default Linear init assumes, so scorer activations end up
        bias-dominated and the per-item score spread collapses to ~1e-3:
        softmax then starts near-uniform for every query and shrinkage erodes
        all structure. Rescaling every layer so its pre-activations are
        mean-0/std-1 on sampled pairs restores contrast while keeping each
        individual matrix moderately scaled (fixing only the head would
        concentrate a ~1000x gain there and make the Tanh pin at the first
        parameter drift). Init-time policy only; the architecture is untouched.
        """
        self._check_query(queries)
        pairs = self._pairs(queries.detach()[:max_queries])
        h = pairs.reshape(-1, 2 * self.dim)
        for layer, last in ((self.scorer.fc1, False), (self.scorer.fc2, False),
                            (self.scorer.fc3, True)):
            pre = F.linear(h, layer.weight, layer.bias)
            dims = None if last else 0
            mu = pre.mean() if last else pre.mean(dim=dims)
            sd = (pre.std() if last else pre.std(dim=dims)).clamp_min(1e-6)
            layer.weight.div_(sd.reshape(-1, 1))
            layer.bias.copy_((layer.bias - mu) / sd)
            if not last:
                h = F.relu((pre - mu) / sd)

    def scores(self, query):
        if self.metric == "cosine":
            return self.cosine_scores(query)
        return self.learned_scores(query)

    def address(self, query):
        """Full addressing path: scores -> softmax -> hard shrinkage."""
        w = address_softmax(self.scores(query))
        return hard_shrink(w, self.gamma, self.alpha_shrink)


class MemoryModule(nn.Module):
    """Rewrites a feature map as a mixture of memory items.

    A 1x1 conv reduces the map to `reduce_channels`, the whole reduced map is
    flattened into a single query per sample, addressed against the bank, and
    the retrieved vector is reshaped and restored to the input channel count.
    Returns the rewritten map and the sparse addressing weights (needed for
    the entropy regularizer).
    """

    def __init__(self, in_channels, height, width, n_items, reduce_channels,
                 gamma=None, alpha_shrink=1e-12, scorer_hidden=None, metric="learned"):
        super().__init__()
        dim = height * width * reduce_channels
        self.in_channels = in_channels
        self.height = height
        self.width = width
        self.reduce_channels = reduce_channels
        self.bank = MemoryBank(n_items, dim, gamma=gamma, alpha_shrink=alpha_shrink,
                               scorer_hidden=scorer_hidden, metric=metric)
        self.reduce = nn.Conv2d(in_channels, reduce_channels, kernel_size=1)
        self.restore = nn.Conv2d(reduce_channels, in_channels, kernel_size=1)

    def forward(self, z, bypass=False, weights_override=None):
        """Purify a feature map [B, C, H, W] -> (same shape, weights | None).

        `bypass` skips addressing entirely and passes the reduced map straight
        through (plain-autoencoder sanity mode). `weights_override` forces the
        given addressing weights instead of computing them (analysis hook).
        """
        b, c, h, w = z.shape
        if (c, h, w) != (self.in_channels, self.height, self.width):
            raise ValueError(
                f"memory module built for [{self.in_channels}, {self.height}, "
                f"{self.width}], got [{c}, {h}, {w}]")
        reduced = self.reduce(z)
        query = reduced.flatten(1)
        if bypass:
            mixed, weights = query, None
        elif weights_override is not None:
            weights = weights_override
            mixed = retrieve(weights, self.bank.items)
        else:
            weights = self.bank.address(query)
            mixed = retrieve(weights, self.bank.items)
        restored = mixed.reshape(b, self.reduce_channels, self.height, self.width)
        return self.restore(restored), weights
