"""Training objectives: source CE, adversarial pair, MSC and its triplet ablation."""
from __future__ import annotations

import math

import torch
import torch.nn.functional as F

# Discriminator probabilities are clamped this far inside (0, 1) before logs.
PROB_EPS = 1e-7


def supervised_ce(logits_s: torch.Tensor, y_s: torch.Tensor) -> torch.Tensor:
    """Mean cross-entropy of source logits against their labels."""
    num_classes = logits_s.shape[1]
    if y_s.numel() and (int(y_s.min()) < 0 or int(y_s.max()) >= num_classes):
        raise ValueError(f"labels must lie in [0, {num_classes})")
    return F.cross_entropy(logits_s, y_s.to(torch.long))


def _check_probs(d: torch.Tensor, name: str) -> torch.Tensor:
    if not bool(((d >= 0) & (d <= 1)).all()):
        raise ValueError(f"{name} must be probabilities in (0, 1)")
    return d.clamp(PROB_EPS, 1 - PROB_EPS)


def adversarial_pair(d_s: torch.Tensor, d_t: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Generator and discriminator losses from discriminator outputs.

    ``d_*`` are the probabilities that a sample comes from the source domain.
    Returns ``(l_adv, l_disc)`` with ``l_adv = -mean log d_t`` and
    ``l_disc = -mean log d_s - mean log(1 - d_t)``.
    """
    d_s = _check_probs(d_s, "source discriminator outputs")
    d_t = _check_probs(d_t, "target discriminator outputs")
    l_adv = -torch.log(d_t).mean()
    l_disc = -torch.log(d_s).mean() - torch.log1p(-d_t).mean()
    return l_adv, l_disc


def msc_loss(s: torch.Tensor, a: torch.Tensor) -> torch.Tensor:
    """Multi-sample contrastive loss over a filtered affinity matrix.

    For each source row the positives (``a == 1``) compete against the
    negatives (``a == -1``) in a softmax over ``exp(s)``; zero entries are
    ignored.  Rows without positives are left out of the mean.  ``s`` lies in
    (0, 1], so the exponentials need no max-shift.
    """
    if s.shape != a.shape:
        raise ValueError(f"similarity {tuple(s.shape)} and affinity {tuple(a.shape)} disagree")
    pos = a == 1
    neg = a == -1
    e = torch.exp(s)
    pos_sum = (e * pos).sum(dim=1)
    neg_sum = (e * neg).sum(dim=1)
    valid = pos.any(dim=1)
    if not bool(valid.any()):
        return s.sum() * 0.0
    pos_sum, neg_sum = pos_sum[valid], neg_sum[valid]
    per_row = torch.log(pos_sum + neg_sum) - torch.log(pos_sum)
    return per_row.mean()


def triplet_from_affinity(s: torch.Tensor, a: torch.Tensor, margin: float = 0.3) -> torch.Tensor:
    """Hard-mined triplet loss in similarity units.

    Each source anchor takes its least similar positive and most similar
    negative; anchors lacking either are skipped.
    """
    if s.shape != a.shape:
        raise ValueError(f"similarity {tuple(s.shape)} and affinity {tuple(a.shape)} disagree")
    pos = a == 1
    neg = a == -1
    valid = pos.any(dim=1) & neg.any(dim=1)
    if not bool(valid.any()):
        return s.sum() * 0.0
    hard_pos = torch.where(pos, s, torch.full_like(s, math.inf)).min(dim=1).values
    hard_neg = torch.where(neg, s, torch.full_like(s, -math.inf)).max(dim=1).values
    return F.relu(margin + hard_neg[valid] - hard_pos[valid]).mean()


def cdan_join(f: torch.Tensor, p: torch.Tensor) -> torch.Tensor:
    """Flattened outer product ``f ⊗ p`` per row: entry ``a * C + b`` is ``f[a] * p[b]``.

    Accepts single vectors or (n, d) / (n, C) batches.
    """
    single = f.dim() == 1
    f2, p2 = (f.unsqueeze(0), p.unsqueeze(0)) if single else (f, p)
    sums = p2.sum(dim=1)
    if not bool(torch.allclose(sums, torch.ones_like(sums), atol=1e-5, rtol=0)):
        raise ValueError("conditioning probabilities must sum to 1")
    joint = torch.bmm(f2.unsqueeze(2), p2.unsqueeze(1)).flatten(1)
    return joint[0] if single else joint


class RandomizedJoin(torch.nn.Module):
    """Fixed random-projection surrogate of the outer product for large ``d * C``.

    ``(f R_f) * (p R_p) / sqrt(out_dim)`` with Gaussian matrices drawn once from ``seed``.
    """

    def __init__(self, feature_dim: int, num_classes: int, out_dim: int = 1024, seed: int = 0):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        self.register_buffer("r_f", torch.randn(feature_dim, out_dim, generator=gen))
        self.register_buffer("r_p", torch.randn(num_classes, out_dim, generator=gen))
        self.out_dim = out_dim

    def forward(self, f: torch.Tensor, p: torch.Tensor) -> torch.Tensor:
        return (f @ self.r_f) * (p @ self.r_p) / math.sqrt(self.out_dim)


class ConditionalJoin(torch.nn.Module):
    """Chooses the exact outer product or the randomized one by size."""

    def __init__(self, feature_dim: int, num_classes: int, max_dim: int = 4096,
                 random_dim: int = 1024, seed: int = 0):
        super().__init__()
        self.randomized = feature_dim * num_classes > max_dim
        self.random = RandomizedJoin(feature_dim, num_classes, random_dim, seed) if self.randomized else None
        self.out_dim = random_dim if self.randomized else feature_dim * num_classes

    def forward(self, f: torch.Tensor, p: torch.Tensor) -> torch.Tensor:
        if self.random is not None:
            return self.random(f, p)
        return cdan_join(f, p)


def grl_coefficient(progress: float) -> float:
    """Reversal strength ramp ``2 / (1 + exp(-10 p)) - 1``."""
    return 2.0 / (1.0 + math.exp(-10.0 * progress)) - 1.0
