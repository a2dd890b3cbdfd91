"""Per-iteration cross-domain affinity: kNN pseudo-labels, ratio test, filtering.

Everything here works on detached values; assignments are discrete and are
treated as data by the losses downstream.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch

from .core import ExperimentConfig
from .similarity import pairwise_similarity


@dataclass
class PseudoLabelRecord:
    y_hat: torch.Tensor  # (n_t,) long
    gamma: torch.Tensor  # (n_t,) confidence; ratio for knn, max softmax for classifier
    kept: torch.Tensor  # (n_t,) bool

    @property
    def kept_fraction(self) -> float:
        n = self.kept.numel()
        return float(self.kept.sum()) / n if n else 0.0

    def precision(self, y_true: torch.Tensor, kept_only: bool = True) -> float:
        """Pseudo-label accuracy against held-aside labels (analysis only)."""
        mask = self.kept if kept_only else torch.ones_like(self.kept)
        if not bool(mask.any()):
            return float("nan")
        return float((self.y_hat[mask] == y_true[mask].to(self.y_hat)).double().mean())


def num_kept(mu: float, n_t: int) -> int:
    """floor(mu * n_t), guarded against binary round-off just below an integer."""
    return min(n_t, int(math.floor(mu * n_t + 1e-9)))


def _top_indices(scores: torch.Tensor, count: int) -> torch.Tensor:
    # stable descending sort: equal scores keep ascending index order
    order = torch.sort(scores, descending=True, stable=True).indices
    return order[:count]


def knn_pseudo_labels(s: torch.Tensor, y_s: torch.Tensor, k: int, num_classes: int | None = None) -> torch.Tensor:
    """Majority class among each target's ``k`` most similar source rows.

    Ties in the vote go to the class with the larger summed similarity inside
    the top-k; remaining ties go to the class whose neighbor ranks first.
    """
    s = s.detach()
    n_s, n_t = s.shape
    if k > n_s:
        raise ValueError(f"k={k} exceeds the number of source samples {n_s}")
    if k < 1:
        raise ValueError("k must be at least 1")
    y_s = y_s.to(torch.long)
    if num_classes is None:
        num_classes = int(y_s.max()) + 1
    # (k, n_t) neighbor indices in rank order
    order = torch.sort(s, dim=0, descending=True, stable=True).indices[:k]
    neigh_labels = y_s[order]
    neigh_sims = torch.gather(s, 0, order).to(torch.float64)

    votes = torch.zeros(num_classes, n_t, dtype=torch.long)
    votes.scatter_add_(0, neigh_labels, torch.ones_like(neigh_labels))
    agg = torch.zeros(num_classes, n_t, dtype=torch.float64)
    agg.scatter_add_(0, neigh_labels, neigh_sims)
    ranks = torch.arange(k).unsqueeze(1).expand(k, n_t)
    first_rank = torch.full((num_classes, n_t), k, dtype=torch.long)
    first_rank.scatter_reduce_(0, neigh_labels, ranks, reduce="amin")

    tied = votes == votes.max(dim=0, keepdim=True).values
    agg_masked = torch.where(tied, agg, torch.full_like(agg, -math.inf))
    tied = tied & (agg_masked == agg_masked.max(dim=0, keepdim=True).values)
    rank_masked = torch.where(tied, first_rank, torch.full_like(first_rank, k + 1))
    return rank_masked.argmin(dim=0)


def build_affinity(y_s: torch.Tensor, y_hat: torch.Tensor) -> torch.Tensor:
    """Dense (n_s, n_t) matrix: +1 where the labels agree, -1 elsewhere."""
    same = y_s.to(torch.long).unsqueeze(1) == y_hat.to(torch.long).unsqueeze(0)
    return torch.where(same, 1, -1).to(torch.int8)


def _capped_column_sums(s: torch.Tensor, mask: torch.Tensor, m: int | None) -> torch.Tensor:
    masked = torch.where(mask, s, torch.full_like(s, -math.inf))
    if m is not None:
        masked = torch.sort(masked, dim=0, descending=True).values[: min(m, s.shape[0])]
    return torch.where(torch.isfinite(masked), masked, torch.zeros_like(masked)).sum(dim=0)


def similarity_ratio(s: torch.Tensor, y_s: torch.Tensor, y_hat: torch.Tensor, m: int,
                     cap: str = "both") -> torch.Tensor:
    """Confidence of each pseudo-label: capped like-similarity over unlike-similarity.

    ``cap="both"`` keeps only the ``m`` largest similarities in numerator and
    denominator; ``cap="unlike"`` caps the denominator only.
    """
    if m < 1:
        raise ValueError("m must be at least 1")
    if cap not in ("both", "unlike"):
        raise ValueError(f"unknown ratio cap {cap!r}")
    s = s.detach().to(torch.float64)
    like = y_s.to(torch.long).unsqueeze(1) == y_hat.to(torch.long).unsqueeze(0)
    if bool((~like).sum(dim=0).eq(0).any()):
        raise ValueError("ratio test undefined with one class")
    numerator = _capped_column_sums(s, like, m if cap == "both" else None)
    denominator = _capped_column_sums(s, ~like, m)
    return numerator / denominator


def filter_by_ratio(a: torch.Tensor, gamma: torch.Tensor, mu: float) -> tuple[torch.Tensor, torch.Tensor]:
    """Keep the floor(mu * n_t) target columns with the highest confidence.

    Ties at the cutoff favor the lower target index.  Rejected columns are zeroed.
    """
    n_t = a.shape[1]
    kept = torch.zeros(n_t, dtype=torch.bool)
    kept[_top_indices(gamma.detach(), num_kept(mu, n_t))] = True
    filtered = torch.where(kept.unsqueeze(0), a, torch.zeros_like(a))
    return filtered, kept


def classifier_pseudo_labels(p_t: torch.Tensor, mu: float) -> PseudoLabelRecord:
    """Softmax-confidence pseudo-labels (the baseline alternative to kNN)."""
    p_t = p_t.detach()
    row_sums = p_t.sum(dim=1)
    if not bool(torch.allclose(row_sums, torch.ones_like(row_sums), atol=1e-5, rtol=0)):
        raise ValueError("classifier probabilities must be normalized rows")
    confidence = p_t.max(dim=1).values
    # first maximal column, i.e. lowest class index among ties
    y_hat = (p_t == confidence.unsqueeze(1)).to(torch.int8).argmax(dim=1)
    kept = torch.zeros(p_t.shape[0], dtype=torch.bool)
    kept[_top_indices(confidence, num_kept(mu, p_t.shape[0]))] = True
    return PseudoLabelRecord(y_hat=y_hat, gamma=confidence.to(torch.float64), kept=kept)


def affinity_step(f_s: torch.Tensor, y_s: torch.Tensor, f_t: torch.Tensor,
                  cfg: ExperimentConfig) -> tuple[torch.Tensor, PseudoLabelRecord, torch.Tensor]:
    """One pass of the per-iteration affinity construction.

    Returns the filtered affinity matrix, the pseudo-label record and the
    unfiltered matrix (kept for exports).
    """
    m = cfg.per_class if cfg.m_cap == "auto" else int(cfg.m_cap)
    s = pairwise_similarity(f_s.detach().to(torch.float64), f_t.detach().to(torch.float64))
    y_hat = knn_pseudo_labels(s, y_s, cfg.k, cfg.num_classes)
    a = build_affinity(y_s, y_hat)
    gamma = similarity_ratio(s, y_s, y_hat, m, cap=cfg.ratio_cap)
    filtered, kept = filter_by_ratio(a, gamma, cfg.mu)
    return filtered, PseudoLabelRecord(y_hat=y_hat, gamma=gamma, kept=kept), a


def classifier_affinity_step(y_s: torch.Tensor, p_t: torch.Tensor,
                             cfg: ExperimentConfig) -> tuple[torch.Tensor, PseudoLabelRecord, torch.Tensor]:
    record = classifier_pseudo_labels(p_t, cfg.mu)
    a = build_affinity(y_s, record.y_hat)
    filtered = torch.where(record.kept.unsqueeze(0), a, torch.zeros_like(a))
    return filtered, record, a


def agreement(a: torch.Tensor, a_true: torch.Tensor) -> float:
    """Elementwise match rate over the nonzero columns of ``a``."""
    cols = (a != 0).any(dim=0)
    if not bool(cols.any()):
        return float("nan")
    return float((a[:, cols] == a_true[:, cols]).double().mean())
