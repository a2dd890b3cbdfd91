"""Normalized inverse squared Euclidean similarity and its batched form."""
from __future__ import annotations

import torch

_HALF = (torch.float16, torch.bfloat16)


def _full_precision(x: torch.Tensor) -> torch.Tensor:
    if not torch.is_floating_point(x):
        return x.to(torch.get_default_dtype())
    return x.float() if x.dtype in _HALF else x


def phi(f_i: torch.Tensor, f_j: torch.Tensor) -> torch.Tensor:
    """Similarity ``1 / (1 + ||f_i - f_j||^2)`` of two feature vectors, in (0, 1]."""
    f_i, f_j = _full_precision(torch.as_tensor(f_i)), _full_precision(torch.as_tensor(f_j))
    if f_i.shape != f_j.shape or f_i.dim() != 1:
        raise ValueError(f"phi needs two vectors of equal dimension, got {tuple(f_i.shape)} and {tuple(f_j.shape)}")
    if not (torch.isfinite(f_i).all() and torch.isfinite(f_j).all()):
        raise ValueError("phi received non-finite input")
    return 1.0 / (1.0 + (f_i - f_j).pow(2).sum())


def pairwise_similarity(f_s: torch.Tensor, f_t: torch.Tensor) -> torch.Tensor:
    """``S[i, j] = phi(f_s[i], f_t[j])`` for an (n_s, d) and an (n_t, d) batch.

    Differences are formed explicitly rather than through the
    ``|a|^2 + |b|^2 - 2ab`` expansion, which loses precision for near-identical rows
    and can return distances below zero.
    """
    f_s, f_t = _full_precision(f_s), _full_precision(f_t)
    if f_s.dim() != 2 or f_t.dim() != 2 or f_s.shape[1] != f_t.shape[1]:
        raise ValueError(f"feature dimension mismatch: {tuple(f_s.shape)} vs {tuple(f_t.shape)}")
    if f_s.dtype != f_t.dtype:
        common = torch.promote_types(f_s.dtype, f_t.dtype)
        f_s, f_t = f_s.to(common), f_t.to(common)
    sq_dist = (f_s.unsqueeze(1) - f_t.unsqueeze(0)).pow(2).sum(-1)
    return 1.0 / (1.0 + sq_dist)
