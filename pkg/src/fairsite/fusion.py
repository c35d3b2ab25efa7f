"""Fusion of present modality embeddings into one trial-site representation."""

from __future__ import annotations

import math

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .encoders import ModalityEmbeddings

# Added to absent-slot logits; exp() of it underflows to exactly 0 in float32/64.
MASK_FILL = -1e9


class MultiHeadAttention(nn.Module):
    """att(Q, K, V) = concat(head_1..head_h) W_O with optional key masking.

    Each head projects width ``d`` down to ``d / n_heads``. Projections carry
    no bias. ``key_mask`` (True = attendable) gets exactly zero weight where
    False; surviving weights are renormalized so they sum to one.
    """

    def __init__(self, d: int, n_heads: int = 4):
        super().__init__()
        if d % n_heads:
            raise ValueError(f"width {d} not divisible by {n_heads} heads")
        self.d = d
        self.n_heads = n_heads
        self.d_head = d // n_heads
        self.W_Q = nn.Linear(d, d, bias=False)
        self.W_K = nn.Linear(d, d, bias=False)
        self.W_V = nn.Linear(d, d, bias=False)
        self.W_O = nn.Linear(d, d, bias=False)

    def _split(self, x: Tensor) -> Tensor:
        # (..., L, d) -> (..., h, L, d_head)
        *lead, L, _ = x.shape
        return x.reshape(*lead, L, self.n_heads, self.d_head).transpose(-3, -2)

    def forward(self, query: Tensor, keys: Tensor, values: Tensor,
                key_mask: Tensor | None = None, return_weights: bool = False):
        q = self._split(self.W_Q(query))
        k = self._split(self.W_K(keys))
        v = self._split(self.W_V(values))
        logits = q @ k.transpose(-1, -2) / math.sqrt(self.d_head)
        if key_mask is not None:
            keep = key_mask.unsqueeze(-2).unsqueeze(-2).to(logits.dtype)
            logits = logits + (1.0 - keep) * MASK_FILL
            weights = torch.softmax(logits, dim=-1) * keep
            weights = weights / weights.sum(dim=-1, keepdim=True)
        else:
            weights = torch.softmax(logits, dim=-1)
        heads = weights @ v
        *lead, h, L, dh = heads.shape
        out = self.W_O(heads.transpose(-3, -2).reshape(*lead, L, h * dh))
        return (out, weights) if return_weights else out


def _per_site_trial(emb: ModalityEmbeddings) -> Tensor:
    """Broadcast the trial embedding (..., n_emb) to every site (..., M, n_emb)."""
    if emb.trial.dim() == emb.modalities.dim() - 1:
        return emb.trial
    lead = emb.modalities.shape[:-2]
    return emb.trial.unsqueeze(-2).expand(*lead, emb.trial.shape[-1])


class MCATFusion(nn.Module):
    """Masked cross-attention: the trial embedding queries the site's present modalities."""

    def __init__(self, n_emb: int = 128, n_heads: int = 4):
        super().__init__()
        self.att = MultiHeadAttention(n_emb, n_heads)

    def forward(self, emb: ModalityEmbeddings, return_weights: bool = False):
        mask = emb.present
        if not bool(mask.any(dim=-1).all()):
            raise ValueError("every site needs at least one present modality")
        # Zero absent slots before projection so their content can never leak.
        mods = torch.where(mask.unsqueeze(-1), emb.modalities, torch.zeros((), dtype=emb.modalities.dtype))
        trial = _per_site_trial(emb)
        h_prime, weights = self.att(trial.unsqueeze(-2), mods, mods, key_mask=mask, return_weights=True)
        h = torch.cat([h_prime.squeeze(-2), trial], dim=-1)
        return (h, weights.squeeze(-2)) if return_weights else h


class FCFusion(nn.Module):
    """Ablation: one ReLU layer over the zero-filled modality embeddings and the trial."""

    def __init__(self, n_emb: int = 128):
        super().__init__()
        self.layer = nn.Linear(5 * n_emb, n_emb)

    def forward(self, emb: ModalityEmbeddings) -> Tensor:
        mask = emb.present
        if not bool(mask.any(dim=-1).all()):
            raise ValueError("every site needs at least one present modality")
        mods = torch.where(mask.unsqueeze(-1), emb.modalities, torch.zeros((), dtype=emb.modalities.dtype))
        trial = _per_site_trial(emb)
        h_prime = F.relu(self.layer(torch.cat([mods.flatten(-2), trial], dim=-1)))
        return torch.cat([h_prime, trial], dim=-1)


def make_fusion(kind: str, n_emb: int = 128, n_heads: int = 4) -> nn.Module:
    if kind == "mcat":
        return MCATFusion(n_emb, n_heads)
    if kind == "fc":
        return FCFusion(n_emb)
    raise ValueError(f"unknown fusion kind {kind!r}; expected 'mcat' or 'fc'")
