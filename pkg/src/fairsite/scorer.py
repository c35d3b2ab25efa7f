"""Set scorer: post-norm transformer encoder layers plus a two-layer head.

No positional encoding is used, so the map from the M trial-site rows to
the M scores is permutation equivariant.
"""

from __future__ import annotations

import torch.nn.functional as F
from torch import Tensor, nn

from .fusion import MultiHeadAttention


class EncoderLayer(nn.Module):
    def __init__(self, d: int, d_ff: int, n_heads: int = 4, eps: float = 1e-5):
        super().__init__()
        self.att = MultiHeadAttention(d, n_heads)
        self.ln1 = nn.LayerNorm(d, eps=eps)
        self.ln2 = nn.LayerNorm(d, eps=eps)
        self.W = nn.Linear(d, d_ff)
        self.V = nn.Linear(d_ff, d)

    def forward(self, H: Tensor) -> Tensor:
        H1 = self.ln1(H + self.att(H, H, H))
        return self.ln2(H1 + self.V(F.relu(self.W(H1))))


class SiteScorer(nn.Module):
    """q = max(0, H_L W_f + b_f) V_f + c_f after ``n_layers`` encoder layers."""

    def __init__(self, d: int = 256, d_ff: int = 128, n_heads: int = 4, n_layers: int = 2, d_head: int = 64):
        super().__init__()
        self.layers = nn.ModuleList(EncoderLayer(d, d_ff, n_heads) for _ in range(n_layers))
        self.W_f = nn.Linear(d, d_head)
        self.V_f = nn.Linear(d_head, 1)

    def forward(self, H: Tensor) -> Tensor:
        if not bool(H.isfinite().all()):
            raise ValueError("non-finite trial-site representation")
        for layer in self.layers:
            H = layer(H)
        return self.V_f(F.relu(self.W_f(H))).squeeze(-1)
