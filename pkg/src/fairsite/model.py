"""The full scoring network: encoders -> fusion -> set scorer."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import Tensor, nn

from .encoders import ModalityEmbeddings, ModalityEncoders, init_uniform_fan_in
from .fusion import make_fusion
from .records import DatasetManifest, RankingInstance, SiteRecord, TrialRecord
from .scorer import SiteScorer


@dataclass
class InstanceBatch:
    """Tensor view of B ranking instances with M sites each.

    Content of masked-out modalities is never copied in; those rows hold
    zeros. History enrollments enter as log1p(count).
    """

    trial: Tensor  # (B, n_t)
    static: Tensor  # (B, M, n_s)
    diagnoses: Tensor  # (B, M, n_c) long
    prescriptions: Tensor  # (B, M, n_c) long
    history: Tensor  # (B, M, n_h, n_t' + 1)
    history_len: Tensor  # (B, M) long
    mask: Tensor  # (B, M, 4) bool

    @property
    def shape(self) -> tuple:
        return tuple(self.mask.shape[:2])


def _site_arrays(sites, dims: DatasetManifest):
    M = len(sites)
    static = np.zeros((M, dims.n_s))
    diag = np.zeros((M, dims.n_c), dtype=np.int64)
    rx = np.zeros((M, dims.n_c), dtype=np.int64)
    hist = np.zeros((M, dims.n_h, dims.n_t_prime + 1))
    hist_len = np.zeros(M, dtype=np.int64)
    mask = np.zeros((M, 4), dtype=bool)
    for i, site in enumerate(sites):
        mask[i] = site.mask
        if site.mask[0]:
            static[i] = site.static
        if site.mask[1]:
            diag[i] = site.diagnoses
        if site.mask[2]:
            rx[i] = site.prescriptions
        if site.mask[3]:
            rows = site.enrollment_history
            hist[i, : len(rows), :-1] = rows[:, :-1]
            hist[i, : len(rows), -1] = np.log1p(rows[:, -1])
            hist_len[i] = len(rows)
    return static, diag, rx, hist, hist_len, mask


def tensorize_many(pairs, dims: DatasetManifest, dtype=torch.float32) -> InstanceBatch:
    """Stack (trial, sites) pairs that share the same M."""
    arrays = [_site_arrays(sites, dims) for _, sites in pairs]
    stacked = [np.stack(parts) for parts in zip(*arrays)]
    trials = np.stack([np.array(trial.features) for trial, _ in pairs])
    static, diag, rx, hist, hist_len, mask = stacked
    return InstanceBatch(
        trial=torch.tensor(trials, dtype=dtype),
        static=torch.tensor(static, dtype=dtype),
        diagnoses=torch.tensor(diag),
        prescriptions=torch.tensor(rx),
        history=torch.tensor(hist, dtype=dtype),
        history_len=torch.tensor(hist_len),
        mask=torch.tensor(mask),
    )


def tensorize(inst: RankingInstance, dims: DatasetManifest, dtype=torch.float32) -> InstanceBatch:
    return tensorize_many([(inst.trial, inst.sites)], dims, dtype)


def collate(batches) -> InstanceBatch:
    """Concatenate already-tensorized batches along the instance axis."""
    return InstanceBatch(*(torch.cat(parts) for parts in zip(*(
        (b.trial, b.static, b.diagnoses, b.prescriptions, b.history, b.history_len, b.mask) for b in batches))))


class SiteSelectionModel(nn.Module):
    """Scores the M candidate sites of one trial."""

    def __init__(self, dims: DatasetManifest, fusion: str = "mcat", n_emb: int = 128, n_heads: int = 4,
                 n_layers: int = 2, seed: int = 0):
        super().__init__()
        self.dims = dims
        self.fusion_kind = fusion
        self.n_emb = n_emb
        self.encoders = ModalityEncoders(dims, n_emb)
        self.fusion = make_fusion(fusion, n_emb, n_heads)
        self.scorer = SiteScorer(2 * n_emb, n_emb, n_heads, n_layers)
        init_uniform_fan_in(self, torch.Generator().manual_seed(seed))

    @property
    def dtype(self) -> torch.dtype:
        return self.encoders.g_s.W.weight.dtype

    def represent(self, batch: InstanceBatch) -> Tensor:
        return self.fusion(self.encoders(batch))

    def forward(self, batch: InstanceBatch) -> Tensor:
        """Scores of shape (B, M)."""
        return self.scorer(self.represent(batch))

    def score(self, inst: RankingInstance) -> np.ndarray:
        with torch.no_grad():
            return self(tensorize(inst, self.dims, self.dtype))[0].cpu().numpy().astype(np.float64)


def encode_site(model: SiteSelectionModel, site: SiteRecord, trial: TrialRecord) -> ModalityEmbeddings:
    """Embeddings of a single site; absent modalities come back as zeros."""
    batch = tensorize_many([(trial, [site])], model.dims, model.dtype)
    emb = model.encoders(batch)
    return ModalityEmbeddings(emb.modalities[0, 0], emb.present[0, 0], emb.trial[0])
