"""Modality encoders mapping every site modality and the trial into R^n_emb."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .records import DatasetManifest

SEQUENCE_KINDS = ("diagnosis", "prescription", "history")


def init_uniform_fan_in(model: nn.Module, generator: torch.Generator) -> None:
    """Seeded U(-1/sqrt(fan_in), 1/sqrt(fan_in)) for linear and recurrent weights.

    Layer norms keep their unit scale / zero shift.
    """
    for module in model.modules():
        if isinstance(module, nn.Linear):
            fan_in = module.in_features
        elif isinstance(module, nn.LSTM):
            fan_in = module.hidden_size
        else:
            continue
        bound = 1.0 / math.sqrt(fan_in)
        for param in module.parameters(recurse=False):
            with torch.no_grad():
                draw = torch.rand(param.shape, generator=generator, dtype=torch.float64)
                param.copy_((draw * 2 - 1) * bound)


class StaticEncoder(nn.Module):
    """g(x) = max(0, xW + b)V + c."""

    def __init__(self, in_dim: int, n_emb: int = 128):
        super().__init__()
        self.in_dim = in_dim
        self.W = nn.Linear(in_dim, n_emb)
        self.V = nn.Linear(n_emb, n_emb)

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.in_dim:
            raise ValueError(f"static input has width {x.shape[-1]}, expected {self.in_dim}")
        return self.V(F.relu(self.W(x)))


class SequenceEncoder(nn.Module):
    """f(x) = max(0, biLSTM(x)W + b)V + c.

    The biLSTM summary is the final hidden state of both directions
    concatenated (2 * n_emb wide). Categorical inputs are one-hot expanded
    here; real-valued rows (enrollment histories) are fed as given.
    """

    def __init__(self, in_dim: int, n_emb: int = 128, categorical: bool = True):
        super().__init__()
        self.in_dim = in_dim
        self.categorical = categorical
        self.lstm = nn.LSTM(in_dim, n_emb, batch_first=True, bidirectional=True)
        self.W = nn.Linear(2 * n_emb, n_emb)
        self.V = nn.Linear(n_emb, n_emb)

    def summarize(self, x: Tensor, lengths: Tensor | None = None) -> Tensor:
        if self.categorical:
            if x.numel() and (int(x.min()) < 0 or int(x.max()) >= self.in_dim):
                raise IndexError(f"code index outside [0, {self.in_dim})")
            x = F.one_hot(x, self.in_dim).to(self.W.weight.dtype)
        if x.shape[1] == 0:
            raise ValueError("empty sequence for a present modality")
        if lengths is not None:
            if int(lengths.min()) < 1:
                raise ValueError("empty sequence for a present modality")
            packed = nn.utils.rnn.pack_padded_sequence(x, lengths.cpu(), batch_first=True, enforce_sorted=False)
            _, (h_n, _) = self.lstm(packed)
        else:
            _, (h_n, _) = self.lstm(x)
        return torch.cat([h_n[0], h_n[1]], dim=-1)

    def forward(self, x: Tensor, lengths: Tensor | None = None) -> Tensor:
        return self.V(F.relu(self.W(self.summarize(x, lengths))))


@dataclass
class ModalityEmbeddings:
    """Site embeddings stacked as (..., 4, n_emb) in modality order, plus the trial's (..., n_emb).

    Training batches carry leading (B, M) / (B,) dimensions.
    """

    modalities: Tensor
    present: Tensor
    trial: Tensor

    @property
    def s_e(self) -> Tensor:
        return self.modalities[..., 0, :]

    @property
    def d_e(self) -> Tensor:
        return self.modalities[..., 1, :]

    @property
    def p_e(self) -> Tensor:
        return self.modalities[..., 2, :]

    @property
    def e_e(self) -> Tensor:
        return self.modalities[..., 3, :]


class ModalityEncoders(nn.Module):
    def __init__(self, dims: DatasetManifest, n_emb: int = 128):
        super().__init__()
        self.dims = dims
        self.n_emb = n_emb
        self.g_s = StaticEncoder(dims.n_s, n_emb)
        self.g_t = StaticEncoder(dims.n_t, n_emb)
        self.f_d = SequenceEncoder(dims.n_d, n_emb, categorical=True)
        self.f_p = SequenceEncoder(dims.n_p, n_emb, categorical=True)
        self.f_e = SequenceEncoder(dims.n_t_prime + 1, n_emb, categorical=False)

    def encode_sequence(self, kind: str, x: Tensor, lengths: Tensor | None = None) -> Tensor:
        enc = {"diagnosis": self.f_d, "prescription": self.f_p, "history": self.f_e}.get(kind)
        if enc is None:
            raise ValueError(f"unknown sequence kind {kind!r}; expected one of {SEQUENCE_KINDS}")
        return enc(x, lengths)

    def encode_static(self, x: Tensor, which: str) -> Tensor:
        if which == "site_static":
            return self.g_s(x)
        if which == "trial":
            return self.g_t(x)
        raise ValueError(f"unknown static input {which!r}")

    def forward(self, batch) -> ModalityEmbeddings:
        """Encode (B, M) sites; only rows whose mask bit is set are read."""
        B, M = batch.mask.shape[:2]
        mask = batch.mask.reshape(B * M, 4)
        dtype = self.g_s.W.weight.dtype

        def flat(x):
            return x.reshape(B * M, *x.shape[2:])

        static, diag, rx = flat(batch.static), flat(batch.diagnoses), flat(batch.prescriptions)
        hist, hist_len = flat(batch.history), flat(batch.history_len)
        parts = [
            lambda idx: self.g_s(static[idx]),
            lambda idx: self.f_d(diag[idx]),
            lambda idx: self.f_p(rx[idx]),
            lambda idx: self.f_e(hist[idx][:, : int(hist_len[idx].max())], hist_len[idx]),
        ]
        columns = []
        for k, encode in enumerate(parts):
            idx = torch.nonzero(mask[:, k], as_tuple=True)[0]
            col = torch.zeros(B * M, self.n_emb, dtype=dtype)
            if idx.numel():
                col = col.index_copy(0, idx, encode(idx))
            columns.append(col)
        out = torch.stack(columns, dim=1).reshape(B, M, 4, self.n_emb)
        trial = self.g_t(batch.trial)
        return ModalityEmbeddings(out, batch.mask, trial)
