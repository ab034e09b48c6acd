"""Per-class centroid feature banks and the residual cross-attention enhancer."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from ntprompt.backbone import DTYPE
from ntprompt.errors import BankConstructionError, ConfigError


def tensor_digest(*arrays) -> str:
    h = hashlib.sha256()
    for a in arrays:
        a = np.ascontiguousarray(a.detach().cpu().numpy() if torch.is_tensor(a) else a)
        h.update(str(a.dtype).encode())
        h.update(str(a.shape).encode())
        h.update(a.tobytes())
    return h.hexdigest()


@dataclass(frozen=True)
class FeatureBank:
    centroids: torch.Tensor  # [N, C]
    sample_ids: np.ndarray  # [N, K]
    confidences: np.ndarray  # [N, K]
    domain_tag: str
    content_hash: str

    @property
    def n_classes(self):
        return self.centroids.shape[0]

    def current_hash(self) -> str:
        return tensor_digest(self.centroids, self.sample_ids, self.confidences)

    def verify(self):
        if self.current_hash() != self.content_hash:
            raise BankConstructionError(f"{self.domain_tag} feature bank was modified after construction")


def select_top_k(labels, confidences, n_classes, k, sample_ids):
    """Per class, ids of the k most confident candidates (ties -> lower id)."""
    labels = np.asarray(labels)
    confidences = np.asarray(confidences, dtype=np.float64)
    chosen = []
    for c in range(n_classes):
        idx = np.flatnonzero(labels == c)
        if len(idx) < k:
            raise BankConstructionError(
                f"class {c} has {len(idx)} candidates, need at least K={k}", class_index=c
            )
        # lexsort sorts by the last key first
        order = np.lexsort((sample_ids[idx], -confidences[idx]))
        chosen.append(idx[order[:k]])
    return np.stack(chosen)


def build_feature_bank(features, labels, confidences, n_classes, k=5, domain_tag="authorized", sample_ids=None):
    features = torch.as_tensor(features, dtype=DTYPE)
    s = features.shape[0]
    if s < n_classes * k:
        raise BankConstructionError(f"need at least N*K={n_classes * k} samples, got {s}")
    sample_ids = np.arange(s) if sample_ids is None else np.asarray(sample_ids)
    positions = select_top_k(labels, confidences, n_classes, k, sample_ids)
    # accumulate in selection order, then divide: a fixed, reproducible summation
    centroids = features[torch.as_tensor(positions[:, 0])].clone()
    for j in range(1, k):
        centroids += features[torch.as_tensor(positions[:, j])]
    centroids /= k
    ids = sample_ids[positions]
    conf = np.asarray(confidences, dtype=np.float64)[positions]
    centroids.requires_grad_(False)
    return FeatureBank(centroids, ids, conf, domain_tag, tensor_digest(centroids, ids, conf))


class STAM(nn.Module):
    """s = out(softmax(Q K^T / sqrt(d_k)) V) + f, queries from f, keys/values from the bank.

    The output map is a pointwise linear layer, zero-initialised so the module
    starts as the identity.
    """

    def __init__(self, dim, seed=0):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        self.dim = dim
        self.q = nn.Linear(dim, dim).to(DTYPE)
        self.k = nn.Linear(dim, dim).to(DTYPE)
        self.v = nn.Linear(dim, dim).to(DTYPE)
        self.out = nn.Linear(dim, dim).to(DTYPE)
        with torch.no_grad():
            for layer in (self.q, self.k, self.v):
                layer.weight.copy_(torch.randn(dim, dim, generator=gen, dtype=DTYPE) / dim**0.5)
                layer.bias.zero_()
            self.out.weight.zero_()
            self.out.bias.zero_()

    def attention(self, f, bank: FeatureBank):
        if f.shape[-1] != self.dim or bank.centroids.shape[-1] != self.dim:
            raise ConfigError(f"STAM width {self.dim} does not match features {f.shape[-1]} / bank {bank.centroids.shape[-1]}")
        scores = self.q(f) @ self.k(bank.centroids).T / self.dim**0.5
        return torch.softmax(scores, dim=-1)

    def branch(self, f, bank: FeatureBank):
        """Pre-residual output ``out(attn @ V)``."""
        return self.out(self.attention(f, bank) @ self.v(bank.centroids))

    def forward(self, f, bank: FeatureBank):
        return self.branch(f, bank) + f
