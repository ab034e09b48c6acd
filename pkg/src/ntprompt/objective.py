"""Loss terms of the non-transferable prompt objective.

Terms that the objective maximises (unauthorized alignment, token
separation, text divergence) are capped inside :func:`total_loss` so the
minimised total is bounded below.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch

from ntprompt.errors import ConfigError

TERMS = ("l_m", "l_a", "l_u", "l_ai", "l_ui", "l_kl", "l_en")


def token_separation_loss(T_a, T_u):
    if T_a.shape != T_u.shape:
        raise ConfigError("domain tokens must have the same shape")
    return ((T_a - T_u) ** 2).mean()


def _check_tau(tau):
    if not tau > 0:
        raise ConfigError(f"temperature must be positive, got {tau}")


def similarity_logits(v, t, tau):
    """Cosine logits / tau. ``t`` is [N, C] or per-sample [B, N, C]."""
    _check_tau(tau)
    if t.ndim == 2:
        return v @ t.T / tau
    return torch.einsum("bc,bnc->bn", v, t) / tau


def contrastive_alignment_loss(v, t, labels, tau, sample_cap=None):
    """Mean negative log-softmax of the true class over cosine logits.

    With ``sample_cap`` every sample's term is clamped before averaging, so
    samples that are already confidently wrong stop contributing gradient.
    """
    logits = similarity_logits(v, t, tau)
    if sample_cap is None:
        return torch.nn.functional.cross_entropy(logits, labels)
    per_sample = torch.nn.functional.cross_entropy(logits, labels, reduction="none")
    return torch.clamp(per_sample, max=sample_cap).mean()


def text_divergence_loss(f_t_a, f_t_u):
    """Mean over class rows of KL(softmax(f_t_a) || softmax(f_t_u)), softmax over coordinates."""
    log_p = torch.log_softmax(f_t_a, dim=-1)
    log_q = torch.log_softmax(f_t_u, dim=-1)
    kl = (log_p.exp() * (log_p - log_q)).sum(dim=-1)
    return kl.mean()


def entropy_loss(sims_u, tau):
    """Mean Shannon entropy of softmax(sims / tau) per sample."""
    _check_tau(tau)
    log_p = torch.log_softmax(sims_u / tau, dim=-1)
    return -(log_p.exp() * log_p).sum(dim=-1).mean()


@dataclass
class LossBreakdown:
    l_m: torch.Tensor | float = 0.0
    l_a: torch.Tensor | float = 0.0
    l_u: torch.Tensor | float = 0.0
    l_ai: torch.Tensor | float = 0.0
    l_ui: torch.Tensor | float = 0.0
    l_kl: torch.Tensor | float = 0.0
    l_en: torch.Tensor | float = 0.0
    lambda1: float = 0.1
    lambda2: float = 0.1
    cap: float = math.inf
    cap_m: float = math.inf

    @property
    def total(self):
        return total_loss(self)

    def as_floats(self) -> dict:
        out = {name: float(_detach(getattr(self, name))) for name in TERMS}
        out["total"] = float(_detach(self.total))
        return out


def default_caps(n_classes, cap_m=10.0):
    return {"cap": 2 * math.log(n_classes), "cap_m": cap_m}


def _detach(x):
    return x.detach() if torch.is_tensor(x) else x


def _min(x, cap):
    if torch.is_tensor(x):
        return torch.clamp(x, max=cap)
    return min(x, cap)


def total_loss(parts: LossBreakdown):
    """l_a - l_u + l_ai - l_ui - l_kl - lambda1 l_m + lambda2 l_en, maximised terms capped."""
    p = parts
    return (
        p.l_a
        - _min(p.l_u, p.cap)
        + p.l_ai
        - _min(p.l_ui, p.cap)
        - _min(p.l_kl, p.cap)
        - p.lambda1 * _min(p.l_m, p.cap_m)
        + p.lambda2 * p.l_en
    )
