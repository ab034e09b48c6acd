"""Domain and image tokens, and prompt assembly.

A prompt for class k is the token sequence ``[T; V_1..V_L; cls_k]`` where
``T`` is a domain token projected from batch style statistics and the
``V`` are image tokens projected from the multi-scale content features.
"""

from __future__ import annotations

import numpy as np
import torch
import torch.nn as nn

from ntprompt.backbone import DTYPE, MultiScaleFeatures
from ntprompt.errors import ConfigError, DegenerateBatchError


def style_statistics(ms: MultiScaleFeatures) -> torch.Tensor:
    """Concatenated ``[mu_1; sigma_1; ...; mu_M; sigma_M]`` over the batch axis.

    sigma is the population standard deviation.
    """
    if len(ms) < 2:
        raise DegenerateBatchError(f"style statistics need a batch of at least 2, got {len(ms)}")
    parts = []
    for feats in ms.per_layer:
        mu = feats.mean(dim=0)
        sigma = ((feats - mu) ** 2).mean(dim=0).sqrt()
        parts += [mu, sigma]
    return torch.cat(parts)


class IPProjector(nn.Module):
    """Style head (stats -> domain token) and content head (one token per tap).

    The style head is affine -> tanh -> affine with hidden width 2*d_t.
    The content head has one affine map per tapped layer, so L == M.

    Both heads see their inputs through a frozen per-coordinate
    standardisation (buffers, identity until :meth:`calibrate` is called).
    Calibrating on the authorized domain puts its statistics near the
    origin with unit spread, so small but systematic shifts such as a
    watermark patch are no longer drowned by the raw feature scale.
    """

    def __init__(self, layer_dims, d_t, seed=0, init_scale=0.1, pooled=False, squash=3.0):
        super().__init__()
        self.squash = squash
        self.layer_dims = tuple(layer_dims)
        self.d_t = d_t
        self.pooled = pooled
        stats_dim = 2 * sum(self.layer_dims)
        gen = torch.Generator().manual_seed(seed)

        def affine(n_in, n_out, scale):
            layer = nn.Linear(n_in, n_out).to(DTYPE)
            with torch.no_grad():
                layer.weight.copy_(torch.randn(n_out, n_in, generator=gen, dtype=DTYPE) * scale / n_in**0.5)
                layer.bias.zero_()
            return layer

        self.style_in = affine(stats_dim, 2 * d_t, 1.0)
        self.style_out = affine(2 * d_t, d_t, init_scale)
        self.content = nn.ModuleList(affine(c, d_t, init_scale) for c in self.layer_dims)
        self.register_buffer("style_shift", torch.zeros(stats_dim, dtype=DTYPE))
        self.register_buffer("style_scale", torch.ones(stats_dim, dtype=DTYPE))
        for m, c in enumerate(self.layer_dims):
            self.register_buffer(f"content_shift_{m}", torch.zeros(c, dtype=DTYPE))
            self.register_buffer(f"content_scale_{m}", torch.ones(c, dtype=DTYPE))

    @torch.no_grad()
    def calibrate(self, ms: MultiScaleFeatures, batch_size=32, n_batches=64, seed=0, eps=1e-6):
        """Fit the input standardisation to reference features (the authorized training set).

        Content taps use the per-sample mean/std. Style statistics use the
        mean/std over ``n_batches`` random batches of ``batch_size``, the
        same granularity the domain token sees.
        """
        n = len(ms)
        if n < 2:
            raise DegenerateBatchError("calibration needs at least two samples")
        for m, feats in enumerate(ms.per_layer):
            getattr(self, f"content_shift_{m}").copy_(feats.mean(dim=0))
            getattr(self, f"content_scale_{m}").copy_(feats.std(dim=0, unbiased=False) + eps)
        rng = np.random.default_rng(seed)
        b = min(batch_size, n)
        stats = torch.stack(
            [style_statistics(ms.index(torch.as_tensor(rng.choice(n, size=b, replace=False)))) for _ in range(n_batches)]
        )
        self.style_shift.copy_(stats.mean(dim=0))
        self.style_scale.copy_(stats.std(dim=0, unbiased=False) + eps)

    def _squash(self, z):
        # soft clip: ~identity near the reference domain, bounded far from it
        if self.squash is None:
            return z
        return self.squash * torch.tanh(z / self.squash)

    @property
    def n_tokens(self):
        return len(self.layer_dims)

    def domain_token(self, stats: torch.Tensor) -> torch.Tensor:
        if stats.shape[-1] != self.style_in.in_features:
            raise ConfigError(f"style statistics have {stats.shape[-1]} entries, projector expects {self.style_in.in_features}")
        z = self._squash((stats - self.style_shift) / self.style_scale)
        return self.style_out(torch.tanh(self.style_in(z)))

    def image_tokens(self, ms: MultiScaleFeatures) -> torch.Tensor:
        """[L, d_t] from batch-mean features, or [B, L, d_t] when not pooled."""
        if len(ms.per_layer) != len(self.content):
            raise ConfigError(f"projector expects {len(self.content)} feature taps, got {len(ms.per_layer)}")
        tokens = []
        for m, (feats, head) in enumerate(zip(ms.per_layer, self.content)):
            if feats.shape[-1] != head.in_features:
                raise ConfigError(f"tap width {feats.shape[-1]} != projector width {head.in_features}")
            z = self._squash((feats - getattr(self, f"content_shift_{m}")) / getattr(self, f"content_scale_{m}"))
            tokens.append(head(z.mean(dim=0) if self.pooled else z))
        return torch.stack(tokens, dim=-2)

    def forward(self, ms: MultiScaleFeatures):
        return self.domain_token(style_statistics(ms)), self.image_tokens(ms)


def assemble_prompts(T: torch.Tensor, V: torch.Tensor, class_embeddings: torch.Tensor) -> torch.Tensor:
    """Stack of per-class prompts, shape [N, L+2, d_t] (or [B, N, L+2, d_t] for per-sample V).

    Row 0 is the domain token, rows 1..L the image tokens, the last row the
    class-name embedding.
    """
    d_t = class_embeddings.shape[-1]
    if T.shape != (d_t,) or V.shape[-1] != d_t:
        raise ConfigError("domain token, image tokens and class embeddings must share d_t")
    n = class_embeddings.shape[0]
    if V.ndim == 2:
        L = V.shape[0]
        return torch.cat(
            [T.expand(n, 1, d_t), V.expand(n, L, d_t), class_embeddings[:, None, :]],
            dim=1,
        )
    if V.ndim == 3:
        B, L = V.shape[:2]
        return torch.cat(
            [
                T.expand(B, n, 1, d_t),
                V[:, None].expand(B, n, L, d_t),
                class_embeddings[None, :, None, :].expand(B, n, 1, d_t),
            ],
            dim=2,
        )
    raise ConfigError(f"image tokens must be [L, d_t] or [B, L, d_t], got {tuple(V.shape)}")
