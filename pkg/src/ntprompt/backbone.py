"""Frozen vision-language backbone.

The toy backbone stands in for a pretrained CLIP at desk scale:

* the visual encoder is a stack of conv/pool stages with seeded frozen
  weights: an oriented filter bank with rectified (energy) output, then
  1x1 channel-mixing stages with ReLU. Each stage is spatially mean-pooled
  to give one multi-scale tap, and the last tap goes through a
  parameter-free layer norm and a frozen projection to the joint space;
* the text encoder averages the prompt tokens and applies a frozen linear
  map to the same space.

Both encoders are unit-normalised so cosine similarity is a dot product.

Class-name embeddings are "grounded" when the backbone is given concept
images for a name: the embedding is chosen so that the zero-shot template
prompt for that name lands on the mean visual feature of the concept
(centred across concepts). This plays the role of CLIP's pretraining and
is what makes zero-shot pseudo-labels meaningful for the toy data. Names
without a concept get a hashed random embedding.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Protocol, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from ntprompt.errors import ConfigError, DataError

DTYPE = torch.float64

DOMAIN_TAGS = ("authorized", "unauthorized", "test")


@dataclass(frozen=True)
class BackboneSpec:
    kind: str = "toy"
    M: int = 3
    C: int = 64
    d_t: int = 32
    seed: int = 0
    in_channels: int = 3
    layer_dims: tuple = (16, 32, 64)

    def __post_init__(self):
        if self.kind not in ("toy", "external-adapter"):
            raise ConfigError(f"unknown backbone kind {self.kind!r}")
        object.__setattr__(self, "layer_dims", tuple(int(c) for c in self.layer_dims))
        if self.M < 2:
            raise ConfigError("backbone needs at least two feature taps (M >= 2)")
        if len(self.layer_dims) != self.M:
            raise ConfigError(f"layer_dims has {len(self.layer_dims)} entries but M={self.M}")
        if min(self.C, self.d_t, self.in_channels) < 1:
            raise ConfigError("C, d_t and in_channels must be positive")


@dataclass
class ImageBatch:
    pixels: torch.Tensor  # [B, C_in, H, W] in [0, 1]
    labels: torch.Tensor  # [B]
    domain_tag: str = "authorized"
    num_classes: int | None = None

    def __post_init__(self):
        self.pixels = torch.as_tensor(self.pixels, dtype=DTYPE)
        self.labels = torch.as_tensor(self.labels, dtype=torch.long)
        if self.pixels.ndim != 4 or self.pixels.shape[0] < 1:
            raise DataError(f"pixels must be a non-empty [B, C, H, W] array, got {tuple(self.pixels.shape)}")
        if self.labels.shape != (self.pixels.shape[0],):
            raise DataError("one label per image required")
        if self.domain_tag not in DOMAIN_TAGS:
            raise ConfigError(f"domain_tag must be one of {DOMAIN_TAGS}")
        if not torch.isfinite(self.pixels).all():
            raise DataError("non-finite pixel values")
        if self.num_classes is not None and int(self.labels.max()) >= self.num_classes:
            raise DataError("label out of range")

    def __len__(self):
        return self.pixels.shape[0]


@dataclass
class MultiScaleFeatures:
    per_layer: list  # M tensors, layer m shaped [B, C_m]
    final: torch.Tensor  # [B, C], unit rows

    def __len__(self):
        return self.final.shape[0]

    def index(self, idx) -> "MultiScaleFeatures":
        return MultiScaleFeatures([f[idx] for f in self.per_layer], self.final[idx])

    @staticmethod
    def cat(parts: Sequence["MultiScaleFeatures"]) -> "MultiScaleFeatures":
        m = len(parts[0].per_layer)
        return MultiScaleFeatures(
            [torch.cat([p.per_layer[i] for p in parts]) for i in range(m)],
            torch.cat([p.final for p in parts]),
        )


class VisionLanguageBackbone(Protocol):
    """What the rest of the package needs from a backbone.

    A real pretrained model plugs in by implementing these members and
    keeping its parameters frozen. The first four are the model boundary;
    the rest are conveniences the trainer calls and that an adapter can
    build from the first four (see :class:`ToyBackbone`).
    """

    spec: BackboneSpec

    def encode_image_multiscale(self, batch: ImageBatch) -> MultiScaleFeatures: ...

    def encode_text(self, prompt_tokens: torch.Tensor) -> torch.Tensor: ...

    def token_embedding(self, name: str) -> torch.Tensor: ...

    def template_tokens(self, n: int) -> torch.Tensor: ...

    def class_embeddings(self, class_names) -> torch.Tensor: ...

    def zero_shot_from_features(self, final: torch.Tensor, class_names, temperature: float) -> torch.Tensor: ...

    def encode_pixels_chunked(self, pixels, chunk: int = 256) -> MultiScaleFeatures: ...

    def parameter_digest(self) -> str: ...


_external_factory = None


def register_external_adapter(factory):
    """Install ``factory(spec) -> VisionLanguageBackbone`` for kind='external-adapter'."""
    global _external_factory
    _external_factory = factory


def make_backbone(spec: BackboneSpec, concepts=None, n_template=None):
    if spec.kind == "toy":
        return ToyBackbone(spec, concepts=concepts, n_template=n_template)
    if _external_factory is None:
        raise ConfigError("backbone kind 'external-adapter' requested but no adapter is registered")
    return _external_factory(spec)


def _name_seed(name: str, seed: int) -> int:
    digest = hashlib.sha256(f"{seed}:{name}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


def _oriented_filters(gen, n, c_in, k):
    """Zero-mean Gabor-like kernels at evenly spread orientations, seeded jitter."""
    r = torch.arange(k, dtype=DTYPE) - (k - 1) / 2
    yy, xx = torch.meshgrid(r, r, indexing="ij")
    theta = (torch.arange(n, dtype=DTYPE) % 8) * torch.pi / 8 + 0.1 * torch.rand(n, generator=gen, dtype=DTYPE)
    wavelength = 6 + 6 * torch.rand(n, generator=gen, dtype=DTYPE)
    phase = 2 * torch.pi * torch.rand(n, generator=gen, dtype=DTYPE)
    envelope = torch.exp(-(xx**2 + yy**2) / (2 * (k / 3) ** 2))
    kernels = []
    for i in range(n):
        u = xx * torch.cos(theta[i]) + yy * torch.sin(theta[i])
        kern = envelope * torch.cos(2 * torch.pi * u / wavelength[i] + phase[i])
        kern = kern - kern.mean()
        colour = 1 + 0.3 * torch.randn(c_in, generator=gen, dtype=DTYPE)
        kernels.append(colour[:, None, None] * kern[None])
    w = torch.stack(kernels)
    return w / w.flatten(1).norm(dim=1)[:, None, None, None]


class ToyBackbone(nn.Module):
    def __init__(self, spec: BackboneSpec, concepts=None, n_template=None):
        super().__init__()
        if spec.kind != "toy":
            raise ConfigError("ToyBackbone needs spec.kind == 'toy'")
        self.spec = spec
        gen = torch.Generator().manual_seed(spec.seed)

        self.stages = nn.ModuleList()
        c_in = spec.in_channels
        for i, c_out in enumerate(spec.layer_dims):
            if i == 0:
                conv = nn.Conv2d(c_in, c_out, kernel_size=7, padding=3, bias=False).to(DTYPE)
                weight = _oriented_filters(gen, c_out, c_in, 7)
            else:
                conv = nn.Conv2d(c_in, c_out, kernel_size=1, bias=False).to(DTYPE)
                weight = torch.randn(conv.weight.shape, generator=gen, dtype=DTYPE) * (2.0 / c_in) ** 0.5
            with torch.no_grad():
                conv.weight.copy_(weight)
            self.stages.append(conv)
            c_in = c_out
        self.visual_proj = nn.Parameter(
            torch.randn(spec.C, spec.layer_dims[-1], generator=gen, dtype=DTYPE) / spec.layer_dims[-1] ** 0.5
        )
        self.text_proj = nn.Parameter(torch.randn(spec.C, spec.d_t, generator=gen, dtype=DTYPE) / spec.d_t**0.5)
        # "a photo of a" style template: fixed tokens padded/truncated to the prompt length
        self._template_bank = torch.randn(16, spec.d_t, generator=gen, dtype=DTYPE) * 0.1
        self.n_template = n_template if n_template is not None else spec.M + 1
        self.requires_grad_(False)
        self.eval()

        self._grounded = {}
        if concepts:
            self._ground(concepts)

    # -- visual -----------------------------------------------------------
    def _check_pixels(self, pixels):
        if pixels.ndim != 4 or pixels.shape[1] != self.spec.in_channels:
            raise ConfigError(
                f"expected [B, {self.spec.in_channels}, H, W] pixels, got {tuple(pixels.shape)}"
            )
        if min(pixels.shape[2:]) < 2 ** (self.spec.M - 1):
            raise ConfigError("image too small for the number of pooling stages")

    @torch.no_grad()
    def _encode_pixels(self, pixels: torch.Tensor) -> MultiScaleFeatures:
        self._check_pixels(pixels)
        x = pixels.to(DTYPE)
        taps = []
        for i, conv in enumerate(self.stages):
            if i > 0:
                x = F.avg_pool2d(x, 2)
            x = conv(x).abs() if i == 0 else F.relu(conv(x))
            taps.append(x.mean(dim=(2, 3)))
        z = F.layer_norm(taps[-1], taps[-1].shape[-1:])
        final = F.normalize(z @ self.visual_proj.T, dim=-1)
        return MultiScaleFeatures(taps, final)

    def encode_image_multiscale(self, batch: ImageBatch) -> MultiScaleFeatures:
        return self._encode_pixels(batch.pixels)

    def encode_pixels_chunked(self, pixels, chunk=256) -> MultiScaleFeatures:
        pixels = torch.as_tensor(pixels, dtype=DTYPE)
        parts = [self._encode_pixels(pixels[i : i + chunk]) for i in range(0, len(pixels), chunk)]
        return MultiScaleFeatures.cat(parts)

    # -- text -------------------------------------------------------------
    def encode_text(self, prompt_tokens: torch.Tensor) -> torch.Tensor:
        """Prompt tokens [..., L+2, d_t] -> unit text features [..., C]. Differentiable."""
        if prompt_tokens.shape[-1] != self.spec.d_t:
            raise ConfigError(f"token dim {prompt_tokens.shape[-1]} != d_t={self.spec.d_t}")
        if prompt_tokens.ndim < 2 or prompt_tokens.shape[-2] < 2:
            raise ConfigError("a prompt needs at least two tokens")
        pooled = prompt_tokens.mean(dim=-2)
        return F.normalize(pooled @ self.text_proj.T, dim=-1)

    def template_tokens(self, n: int | None = None) -> torch.Tensor:
        n = self.n_template if n is None else n
        reps = -(-n // len(self._template_bank))
        return self._template_bank.repeat(reps, 1)[:n].clone()

    def token_embedding(self, name: str) -> torch.Tensor:
        if name in self._grounded:
            return self._grounded[name].clone()
        gen = torch.Generator().manual_seed(_name_seed(name, self.spec.seed) % (2**63))
        return torch.randn(self.spec.d_t, generator=gen, dtype=DTYPE)

    def class_embeddings(self, class_names) -> torch.Tensor:
        return torch.stack([self.token_embedding(n) for n in class_names])

    @torch.no_grad()
    def _ground(self, concepts):
        names = sorted(concepts)
        protos = []
        for name in names:
            imgs = torch.as_tensor(np.asarray(concepts[name]), dtype=DTYPE)
            protos.append(self._encode_pixels(imgs).final.mean(0))
        protos = torch.stack(protos)
        centred = protos - protos.mean(0, keepdim=True)
        pinv = torch.linalg.pinv(self.text_proj)  # [d_t, C]
        length = self.n_template + 1
        template_sum = self.template_tokens().sum(0)
        for name, target in zip(names, centred):
            direction = pinv @ target
            direction = direction / direction.norm()
            # mean(template, cls) must map onto `direction` through text_proj
            self._grounded[name] = direction * length - template_sum

    # -- zero-shot ----------------------------------------------------------
    def zero_shot_text_features(self, class_names) -> torch.Tensor:
        if len(class_names) == 0:
            raise ConfigError("zero-shot classification needs at least one class name")
        template = self.template_tokens()
        cls = self.class_embeddings(class_names)
        prompts = torch.cat([template.expand(len(class_names), -1, -1), cls[:, None, :]], dim=1)
        return self.encode_text(prompts)

    @torch.no_grad()
    def zero_shot_from_features(self, final: torch.Tensor, class_names, temperature=0.01) -> torch.Tensor:
        text = self.zero_shot_text_features(class_names)
        return torch.softmax(final @ text.T / temperature, dim=-1)

    def zero_shot_classify(self, batch: ImageBatch, class_names, temperature=0.01) -> torch.Tensor:
        """Softmax over template-prompt similarities, shape [B, N]."""
        if len(class_names) == 0:
            raise ConfigError("zero-shot classification needs at least one class name")
        return self.zero_shot_from_features(self.encode_image_multiscale(batch).final, class_names, temperature)

    def parameter_digest(self) -> str:
        h = hashlib.sha256()
        for name, p in sorted(self.state_dict().items()):
            h.update(name.encode())
            h.update(p.detach().cpu().numpy().tobytes())
        return h.hexdigest()
