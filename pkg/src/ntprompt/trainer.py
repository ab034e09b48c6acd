"""Joint two-domain training of the projector and STAM, and inference.

The backbone is frozen and deterministic, so every domain is encoded once
up front and training draws batches from the cached multi-scale features.
That is equivalent to re-encoding each batch and keeps desk-scale runs
fast.
"""

from __future__ import annotations

import csv
import io
import math
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from ntprompt import objective as obj
from ntprompt.archive import atomic_write_text, content_hash
from ntprompt.backbone import MultiScaleFeatures
from ntprompt.bank import STAM, FeatureBank, build_feature_bank
from ntprompt.errors import ConfigError, DegenerateBatchError, NumericalAbort
from ntprompt.prompt import IPProjector, assemble_prompts
from ntprompt.scenarios import POOL, Domain, generate_unauthorized_domain


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 32
    lr: float = 1e-5
    lambda1: float = 0.1
    lambda2: float = 0.1
    tau: float = 0.07
    cap_scale: float = 2.0  # capped terms stop at cap_scale * ln N
    cap_m: float = 10.0
    seed: int = 0
    k_shots: int = 5
    zero_shot_temperature: float = 0.01
    pooled_image_tokens: bool = False
    projector_init_scale: float = 0.1
    standardize_inputs: bool = True
    input_squash: float = 3.0  # soft clip of standardised projector inputs; 0 disables
    cap_mode: str = "sample"  # "batch": cap the mean term; "sample": cap each sample's term

    def __post_init__(self):
        for name in ("batch_size", "k_shots"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be at least 2 (batch style statistics)")
        if self.epochs < 0:
            raise ConfigError("epochs must be non-negative")
        if self.input_squash < 0:
            raise ConfigError("input_squash must be non-negative")
        for name in ("lr", "tau", "cap_scale", "cap_m", "zero_shot_temperature"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")
        if self.cap_mode not in ("batch", "sample"):
            raise ConfigError(f"cap_mode must be 'batch' or 'sample', got {self.cap_mode!r}")
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ConfigError("loss weights must be non-negative")


class PromptLearner(nn.Module):
    """Trainable parameters only: the projector (theta) and STAM (phi)."""

    def __init__(self, layer_dims, d_t, C, config: TrainConfig):
        super().__init__()
        self.projector = IPProjector(
            layer_dims, d_t, seed=config.seed, init_scale=config.projector_init_scale, pooled=config.pooled_image_tokens,
            squash=config.input_squash or None,
        )
        self.stam = STAM(C, seed=config.seed + 1)

    def prompts(self, ms: MultiScaleFeatures, class_embeddings):
        T, V = self.projector(ms)
        return T, assemble_prompts(T, V, class_embeddings)

    def branch(self, backbone, ms, class_embeddings, bank: FeatureBank | None):
        T, prompts = self.prompts(ms, class_embeddings)
        f_t = backbone.encode_text(prompts)
        s_v = self.stam(ms.final, bank) if bank is not None else None
        return {"T": T, "f_t": f_t, "f_v": ms.final, "s_v": s_v}

    def snapshot(self) -> dict:
        return {k: v.detach().clone() for k, v in self.state_dict().items()}


def build_model(backbone, config: TrainConfig, reference: MultiScaleFeatures | None = None) -> PromptLearner:
    """Fresh learner; ``reference`` (authorized training features) calibrates the input standardisation."""
    spec = backbone.spec
    model = PromptLearner(spec.layer_dims, spec.d_t, spec.C, config)
    if config.standardize_inputs and reference is not None:
        model.projector.calibrate(reference, config.batch_size, seed=config.seed)
    return model


# -- data plumbing -------------------------------------------------------------


def encode_domain(backbone, domain: Domain, chunk=256) -> MultiScaleFeatures:
    return backbone.encode_pixels_chunked(domain.images, chunk=chunk)


def train_batches(n, batch_size, rng: np.random.Generator):
    """Shuffled full batches; a domain smaller than one batch yields a single batch."""
    if n < 2:
        raise DegenerateBatchError("a training domain needs at least two samples")
    perm = rng.permutation(n)
    if n < batch_size:
        return [perm]
    return [perm[i : i + batch_size] for i in range(0, n - batch_size + 1, batch_size)]


def eval_batches(n, batch_size, seed=0):
    """Covers every sample once; a trailing singleton joins the previous batch."""
    if n < 2:
        raise DegenerateBatchError("evaluation needs at least two samples per domain")
    perm = np.random.default_rng(seed).permutation(n)
    chunks = [perm[i : i + batch_size] for i in range(0, n, batch_size)]
    if len(chunks) > 1 and len(chunks[-1]) < 2:
        last = chunks.pop()
        chunks[-1] = np.concatenate([chunks[-1], last])
    return chunks


# -- banks ---------------------------------------------------------------------------


def zero_shot_scores(backbone, ms, class_names, temperature):
    probs = backbone.zero_shot_from_features(ms.final, class_names, temperature)
    conf, pseudo = probs.max(dim=1)
    return conf.numpy(), pseudo.numpy()


def build_banks(backbone, class_names, ms_a, labels_a, ms_u, config: TrainConfig, ids_a=None, ids_u=None):
    n = len(class_names)
    conf_a, _ = zero_shot_scores(backbone, ms_a, class_names, config.zero_shot_temperature)
    bank_a = build_feature_bank(ms_a.final, labels_a, conf_a, n, config.k_shots, "authorized", ids_a)
    bank_u = None
    if ms_u is not None:
        conf_u, pseudo_u = zero_shot_scores(backbone, ms_u, class_names, config.zero_shot_temperature)
        bank_u = build_feature_bank(ms_u.final, pseudo_u, conf_u, n, config.k_shots, "unauthorized", ids_u)
    return bank_a, bank_u


# -- loss ----------------------------------------------------------------------------


def _text_for_kl(f_t):
    return f_t.mean(dim=0) if f_t.ndim == 3 else f_t


def compute_losses(model, backbone, class_embeddings, config, batch_a, bank_a, batch_u=None, bank_u=None, baseline=False):
    """LossBreakdown for one joint micro-batch. ``batch_*`` is (features, labels)."""
    ms_a, y_a = batch_a
    n = class_embeddings.shape[0]
    a = model.branch(backbone, ms_a, class_embeddings, bank_a)
    parts = obj.LossBreakdown(
        lambda1=config.lambda1, lambda2=config.lambda2, cap=config.cap_scale * math.log(n), cap_m=config.cap_m
    )
    parts.l_a = obj.contrastive_alignment_loss(a["f_v"], a["f_t"], y_a, config.tau)
    parts.l_ai = obj.contrastive_alignment_loss(F.normalize(a["s_v"], dim=-1), a["f_t"], y_a, config.tau)
    if baseline:
        parts.lambda1 = parts.lambda2 = 0.0
        return parts
    ms_u, y_u = batch_u
    u = model.branch(backbone, ms_u, class_embeddings, bank_u)
    sample_cap = parts.cap if config.cap_mode == "sample" else None
    parts.l_u = obj.contrastive_alignment_loss(u["f_v"], u["f_t"], y_u, config.tau, sample_cap)
    parts.l_ui = obj.contrastive_alignment_loss(F.normalize(u["s_v"], dim=-1), u["f_t"], y_u, config.tau, sample_cap)
    parts.l_kl = obj.text_divergence_loss(_text_for_kl(a["f_t"]), _text_for_kl(u["f_t"]))
    parts.l_en = obj.entropy_loss(obj.similarity_logits(u["f_v"], u["f_t"], 1.0), config.tau)
    parts.l_m = obj.token_separation_loss(a["T"], u["T"])
    return parts


def check_finite(parts: obj.LossBreakdown):
    for name in obj.TERMS:
        value = getattr(parts, name)
        if torch.is_tensor(value) and not torch.isfinite(value):
            raise NumericalAbort(f"loss term {name} became non-finite", term=name)


# -- manifest ------------------------------------------------------------------------


@dataclass
class RunManifest:
    kind: str
    config: dict
    dataset_hashes: dict = field(default_factory=dict)
    bank_hashes: dict = field(default_factory=dict)
    backbone_digest: str = ""
    epochs: list = field(default_factory=list)
    final_checkpoint_hash: str = ""
    notes: list = field(default_factory=list)

    def append_epoch(self, record: dict):
        self.epochs.append(dict(record))

    def to_dict(self):
        return asdict(self)


@dataclass
class TrainResult:
    model: PromptLearner
    bank_a: FeatureBank
    bank_u: FeatureBank | None
    manifest: RunManifest
    loss_log: list  # rows: step, seven terms, total

    @property
    def checkpoint_hash(self):
        return self.manifest.final_checkpoint_hash

    def loss_log_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["step", *obj.TERMS, "total"])
        for row in self.loss_log:
            writer.writerow([row["step"], *(repr(row[t]) for t in obj.TERMS), repr(row["total"])])
        return buf.getvalue()

    def write_loss_log(self, path):
        atomic_write_text(path, self.loss_log_csv())


def checkpoint_tensors(model: PromptLearner) -> dict:
    return {k: v.detach().cpu().numpy() for k, v in model.state_dict().items()}


# -- training ------------------------------------------------------------------------


def _fit(model, backbone, class_embeddings, config, data_a, data_u, bank_a, bank_u, manifest, baseline):
    ms_a, y_a = data_a
    ms_u, y_u = data_u if data_u is not None else (None, None)
    rng = np.random.default_rng(config.seed)
    optimizer = torch.optim.Adam(model.parameters(), lr=config.lr)
    backbone_before = backbone.parameter_digest() if hasattr(backbone, "parameter_digest") else ""
    loss_log = []
    step = 0
    for epoch in range(config.epochs):
        batches_a = train_batches(len(ms_a), config.batch_size, rng)
        batches_u = train_batches(len(ms_u), config.batch_size, rng) if ms_u is not None else None
        n_steps = max(len(batches_a), len(batches_u)) if batches_u else len(batches_a)
        sums = dict.fromkeys([*obj.TERMS, "total"], 0.0)
        for i in range(n_steps):
            ia = batches_a[i % len(batches_a)]
            batch_a = (ms_a.index(torch.as_tensor(ia)), y_a[ia])
            batch_u = None
            if batches_u:
                iu = batches_u[i % len(batches_u)]
                batch_u = (ms_u.index(torch.as_tensor(iu)), y_u[iu])
            parts = compute_losses(model, backbone, class_embeddings, config, batch_a, bank_a, batch_u, bank_u, baseline)
            check_finite(parts)
            total = parts.total
            if not torch.isfinite(total):
                raise NumericalAbort("total loss became non-finite", term="total")
            optimizer.zero_grad()
            total.backward()
            optimizer.step()
            row = parts.as_floats()
            loss_log.append({"step": step, **row})
            for k in sums:
                sums[k] += row[k]
            step += 1
        for bank in (bank_a, bank_u):
            if bank is not None:
                bank.verify()
        manifest.append_epoch({"epoch": epoch, "steps": n_steps, **{k: v / n_steps for k, v in sums.items()}})
    if backbone_before and backbone.parameter_digest() != backbone_before:
        raise RuntimeError("backbone parameters changed during training")
    manifest.final_checkpoint_hash = content_hash(checkpoint_tensors(model))
    return loss_log


def _as_labels(labels):
    return torch.as_tensor(np.asarray(labels), dtype=torch.long)


def train_target_specified(
    config: TrainConfig, backbone, class_names, d_a: Domain, d_u: Domain, features=None, kind="target_specified"
) -> TrainResult:
    """Train projector + STAM against a known unauthorized domain.

    ``features`` optionally maps domain content hashes to pre-encoded
    MultiScaleFeatures (the encoder is frozen, so caching is exact).
    """
    features = {} if features is None else features
    ms_a = _cached(features, backbone, d_a)
    ms_u = _cached(features, backbone, d_u)
    class_embeddings = backbone.class_embeddings(class_names)
    bank_a, bank_u = build_banks(backbone, class_names, ms_a, d_a.labels, ms_u, config, d_a.sample_ids, d_u.sample_ids)
    model = build_model(backbone, config, ms_a)
    manifest = RunManifest(kind, asdict(config))
    manifest.dataset_hashes = {"authorized": d_a.content_hash(), "unauthorized": d_u.content_hash()}
    manifest.bank_hashes = {"authorized": bank_a.content_hash, "unauthorized": bank_u.content_hash}
    manifest.backbone_digest = backbone.parameter_digest()
    loss_log = _fit(
        model,
        backbone,
        class_embeddings,
        config,
        (ms_a, _as_labels(d_a.labels)),
        (ms_u, _as_labels(d_u.labels)),
        bank_a,
        bank_u,
        manifest,
        baseline=False,
    )
    return TrainResult(model, bank_a, bank_u, manifest, loss_log)


def train_target_free(config: TrainConfig, backbone, class_names, d_a: Domain, n_aug=2, pool=POOL, workers=1, features=None, d_u=None):
    """Generate a style-augmented unauthorized domain from ``d_a`` and train against it."""
    if n_aug == 0:
        warnings.warn(
            "n_aug=0: the generated unauthorized domain is a copy of the authorized one, "
            "so non-transferability is vacuous",
            RuntimeWarning,
            stacklevel=2,
        )
    if d_u is None:
        d_u = generate_unauthorized_domain(d_a, pool, n_aug, config.seed, workers)
    result = train_target_specified(config, backbone, class_names, d_a, d_u, features, kind="target_free")
    result.manifest.dataset_hashes["generated_unauthorized"] = d_u.content_hash()
    result.manifest.notes.append(f"unauthorized domain generated with n_aug={n_aug} from a pool of {len(pool)} ops")
    return result


def train_baseline(config: TrainConfig, backbone, class_names, d_a: Domain, features=None) -> TrainResult:
    """Supervised prompt tuning on the authorized domain only (l_a + l_ai)."""
    features = {} if features is None else features
    ms_a = _cached(features, backbone, d_a)
    class_embeddings = backbone.class_embeddings(class_names)
    bank_a, _ = build_banks(backbone, class_names, ms_a, d_a.labels, None, config, d_a.sample_ids)
    model = build_model(backbone, config, ms_a)
    manifest = RunManifest("baseline", asdict(config))
    manifest.dataset_hashes = {"authorized": d_a.content_hash()}
    manifest.bank_hashes = {"authorized": bank_a.content_hash}
    manifest.backbone_digest = backbone.parameter_digest()
    loss_log = _fit(model, backbone, class_embeddings, config, (ms_a, _as_labels(d_a.labels)), None, bank_a, None, manifest, True)
    return TrainResult(model, bank_a, None, manifest, loss_log)


def _cached(features, backbone, domain):
    key = domain.content_hash()
    if key not in features:
        features[key] = encode_domain(backbone, domain)
    return features[key]


# -- inference -----------------------------------------------------------------------


@torch.no_grad()
def text_features(model, backbone, ms, class_embeddings):
    _, prompts = model.prompts(ms, class_embeddings)
    return backbone.encode_text(prompts)


@torch.no_grad()
def predict(model, backbone, ms: MultiScaleFeatures, class_embeddings):
    """Arg-max cosine similarity between each sample and the learned class prompts.

    ``ms`` is one batch from a single domain; ties go to the lowest class index.
    """
    f_t = text_features(model, backbone, ms, class_embeddings)
    sims = obj.similarity_logits(ms.final, f_t, 1.0)
    return sims.argmax(dim=1)


@torch.no_grad()
def predict_domain(model, backbone, ms: MultiScaleFeatures, class_embeddings, batch_size, seed=0):
    out = torch.empty(len(ms), dtype=torch.long)
    for idx in eval_batches(len(ms), batch_size, seed):
        idx_t = torch.as_tensor(idx)
        out[idx_t] = predict(model, backbone, ms.index(idx_t), class_embeddings)
    return out.numpy()
