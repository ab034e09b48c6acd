"""Experimental settings: augmentation pool, watermark, scenario assembly.

Images throughout are float arrays [C, H, W] in [0, 1].
"""

from __future__ import annotations

import hashlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from PIL import Image, ImageOps
from scipy import ndimage

from ntprompt.errors import ConfigError, DataError

# kind -> (low, high) magnitude range, None for ops without a magnitude.
# Ranges follow the usual RandAugment conventions.
MAGNITUDE_RANGES = {
    "AutoContrast": None,
    "Brightness": (0.1, 1.9),  # enhancement factor, 1 = unchanged
    "Color": (0.1, 1.9),
    "Contrast": (0.1, 1.9),
    "Equalize": None,
    "Identity": None,
    "Posterize": (4, 8),  # bits kept
    "Rotate": (-30.0, 30.0),  # degrees
    "Sharpness": (0.1, 1.9),
    "ShearX": (-0.3, 0.3),  # shear coefficient
    "ShearY": (-0.3, 0.3),
    "Solarize": (0.0, 1.0),  # threshold
    "TranslateX": (-0.3, 0.3),  # fraction of the side
    "TranslateY": (-0.3, 0.3),
}
POOL = tuple(MAGNITUDE_RANGES)

SCENARIO_MODES = ("target_specified", "target_free", "ownership", "authorization")
CORNERS = ("bottom-right", "bottom-left", "top-right", "top-left")


@dataclass(frozen=True)
class AugmentationOp:
    kind: str
    magnitude: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in MAGNITUDE_RANGES:
            raise ConfigError(f"unknown augmentation {self.kind!r}")
        rng = MAGNITUDE_RANGES[self.kind]
        if rng is not None and not rng[0] <= self.magnitude <= rng[1]:
            raise ConfigError(f"{self.kind} magnitude {self.magnitude} outside {rng}")

    @classmethod
    def sample(cls, kind, rng: np.random.Generator, seed=0):
        bounds = MAGNITUDE_RANGES.get(kind, ())
        if bounds is None:
            return cls(kind, 0.0, seed)
        if kind == "Posterize":
            return cls(kind, float(rng.integers(bounds[0], bounds[1] + 1)), seed)
        return cls(kind, float(rng.uniform(*bounds)), seed)


def _luma(img):
    return 0.299 * img[0] + 0.587 * img[1] + 0.114 * img[2] if img.shape[0] == 3 else img.mean(0)


def _blend(degenerate, img, factor):
    return degenerate + factor * (img - degenerate)


def _affine(img, matrix):
    """Inverse-map every channel through a 2x2 matrix about the image centre."""
    h, w = img.shape[1:]
    centre = np.array([(h - 1) / 2, (w - 1) / 2])
    offset = centre - matrix @ centre
    return np.stack([ndimage.affine_transform(ch, matrix, offset=offset, order=1, mode="nearest") for ch in img])


def _shift(img, dy, dx):
    return np.stack([ndimage.shift(ch, (dy, dx), order=1, mode="nearest") for ch in img])


def _to_uint8(img):
    return np.round(np.clip(img, 0, 1) * 255).astype(np.uint8)


def _apply_one(img, op: AugmentationOp):
    k, m = op.kind, op.magnitude
    if k == "Identity":
        return img.copy()
    if k == "AutoContrast":
        lo = img.min(axis=(1, 2), keepdims=True)
        hi = img.max(axis=(1, 2), keepdims=True)
        span = np.where(hi > lo, hi - lo, 1.0)
        return np.where(hi > lo, (img - lo) / span, img)
    if k == "Equalize":
        out = [np.asarray(ImageOps.equalize(Image.fromarray(_to_uint8(ch)))) for ch in img]
        return np.stack(out).astype(np.float64) / 255.0
    if k == "Posterize":
        mask = ~np.uint8(2 ** (8 - int(m)) - 1)
        return (_to_uint8(img) & mask).astype(np.float64) / 255.0
    if k == "Solarize":
        return np.where(img >= m, 1.0 - img, img)
    if k == "Brightness":
        return img * m
    if k == "Color":
        return _blend(_luma(img)[None], img, m)
    if k == "Contrast":
        return _blend(np.full_like(img, _luma(img).mean()), img, m)
    if k == "Sharpness":
        kernel = np.array([[1, 1, 1], [1, 5, 1], [1, 1, 1]], dtype=np.float64) / 13.0
        smooth = np.stack([ndimage.convolve(ch, kernel, mode="nearest") for ch in img])
        return _blend(smooth, img, m)
    if k == "Rotate":
        t = np.deg2rad(m)
        return _affine(img, np.array([[np.cos(t), -np.sin(t)], [np.sin(t), np.cos(t)]]))
    if k == "ShearX":
        return _affine(img, np.array([[1.0, 0.0], [m, 1.0]]))
    if k == "ShearY":
        return _affine(img, np.array([[1.0, m], [0.0, 1.0]]))
    if k == "TranslateX":
        return _shift(img, 0.0, m * img.shape[2])
    if k == "TranslateY":
        return _shift(img, m * img.shape[1], 0.0)
    raise ConfigError(f"unknown augmentation {k!r}")


def apply_augmentation_chain(image, ops):
    img = np.asarray(image, dtype=np.float64)
    for op in ops:
        if not isinstance(op, AugmentationOp):
            op = AugmentationOp(*op) if isinstance(op, tuple) else AugmentationOp(op)
        img = np.clip(_apply_one(img, op), 0.0, 1.0)
    return img.astype(np.asarray(image).dtype, copy=False)


# -- watermark ------------------------------------------------------------------


@dataclass(frozen=True)
class WatermarkSpec:
    patch_size: int = 16
    position: str = "bottom-right"
    seed: int = 0

    def __post_init__(self):
        if self.position not in CORNERS:
            raise ConfigError(f"watermark position must be one of {CORNERS}")
        if self.patch_size < 1:
            raise ConfigError("watermark patch_size must be positive")

    def pattern(self, channels):
        rng = np.random.default_rng(self.seed)
        return rng.uniform(0.0, 1.0, size=(channels, self.patch_size, self.patch_size))

    def region(self, h, w):
        p = self.patch_size
        rows = slice(h - p, h) if self.position.startswith("bottom") else slice(0, p)
        cols = slice(w - p, w) if self.position.endswith("right") else slice(0, p)
        return rows, cols


def apply_watermark(image, spec: WatermarkSpec):
    img = np.asarray(image)
    c, h, w = img.shape
    if spec.patch_size > min(h, w):
        raise ConfigError(f"watermark patch {spec.patch_size} larger than image {h}x{w}")
    if spec.patch_size**2 >= 0.1 * h * w:
        raise ConfigError(f"watermark patch covers {spec.patch_size**2 / (h * w):.0%} of the image, must stay under 10%")
    out = img.copy()
    rows, cols = spec.region(h, w)
    out[:, rows, cols] = spec.pattern(c).astype(img.dtype)
    return out


# -- datasets ---------------------------------------------------------------------


@dataclass
class Domain:
    name: str
    images: np.ndarray  # [S, C, H, W]
    labels: np.ndarray  # [S]
    sample_ids: np.ndarray = None
    provenance: np.ndarray = None

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.sample_ids is None:
            self.sample_ids = np.arange(len(self.labels))
        if self.provenance is None:
            self.provenance = np.full(len(self.labels), "original", dtype=object)
        if len(self.images) != len(self.labels):
            raise DataError(f"domain {self.name!r}: {len(self.images)} images but {len(self.labels)} labels")

    def __len__(self):
        return len(self.labels)

    def subset(self, idx, name=None):
        return Domain(name or self.name, self.images[idx], self.labels[idx], self.sample_ids[idx], self.provenance[idx])

    def content_hash(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.images).tobytes())
        h.update(self.labels.tobytes())
        h.update(np.asarray(self.sample_ids, dtype=np.int64).tobytes())
        return h.hexdigest()

    def class_histogram(self, n_classes):
        return np.bincount(self.labels, minlength=n_classes)


def concat_domains(name, parts):
    return Domain(
        name,
        np.concatenate([p.images for p in parts]),
        np.concatenate([p.labels for p in parts]),
        np.concatenate([p.sample_ids for p in parts]),
        np.concatenate([p.provenance for p in parts]),
    )


def sample_chain(rng: np.random.Generator, n_aug, pool=POOL, seed=0):
    kinds = rng.choice(len(pool), size=n_aug, replace=False)
    return [AugmentationOp.sample(pool[i], rng, seed) for i in kinds]


def generate_unauthorized_domain(d_a: Domain, pool=POOL, n_aug=2, seed=0, workers=1, name=None):
    """Every image gets its own chain of n_aug distinct ops drawn from the pool.

    Per-image randomness is seeded by ``seed ^ sample_id`` so the output does
    not depend on worker scheduling.
    """
    if len(d_a) == 0:
        raise DataError("cannot generate an unauthorized domain from an empty authorized domain")
    if not 0 <= n_aug < len(pool):
        raise ConfigError(f"n_aug must satisfy 0 <= n_aug < {len(pool)}, got {n_aug}")

    def one(i):
        sid = int(d_a.sample_ids[i])
        rng = np.random.default_rng(seed ^ sid)
        return apply_augmentation_chain(d_a.images[i], sample_chain(rng, n_aug, pool, seed ^ sid))

    if workers > 1:
        with ThreadPoolExecutor(workers) as ex:
            images = list(ex.map(one, range(len(d_a))))
    else:
        images = [one(i) for i in range(len(d_a))]
    return Domain(
        name or f"{d_a.name}+aug",
        np.stack(images).astype(d_a.images.dtype),
        d_a.labels.copy(),
        d_a.sample_ids.copy(),
        np.full(len(d_a), "generated", dtype=object),
    )


def watermark_domain(d: Domain, spec: WatermarkSpec, name=None, tag="watermark"):
    images = np.stack([apply_watermark(img, spec) for img in d.images])
    prov = np.array([f"{p}+{tag}" if p != "original" else tag for p in d.provenance], dtype=object)
    return Domain(name or f"{d.name}+wm", images, d.labels.copy(), d.sample_ids.copy(), prov)


# -- scenarios ----------------------------------------------------------------------


@dataclass
class ScenarioSpec:
    mode: str = "target_specified"
    authorized: str = ""
    unauthorized: str | None = None
    test: list = field(default_factory=list)
    n_aug: int = 2
    watermark: WatermarkSpec = field(default_factory=WatermarkSpec)

    def __post_init__(self):
        if self.mode not in SCENARIO_MODES:
            raise ConfigError(f"scenario mode must be one of {SCENARIO_MODES}, got {self.mode!r}")
        if not self.authorized:
            raise ConfigError("scenario needs an authorized domain")
        if self.mode == "target_specified" and not self.unauthorized:
            raise ConfigError("target_specified scenario needs an unauthorized domain")
        if self.mode != "target_specified" and self.unauthorized:
            raise ConfigError(f"{self.mode} scenario builds its own unauthorized domain; drop 'unauthorized'")
        if not 0 <= self.n_aug < len(POOL):
            raise ConfigError(f"n_aug must be below the pool size {len(POOL)}")
        if isinstance(self.watermark, dict):
            self.watermark = WatermarkSpec(**self.watermark)
        self.test = list(self.test)

    def domain_names(self):
        names = [self.authorized] + ([self.unauthorized] if self.unauthorized else []) + list(self.test)
        return list(dict.fromkeys(names))


@dataclass
class EvalSplit:
    domain: Domain
    role: str  # authorized | unauthorized | test


@dataclass
class Scenario:
    spec: ScenarioSpec
    train_authorized: Domain
    train_unauthorized: Domain | None
    eval_splits: dict  # name -> EvalSplit


def build_scenario(spec: ScenarioSpec, train: dict, test: dict, seed=0, workers=1) -> Scenario:
    """Assemble train/eval domains for one scenario.

    ``train`` and ``test`` map domain names to :class:`Domain` objects.
    """
    for name in spec.domain_names():
        if name not in train or name not in test:
            raise ConfigError(f"scenario references unknown domain {name!r}")
    auth = spec.authorized
    wm = spec.watermark
    splits = {}

    if spec.mode == "target_specified":
        train_a, train_u = train[auth], train[spec.unauthorized]
        splits[auth] = EvalSplit(test[auth], "authorized")
        for name in [spec.unauthorized] + spec.test:
            splits[name] = EvalSplit(test[name], "unauthorized")

    elif spec.mode == "target_free":
        train_a = train[auth]
        train_u = generate_unauthorized_domain(train_a, POOL, spec.n_aug, seed, workers)
        splits[auth] = EvalSplit(test[auth], "authorized")
        for name in spec.test:
            splits[name] = EvalSplit(test[name], "unauthorized")

    elif spec.mode == "ownership":
        train_a = train[auth]
        train_u = watermark_domain(train_a, wm)
        splits[auth] = EvalSplit(test[auth], "authorized")
        patched = watermark_domain(test[auth], wm)
        splits[patched.name] = EvalSplit(patched, "unauthorized")
        for name in spec.test:
            splits[name] = EvalSplit(test[name], "test")

    else:  # authorization
        original = train[auth]
        train_a = watermark_domain(original, wm)
        rng = np.random.default_rng(seed)
        thirds = np.array_split(rng.permutation(len(original)), 3)
        part_orig = original.subset(np.sort(thirds[0]))
        part_gen = generate_unauthorized_domain(original.subset(np.sort(thirds[1])), POOL, spec.n_aug, seed, workers)
        gen_for_wm = generate_unauthorized_domain(original.subset(np.sort(thirds[2])), POOL, spec.n_aug, seed, workers)
        part_gen_wm = watermark_domain(gen_for_wm, wm)
        train_u = concat_domains(f"{auth}+mix", [part_orig, part_gen, part_gen_wm])
        auth_test = watermark_domain(test[auth], wm)
        splits[auth_test.name] = EvalSplit(auth_test, "authorized")
        splits[auth] = EvalSplit(test[auth], "test")
        for name in spec.test:
            splits[name] = EvalSplit(test[name], "test")

    return Scenario(spec, train_a, train_u, splits)
