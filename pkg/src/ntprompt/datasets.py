"""Dataset ingestion (root/domain/class/image trees), toy domains, splits."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from ntprompt import toydata
from ntprompt.errors import DataError
from ntprompt.scenarios import Domain

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".gif", ".tif", ".tiff", ".webp"}


@dataclass
class DatasetIndex:
    root: str
    classes: list
    domains: dict  # domain -> class -> sorted list of relative file paths
    counts: dict = field(default_factory=dict)  # domain -> class -> count

    @property
    def n_domains(self):
        return len(self.domains)

    @property
    def n_classes(self):
        return len(self.classes)

    @property
    def n_images(self):
        return sum(sum(c.values()) for c in self.counts.values())

    def summary(self):
        return self.n_domains, self.n_classes, self.n_images

    def to_dict(self):
        # the root is left out so moving a dataset does not change its hash
        return {"classes": self.classes, "domains": self.domains, "counts": self.counts}

    def index_hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


def _subdirs(path: Path):
    return sorted(p for p in path.iterdir() if p.is_dir() and not p.name.startswith("."))


def ingest_dataset(root) -> DatasetIndex:
    """Index a root/domain/class/image tree; every domain must have the same class set."""
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"dataset root {root} is not a directory")
    domain_dirs = _subdirs(root)
    if not domain_dirs:
        raise DataError(f"dataset root {root} has no domain directories")
    class_sets = {d.name: {c.name for c in _subdirs(d)} for d in domain_dirs}
    all_classes = sorted(set().union(*class_sets.values()))
    problems = []
    for dom, present in class_sets.items():
        missing = sorted(set(all_classes) - present)
        if missing:
            problems.append(f"domain {dom!r} is missing class(es) {', '.join(missing)}")
    if problems:
        raise DataError("class sets differ across domains: " + "; ".join(problems))
    domains, counts = {}, {}
    for d in domain_dirs:
        domains[d.name], counts[d.name] = {}, {}
        for cls in all_classes:
            files = sorted(
                str(p.relative_to(root).as_posix())
                for p in (d / cls).iterdir()
                if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES
            )
            if not files:
                raise DataError(f"domain {d.name!r}, class {cls!r} has no images")
            domains[d.name][cls] = files
            counts[d.name][cls] = len(files)
    return DatasetIndex(str(root), all_classes, domains, counts)


def load_image(path, size) -> np.ndarray:
    with Image.open(path) as im:
        im = im.convert("RGB").resize((size, size), Image.BILINEAR)
        arr = np.asarray(im, dtype=np.float32) / 255.0
    return arr.transpose(2, 0, 1).copy()


def load_domain(index: DatasetIndex, domain: str, size: int) -> Domain:
    if domain not in index.domains:
        raise DataError(f"domain {domain!r} not in dataset (have {', '.join(sorted(index.domains))})")
    images, labels = [], []
    root = Path(index.root)
    for label, cls in enumerate(index.classes):
        for rel in index.domains[domain][cls]:
            images.append(load_image(root / rel, size))
            labels.append(label)
    return Domain(domain, np.stack(images), np.asarray(labels))


def toy_domain(style: str, n_per_class: int, size: int, seed: int) -> Domain:
    # each style gets its own stream so adding a style does not perturb the others
    style_seed = int.from_bytes(hashlib.sha256(f"{style}:{seed}".encode()).digest()[:4], "little")
    images, labels = toydata.make_domain(style, n_per_class, size=size, seed=style_seed)
    return Domain(style, images, labels)


def split_domain(domain: Domain, test_fraction: float, seed: int):
    """Seeded, class-stratified train/test split."""
    rng = np.random.default_rng(seed)
    train_idx, test_idx = [], []
    for c in np.unique(domain.labels):
        idx = rng.permutation(np.flatnonzero(domain.labels == c))
        n_test = max(1, int(round(test_fraction * len(idx))))
        if n_test >= len(idx):
            raise DataError(f"domain {domain.name!r}, class {c}: too few images to split")
        test_idx.append(idx[:n_test])
        train_idx.append(idx[n_test:])
    train_idx = np.sort(np.concatenate(train_idx))
    test_idx = np.sort(np.concatenate(test_idx))
    return domain.subset(train_idx), domain.subset(test_idx)
