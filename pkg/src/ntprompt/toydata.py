"""Seeded synthetic multi-domain image data.

Every domain shares the same four content classes (stripes at four
orientations); domains differ only in style: palette, texture overlay,
contrast.
Images are float32 arrays [3, H, W] in [0, 1].
"""

from __future__ import annotations

import numpy as np

from ntprompt.errors import ConfigError

CLASS_NAMES = ("horizontal", "vertical", "diagonal", "antidiagonal")

# Training overrides for desk-scale toy runs: toy token embeddings are
# unit-scale, so the token-separation cap and the learning rate differ
# from the full-scale defaults.
TOY_TRAIN = {"epochs": 20, "lr": 1e-3, "cap_m": 1.0}

# style name -> (background rgb, foreground rgb, texture amplitude, texture period, contrast)
STYLES = {
    "clean": ((0.15, 0.2, 0.3), (0.95, 0.85, 0.4), 0.0, 0, 1.0),
    "shifted": ((0.55, 0.15, 0.5), (0.2, 0.75, 0.6), 0.15, 3, 0.7),
    "sketch": ((0.9, 0.9, 0.88), (0.1, 0.1, 0.12), 0.1, 3, 0.9),
    "faded": ((0.45, 0.5, 0.55), (0.85, 0.8, 0.6), 0.0, 0, 0.6),
}


def content_mask(cls: int, size: int, rng: np.random.Generator | None, jitter=True) -> np.ndarray:
    """Grey-level class pattern in [0, 1], shape [size, size]."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) / size
    if rng is not None and jitter:
        phase = rng.uniform(0, 2 * np.pi)
        freq = rng.uniform(3.0, 5.0)
        cy, cx = rng.uniform(0.35, 0.65, size=2)
    else:
        phase, freq, cy, cx = 0.0, 4.0, 0.5, 0.5
    if not 0 <= cls < len(CLASS_NAMES):
        raise ConfigError(f"toy data has {len(CLASS_NAMES)} classes, got class {cls}")
    # stripes at 0, 90, 45 and 135 degrees
    dy, dx = {0: (1.0, 0.0), 1: (0.0, 1.0), 2: (0.7071, 0.7071), 3: (0.7071, -0.7071)}[cls]
    wave = np.sin(2 * np.pi * freq * (dy * (yy - cy) + dx * (xx - cx)) + phase)
    return 0.5 + 0.5 * wave


def render(mask: np.ndarray, style: str, rng: np.random.Generator | None, noise=0.03) -> np.ndarray:
    try:
        bg, fg, tex_amp, tex_period, contrast = STYLES[style]
    except KeyError:
        raise ConfigError(f"unknown toy style {style!r}") from None
    bg = np.asarray(bg)[:, None, None]
    fg = np.asarray(fg)[:, None, None]
    m = 0.5 + contrast * (mask - 0.5)
    img = bg * (1 - m) + fg * m
    if tex_amp > 0:
        size = mask.shape[0]
        yy, xx = np.mgrid[0:size, 0:size]
        checker = ((yy // tex_period + xx // tex_period) % 2) * 2.0 - 1.0
        img = img + tex_amp * checker[None]
    if rng is not None and noise > 0:
        img = img + rng.normal(0, noise, size=img.shape)
    return np.clip(img, 0, 1).astype(np.float32)


def make_domain(style: str, n_per_class: int, size=32, seed=0, n_classes=4):
    """Returns (images [S, 3, size, size], labels [S]) with a class-balanced, shuffled order."""
    rng = np.random.default_rng(seed)
    labels = np.repeat(np.arange(n_classes), n_per_class)
    rng.shuffle(labels)
    images = np.stack([render(content_mask(int(c), size, rng), style, rng) for c in labels])
    return images, labels.astype(np.int64)


def concept_images(size=32, n_views=12, seed=12345, n_classes=4) -> dict:
    """Style-diverse renderings of each class pattern used to ground class names.

    Views use random palettes, never the named domain styles.
    """
    rng = np.random.default_rng(seed)
    out = {}
    for c in range(n_classes):
        views = []
        for _ in range(n_views):
            mask = content_mask(c, size, rng)
            bg, fg = rng.uniform(0, 1, size=(2, 3))
            img = bg[:, None, None] * (1 - mask) + fg[:, None, None] * mask
            views.append(np.clip(img, 0, 1).astype(np.float32))
        out[CLASS_NAMES[c]] = np.stack(views)
    return out
