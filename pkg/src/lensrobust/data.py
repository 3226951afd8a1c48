"""Bundled 8x8 digit-like micro dataset and a synthetic two-blob generator."""

from __future__ import annotations

from importlib import resources
from pathlib import Path

import numpy as np

from .core import ImageTensor, save_pgm

# 5x7 bitmap glyphs for the digits 0-9
_GLYPHS = {
    0: ["01110", "10001", "10011", "10101", "11001", "10001", "01110"],
    1: ["00100", "01100", "00100", "00100", "00100", "00100", "01110"],
    2: ["01110", "10001", "00001", "00010", "00100", "01000", "11111"],
    3: ["11111", "00010", "00100", "00010", "00001", "10001", "01110"],
    4: ["00010", "00110", "01010", "10010", "11111", "00010", "00010"],
    5: ["11111", "10000", "11110", "00001", "00001", "10001", "01110"],
    6: ["00110", "01000", "10000", "11110", "10001", "10001", "01110"],
    7: ["11111", "00001", "00010", "00100", "01000", "01000", "01000"],
    8: ["01110", "10001", "10001", "01110", "10001", "10001", "01110"],
    9: ["01110", "10001", "10001", "01111", "00001", "00010", "01100"],
}

SIDE = 8
DEFAULT_SAMPLES = 500
DEFAULT_SEED = 20240611


def glyph(digit: int) -> np.ndarray:
    return np.array([[int(ch) for ch in row] for row in _GLYPHS[digit]], dtype=np.float64)


def render_digit(digit: int, rng: np.random.Generator) -> np.ndarray:
    """One noisy 8x8 rendering: random placement, stroke gain, background noise."""
    g = glyph(digit)
    img = np.zeros((SIDE, SIDE))
    r0 = int(rng.integers(0, SIDE - g.shape[0] + 1))
    c0 = int(rng.integers(0, SIDE - g.shape[1] + 1))
    img[r0:r0 + g.shape[0], c0:c0 + g.shape[1]] = g * rng.uniform(0.6, 1.0)
    # drop a few stroke pixels so samples of one class differ in shape too
    dropout = rng.random(img.shape) < 0.08
    img[dropout] *= 0.3
    img += rng.normal(0.0, 0.08, size=img.shape)
    return np.clip(img, 0.0, 1.0)


def generate_digits(n: int = DEFAULT_SAMPLES, seed: int = DEFAULT_SEED):
    """``n`` images cycling through the 10 classes; returns (images, labels)."""
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % 10
    images = np.stack([render_digit(int(d), rng) for d in labels])
    return images, labels


def write_digits(directory, n: int = DEFAULT_SAMPLES, seed: int = DEFAULT_SEED) -> Path:
    """Write ``img_XXX.pgm`` files plus ``digits.csv``; returns the manifest path."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    images, labels = generate_digits(n, seed)
    lines = ["path,label"]
    for i, (img, label) in enumerate(zip(images, labels)):
        name = f"img_{i:03d}.pgm"
        save_pgm(ImageTensor(img), directory / name)
        lines.append(f"{name},{label}")
    manifest = directory / "digits.csv"
    manifest.write_text("\n".join(lines) + "\n", encoding="ascii")
    return manifest


def bundled_manifest() -> Path:
    return Path(str(resources.files("lensrobust") / "data" / "digits" / "digits.csv"))


def two_blobs(n: int = 200, dim: int = 16, seed: int = 0, separation: float = 0.5):
    """Linearly separable two-class data in [0, 1]^dim."""
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % 2
    centers = np.where(labels[:, None] == 1, 0.5 + separation / 2, 0.5 - separation / 2)
    X = np.clip(centers + rng.normal(0.0, 0.1, size=(n, dim)), 0.0, 1.0)
    return X, labels
