"""Synthetic two-class image data standing in for a real detection dataset."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np


@dataclass(frozen=True)
class Dataset:
    x: np.ndarray  # (n, channels, size, size) float32
    y: np.ndarray  # (n,) int64

    def __len__(self):
        return len(self.y)

    def split(self, n_train):
        return Dataset(self.x[:n_train], self.y[:n_train]), Dataset(self.x[n_train:], self.y[n_train:])

    def as_tuple(self):
        return self.x, self.y

    def save(self, path):
        with open(path, "wb") as fh:
            np.savez(fh, x=self.x, y=self.y)

    @classmethod
    def load(cls, path):
        with np.load(Path(path)) as npz:
            return cls(npz["x"].astype(np.float32), npz["y"].astype(np.int64))


def gen_synthetic(seed: int, size: int, difficulty: float = 0.4, image=8, channels=2) -> Dataset:
    """Oriented-stroke images: class 0 strokes are horizontal, class 1 vertical.

    Each image holds one short stroke in channel 0 at a random position; channel
    1 carries a stroke of random orientation as a distractor. ``difficulty``
    in [0, 1] scales both the additive noise and how faint the signal stroke is.
    Labels alternate before shuffling, so classes are balanced to within one.
    """
    rng = np.random.default_rng(seed)
    y = np.arange(size) % 2
    rng.shuffle(y)
    x = rng.normal(0.0, 0.2 + 0.8 * difficulty, (size, channels, image, image))
    contrast = 2.0 - 1.2 * difficulty
    length = 4
    for i in range(size):
        _stroke(x[i, 0], rng, vertical=bool(y[i]), amp=contrast, length=length)
        if channels > 1:
            _stroke(x[i, 1], rng, vertical=bool(rng.integers(2)), amp=contrast, length=length)
    return Dataset(x.astype(np.float32), y.astype(np.int64))


def _stroke(plane, rng, vertical, amp, length):
    n = plane.shape[0]
    a = rng.integers(0, n)
    b = rng.integers(0, n - length + 1)
    if vertical:
        plane[b : b + length, a] += amp
    else:
        plane[a, b : b + length] += amp
