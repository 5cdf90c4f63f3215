"""Procedurally generated image classification task.

Each class is an oriented, class-coloured Gabor patch at a jittered
position, overlaid with a random-orientation distractor grating and pixel
noise.  Orientation and spatial frequency need nonlinear spatial filters to
decode; colour alone is only weakly informative.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class Split:
    images: np.ndarray  # (n, C, H, W) float32
    labels: np.ndarray  # (n,) int64
    ids: tuple[str, ...]

    def __len__(self) -> int:
        return len(self.labels)


@dataclass(frozen=True)
class DeskDataset:
    seed: int = 0
    num_classes: int = 10
    image_size: int = 16
    n_train: int = 4096
    n_val: int = 1024
    n_probe: int = 256
    noise: float = 0.3
    channels: int = 3

    @property
    def input_shape(self) -> tuple[int, int, int]:
        return (self.channels, self.image_size, self.image_size)

    def class_params(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Orientation, frequency (cycles/pixel) and colour per class."""
        rng = np.random.default_rng([self.seed, 0xC1A55])
        k = np.arange(self.num_classes)
        n_orient = (self.num_classes + 1) // 2
        theta = (k % n_orient) * np.pi / n_orient + rng.uniform(0, np.pi / n_orient)
        freq = np.where(k < n_orient, 0.22, 0.42) * rng.uniform(0.95, 1.05, size=self.num_classes)
        color = 1.0 + 0.3 * rng.normal(size=(self.num_classes, self.channels))
        return theta, freq, color

    def _generate(self, labels: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        n, s = len(labels), self.image_size
        theta, freq, color = self.class_params()
        yy, xx = np.mgrid[0:s, 0:s].astype(np.float64) - s / 2 + 0.5
        th = theta[labels] + rng.normal(0, 0.15, n)
        f = freq[labels] * (1 + rng.normal(0, 0.08, n))
        cx, cy = rng.uniform(-s / 5, s / 5, (2, n))
        phase = rng.uniform(0, 2 * np.pi, n)
        contrast = rng.uniform(0.6, 1.2, n)
        dx = xx[None] - cx[:, None, None]
        dy = yy[None] - cy[:, None, None]
        u = dx * np.cos(th)[:, None, None] + dy * np.sin(th)[:, None, None]
        env = np.exp(-(dx**2 + dy**2) / (2 * (s / 4) ** 2))
        gabor = np.cos(2 * np.pi * f[:, None, None] * u + phase[:, None, None]) * env * contrast[:, None, None]
        th2 = rng.uniform(0, np.pi, n)
        u2 = xx[None] * np.cos(th2)[:, None, None] + yy[None] * np.sin(th2)[:, None, None]
        f2 = rng.uniform(0.2, 0.5, n)
        distractor = 0.4 * np.cos(2 * np.pi * f2[:, None, None] * u2 + rng.uniform(0, 2 * np.pi, n)[:, None, None])
        hue = color[labels] + rng.normal(0, 0.3, (n, self.channels))
        tint = rng.normal(1, 0.3, (n, self.channels))
        x = hue[:, :, None, None] * gabor[:, None] + tint[:, :, None, None] * distractor[:, None]
        x += rng.normal(0, self.noise, x.shape)
        return x.astype(np.float32)

    @functools.cached_property
    def _splits(self) -> dict[str, Split]:
        rng = np.random.default_rng([self.seed, 0xDA7A])
        out = {}
        for name, n in (("train", self.n_train), ("val", self.n_val), ("probe", self.n_probe)):
            if name == "probe":
                labels = np.arange(n, dtype=np.int64) % self.num_classes  # balanced categories
            else:
                labels = rng.integers(0, self.num_classes, n).astype(np.int64)
            images = self._generate(labels, rng)
            ids = tuple(f"{name}-{i:05d}" for i in range(n))
            out[name] = Split(images, labels, ids)
        return out

    @property
    def train(self) -> Split:
        return self._splits["train"]

    @property
    def val(self) -> Split:
        return self._splits["val"]

    @property
    def probe(self) -> Split:
        return self._splits["probe"]

    def probe_categories(self) -> tuple[str, ...]:
        return tuple(f"class-{c}" for c in self.probe.labels)
