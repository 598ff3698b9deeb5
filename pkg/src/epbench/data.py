"""Datasets: the CIFAR binary reader, synthetic desk-scale generators, and
training-time augmentation.

Images are float32 in [0,1], channel-first [N,C,H,W]; labels are int64.
Normalization statistics (per-channel mean/std applied at model input) travel
with the dataset and end up in the checkpoint.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class CifarFormatError(ValueError):
    """Malformed CIFAR binary file; carries the offending byte offset."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


@dataclass
class Dataset:
    images: np.ndarray          # [N,C,H,W] float32 in [0,1]
    labels: np.ndarray          # [N] int64 in [0, classes)
    classes: int
    split: str = "train"
    norm_mean: np.ndarray | None = None  # per-channel, model-input normalization
    norm_std: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, n: int) -> "Dataset":
        return Dataset(self.images[:n], self.labels[:n], self.classes, self.split,
                       self.norm_mean, self.norm_std)


def channel_stats(images: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel mean and std over a [N,C,H,W] stack (std floored at 1e-6)."""
    mean = images.mean(axis=(0, 2, 3))
    std = np.maximum(images.std(axis=(0, 2, 3)), 1e-6)
    return mean.astype(np.float32), std.astype(np.float32)


def normalize_images(images: np.ndarray, mean, std) -> np.ndarray:
    mean = np.asarray(mean, dtype=np.float64).reshape(1, -1, 1, 1)
    std = np.asarray(std, dtype=np.float64).reshape(1, -1, 1, 1)
    return ((images - mean) / std).astype(np.float64)


def load_cifar_binary(path, variant: str = "cifar10") -> Dataset:
    """Parse the standard CIFAR binary layout.

    cifar10: 3073-byte records (1 label byte + 3*1024 channel-major pixel
    bytes, row-major within each channel plane). cifar100: 3074-byte records
    (coarse then fine label byte); the fine label is used.
    """
    if variant not in ("cifar10", "cifar100"):
        raise ValueError(f"unknown variant {variant!r}")
    label_bytes = 1 if variant == "cifar10" else 2
    classes = 10 if variant == "cifar10" else 100
    record = label_bytes + 3072
    with open(path, "rb") as fh:
        raw = np.frombuffer(fh.read(), dtype=np.uint8)
    if raw.size % record:
        raise CifarFormatError(
            f"file size {raw.size} is not a multiple of the {record}-byte record",
            offset=(raw.size // record) * record,
        )
    n = raw.size // record
    if n == 0:
        return Dataset(np.zeros((0, 3, 32, 32), dtype=np.float32),
                       np.zeros(0, dtype=np.int64), classes, split="test")
    recs = raw.reshape(n, record)
    labels = recs[:, label_bytes - 1].astype(np.int64)  # fine label for cifar100
    bad = np.nonzero(labels >= classes)[0]
    if bad.size:
        raise CifarFormatError(
            f"label {labels[bad[0]]} out of range [0,{classes})",
            offset=int(bad[0]) * record + label_bytes - 1,
        )
    pixels = recs[:, label_bytes:].reshape(n, 3, 32, 32)
    images = (pixels.astype(np.float32) / 255.0)
    return Dataset(images, labels, classes, split="test")


def synth_dataset(kind: str, n: int, image_shape=(1, 8, 8), classes: int = 2,
                  seed: int = 0, noise: float = 0.1, split: str = "train") -> Dataset:
    """Deterministic class-conditional toy images.

    blobs: one Gaussian bump per class at a class-specific position; with
    noise=0 the classes are linearly separable by construction. stripes:
    oriented sinusoidal gratings, one orientation per class, random phase.
    Labels are balanced to within one example (round-robin).
    """
    if n <= 0:
        raise ValueError("n must be > 0")
    if kind not in ("blobs", "stripes"):
        raise ValueError(f"unknown synthetic kind {kind!r}")
    rng = np.random.default_rng(seed)
    C, H, W = image_shape
    labels = np.arange(n, dtype=np.int64) % classes
    ii, jj = np.meshgrid(np.arange(H), np.arange(W), indexing="ij")
    images = np.empty((n, C, H, W), dtype=np.float32)
    if kind == "blobs":
        # class centers on a circle around the image center
        angles = 2 * np.pi * np.arange(classes) / classes
        r = min(H, W) / 4.0
        ci = H / 2.0 - 0.5 + r * np.sin(angles)
        cj = W / 2.0 - 0.5 + r * np.cos(angles)
        width = min(H, W) / 6.0
        for k in range(n):
            y = labels[k]
            bump = 0.9 * np.exp(-(((ii - ci[y]) ** 2 + (jj - cj[y]) ** 2)
                                  / (2.0 * width ** 2)))
            img = bump[None, :, :] + noise * rng.standard_normal((C, H, W))
            images[k] = np.clip(img, 0.0, 1.0)
    else:
        freq = 2.0
        for k in range(n):
            y = labels[k]
            theta = np.pi * y / classes
            phase = rng.uniform(0.0, 2 * np.pi)
            wave = np.sin(2 * np.pi * freq * (ii * np.cos(theta) + jj * np.sin(theta)) / H
                          + phase)
            img = (0.5 + 0.45 * wave)[None, :, :] + noise * rng.standard_normal((C, H, W))
            images[k] = np.clip(img, 0.0, 1.0)
    return Dataset(images, labels, classes, split=split)


def augment(batch: np.ndarray, flags: dict, seed: int = 0) -> np.ndarray:
    """hflip (probability 0.5) and/or zero-pad-then-random-crop, per example.

    flags: {"hflip": bool, "random_crop": pad} with pad defaulting to 4 when
    the key maps to True. Deterministic per seed; empty flags are identity.
    """
    batch = np.asarray(batch)
    out = batch.copy()
    if not flags:
        return out
    rng = np.random.default_rng(seed)
    n = len(out)
    if flags.get("hflip"):
        flip = rng.random(n) < 0.5
        out[flip] = out[flip][:, :, :, ::-1]
    pad = flags.get("random_crop")
    if pad:
        pad = 4 if pad is True else int(pad)
        H, W = out.shape[2], out.shape[3]
        padded = np.pad(out, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
        offs = rng.integers(0, 2 * pad + 1, size=(n, 2))
        for k in range(n):
            r, c = offs[k]
            out[k] = padded[k, :, r:r + H, c:c + W]
    return out
