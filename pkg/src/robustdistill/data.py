"""Desk-scale datasets: seeded synthetic generators and a small-image loader.

Generators produce class-balanced, range-normalized data deterministically
from a descriptor; the on-disk format is the named-array container with a
bit-exact round trip.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .container import read_container, write_container
from .errors import ConfigurationError, IngestionError
from .models import LabeledBatch

KINDS = ("gaussians", "rings", "patch-images", "file")


@dataclass
class DatasetDescriptor:
    kind: str
    num_classes: int = 3
    per_class: int = 500
    input_shape: tuple[int, ...] = (2,)
    lo: float = 0.0
    hi: float = 1.0
    seed: int = 0
    test_fraction: float = 0.5
    noise: float = 0.35  # gaussian sigma / ring thickness / patch noise amplitude
    path: str | None = None  # for kind == "file"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigurationError(f"unknown dataset kind {self.kind!r}; expected one of {KINDS}")
        if self.num_classes < 2 or self.per_class < 1:
            raise ConfigurationError("need num_classes >= 2 and per_class >= 1")
        if not 0.0 < self.test_fraction < 1.0:
            raise ConfigurationError("test_fraction must lie strictly between 0 and 1")
        if self.hi <= self.lo:
            raise ConfigurationError(f"invalid range [{self.lo}, {self.hi}]")
        self.input_shape = tuple(self.input_shape)


def _simplex_means(num_classes: int, dim: int) -> torch.Tensor:
    """Unit-spaced class means: a regular simplex when it fits, a circle otherwise."""
    if num_classes <= dim + 1:
        # regular simplex with side length 1, centered
        eye = torch.eye(num_classes, dtype=torch.float64)
        verts = eye - eye.mean(dim=0, keepdim=True)
        verts = verts / (verts[0] - verts[1]).norm()
        q, _ = torch.linalg.qr(verts.T)  # embed the (C-1)-dim simplex
        coords = verts @ q[:, : num_classes - 1]
        out = torch.zeros(num_classes, dim, dtype=torch.float64)
        out[:, : num_classes - 1] = coords
        return out
    angles = torch.arange(num_classes, dtype=torch.float64) * 2 * torch.pi / num_classes
    radius = 0.5 / torch.sin(torch.tensor(torch.pi / num_classes, dtype=torch.float64))
    out = torch.zeros(num_classes, dim, dtype=torch.float64)
    out[:, 0] = radius * torch.cos(angles)
    out[:, 1 % dim] = radius * torch.sin(angles)
    return out


def _rescale(x: torch.Tensor, lo: float, hi: float) -> torch.Tensor:
    span = x.max() - x.min()
    if span == 0:
        return torch.full_like(x, (lo + hi) / 2)
    return torch.clamp((x - x.min()) / span * (hi - lo) + lo, lo, hi)


def _generate_pool(desc: DatasetDescriptor) -> tuple[torch.Tensor, torch.Tensor]:
    gen = torch.Generator().manual_seed(desc.seed)
    n = desc.num_classes * desc.per_class
    labels = torch.arange(desc.num_classes).repeat_interleave(desc.per_class)

    if desc.kind == "gaussians":
        if len(desc.input_shape) != 1:
            raise ConfigurationError("gaussians need a flat input_shape like (2,)")
        dim = desc.input_shape[0]
        means = _simplex_means(desc.num_classes, dim)
        x = means[labels] + desc.noise * torch.randn(n, dim, generator=gen, dtype=torch.float64)
        return _rescale(x, desc.lo, desc.hi), labels

    if desc.kind == "rings":
        if len(desc.input_shape) != 1 or desc.input_shape[0] != 2:
            raise ConfigurationError("rings are 2-D; use input_shape (2,)")
        radii = (labels.double() + 1.0) / desc.num_classes
        theta = torch.rand(n, generator=gen, dtype=torch.float64) * 2 * torch.pi
        r = radii + desc.noise * 0.1 * torch.randn(n, generator=gen, dtype=torch.float64)
        x = torch.stack([r * torch.cos(theta), r * torch.sin(theta)], dim=1)
        return _rescale(x, desc.lo, desc.hi), labels

    if desc.kind == "patch-images":
        if len(desc.input_shape) != 3:
            raise ConfigurationError("patch-images need input_shape (C, H, W)")
        c, h, w = desc.input_shape
        palette = torch.rand(desc.num_classes, c, generator=gen, dtype=torch.float64)
        base = palette[labels].reshape(n, c, 1, 1).expand(n, c, h, w)
        noise = desc.noise * (torch.rand(n, c, h, w, generator=gen, dtype=torch.float64) - 0.5)
        x = torch.clamp(base + noise, 0.0, 1.0)
        return torch.clamp(x * (desc.hi - desc.lo) + desc.lo, desc.lo, desc.hi), labels

    raise ConfigurationError(f"generator for kind {desc.kind!r} requires load_image_array")


def _split(x: torch.Tensor, labels: torch.Tensor,
           desc: DatasetDescriptor) -> tuple[LabeledBatch, LabeledBatch]:
    """Seeded class-stratified split; ids number the pool and stay disjoint."""
    gen = torch.Generator().manual_seed(desc.seed + 1)
    train_idx, test_idx = [], []
    for c in range(desc.num_classes):
        idx = torch.nonzero(labels == c).squeeze(1)
        perm = idx[torch.randperm(len(idx), generator=gen)]
        n_test = int(round(len(idx) * desc.test_fraction))
        test_idx.append(perm[:n_test])
        train_idx.append(perm[n_test:])
    train_idx = torch.cat(train_idx).sort().values
    test_idx = torch.cat(test_idx).sort().values
    make = lambda idx: LabeledBatch(x[idx], labels[idx], idx.clone())
    return make(train_idx), make(test_idx)


def generate(desc: DatasetDescriptor) -> tuple[LabeledBatch, LabeledBatch]:
    """(train, test) from a descriptor; deterministic, disjoint, exhaustive."""
    if desc.kind == "file":
        return load_image_array(desc.path, desc)
    x, labels = _generate_pool(desc)
    return _split(x, labels, desc)


def save_dataset(path: str | Path, images: torch.Tensor, labels: torch.Tensor,
                 manifest: dict | None = None) -> None:
    write_container(path,
                    {"images": images.numpy(), "labels": labels.numpy().astype(np.int64)},
                    {"kind": "dataset", **(manifest or {})})


def load_image_array(path: str | Path | None, desc: DatasetDescriptor
                     ) -> tuple[LabeledBatch, LabeledBatch]:
    """Load a labeled array container, validate it against the descriptor,
    rescale into range if needed, and split like the generators do."""
    if path is None:
        raise ConfigurationError("file datasets need a path")
    arrays, manifest = read_container(path)
    if "images" not in arrays or "labels" not in arrays:
        raise IngestionError(f"{path} lacks 'images'/'labels' arrays")
    images = torch.from_numpy(arrays["images"]).to(torch.float64)
    labels = torch.from_numpy(arrays["labels"]).to(torch.int64)
    if images.shape[0] == 0:
        raise IngestionError(f"{path} contains no records")
    if images.shape[0] != labels.shape[0]:
        raise IngestionError(f"{path}: {images.shape[0]} images vs {labels.shape[0]} labels")
    if tuple(images.shape[1:]) != desc.input_shape:
        raise IngestionError(
            f"{path}: record shape {tuple(images.shape[1:])} != declared {desc.input_shape}")
    for j, lbl in enumerate(labels.tolist()):
        if not 0 <= lbl < desc.num_classes:
            raise IngestionError(f"{path}: record {j} has label {lbl} outside [0, {desc.num_classes})")
    if images.min() < desc.lo or images.max() > desc.hi:
        images = _rescale(images, desc.lo, desc.hi)
    return _split(images, labels, desc)
