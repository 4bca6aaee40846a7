"""Dataset ingestion, transforms, and the synthetic desk-scale dataset.

Folder datasets follow the ``root/<split>/<class_name>/<image files>`` layout
and are decoded to unit-float RGB tensors (C, H, W). Train-time transform
randomness is derived statelessly from (seed, epoch, sample index), so runs
are reproducible and resumable regardless of worker scheduling.

The synthetic generator produces images whose class identity lives in small
glyph textures scattered over a shared smooth background: global structure is
class-independent, local texture is not, which is the regime the mosaic-phase
training is meant to exercise.
"""

from __future__ import annotations

import os
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .errors import (
    BadSizeError,
    DatasetEmptyError,
    DecodeError,
    MissingRootError,
    NoClassesError,
    UnreadableImageError,
)

IMAGE_EXTENSIONS = {".png", ".jpg", ".jpeg", ".bmp", ".gif", ".tif", ".tiff", ".webp"}

# conventional channel statistics for pretrained-backbone pipelines; desk-scale
# runs keep identity normalization
PRETRAIN_MEAN = (0.485, 0.456, 0.406)
PRETRAIN_STD = (0.229, 0.224, 0.225)


def mix_seed(*parts: int) -> int:
    """Deterministic 64-bit mix of integer parts (splitmix-style)."""
    h = 0x9E3779B97F4A7C15
    for p in parts:
        h ^= (p + 0x9E3779B97F4A7C15) & 0xFFFFFFFFFFFFFFFF
        h = (h * 0xBF58476D1CE4E5B9) & 0xFFFFFFFFFFFFFFFF
        h ^= h >> 31
    return h & 0x7FFFFFFFFFFFFFFF


# ---------------------------------------------------------------------------
# manifests


@dataclass
class DatasetManifest:
    root: Path
    split: str
    classes: list[str]
    samples: list[tuple[str, int]]  # (path relative to root/split, class index)

    def to_text(self) -> str:
        lines = [f"# class\t{i}\t{name}" for i, name in enumerate(self.classes)]
        lines += [f"{idx}\t{rel}" for rel, idx in self.samples]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str, root: str | Path = ".",
                  split: str = "train") -> "DatasetManifest":
        classes: dict[int, str] = {}
        samples = []
        for line in text.splitlines():
            if not line.strip():
                continue
            if line.startswith("# class\t"):
                _, idx_s, name = line.split("\t", 2)
                classes[int(idx_s)] = name
            else:
                idx_s, rel = line.split("\t", 1)
                samples.append((rel, int(idx_s)))
        names = [classes[i] for i in sorted(classes)]
        return cls(root=Path(root), split=split, classes=names, samples=samples)


def scan_dataset(root: str | Path, split: str) -> DatasetManifest:
    """Scan ``root/<split>/<class>/*`` into a manifest.

    Class ordering is lexicographic; classes with no images are kept (with a
    warning) so indices stay stable across splits.
    """
    root = Path(root)
    split_dir = root / split
    if not split_dir.is_dir():
        raise MissingRootError(f"dataset split directory not found: {split_dir}")
    class_dirs = sorted(d for d in split_dir.iterdir() if d.is_dir())
    if not class_dirs:
        raise NoClassesError(f"no class subdirectories under {split_dir}")
    classes = [d.name for d in class_dirs]
    samples: list[tuple[str, int]] = []
    for idx, d in enumerate(class_dirs):
        files = sorted(p for p in d.iterdir()
                       if p.is_file() and p.suffix.lower() in IMAGE_EXTENSIONS)
        if not files:
            warnings.warn(f"class directory {d} contains no images")
        for p in files:
            if not os.access(p, os.R_OK):
                raise UnreadableImageError(f"cannot read image file: {p}")
            samples.append((str(p.relative_to(split_dir)), idx))
    return DatasetManifest(root=root, split=split, classes=classes, samples=samples)


# ---------------------------------------------------------------------------
# transforms


@dataclass(frozen=True)
class TransformSpec:
    """Resize-then-crop pipeline settings.

    mode "train" adds a p=0.5 horizontal flip and a random crop; "eval" uses
    the deterministic center crop. crop_to must stay divisible by 2**r_max so
    mosaic generation applies cleanly downstream.
    """

    resize_to: int = 64
    crop_to: int = 64
    mode: str = "train"
    seed: int = 0
    r_max: int = 3

    def __post_init__(self):
        if self.mode not in ("train", "eval"):
            raise ValueError(f"mode must be 'train' or 'eval', got {self.mode!r}")
        if self.crop_to > self.resize_to:
            raise ValueError(f"crop_to {self.crop_to} exceeds resize_to {self.resize_to}")
        if self.crop_to % (1 << self.r_max):
            raise ValueError(
                f"crop_to {self.crop_to} not divisible by 2**{self.r_max}")


def to_unit_tensor(image) -> torch.Tensor:
    """Decode a PIL image / array / tensor into a float32 (3, H, W) in [0, 1]."""
    try:
        if isinstance(image, torch.Tensor):
            t = image.float()
            if t.dim() != 3:
                raise ValueError(f"expected 3 dims, got {t.dim()}")
            return t
        if isinstance(image, Image.Image):
            arr = np.asarray(image.convert("RGB"), dtype=np.float32) / 255.0
        else:
            arr = np.asarray(image, dtype=np.float32)
            if arr.max() > 1.5:
                arr = arr / 255.0
        if arr.ndim == 2:
            arr = np.stack([arr] * 3, axis=-1)
        return torch.from_numpy(np.ascontiguousarray(arr.transpose(2, 0, 1)))
    except (ValueError, TypeError, OSError) as exc:
        raise DecodeError(f"cannot decode image: {exc}") from exc


def apply_transform(image, spec: TransformSpec,
                    rng: torch.Generator | None = None) -> torch.Tensor:
    """Resize, (flip,) crop. Output is (3, crop_to, crop_to) unit-float."""
    t = to_unit_tensor(image)
    if t.shape[-2:] != (spec.resize_to, spec.resize_to):
        t = F.interpolate(t.unsqueeze(0), size=(spec.resize_to, spec.resize_to),
                          mode="bilinear", align_corners=False).squeeze(0)
    margin = spec.resize_to - spec.crop_to
    if spec.mode == "train":
        if rng is None:
            rng = torch.Generator().manual_seed(spec.seed)
        if torch.rand((), generator=rng) < 0.5:
            t = t.flip(-1)
        oy = int(torch.randint(0, margin + 1, (), generator=rng))
        ox = int(torch.randint(0, margin + 1, (), generator=rng))
    else:
        oy = ox = margin // 2
    return t[:, oy:oy + spec.crop_to, ox:ox + spec.crop_to].contiguous()


def normalize(t: torch.Tensor, mean, std) -> torch.Tensor:
    m = torch.tensor(mean, dtype=t.dtype).view(-1, 1, 1)
    s = torch.tensor(std, dtype=t.dtype).view(-1, 1, 1)
    return (t - m) / s


# ---------------------------------------------------------------------------
# datasets


class FolderDataset:
    """Image-folder dataset applying a TransformSpec at load time.

    Train-mode randomness for sample i at epoch e is seeded by
    mix_seed(spec.seed, e, i); call :meth:`set_epoch` once per epoch.
    """

    def __init__(self, manifest: DatasetManifest, transform: TransformSpec,
                 channel_stats: tuple | None = None):
        if not manifest.samples:
            raise DatasetEmptyError(f"manifest for {manifest.root} has no samples")
        self.manifest = manifest
        self.transform = transform
        self.channel_stats = channel_stats
        self.classes = list(manifest.classes)
        self.epoch = 0

    def set_epoch(self, epoch: int):
        self.epoch = epoch

    def __len__(self):
        return len(self.manifest.samples)

    def __getitem__(self, i: int) -> tuple[torch.Tensor, int]:
        rel, label = self.manifest.samples[i]
        path = self.manifest.root / self.manifest.split / rel
        try:
            with Image.open(path) as im:
                im.load()
                rng = torch.Generator().manual_seed(
                    mix_seed(self.transform.seed, self.epoch, i))
                t = apply_transform(im, self.transform, rng)
        except (OSError, SyntaxError) as exc:
            raise DecodeError(f"cannot decode {path}: {exc}") from exc
        if self.channel_stats is not None:
            t = normalize(t, *self.channel_stats)
        return t, label


class SyntheticDataset:
    """In-memory tensor dataset; images are fixed at construction."""

    def __init__(self, images: torch.Tensor, labels: torch.Tensor,
                 classes: list[str]):
        self.images = images
        self.labels = labels
        self.classes = classes

    def set_epoch(self, epoch: int):
        pass

    def __len__(self):
        return self.images.shape[0]

    def __getitem__(self, i: int) -> tuple[torch.Tensor, int]:
        return self.images[i], int(self.labels[i])


def _hue_to_rgb(hue: float) -> torch.Tensor:
    """Fully saturated RGB for a hue in [0, 1)."""
    vals = []
    for n in (5.0, 3.0, 1.0):
        k = (hue * 6.0 + n) % 6.0
        vals.append(1.0 - max(0.0, min(k, 4.0 - k, 1.0)))
    return torch.tensor(vals)


def _class_glyph(class_idx: int, glyph_size: int) -> tuple[torch.Tensor, torch.Tensor]:
    """Fixed per-class texture patch and tint (independent of the sample seed)."""
    g = torch.Generator().manual_seed(mix_seed(0x617C, class_idx))
    pattern = (torch.rand(glyph_size, glyph_size, generator=g) < 0.5).float()
    # golden-ratio hue spacing keeps class tints well separated
    hue = (class_idx * 0.618033988749895) % 1.0
    tint = 0.25 + 0.75 * _hue_to_rgb(hue)
    return pattern, tint


def make_synthetic(K: int, per_class: int, size: int = 64, seed: int = 0,
                   n_glyphs: int = 12, glyph_size: int = 10,
                   glyph_alpha: float = 0.85) -> SyntheticDataset:
    """Generate a balanced synthetic fine-grained dataset.

    Shared structure: a smooth random two-sinusoid background per sample.
    Class signal: ``n_glyphs`` copies of the class's fixed glyph texture,
    tinted with the class color, stamped at seed-determined positions.
    """
    if size % 8:
        raise BadSizeError(f"size must be divisible by 8, got {size}")
    if K < 2:
        raise BadSizeError(f"need at least 2 classes, got {K}")
    rng = torch.Generator().manual_seed(seed)
    yy, xx = torch.meshgrid(torch.arange(size).float(),
                            torch.arange(size).float(), indexing="ij")
    images = torch.empty(K * per_class, 3, size, size)
    labels = torch.empty(K * per_class, dtype=torch.long)
    i = 0
    for cls in range(K):
        pattern, tint = _class_glyph(cls, glyph_size)
        stamp = glyph_alpha * pattern  # (gs, gs) blend weights
        for _ in range(per_class):
            freqs = torch.rand(4, generator=rng) * 0.15 + 0.02
            phases = torch.rand(2, generator=rng) * 6.28318
            bg = 0.45 + 0.10 * torch.sin(freqs[0] * yy + freqs[1] * xx + phases[0]) \
                      + 0.07 * torch.cos(freqs[2] * yy - freqs[3] * xx + phases[1])
            img = bg.clamp(0, 1).unsqueeze(0).repeat(3, 1, 1)
            pos = torch.randint(0, size - glyph_size + 1, (n_glyphs, 2), generator=rng)
            for gy, gx in pos.tolist():
                patch = img[:, gy:gy + glyph_size, gx:gx + glyph_size]
                img[:, gy:gy + glyph_size, gx:gx + glyph_size] = \
                    (1 - stamp) * patch + stamp * tint.view(3, 1, 1)
            images[i] = img.clamp(0, 1)
            labels[i] = cls
            i += 1
    classes = [f"class_{c:02d}" for c in range(K)]
    return SyntheticDataset(images, labels, classes)


def split_per_class(dataset: SyntheticDataset,
                    train_per_class: int) -> tuple[SyntheticDataset, SyntheticDataset]:
    """Deterministic per-class split of a synthetic dataset."""
    train_idx, test_idx = [], []
    seen: dict[int, int] = {}
    for i in range(len(dataset)):
        cls = int(dataset.labels[i])
        seen[cls] = seen.get(cls, 0) + 1
        (train_idx if seen[cls] <= train_per_class else test_idx).append(i)
    mk = lambda idx: SyntheticDataset(dataset.images[idx], dataset.labels[idx],
                                      dataset.classes)
    return mk(torch.tensor(train_idx)), mk(torch.tensor(test_idx))
