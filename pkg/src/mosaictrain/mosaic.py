"""Recursive mosaic augmentation.

A mosaic step splits a rectangular region into four equal quadrants and
reassembles them in a uniformly random order. The recursive generator applies
the step to the whole image, then repeatedly descends into one of the four
quadrants it just created, so the output mixes one heavily scrambled corner
with progressively larger untouched blocks.

Images are tensors whose last two dimensions are (H, W); any leading
dimensions (channels, batch) ride along unchanged. Pixels are only moved,
never altered, so the multiset of pixel values is always preserved.

All randomness comes from an explicitly passed ``torch.Generator``; the
functions here are pure given (image, region/depth, generator state).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import torch

from .errors import (
    IncompatibleTraceError,
    IndivisibleImageError,
    OddRegionError,
    OutOfBoundsError,
    RecursionDepthError,
)

# Above this depth the smallest patch usually carries too little signal to be
# worth scrambling further; deeper recursion needs an explicit override.
MAX_SAFE_RECURSION = 3

# Quadrants of a region in row-major order: 0=top-left, 1=top-right,
# 2=bottom-left, 3=bottom-right. A permutation p means "output quadrant i
# receives input quadrant p[i]".


class Region(NamedTuple):
    y: int
    x: int
    h: int
    w: int


@dataclass(frozen=True)
class MosaicConfig:
    """Recursion count plus the seed that makes a generation reproducible."""

    r: int
    rng_seed: int = 0
    allow_deep: bool = False

    def __post_init__(self):
        if self.r < 0:
            raise ValueError(f"recursion count must be non-negative, got {self.r}")
        if self.r > MAX_SAFE_RECURSION and not self.allow_deep:
            raise RecursionDepthError(
                f"r={self.r} exceeds the safe limit {MAX_SAFE_RECURSION}; "
                "pass allow_deep=True to override"
            )


@dataclass
class MosaicTrace:
    """Recorded recursion tree: one (region, permutation) pair per depth.

    Step k+1's region is always one of the four quadrants produced by
    step k's split, so the trace fully determines the output image.
    """

    steps: list[tuple[Region, tuple[int, int, int, int]]] = field(default_factory=list)

    @property
    def depth(self) -> int:
        return len(self.steps)

    def to_text(self) -> str:
        """Line-oriented record ``depth x y w h perm``, one step per line."""
        lines = []
        for k, (region, perm) in enumerate(self.steps):
            lines.append(
                f"{k} {region.x} {region.y} {region.w} {region.h} "
                f"{''.join(str(p) for p in perm)}"
            )
        return "\n".join(lines)

    @classmethod
    def from_text(cls, text: str) -> "MosaicTrace":
        steps = []
        for line in text.splitlines():
            line = line.strip()
            if not line:
                continue
            depth_s, x, y, w, h, perm_s = line.split()
            if int(depth_s) != len(steps):
                raise IncompatibleTraceError(f"out-of-order trace line: {line!r}")
            perm = tuple(int(ch) for ch in perm_s)
            if sorted(perm) != [0, 1, 2, 3]:
                raise IncompatibleTraceError(f"bad permutation in line: {line!r}")
            steps.append((Region(int(y), int(x), int(h), int(w)), perm))
        return cls(steps)


def quadrants(region: Region) -> list[Region]:
    """The four equal quadrants of a region, row-major."""
    hh, hw = region.h // 2, region.w // 2
    y, x = region.y, region.x
    return [
        Region(y, x, hh, hw),
        Region(y, x + hw, hh, hw),
        Region(y + hh, x, hh, hw),
        Region(y + hh, x + hw, hh, hw),
    ]


def _check_region(image: torch.Tensor, region: Region):
    H, W = image.shape[-2], image.shape[-1]
    if region.h <= 0 or region.w <= 0 or region.y < 0 or region.x < 0 \
            or region.y + region.h > H or region.x + region.w > W:
        raise OutOfBoundsError(f"region {region} outside image {H}x{W}")
    if region.h % 2 or region.w % 2:
        raise OddRegionError(f"region {region} has an odd side")


def apply_permutation(image: torch.Tensor, region: Region,
                      perm: tuple[int, int, int, int]) -> torch.Tensor:
    """Rearrange the region's quadrants; pixels outside are untouched."""
    _check_region(image, region)
    quads = quadrants(region)
    out = image.clone()
    for dst_idx, src_idx in enumerate(perm):
        dst, src = quads[dst_idx], quads[src_idx]
        out[..., dst.y:dst.y + dst.h, dst.x:dst.x + dst.w] = \
            image[..., src.y:src.y + src.h, src.x:src.x + src.w]
    return out


def mosaic_step(image: torch.Tensor, region: Region,
                rng: torch.Generator) -> tuple[torch.Tensor, tuple[int, int, int, int]]:
    """Shuffle one region's quadrants with a uniformly random permutation.

    Returns the new image and the permutation used. The identity permutation
    is one of the 24 equally likely outcomes.
    """
    _check_region(image, region)
    perm = tuple(int(v) for v in torch.randperm(4, generator=rng))
    return apply_permutation(image, region, perm), perm


def generate(image: torch.Tensor, r: int, rng: torch.Generator, *,
             allow_deep: bool = False) -> tuple[torch.Tensor, MosaicTrace]:
    """Apply r recursive mosaic steps, descending into a random fresh quadrant.

    Requires both image sides divisible by 2**r. r=0 returns the image
    unchanged with an empty trace. Per step the permutation is drawn first,
    then (if another step follows) the quadrant to descend into.
    """
    if r < 0:
        raise ValueError(f"recursion count must be non-negative, got {r}")
    if r > MAX_SAFE_RECURSION and not allow_deep:
        raise RecursionDepthError(
            f"r={r} exceeds the safe limit {MAX_SAFE_RECURSION}; "
            "pass allow_deep=True to override"
        )
    H, W = image.shape[-2], image.shape[-1]
    if H % (1 << r) or W % (1 << r):
        raise IndivisibleImageError(f"image {H}x{W} not divisible by 2**{r}")

    out = image
    trace = MosaicTrace()
    region = Region(0, 0, H, W)
    for k in range(r):
        out, perm = mosaic_step(out, region, rng)
        trace.steps.append((region, perm))
        if k + 1 < r:
            choice = int(torch.randint(4, (1,), generator=rng))
            region = quadrants(region)[choice]
    return out, trace


def generate_from_config(image: torch.Tensor,
                         config: MosaicConfig) -> tuple[torch.Tensor, MosaicTrace]:
    """Seeded convenience wrapper: same (image, config) -> identical output."""
    rng = torch.Generator().manual_seed(config.rng_seed)
    return generate(image, config.r, rng, allow_deep=config.allow_deep)


def replay(image: torch.Tensor, trace: MosaicTrace) -> torch.Tensor:
    """Reproduce a generation deterministically from its trace."""
    H, W = image.shape[-2], image.shape[-1]
    out = image
    prev: Region | None = None
    for region, perm in trace.steps:
        if prev is not None and region not in quadrants(prev):
            raise IncompatibleTraceError(
                f"step region {region} is not a quadrant of {prev}")
        if prev is None and region != Region(0, 0, H, W):
            raise IncompatibleTraceError(
                f"first step region {region} must cover the {H}x{W} image")
        try:
            out = apply_permutation(out, region, perm)
        except (OddRegionError, OutOfBoundsError) as exc:
            raise IncompatibleTraceError(str(exc)) from exc
        prev = region
    return out


def final_blocks(trace: MosaicTrace, height: int, width: int) -> list[Region]:
    """Partition of the image into maximal blocks untouched after the trace.

    Each recursion replaces one block with its four quadrants, so the count
    is 3*depth + 1 and the smallest block has sides (H/2**depth, W/2**depth).
    """
    blocks = [Region(0, 0, height, width)]
    for region, _perm in trace.steps:
        if region not in blocks:
            raise IncompatibleTraceError(
                f"trace splits {region}, which is not an intact block")
        blocks.remove(region)
        blocks.extend(quadrants(region))
    return blocks
