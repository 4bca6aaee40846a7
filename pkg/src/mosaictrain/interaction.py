"""Multi-stage feature interaction.

Per interacting stage, a two-layer smooth conv block maps the stage's feature
map to a common channel width c, followed by global max pooling to a vector
x_n. A two-layer MLP summarizes the concatenated stage vectors into a mutual
vector x_m; sigmoid gates g_n = sigmoid(x_m * x_n) then drive a residual
supplement m_n = x_n + g_n * x_n. Every component of g_n lies in (0, 1), so
m_n keeps x_n's signs and scales each coordinate by a factor in (1, 2).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
from torch import nn

from .errors import (
    ArityMismatchError,
    ChannelMismatchError,
    InvalidStageNumError,
    LengthMismatchError,
    UnknownStageError,
)


@dataclass(frozen=True)
class InteractionConfig:
    """Width settings for the interaction module.

    stage_num: number of deepest stages that interact (1 <= stage_num <= N).
    c: common channel width of the pooled stage vectors.
    mlp_hidden: hidden width of the mutual-vector MLP (defaults to c).
    """

    stage_num: int
    c: int = 128
    mlp_hidden: int | None = None

    def __post_init__(self):
        if self.stage_num < 1:
            raise InvalidStageNumError(f"stage_num must be >= 1, got {self.stage_num}")
        if self.c <= 0:
            raise ValueError(f"c must be positive, got {self.c}")

    @property
    def hidden(self) -> int:
        return self.mlp_hidden if self.mlp_hidden is not None else self.c


@dataclass
class StageVectorSet:
    """All vectors produced by one interaction pass, keyed by stage index."""

    x: dict[int, torch.Tensor]
    x_m: torch.Tensor
    g: dict[int, torch.Tensor] = field(default_factory=dict)
    m: dict[int, torch.Tensor] = field(default_factory=dict)


class SmoothConvBlock(nn.Module):
    """Two conv layers mapping a stage's channel count to the common width c.

    Layer 1 is a pointwise conv widening to 2c, layer 2 a 3x3 conv narrowing
    to c, each followed by normalization and ELU.
    """

    def __init__(self, in_channels: int, c: int, norm: bool = True):
        super().__init__()
        self.in_channels = in_channels
        mods: list[nn.Module] = [nn.Conv2d(in_channels, 2 * c, 1)]
        if norm:
            mods.append(nn.BatchNorm2d(2 * c))
        mods.append(nn.ELU())
        mods.append(nn.Conv2d(2 * c, c, 3, padding=1))
        if norm:
            mods.append(nn.BatchNorm2d(c))
        mods.append(nn.ELU())
        self.block = nn.Sequential(*mods)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[1] != self.in_channels:
            raise ChannelMismatchError(
                f"expected {self.in_channels} channels, got {x.shape[1]}")
        return self.block(x)


class MutualMLP(nn.Module):
    """Two fully connected layers: stage_num*c -> hidden -> c, ELU between.

    No activation on the output so the gate product can saturate both ways.
    """

    def __init__(self, stage_num: int, c: int, hidden: int | None = None):
        super().__init__()
        hidden = hidden if hidden is not None else c
        self.in_features = stage_num * c
        self.fc1 = nn.Linear(self.in_features, hidden)
        self.act = nn.ELU()
        self.fc2 = nn.Linear(hidden, c)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] != self.in_features:
            raise LengthMismatchError(
                f"expected concat width {self.in_features}, got {x.shape[-1]}")
        return self.fc2(self.act(self.fc1(x)))


def global_max_pool(fmap: torch.Tensor) -> torch.Tensor:
    """(B, C, H, W) -> (B, C), max over all spatial positions."""
    return fmap.amax(dim=(-2, -1))


def gate(x_m: torch.Tensor, x_n: torch.Tensor) -> torch.Tensor:
    """Elementwise sigmoid(x_m * x_n); stable for products up to ~1e4."""
    if x_m.shape[-1] != x_n.shape[-1]:
        raise LengthMismatchError(
            f"gate inputs disagree: {x_m.shape[-1]} vs {x_n.shape[-1]}")
    return torch.sigmoid(x_m * x_n)


def supplement(x_n: torch.Tensor, g_n: torch.Tensor) -> torch.Tensor:
    """Gated residual m_n = x_n + g_n * x_n."""
    if x_n.shape[-1] != g_n.shape[-1]:
        raise LengthMismatchError(
            f"supplement inputs disagree: {x_n.shape[-1]} vs {g_n.shape[-1]}")
    return x_n + g_n * x_n


class MultiStageInteraction(nn.Module):
    """Smooth conv blocks plus the shared mutual-vector MLP.

    Holds one block per interacting stage (reused across all phases of an
    iteration) keyed by 1-based stage index.

    Args:
        stage_channels: channel count of each interacting stage's feature map,
            ordered by stage index.
        stage_indices: the 1-based indices of those stages (N-stage_num+1..N).
        config: width settings.
    """

    def __init__(self, stage_channels: list[int], stage_indices: list[int],
                 config: InteractionConfig, norm: bool = True):
        super().__init__()
        if len(stage_channels) != config.stage_num or len(stage_indices) != config.stage_num:
            raise InvalidStageNumError(
                f"expected {config.stage_num} interacting stages, got "
                f"{len(stage_channels)} channel entries / {len(stage_indices)} indices")
        self.config = config
        self.stage_indices = list(stage_indices)
        self.smooth = nn.ModuleDict({
            str(n): SmoothConvBlock(cn, config.c, norm=norm)
            for n, cn in zip(stage_indices, stage_channels)
        })
        self.mutual = MutualMLP(config.stage_num, config.c, config.hidden)

    def smooth_and_pool(self, fmap: torch.Tensor, stage: int) -> torch.Tensor:
        """Stage feature map -> length-c vector via conv block + global max pool."""
        key = str(stage)
        if key not in self.smooth:
            raise UnknownStageError(f"stage {stage} not in interacting set "
                                    f"{self.stage_indices}")
        return global_max_pool(self.smooth[key](fmap))

    def mutual_vector(self, x: dict[int, torch.Tensor]) -> torch.Tensor:
        """x_m from the ordered concatenation of the interacting stage vectors."""
        if sorted(x.keys()) != sorted(self.stage_indices):
            raise ArityMismatchError(
                f"expected vectors for stages {self.stage_indices}, got {sorted(x)}")
        cat = torch.cat([x[n] for n in self.stage_indices], dim=-1)
        return self.mutual(cat)

    def interact_vectors(self, x: dict[int, torch.Tensor]) -> StageVectorSet:
        """Full interaction given the pooled stage vectors."""
        x_m = self.mutual_vector(x)
        out = StageVectorSet(x=dict(x), x_m=x_m)
        for n in self.stage_indices:
            g_n = gate(x_m, x[n])
            out.g[n] = g_n
            out.m[n] = supplement(x[n], g_n)
        return out

    def forward(self, fmaps: dict[int, torch.Tensor]) -> StageVectorSet:
        """Stage feature maps -> pooled vectors -> full interaction."""
        x = {n: self.smooth_and_pool(fmaps[n], n) for n in self.stage_indices}
        return self.interact_vectors(x)
