"""Stage-partitioned feature extractors.

A "stage" is a contiguous run of layers delimited by increases in output
channel count. Any backbone exposing an ordered layer list with per-layer
output channels can be partitioned; :class:`StagedCNN` wraps such a list and
returns the feature map at the end of every stage in one forward pass.

:func:`tinynet` builds the small trainable backbone used throughout the test
and desk-scale configs: five stride-2 conv stages, 64x64 input.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import torch
from torch import nn

from .errors import EmptyProfileError, ShapeMismatchError


@dataclass(frozen=True)
class StagePartition:
    """Where a layer profile splits into stages.

    ``boundaries[i]`` is the index of the first layer of stage i+2; stage 1
    always begins at layer 0. ``channels_per_stage`` is each stage's output
    channel count (the last layer's channels).
    """

    N: int
    boundaries: tuple[int, ...]
    channels_per_stage: tuple[int, ...]


def partition_stages(layer_channel_profile: list[int]) -> StagePartition:
    """Split a per-layer output-channel profile at strict channel increases."""
    if not layer_channel_profile:
        raise EmptyProfileError("layer channel profile is empty")
    boundaries = [
        i for i in range(1, len(layer_channel_profile))
        if layer_channel_profile[i] > layer_channel_profile[i - 1]
    ]
    starts = [0] + boundaries
    ends = boundaries + [len(layer_channel_profile)]
    channels = tuple(layer_channel_profile[e - 1] for e in ends)
    return StagePartition(N=len(starts), boundaries=tuple(boundaries),
                          channels_per_stage=channels)


class StagedCNN(nn.Module):
    """Sequential layers partitioned into stages at channel increases.

    Args:
        layers: ordered modules applied in sequence.
        out_channels: output channel count of each layer (same length).
        input_size: expected square input side, checked on forward.
    """

    def __init__(self, layers: list[nn.Module], out_channels: list[int],
                 input_size: int | None = None):
        super().__init__()
        if len(layers) != len(out_channels):
            raise ValueError("layers and out_channels must have equal length")
        self.layers = nn.ModuleList(layers)
        self.out_channels = list(out_channels)
        self.partition = partition_stages(self.out_channels)
        self.input_size = input_size

    @property
    def num_stages(self) -> int:
        return self.partition.N

    @property
    def stage_channels(self) -> tuple[int, ...]:
        return self.partition.channels_per_stage

    def forward_stages(self, x: torch.Tensor) -> list[torch.Tensor]:
        """Run the whole backbone once, returning the map at each stage end.

        Gradients flow through every returned map.
        """
        if x.dim() != 4:
            raise ShapeMismatchError(f"expected a (B, C, H, W) batch, got {tuple(x.shape)}")
        if self.input_size is not None and x.shape[-2:] != (self.input_size, self.input_size):
            raise ShapeMismatchError(
                f"expected {self.input_size}x{self.input_size} input, "
                f"got {x.shape[-2]}x{x.shape[-1]}")
        stage_ends = {e - 1 for e in list(self.partition.boundaries) + [len(self.layers)]}
        maps = []
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i in stage_ends:
                maps.append(x)
        return maps

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.forward_stages(x)[-1]


def _conv_block(cin: int, cout: int, norm: bool, bias: bool) -> nn.Module:
    mods: list[nn.Module] = [nn.Conv2d(cin, cout, 3, stride=2, padding=1, bias=bias)]
    if norm:
        mods.append(nn.BatchNorm2d(cout))
    mods.append(nn.ELU())
    return nn.Sequential(*mods)


def tinynet(channels: tuple[int, ...] = (8, 16, 32, 64, 128),
            in_channels: int = 3, input_size: int = 64,
            norm: bool = True, bias: bool = True) -> StagedCNN:
    """Small stage-per-block backbone: [3x3 conv stride 2, norm, ELU] per stage.

    Channels must strictly increase so each block is its own stage. With the
    defaults, a 64x64 input yields maps of spatial size 32, 16, 8, 4, 2.
    """
    if any(b <= a for a, b in zip(channels, channels[1:])):
        raise ValueError(f"channels must strictly increase, got {channels}")
    layers = []
    cin = in_channels
    for cout in channels:
        layers.append(_conv_block(cin, cout, norm=norm, bias=bias))
        cin = cout
    return StagedCNN(layers, list(channels), input_size=input_size)


def load_backbone_spec(path: str | Path) -> dict:
    """Parse a ``key = value`` backbone spec file.

    Recognized keys: ``stages`` (int), ``channels`` (comma-separated ints),
    ``input_size`` (int). ``stages`` must agree with the channel list.
    """
    fields: dict = {}
    for raw in Path(path).read_text().splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"malformed backbone spec line: {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key == "channels":
            fields[key] = tuple(int(v) for v in value.split(","))
        elif key in ("stages", "input_size"):
            fields[key] = int(value)
        else:
            raise ValueError(f"unknown backbone spec key: {key!r}")
    if "channels" not in fields:
        raise ValueError("backbone spec must define 'channels'")
    if "stages" in fields and fields["stages"] != len(fields["channels"]):
        raise ValueError(
            f"stages={fields['stages']} disagrees with "
            f"{len(fields['channels'])} channel entries")
    return fields


def tinynet_from_spec(path: str | Path, **kwargs) -> StagedCNN:
    fields = load_backbone_spec(path)
    return tinynet(channels=fields["channels"],
                   input_size=fields.get("input_size", 64), **kwargs)
