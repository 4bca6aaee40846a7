"""Composite classifier: staged backbone + interaction + per-stage heads.

One forward pass produces a :class:`StageBundle` carrying the stage feature
maps, pooled vectors, mutual vector, gates, supplemented vectors and whichever
head outputs were requested. Training phases request a single head; evaluation
requests all of them.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
from torch import nn

from .backbone import StagedCNN, tinynet
from .errors import InvalidStageNumError, LengthMismatchError, UnknownStageError
from .heads import ClassifierHead
from .interaction import InteractionConfig, MultiStageInteraction

CONCAT = "concat"


@dataclass
class StageBundle:
    """Everything computed in one forward pass, keyed by 1-based stage index."""

    maps: dict[int, torch.Tensor]
    x: dict[int, torch.Tensor]
    x_m: torch.Tensor
    g: dict[int, torch.Tensor]
    m: dict[int, torch.Tensor]
    m_concat: torch.Tensor | None = None
    probs: dict[int, torch.Tensor] = field(default_factory=dict)
    prob_concat: torch.Tensor | None = None

    def head_probs(self, which) -> torch.Tensor:
        return self.prob_concat if which == CONCAT else self.probs[which]


class MultiStageClassifier(nn.Module):
    """Backbone stages feeding gated interaction and StageNum+1 classifiers.

    The interacting set is the last ``stage_num`` backbone stages. The concat
    head consumes the ordered concatenation of the supplemented vectors; in
    the degenerate single-stage case it consumes concat(x_N, x_m) instead so
    the mutual MLP still participates.

    ``use_gates=False`` bypasses the gate path (g_n = 0, so m_n = x_n),
    leaving the rest of the architecture unchanged.
    """

    def __init__(self, backbone: StagedCNN, num_classes: int,
                 config: InteractionConfig, use_gates: bool = True,
                 norm: bool = True):
        super().__init__()
        N = backbone.num_stages
        S = config.stage_num
        if not 1 <= S <= N:
            raise InvalidStageNumError(
                f"stage_num={S} outside [1, {N}] for this backbone")
        self.backbone = backbone
        self.num_classes = num_classes
        self.config = config
        self.use_gates = use_gates
        self.num_stages = N
        self.stage_indices = list(range(N - S + 1, N + 1))
        channels = [backbone.stage_channels[n - 1] for n in self.stage_indices]
        self.interaction = MultiStageInteraction(channels, self.stage_indices,
                                                 config, norm=norm)
        self.stage_heads = nn.ModuleDict({
            str(n): ClassifierHead(config.c, num_classes, norm=norm)
            for n in self.stage_indices
        })
        self.concat_width = 2 * config.c if S == 1 else S * config.c
        self.concat_head = ClassifierHead(self.concat_width, num_classes, norm=norm)

    @property
    def stage_num(self) -> int:
        return self.config.stage_num

    def build_concat(self, bundle: StageBundle) -> torch.Tensor:
        """Order-preserving concatenation feeding the concat head."""
        if self.stage_num == 1:
            n = self.stage_indices[0]
            return torch.cat([bundle.x[n], bundle.x_m], dim=-1)
        return torch.cat([bundle.m[n] for n in self.stage_indices], dim=-1)

    def forward(self, images: torch.Tensor, heads="all") -> StageBundle:
        """Run backbone, interaction, and the requested classifier heads.

        heads: "all", "concat", a single 1-based stage index, or "none".
        """
        maps = self.backbone.forward_stages(images)
        fmap = {n: maps[n - 1] for n in self.stage_indices}
        x = {n: self.interaction.smooth_and_pool(fmap[n], n)
             for n in self.stage_indices}
        x_m = self.interaction.mutual_vector(x)
        if self.use_gates:
            g = {n: torch.sigmoid(x_m * x[n]) for n in self.stage_indices}
            m = {n: x[n] + g[n] * x[n] for n in self.stage_indices}
        else:
            g = {n: torch.zeros_like(x[n]) for n in self.stage_indices}
            m = dict(x)
        bundle = StageBundle(maps=fmap, x=x, x_m=x_m, g=g, m=m)
        bundle.m_concat = self.build_concat(bundle)

        if heads == "all":
            for n in self.stage_indices:
                bundle.probs[n] = self.classify_stage(m[n], n)
            bundle.prob_concat = self.classify_concat(bundle.m_concat)
        elif heads == CONCAT:
            bundle.prob_concat = self.classify_concat(bundle.m_concat)
        elif heads == "none":
            pass
        else:
            bundle.probs[heads] = self.classify_stage(m[heads], heads)
        return bundle

    def classify_stage(self, m_n: torch.Tensor, stage: int) -> torch.Tensor:
        key = str(stage)
        if key not in self.stage_heads:
            raise UnknownStageError(
                f"stage {stage} not in interacting set {self.stage_indices}")
        return self.stage_heads[key](m_n)

    def classify_concat(self, m_concat: torch.Tensor) -> torch.Tensor:
        if m_concat.shape[-1] != self.concat_width:
            raise LengthMismatchError(
                f"expected concat width {self.concat_width}, got {m_concat.shape[-1]}")
        return self.concat_head(m_concat)

    def backbone_parameters(self):
        return self.backbone.parameters()

    def new_parameters(self):
        """Parameters of everything added on top of the backbone."""
        for name, p in self.named_parameters():
            if not name.startswith("backbone."):
                yield p


class PlainClassifier(nn.Module):
    """Ablation baseline: backbone, global max pool on the last stage, one head."""

    def __init__(self, backbone: StagedCNN, num_classes: int, norm: bool = True):
        super().__init__()
        self.backbone = backbone
        self.num_classes = num_classes
        self.head = ClassifierHead(backbone.stage_channels[-1], num_classes, norm=norm)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        fmap = self.backbone.forward_stages(images)[-1]
        return self.head(fmap.amax(dim=(-2, -1)))

    def backbone_parameters(self):
        return self.backbone.parameters()

    def new_parameters(self):
        return self.head.parameters()


@dataclass(frozen=True)
class ModelSpec:
    """Everything needed to rebuild a model (echoed into checkpoints).

    kind "multistage" is the full architecture; "plain" is the ablation
    baseline (backbone + one classifier, no interaction).
    """

    num_classes: int
    kind: str = "multistage"
    stage_num: int = 3
    c: int = 128
    mlp_hidden: int | None = None
    channels: tuple[int, ...] = (8, 16, 32, 64, 128)
    input_size: int = 64
    in_channels: int = 3
    use_gates: bool = True
    norm: bool = True

    def __post_init__(self):
        if self.kind not in ("multistage", "plain"):
            raise ValueError(f"unknown model kind {self.kind!r}")


def model_spec_from_dict(d: dict) -> ModelSpec:
    """Rebuild a ModelSpec from a checkpoint's config echo."""
    d = dict(d)
    d["channels"] = tuple(d["channels"])
    return ModelSpec(**d)


def build_model(spec: ModelSpec, seed: int | None = None):
    """Assemble a model from its spec, optionally with seeded init."""
    if seed is not None:
        torch.manual_seed(seed)
    net = tinynet(channels=tuple(spec.channels), in_channels=spec.in_channels,
                  input_size=spec.input_size, norm=spec.norm)
    if spec.kind == "plain":
        return PlainClassifier(net, spec.num_classes, norm=spec.norm)
    cfg = InteractionConfig(stage_num=spec.stage_num, c=spec.c,
                            mlp_hidden=spec.mlp_hidden)
    return MultiStageClassifier(net, spec.num_classes, cfg,
                                use_gates=spec.use_gates, norm=spec.norm)
