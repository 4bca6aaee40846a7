"""Classification heads producing class probability vectors.

Each head is two fully connected layers with batch normalization after the
first, ELU, then softmax, so downstream prediction combination can sum
probabilities directly. Heads never share parameters with each other.
"""

from __future__ import annotations

import torch
from torch import nn

from .errors import LengthMismatchError

# floor for log() inside the cross entropy; probabilities are clamped here
PROB_EPS = 1e-12


class ClassifierHead(nn.Module):
    """fc -> batch norm -> ELU -> fc -> softmax over classes.

    Hidden width defaults to half the input width.
    """

    def __init__(self, in_features: int, num_classes: int,
                 hidden: int | None = None, norm: bool = True):
        super().__init__()
        hidden = hidden if hidden is not None else max(in_features // 2, 1)
        self.in_features = in_features
        self.num_classes = num_classes
        self.fc1 = nn.Linear(in_features, hidden)
        self.bn = nn.BatchNorm1d(hidden) if norm else nn.Identity()
        self.act = nn.ELU()
        self.fc2 = nn.Linear(hidden, num_classes)

    def logits(self, v: torch.Tensor) -> torch.Tensor:
        if v.shape[-1] != self.in_features:
            raise LengthMismatchError(
                f"expected input width {self.in_features}, got {v.shape[-1]}")
        return self.fc2(self.act(self.bn(self.fc1(v))))

    def forward(self, v: torch.Tensor) -> torch.Tensor:
        return torch.softmax(self.logits(v), dim=-1)


def cross_entropy_from_probs(probs: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Mean negative log probability of the true class.

    Consumes probability vectors (head outputs), clamping at PROB_EPS before
    the log to stay finite when a head saturates.
    """
    picked = probs.gather(-1, labels.unsqueeze(-1)).squeeze(-1)
    return -torch.log(picked.clamp_min(PROB_EPS)).mean()
