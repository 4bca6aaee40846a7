"""Inference-time prediction combination, accuracy reports, corruption
robustness, and per-stage class activation maps.

Two prediction rules: the concat head alone, and the "mix" rule that sums the
per-stage probability vectors with the concat vector before the argmax. Ties
always break toward the lowest class index.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .data import mix_seed
from .errors import (
    DatasetEmptyError,
    LengthMismatchError,
    UnknownKindError,
    UnknownStageError,
)
from .model import CONCAT, MultiStageClassifier


@dataclass
class PredictionBundle:
    """Per-stage and concat probability vectors for one sample."""

    y_hat: dict[int, np.ndarray]
    y_hat_concat: np.ndarray
    m_concat: np.ndarray | None = None


@dataclass
class EvalReport:
    acc_concat: float
    acc_mix: float
    per_stage_acc: dict[int, float]
    n_samples: int


def predict_concat(bundle: PredictionBundle) -> int:
    """argmax of the concat head's probabilities; lowest index wins ties."""
    return int(np.argmax(bundle.y_hat_concat))


def predict_mix(bundle: PredictionBundle) -> int:
    """argmax of (sum of stage probabilities) + concat probabilities."""
    total = np.array(bundle.y_hat_concat, dtype=np.float64, copy=True)
    for n in sorted(bundle.y_hat):
        v = bundle.y_hat[n]
        if v.shape != total.shape:
            raise LengthMismatchError(
                f"stage {n} vector has length {v.shape}, expected {total.shape}")
        total += v
    return int(np.argmax(total))


def evaluate(model: MultiStageClassifier, dataset, batch_size: int = 32,
             heads: str = "all") -> EvalReport:
    """Single r=0 forward per image; model is put in eval mode.

    heads="concat" disables the per-stage heads, in which case acc_mix
    degenerates to the concat accuracy and per-stage accuracies are empty.
    """
    if len(dataset) == 0:
        raise DatasetEmptyError("cannot evaluate an empty dataset")
    model.eval()
    n_correct_concat = 0
    n_correct_mix = 0
    stage_correct = {n: 0 for n in model.stage_indices} if heads == "all" else {}
    total = 0
    with torch.no_grad():
        for start in range(0, len(dataset), batch_size):
            idx = range(start, min(start + batch_size, len(dataset)))
            images = torch.stack([dataset[i][0] for i in idx])
            labels = torch.tensor([dataset[i][1] for i in idx])
            out = model(images, heads="all" if heads == "all" else CONCAT)
            concat_np = out.prob_concat.double().numpy()
            pred_concat = np.argmax(concat_np, axis=1)
            if heads == "all":
                mix = concat_np.copy()
                for n in model.stage_indices:
                    stage_np = out.probs[n].double().numpy()
                    mix += stage_np
                    stage_correct[n] += int(
                        (np.argmax(stage_np, axis=1) == labels.numpy()).sum())
                pred_mix = np.argmax(mix, axis=1)
            else:
                pred_mix = pred_concat
            n_correct_concat += int((pred_concat == labels.numpy()).sum())
            n_correct_mix += int((pred_mix == labels.numpy()).sum())
            total += len(labels)
    return EvalReport(
        acc_concat=n_correct_concat / total,
        acc_mix=n_correct_mix / total,
        per_stage_acc={n: c / total for n, c in stage_correct.items()},
        n_samples=total,
    )


def evaluate_plain(model, dataset, batch_size: int = 32) -> EvalReport:
    """Accuracy of a single-head model; reported in the concat slot."""
    if len(dataset) == 0:
        raise DatasetEmptyError("cannot evaluate an empty dataset")
    model.eval()
    correct = 0
    total = 0
    with torch.no_grad():
        for start in range(0, len(dataset), batch_size):
            idx = range(start, min(start + batch_size, len(dataset)))
            images = torch.stack([dataset[i][0] for i in idx])
            labels = torch.tensor([dataset[i][1] for i in idx])
            probs = model(images).double().numpy()
            correct += int((np.argmax(probs, axis=1) == labels.numpy()).sum())
            total += len(labels)
    acc = correct / total
    return EvalReport(acc_concat=acc, acc_mix=acc, per_stage_acc={},
                      n_samples=total)


# ---------------------------------------------------------------------------
# corruption


@dataclass(frozen=True)
class CorruptionSpec:
    """Color jitter or additive Gaussian noise.

    jitter_coefficient=1 scales brightness, contrast and saturation each by an
    independent uniform factor in [0, 2]. noise_amplitude is the noise standard
    deviation in byte-scale units (amplitude 5 -> sigma 5/255 on unit floats).
    """

    kind: str
    jitter_coefficient: float = 1.0
    noise_mean: float = 0.0
    noise_amplitude: float = 5.0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("color_jitter", "gaussian_noise"):
            raise UnknownKindError(f"unknown corruption kind: {self.kind!r}")
        if self.jitter_coefficient < 0 or self.noise_amplitude < 0:
            raise ValueError("jitter coefficient and noise amplitude must be >= 0")

    @property
    def label(self) -> str:
        return "+Color-Jitter" if self.kind == "color_jitter" else "+Gaussian-Noise"


_GRAY_WEIGHTS = (0.299, 0.587, 0.114)


def _grayscale(img: torch.Tensor) -> torch.Tensor:
    if img.shape[0] == 3:
        w = torch.tensor(_GRAY_WEIGHTS, dtype=img.dtype).view(3, 1, 1)
        return (img * w).sum(0, keepdim=True)
    return img.mean(0, keepdim=True)


def corrupt(image: torch.Tensor, spec: CorruptionSpec,
            rng: torch.Generator | None = None,
            value_range: tuple[float, float] = (0.0, 1.0)) -> torch.Tensor:
    """Apply one corruption; dimensions and channel count never change."""
    if rng is None:
        rng = torch.Generator().manual_seed(spec.seed)
    lo, hi = value_range
    img = image.clone()
    if spec.kind == "color_jitter":
        coef = spec.jitter_coefficient
        low = max(0.0, 1.0 - coef)
        # independent factors, drawn in brightness/contrast/saturation order
        fb, fc, fs = (float(torch.empty((), dtype=torch.float64).uniform_(
            low, 1.0 + coef, generator=rng)) for _ in range(3))
        img = img * fb
        gray = _grayscale(img)
        img = fc * img + (1.0 - fc) * gray.mean()
        img = fs * img + (1.0 - fs) * gray
    else:  # gaussian_noise
        sigma = spec.noise_amplitude / 255.0 * (hi - lo)
        noise = torch.randn(img.shape, generator=rng, dtype=torch.float32)
        img = img + spec.noise_mean + sigma * noise
    return img.clamp(lo, hi)


@dataclass
class RobustnessRow:
    label: str
    report: EvalReport
    delta_concat: float
    delta_mix: float


@dataclass
class RobustnessReport:
    rows: list[RobustnessRow] = field(default_factory=list)

    def to_csv(self) -> str:
        lines = ["condition,acc_concat,acc_mix,delta_concat,delta_mix"]
        for r in self.rows:
            lines.append(f"{r.label},{r.report.acc_concat!r},{r.report.acc_mix!r},"
                         f"{r.delta_concat!r},{r.delta_mix!r}")
        return "\n".join(lines) + "\n"

    def to_table(self) -> str:
        """Aligned text table: condition, accuracies, deltas vs clean."""
        header = f"{'Condition':<18} {'Concat':>8} {'Mix':>8} {'dConcat':>9} {'dMix':>9}"
        lines = [header, "-" * len(header)]
        for r in self.rows:
            lines.append(
                f"{r.label:<18} {100 * r.report.acc_concat:>7.1f}% "
                f"{100 * r.report.acc_mix:>7.1f}% "
                f"{100 * r.delta_concat:>+8.1f}% {100 * r.delta_mix:>+8.1f}%")
        return "\n".join(lines) + "\n"


class _CorruptedView:
    """Dataset wrapper applying a corruption with a shared per-run generator."""

    def __init__(self, dataset, spec: CorruptionSpec):
        self.dataset = dataset
        self.spec = spec
        # per-sample generators derived from (spec.seed, index) keep results
        # independent of evaluation batch order
        self.classes = getattr(dataset, "classes", None)

    def __len__(self):
        return len(self.dataset)

    def __getitem__(self, i):
        img, label = self.dataset[i]
        g = torch.Generator().manual_seed(mix_seed(self.spec.seed, i))
        return corrupt(img, self.spec, rng=g), label


def robustness_eval(model, dataset, specs: list[CorruptionSpec],
                    batch_size: int = 32) -> RobustnessReport:
    """Clean evaluation plus one corrupted evaluation per spec, with deltas."""
    clean = evaluate(model, dataset, batch_size=batch_size)
    report = RobustnessReport()
    report.rows.append(RobustnessRow("Origin", clean, 0.0, 0.0))
    for spec in specs:
        r = evaluate(model, _CorruptedView(dataset, spec), batch_size=batch_size)
        report.rows.append(RobustnessRow(
            spec.label, r,
            r.acc_concat - clean.acc_concat,
            r.acc_mix - clean.acc_mix))
    return report


# ---------------------------------------------------------------------------
# class activation maps


def gradcam(model: MultiStageClassifier, image: torch.Tensor, stage: int,
            target_class: int | None = None) -> tuple[np.ndarray, int]:
    """Gradient-weighted activation map of one stage, in [0, 1] at input size.

    The scalar driving the gradients is the mixed-prediction score (summed
    stage + concat probabilities) of the target class; the default target is
    the predicted class. Returns (heatmap H x W, target class).
    """
    if stage not in model.stage_indices:
        raise UnknownStageError(
            f"stage {stage} not in interacting set {model.stage_indices}")
    model.eval()
    with torch.enable_grad():
        bundle = model(image.unsqueeze(0), heads="all")
        target_map = bundle.maps[stage]
        target_map.retain_grad()
        mix = bundle.prob_concat + sum(bundle.probs[n]
                                       for n in model.stage_indices)
        if target_class is None:
            target_class = int(mix[0].argmax())
        score = mix[0, target_class]
        model.zero_grad(set_to_none=True)
        score.backward()
    grads = target_map.grad[0]            # (C, h, w)
    weights = grads.mean(dim=(-2, -1))    # (C,)
    cam = torch.relu((weights.view(-1, 1, 1) * target_map[0].detach()).sum(0))
    cam = F.interpolate(cam[None, None], size=image.shape[-2:],
                        mode="bilinear", align_corners=False)[0, 0]
    peak = float(cam.max())
    if peak > 0:
        cam = cam / peak
    return cam.numpy(), target_class
