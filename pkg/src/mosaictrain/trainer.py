"""Progressive multi-phase training loop.

Each batch runs StageNum+1 phases. Phase k targets one interacting stage n in
increasing order: its input is a fresh mosaic of the batch at depth
r = N - n + 1, its loss the cross entropy of that stage's head, and its
optimizer step touches every parameter used by that prediction (and no other
head). The final phase trains the concat head on the untouched (r = 0) batch.

Two optimizer groups run cosine-annealed learning rates over the full epoch
horizon: the backbone at ``lr_pretrained`` and all newly added layers at
``lr_new``. The backbone can stay frozen for the first ``freeze_epochs``
epochs; smooth conv blocks, the mutual MLP and heads always train.

All randomness flows through two explicit generators (data order and mosaic
draws) whose states are checkpointed, so a fixed seed gives byte-identical
metrics and checkpoint-resume reproduces a straight-through run exactly.
Single-process data loading; parallel workers would derive their seeds from
(base seed, worker id, epoch) via :func:`mosaictrain.data.mix_seed`.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import torch

from . import evalkit
from .checkpoint import CheckpointState, load_checkpoint, save_checkpoint
from .data import mix_seed
from .errors import (
    DatasetEmptyError,
    EmptyBatchError,
    InvalidStageNumError,
    NonFiniteLossError,
    RecursionDepthError,
    ResumeMismatchError,
)
from .heads import cross_entropy_from_probs
from .model import CONCAT, ModelSpec, MultiStageClassifier, build_model
from .mosaic import MAX_SAFE_RECURSION, generate

METRICS_HEADER = "epoch,phase,stage,loss,acc_concat,acc_mix,lr_pretrained,lr_new"


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 60
    batch_size: int = 8
    lr_pretrained: float = 1e-4
    lr_new: float = 1e-3
    weight_decay: float = 5e-4
    momentum: float = 0.9
    freeze_epochs: int = 0
    stage_num: int = 3
    seed: int = 0
    schedule: str = "cosine"
    progressive: bool = True
    use_mosaic: bool = True

    def __post_init__(self):
        for name in ("lr_pretrained", "lr_new", "weight_decay", "momentum"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.freeze_epochs >= self.epochs and self.epochs > 0:
            raise ValueError(
                f"freeze_epochs {self.freeze_epochs} must be < epochs {self.epochs}")
        if self.schedule != "cosine":
            raise ValueError(f"unknown schedule {self.schedule!r}")


@dataclass(frozen=True)
class Phase:
    kind: str          # "stage" or "concat"
    stage: int | None  # 1-based stage index for stage phases
    r: int             # mosaic recursion depth for this phase's input

    @property
    def label(self) -> str:
        return CONCAT if self.kind == CONCAT else str(self.stage)

    @property
    def head(self):
        return CONCAT if self.kind == CONCAT else self.stage


@dataclass
class PhaseSchedule:
    phases: list[Phase]

    def __iter__(self):
        return iter(self.phases)

    def __len__(self):
        return len(self.phases)


def build_schedule(N: int, stage_num: int, *, allow_deep: bool = False,
                   use_mosaic: bool = True) -> PhaseSchedule:
    """Stage phases for n = N-stage_num+1 .. N with r = N - n + 1, then concat
    at r = 0. Depths above the mosaic safety limit require allow_deep."""
    if not 1 <= stage_num <= N:
        raise InvalidStageNumError(f"stage_num={stage_num} outside [1, {N}]")
    phases = []
    for n in range(N - stage_num + 1, N + 1):
        r = (N - n + 1) if use_mosaic else 0
        if r > MAX_SAFE_RECURSION and not allow_deep:
            raise RecursionDepthError(
                f"phase for stage {n} needs r={r} > {MAX_SAFE_RECURSION}; "
                "pass allow_deep=True to override")
        phases.append(Phase("stage", n, r))
    phases.append(Phase(CONCAT, None, 0))
    return PhaseSchedule(phases)


@dataclass
class StepReport:
    losses: list[tuple[str, float]] = field(default_factory=list)
    n_forward: int = 0
    n_updates: int = 0


def mosaic_batch(images: torch.Tensor, r: int, rng: torch.Generator) -> torch.Tensor:
    """Independent mosaic per image (fresh randomness each call)."""
    if r == 0:
        return images
    return torch.stack([generate(img, r, rng, allow_deep=True)[0] for img in images])


def train_step(batch, model: MultiStageClassifier, optimizer, schedule: PhaseSchedule,
               rng: torch.Generator, phase_callback=None) -> StepReport:
    """One batch through every phase: mosaic input, forward, backprop, step."""
    images, labels = batch
    if images.shape[0] == 0:
        raise EmptyBatchError("batch contains no samples")
    if not model.training:
        raise RuntimeError("train_step requires the model in training mode")
    report = StepReport()
    for phase in schedule:
        phase_input = mosaic_batch(images, phase.r, rng)
        out = model(phase_input, heads=phase.head)
        probs = out.head_probs(phase.head)
        loss = cross_entropy_from_probs(probs, labels)
        if not torch.isfinite(loss):
            raise NonFiniteLossError(
                f"non-finite loss {loss.item()} in phase {phase.label} "
                f"(r={phase.r}, batch size {images.shape[0]})")
        optimizer.zero_grad(set_to_none=True)
        loss.backward()
        optimizer.step()
        report.n_forward += 1
        report.n_updates += 1
        report.losses.append((phase.label, float(loss.detach())))
        if phase_callback is not None:
            phase_callback(phase, phase_input, model)
    return report


def _plain_step(batch, model, optimizer) -> StepReport:
    images, labels = batch
    if images.shape[0] == 0:
        raise EmptyBatchError("batch contains no samples")
    probs = model(images)
    loss = cross_entropy_from_probs(probs, labels)
    if not torch.isfinite(loss):
        raise NonFiniteLossError(f"non-finite loss {loss.item()} (plain step)")
    optimizer.zero_grad(set_to_none=True)
    loss.backward()
    optimizer.step()
    return StepReport(losses=[("plain", float(loss.detach()))],
                      n_forward=1, n_updates=1)


def cosine_lr(lr0: float, epoch: int, horizon: int) -> float:
    """lr0 * (1 + cos(pi * epoch / horizon)) / 2, epoch 0-based."""
    if horizon <= 0:
        return lr0
    return lr0 * 0.5 * (1.0 + math.cos(math.pi * epoch / horizon))


def _format_row(epoch, phase, stage, loss, acc_concat, acc_mix, lr_p, lr_n) -> str:
    fmt = lambda v: "" if v is None else repr(float(v))
    return f"{epoch},{phase},{stage},{fmt(loss)},{fmt(acc_concat)},{fmt(acc_mix)},{fmt(lr_p)},{fmt(lr_n)}"


def _make_optimizer(model, config: TrainConfig):
    groups = [
        {"params": list(model.backbone_parameters()), "lr": config.lr_pretrained,
         "base_lr": config.lr_pretrained},
        {"params": list(model.new_parameters()), "lr": config.lr_new,
         "base_lr": config.lr_new},
    ]
    return torch.optim.SGD(groups, lr=config.lr_new,
                           momentum=config.momentum,
                           weight_decay=config.weight_decay)


def _config_echo(config: TrainConfig, model_spec: ModelSpec) -> dict:
    echo = {"train": asdict(config), "model": asdict(model_spec)}
    return json.loads(json.dumps(echo))  # normalize tuples to lists


def _named_params(model) -> list[tuple[str, torch.nn.Parameter]]:
    return list(model.named_parameters())


def _checkpoint_state(model, optimizer, config, model_spec, epoch,
                      rng_states, csv_rows) -> CheckpointState:
    tensors = {f"model/{k}": v for k, v in model.state_dict().items()}
    for name, p in _named_params(model):
        slot = optimizer.state.get(p, {})
        if "momentum_buffer" in slot and slot["momentum_buffer"] is not None:
            tensors[f"momentum/{name}"] = slot["momentum_buffer"]
    groups = [{"lr": g["lr"], "base_lr": g["base_lr"]} for g in optimizer.param_groups]
    return CheckpointState(
        config=_config_echo(config, model_spec),
        epoch=epoch,
        tensors=tensors,
        rng=rng_states,
        optim_groups=groups,
        extra={"csv_rows": csv_rows},
    )


def _restore_from_checkpoint(state: CheckpointState, model, optimizer):
    model_sd = {k[len("model/"):]: v for k, v in state.tensors.items()
                if k.startswith("model/")}
    model.load_state_dict(model_sd, strict=True)
    for name, p in _named_params(model):
        key = f"momentum/{name}"
        if key in state.tensors:
            optimizer.state[p] = {"momentum_buffer":
                                  state.tensors[key].to(p.dtype).clone()}
    for g, saved in zip(optimizer.param_groups, state.optim_groups):
        g["lr"] = saved["lr"]
        g["base_lr"] = saved["base_lr"]


@dataclass
class FitResult:
    model: object
    rows: list[str]               # metrics CSV rows, header excluded
    final_eval: evalkit.EvalReport | None
    csv_path: Path | None
    checkpoint_path: Path | None
    epochs_run: int

    @property
    def csv_text(self) -> str:
        return METRICS_HEADER + "\n" + "\n".join(self.rows) + "\n"


def fit(train_dataset, config: TrainConfig, model_spec: ModelSpec, *,
        eval_dataset=None, out_dir: str | Path | None = None,
        resume_from: str | Path | None = None, stop_after: int | None = None,
        early_stop_acc: float | None = None, min_epochs: int = 0,
        checkpoint_every: int = 1, phase_callback=None) -> FitResult:
    """Run the full training loop.

    Writes ``metrics.csv`` and ``checkpoint.ckpt`` under ``out_dir`` when
    given. ``stop_after`` ends the run early (checkpointed, resumable);
    ``resume_from`` continues a checkpointed run whose config echo must match.
    ``early_stop_acc`` stops once mix accuracy reaches the threshold, but
    never before ``min_epochs``.
    """
    if len(train_dataset) == 0:
        raise DatasetEmptyError("training dataset is empty")
    eval_ds = eval_dataset if eval_dataset is not None else train_dataset
    echo = _config_echo(config, model_spec)

    model = build_model(model_spec, seed=mix_seed(config.seed, 1))
    optimizer = _make_optimizer(model, config)
    data_rng = torch.Generator().manual_seed(mix_seed(config.seed, 2))
    aug_rng = torch.Generator().manual_seed(mix_seed(config.seed, 3))
    start_epoch = 0
    rows: list[str] = []

    if resume_from is not None:
        state = load_checkpoint(resume_from)
        if state.config != echo:
            raise ResumeMismatchError(
                "checkpoint config does not match the requested run; "
                f"checkpoint={state.config} requested={echo}")
        _restore_from_checkpoint(state, model, optimizer)
        data_rng.set_state(torch.frombuffer(bytearray(state.rng["data"]),
                                            dtype=torch.uint8).clone())
        aug_rng.set_state(torch.frombuffer(bytearray(state.rng["aug"]),
                                           dtype=torch.uint8).clone())
        start_epoch = state.epoch
        rows = list(state.extra.get("csv_rows", []))

    progressive = config.progressive and model_spec.kind == "multistage"
    schedule = None
    if model_spec.kind == "multistage":
        if progressive:
            schedule = build_schedule(model.num_stages, config.stage_num,
                                      use_mosaic=config.use_mosaic)
        else:
            # single-phase training of the concat head on the original image
            schedule = PhaseSchedule([Phase(CONCAT, None, 0)])

    out_dir = Path(out_dir) if out_dir is not None else None
    csv_path = out_dir / "metrics.csv" if out_dir else None
    ckpt_path = out_dir / "checkpoint.ckpt" if out_dir else None
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)

    def flush_csv():
        if csv_path is not None:
            csv_path.write_text(METRICS_HEADER + "\n" + "\n".join(rows) + "\n")

    last_eval = None
    end_epoch = config.epochs if stop_after is None else min(stop_after, config.epochs)
    epoch = start_epoch
    for epoch in range(start_epoch, end_epoch):
        lr_p = cosine_lr(config.lr_pretrained, epoch, config.epochs)
        lr_n = cosine_lr(config.lr_new, epoch, config.epochs)
        optimizer.param_groups[0]["lr"] = lr_p
        optimizer.param_groups[1]["lr"] = lr_n
        frozen = epoch < config.freeze_epochs
        for p in model.backbone_parameters():
            p.requires_grad_(not frozen)

        model.train()
        train_dataset.set_epoch(epoch)
        order = torch.randperm(len(train_dataset), generator=data_rng).tolist()
        chunks = [order[s:s + config.batch_size]
                  for s in range(0, len(order), config.batch_size)]
        if len(chunks) > 1 and len(chunks[-1]) == 1:
            # a singleton batch would starve the heads' batch norm
            chunks[-2] = chunks[-2] + chunks.pop()
        phase_loss_sums: dict[str, float] = {}
        phase_counts: dict[str, int] = {}
        for idx in chunks:
            images = torch.stack([train_dataset[i][0] for i in idx])
            labels = torch.tensor([train_dataset[i][1] for i in idx])
            if model_spec.kind == "plain":
                report = _plain_step((images, labels), model, optimizer)
            else:
                report = train_step((images, labels), model, optimizer,
                                    schedule, aug_rng,
                                    phase_callback=phase_callback)
            for label, value in report.losses:
                phase_loss_sums[label] = phase_loss_sums.get(label, 0.0) + value
                phase_counts[label] = phase_counts.get(label, 0) + 1

        if model_spec.kind == "plain":
            last_eval = evalkit.evaluate_plain(model, eval_ds)
            labels_in_order = ["plain"]
        else:
            last_eval = evalkit.evaluate(model, eval_ds)
            labels_in_order = [ph.label for ph in schedule]
        for k, label in enumerate(labels_in_order, start=1):
            mean_loss = phase_loss_sums[label] / phase_counts[label]
            rows.append(_format_row(epoch + 1, k, label, mean_loss,
                                    None, None, lr_p, lr_n))
        rows.append(_format_row(epoch + 1, "eval", "", None,
                                last_eval.acc_concat, last_eval.acc_mix,
                                lr_p, lr_n))
        flush_csv()

        if ckpt_path is not None and ((epoch + 1) % checkpoint_every == 0
                                      or epoch + 1 == end_epoch):
            rng_states = {"data": bytes(data_rng.get_state().numpy().tobytes()),
                          "aug": bytes(aug_rng.get_state().numpy().tobytes())}
            save_checkpoint(ckpt_path, _checkpoint_state(
                model, optimizer, config, model_spec, epoch + 1,
                rng_states, rows))

        if (early_stop_acc is not None and epoch + 1 >= min_epochs
                and last_eval.acc_mix >= early_stop_acc):
            break

    model.eval()
    if last_eval is None:  # zero-epoch run or resume of a finished one
        last_eval = (evalkit.evaluate_plain(model, eval_ds)
                     if model_spec.kind == "plain"
                     else evalkit.evaluate(model, eval_ds))
    return FitResult(model=model, rows=rows, final_eval=last_eval,
                     csv_path=csv_path, checkpoint_path=ckpt_path,
                     epochs_run=(epoch + 1 if end_epoch > start_epoch else start_epoch))
