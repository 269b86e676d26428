"""Optimization schedule, per-fold training and k-fold cross-validation."""
from __future__ import annotations

import json
import logging
import math
from contextlib import nullcontext
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch

from . import metrics as M
from .dataset import DatasetManifest, FoldAssignment, SegSample, make_folds, preprocess_sample
from .model import (DecoderLayerOutput, EUSSegmenter, ModelConfig, assemble_logits, atm_loss, load_checkpoint,
                    predict, save_checkpoint)

log = logging.getLogger(__name__)

ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8


class TrainingDiverged(RuntimeError):
    """Loss or gradients went non-finite; the best checkpoint so far is kept on disk."""

    def __init__(self, message: str, last_checkpoint: Path | None = None):
        super().__init__(message)
        self.last_checkpoint = last_checkpoint


@dataclass
class TrainConfig:
    epochs: int = 50
    base_lr: float = 3e-4
    warmup_start_lr: float = 5e-5
    warmup_epochs: float = 20
    final_lr: float = 0.0
    weight_decay: float = 0.05
    layer_decay: float = 0.65
    grad_clip_norm: float = 5.0
    global_batch_size: int = 16
    val_every_epochs: int = 5
    seed: int = 0
    precision: str = "full"
    device: str = "cpu"
    init_checkpoint: str | None = None  # optional pretrained weights in eusseg checkpoint format

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if not 0 <= self.warmup_epochs < self.epochs:
            raise ValueError(f"warmup_epochs {self.warmup_epochs} must be in [0, epochs={self.epochs})")
        for name in ("base_lr", "warmup_start_lr", "layer_decay", "grad_clip_norm"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.final_lr < 0 or self.weight_decay < 0:
            raise ValueError("final_lr and weight_decay must be non-negative")
        if self.global_batch_size < 1 or self.val_every_epochs < 1:
            raise ValueError("global_batch_size and val_every_epochs must be >= 1")
        if self.precision not in ("full", "mixed"):
            raise ValueError(f"precision must be 'full' or 'mixed', got {self.precision!r}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class CheckpointMeta:
    fold_index: int
    epoch: int
    validation_dice: float
    checkpoint_path: str


@dataclass
class FoldResult:
    fold_index: int
    status: str  # "ok" or "failed"
    checkpoint: CheckpointMeta | None = None
    metrics: M.MetricResult | None = None
    validation_history: list[dict] = field(default_factory=list)
    error: str | None = None

    def to_dict(self) -> dict:
        return {
            "fold_index": self.fold_index,
            "status": self.status,
            "checkpoint": asdict(self.checkpoint) if self.checkpoint else None,
            "metrics": self.metrics.as_dict() if self.metrics else None,
            "validation_history": self.validation_history,
            "error": self.error,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FoldResult":
        return cls(
            fold_index=d["fold_index"],
            status=d["status"],
            checkpoint=CheckpointMeta(**d["checkpoint"]) if d.get("checkpoint") else None,
            metrics=M.MetricResult(**d["metrics"]) if d.get("metrics") else None,
            validation_history=d.get("validation_history", []),
            error=d.get("error"),
        )


@dataclass
class CVRunResult:
    folds: list[FoldResult]
    aggregate: M.MetricResult | None
    cis: dict[str, M.BootstrapCI]

    @property
    def checkpoints(self) -> list[CheckpointMeta | None]:
        return [f.checkpoint for f in self.folds]

    def to_dict(self) -> dict:
        return {
            "k": len(self.folds),
            "n_failed": sum(f.status != "ok" for f in self.folds),
            "folds": [f.to_dict() for f in self.folds],
            "aggregate": self.aggregate.as_dict() if self.aggregate else None,
            "cis": {m: ci.as_dict() for m, ci in self.cis.items()},
        }


# ---------------------------------------------------------------- schedule


def lr_at(epoch_fraction: float, cfg: TrainConfig) -> float:
    """Linear warmup from ``warmup_start_lr`` to ``base_lr``, then cosine to ``final_lr``."""
    t = min(max(epoch_fraction, 0.0), float(cfg.epochs))
    if t < cfg.warmup_epochs:
        return cfg.warmup_start_lr + (cfg.base_lr - cfg.warmup_start_lr) * t / cfg.warmup_epochs
    progress = (t - cfg.warmup_epochs) / (cfg.epochs - cfg.warmup_epochs)
    return cfg.final_lr + (cfg.base_lr - cfg.final_lr) * (1 + math.cos(math.pi * progress)) / 2


def layer_lr_multiplier(param_layer_index: int, depth: int, decay: float) -> float:
    """``decay ** (depth + 1 - index)``: patch embedding is layer 0, block i is i + 1, the head depth + 1."""
    if not 0 <= param_layer_index <= depth + 1:
        raise ValueError(f"layer index {param_layer_index} outside [0, {depth + 1}]")
    return decay ** (depth + 1 - param_layer_index)


def param_layer_index(name: str, depth: int) -> int:
    if name.startswith("backbone.patch_embed."):
        return 0
    if name.startswith("backbone.blocks."):
        return int(name.split(".")[2]) + 1
    return depth + 1


def build_optimizer(model: EUSSegmenter, cfg: TrainConfig) -> torch.optim.AdamW:
    """AdamW with one parameter group per (layer, decay/no-decay) pair.

    Each group carries an ``lr_scale`` from the layer-wise decay; biases and
    normalization parameters (all 1-D tensors) get no weight decay.
    """
    depth = model.cfg.depth
    groups: dict[tuple[int, bool], dict] = {}
    for name, param in model.named_parameters():
        if not param.requires_grad:
            continue
        layer = param_layer_index(name, depth)
        decay = param.ndim > 1
        key = (layer, decay)
        if key not in groups:
            groups[key] = {
                "params": [], "names": [],
                "weight_decay": cfg.weight_decay if decay else 0.0,
                "lr_scale": layer_lr_multiplier(layer, depth, cfg.layer_decay),
                "layer_index": layer,
            }
        groups[key]["params"].append(param)
        groups[key]["names"].append(name)
    return torch.optim.AdamW([groups[k] for k in sorted(groups)], lr=cfg.base_lr,
                             betas=ADAM_BETAS, eps=ADAM_EPS, weight_decay=cfg.weight_decay)


def optimizer_step(optimizer: torch.optim.Optimizer, lr: float, scaler=None) -> None:
    for group in optimizer.param_groups:
        group["lr"] = lr * group.get("lr_scale", 1.0)
    if scaler is not None:
        scaler.step(optimizer)
        scaler.update()
    else:
        optimizer.step()


def global_grad_norm(gradients: Iterable[torch.Tensor]) -> float:
    total = 0.0
    for g in gradients:
        if g is not None:
            total += float(torch.sum(g.detach().double() ** 2))
    return math.sqrt(total)


def clip_gradients(gradients: Sequence[torch.Tensor], max_norm: float = 5.0) -> float:
    """Rescale in place so the global L2 norm is at most ``max_norm``; returns the pre-clip norm."""
    grads = [g for g in gradients if g is not None]
    norm = global_grad_norm(grads)
    if not math.isfinite(norm):
        raise FloatingPointError(f"non-finite gradient norm {norm}")
    if norm > max_norm:
        scale = max_norm / norm
        for g in grads:
            g.mul_(scale)
    return norm


# ---------------------------------------------------------------- training


def validation_epochs(cfg: TrainConfig) -> list[int]:
    epochs = [e for e in range(1, cfg.epochs + 1) if e % cfg.val_every_epochs == 0]
    if not epochs or epochs[-1] != cfg.epochs:
        epochs.append(cfg.epochs)
    return epochs


def init_model(model_cfg: ModelConfig, seed: int) -> EUSSegmenter:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return EUSSegmenter(model_cfg)


def stack_samples(samples: Sequence[SegSample], device="cpu") -> tuple[torch.Tensor, torch.Tensor]:
    images = torch.from_numpy(np.stack([s.image for s in samples]).astype(np.float32))
    masks = torch.from_numpy(np.stack([s.mask for s in samples]).astype(np.float32))
    return images.to(device), masks.to(device)


@torch.no_grad()
def predict_masks(model: EUSSegmenter, images: torch.Tensor, batch_size: int = 16) -> np.ndarray:
    """Argmax masks for a B x H x W image tensor; the only inference path."""
    model.eval()
    out = []
    for start in range(0, images.shape[0], batch_size):
        out.append(predict(assemble_logits(model(images[start:start + batch_size]))).cpu().numpy())
    return np.concatenate(out, axis=0)


def evaluate_samples(model: EUSSegmenter, samples: Sequence[SegSample], device="cpu") -> list[M.MetricResult]:
    images, _ = stack_samples(samples, device)
    preds = predict_masks(model, images)
    return [M.compute_metrics(M.confusion(p, s.mask)) for p, s in zip(preds, samples)]


def mean_dice(model: EUSSegmenter, samples: Sequence[SegSample], device="cpu") -> float:
    return float(np.mean([r.dsc for r in evaluate_samples(model, samples, device)]))


def _autocast(cfg: TrainConfig):
    if cfg.precision != "mixed":
        return nullcontext()
    device_type = "cuda" if str(cfg.device).startswith("cuda") else "cpu"
    dtype = torch.float16 if device_type == "cuda" else torch.bfloat16
    return torch.autocast(device_type=device_type, dtype=dtype)


def fit(model: EUSSegmenter, train_samples: Sequence[SegSample], val_samples: Sequence[SegSample],
        cfg: TrainConfig, out_dir: str | Path, fold_index: int = 0) -> tuple[CheckpointMeta, list[dict]]:
    """Train on in-memory samples, validating on schedule and keeping the best-Dice checkpoint.

    Returns the best checkpoint's metadata and the validation history.
    Every optimizer step is appended to ``out_dir/loss_log.jsonl``.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    device = cfg.device
    model.to(device)
    images, masks = stack_samples(train_samples, device)
    n = images.shape[0]
    steps_per_epoch = math.ceil(n / cfg.global_batch_size)
    optimizer = build_optimizer(model, cfg)
    use_scaler = cfg.precision == "mixed" and str(device).startswith("cuda")
    scaler = torch.amp.GradScaler("cuda") if use_scaler else None
    generator = torch.Generator().manual_seed(cfg.seed)
    val_at = set(validation_epochs(cfg))

    best: CheckpointMeta | None = None
    best_path = out_dir / "best.pt"
    history = []
    step = 0
    with (out_dir / "loss_log.jsonl").open("w", encoding="utf-8") as loss_log:
        for epoch in range(cfg.epochs):
            model.train()
            order = torch.randperm(n, generator=generator).to(device)
            for i in range(steps_per_epoch):
                idx = order[i * cfg.global_batch_size:(i + 1) * cfg.global_batch_size]
                lr = lr_at(epoch + i / steps_per_epoch, cfg)
                optimizer.zero_grad(set_to_none=True)
                with _autocast(cfg):
                    outputs = model(images[idx])
                loss = atm_loss([DecoderLayerOutput(o.class_logits.float(), o.mask_logits.float()) for o in outputs],
                                masks[idx]).total
                loss_value = loss.item()
                if not math.isfinite(loss_value):
                    raise TrainingDiverged(
                        f"fold {fold_index}: non-finite loss at epoch {epoch + 1}, step {step}",
                        best_path if best else None)
                if scaler is not None:
                    scaler.scale(loss).backward()
                    scaler.unscale_(optimizer)
                else:
                    loss.backward()
                grads = [p.grad for p in model.parameters()]
                try:
                    clip_gradients(grads, cfg.grad_clip_norm)
                except FloatingPointError as exc:
                    if scaler is None:
                        raise TrainingDiverged(f"fold {fold_index}: {exc} at step {step}",
                                               best_path if best else None) from exc
                optimizer_step(optimizer, lr, scaler)
                loss_log.write(json.dumps({"fold": fold_index, "epoch": epoch + 1, "step": step,
                                           "loss": loss_value, "lr": lr}) + "\n")
                step += 1
            if epoch + 1 in val_at:
                dice = mean_dice(model, val_samples, device)
                history.append({"epoch": epoch + 1, "validation_dice": dice})
                log.info("fold %d epoch %d: validation dice %.4f", fold_index, epoch + 1, dice)
                if best is None or dice > best.validation_dice:
                    best = CheckpointMeta(fold_index, epoch + 1, dice, str(best_path))
                    save_checkpoint(model, best_path, meta=asdict(best))
    return best, history


def train_fold(fold: FoldAssignment, model_cfg: ModelConfig, train_cfg: TrainConfig, out_dir: str | Path,
               samples: dict | None = None) -> FoldResult:
    """Train one fold from a seed-derived (or imported) initialization and score its best checkpoint.

    ``samples`` optionally maps image paths to already-preprocessed samples.
    """
    target = (model_cfg.image_size, model_cfg.image_size)

    def load(records):
        return [samples[r.image_path] if samples and r.image_path in samples else preprocess_sample(r, target)
                for r in records]

    train_samples, val_samples = load(fold.train_records), load(fold.val_records)
    if train_cfg.init_checkpoint:
        model, _ = load_checkpoint(train_cfg.init_checkpoint, expected=model_cfg)
    else:
        model = init_model(model_cfg, train_cfg.seed)
    best, history = fit(model, train_samples, val_samples, train_cfg, out_dir, fold.fold_index)
    best_model, _ = load_checkpoint(best.checkpoint_path, expected=model_cfg)
    per_image = evaluate_samples(best_model, val_samples)
    return FoldResult(fold_index=fold.fold_index, status="ok", checkpoint=best,
                      metrics=M.aggregate_mean(per_image), validation_history=history)


def fold_seed(seed: int, fold_index: int) -> int:
    return seed * 1000 + fold_index


def aggregate_folds(folds: Sequence[FoldResult], n_resamples: int = 2000,
                    seed: int = 0) -> tuple[M.MetricResult | None, dict[str, M.BootstrapCI]]:
    ok = [f.metrics for f in folds if f.status == "ok" and f.metrics is not None]
    if not ok:
        return None, {}
    aggregate = M.aggregate_mean(ok)
    cis = {}
    if len(ok) >= 2:
        cis = {m: M.bootstrap_ci([getattr(r, m) for r in ok], n_resamples=n_resamples, seed=seed)
               for m in M.CI_METRICS}
    return aggregate, cis


def run_cross_validation(manifest: DatasetManifest, model_cfg: ModelConfig, train_cfg: TrainConfig,
                         out_dir: str | Path, k: int = 5, folds: Sequence[FoldAssignment] | None = None,
                         only_folds: Sequence[int] | None = None, group_by_case: bool = True,
                         n_resamples: int = 2000) -> CVRunResult:
    """Train every fold (skipping folds already finished under ``out_dir``) and aggregate.

    A fold that raises is recorded as failed and the remaining folds still run.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if folds is None:
        folds = make_folds(manifest, k=k, seed=train_cfg.seed, group_by_case=group_by_case)
    target = (model_cfg.image_size, model_cfg.image_size)
    cache: dict = {}
    results = []
    for fold in folds:
        fold_dir = out_dir / f"fold_{fold.fold_index}"
        result_path = fold_dir / "fold_result.json"
        if result_path.is_file():
            results.append(FoldResult.from_dict(json.loads(result_path.read_text(encoding="utf-8"))))
            log.info("fold %d already trained, skipping", fold.fold_index)
            continue
        if only_folds is not None and fold.fold_index not in only_folds:
            continue
        for r in list(fold.train_records) + list(fold.val_records):
            if r.image_path not in cache:
                cache[r.image_path] = preprocess_sample(r, target)
        cfg = TrainConfig(**{**train_cfg.to_dict(), "seed": fold_seed(train_cfg.seed, fold.fold_index)})
        try:
            result = train_fold(fold, model_cfg, cfg, fold_dir, samples=cache)
        except Exception as exc:  # noqa: BLE001 - recorded as a failed fold
            log.error("fold %d failed: %s", fold.fold_index, exc)
            result = FoldResult(fold_index=fold.fold_index, status="failed", error=f"{type(exc).__name__}: {exc}")
            results.append(result)
            continue
        fold_dir.mkdir(parents=True, exist_ok=True)
        result_path.write_text(json.dumps(result.to_dict(), indent=2) + "\n", encoding="utf-8")
        results.append(result)
    aggregate, cis = aggregate_folds(results, n_resamples=n_resamples, seed=train_cfg.seed)
    return CVRunResult(folds=results, aggregate=aggregate, cis=cis)
