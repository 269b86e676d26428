"""Command-line entry point: preprocess, split, train, evaluate, analyze.

Settings resolve as command-line flag > ``--config`` JSON file > built-in
default, and every run directory gets the resolved ``config.json``.

Exit codes: 0 success, 1 validation/input error, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import analysis as A
from . import metrics as M
from .dataset import ManifestError, load_manifest, make_folds, preprocess_sample, save_folds
from .model import ModelConfig, load_checkpoint
from .trainer import TrainConfig, TrainingDiverged, predict_masks, run_cross_validation

log = logging.getLogger("eusseg")


class InputError(Exception):
    """Bad user input; maps to exit code 1."""


@dataclass
class RunConfig:
    manifest: str | None = None
    out: str | None = None
    toy: bool = False
    model: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    split: dict = field(default_factory=lambda: {"k": 5, "group_by_case": True})
    evaluation: dict = field(default_factory=lambda: {"n_resamples": 2000, "seed": 0})
    analysis: dict = field(default_factory=lambda: {
        "complete_below": A.COMPLETE_FAILURE_DSC, "poor_below": A.POOR_DSC, "connectivity": 8})

    def model_config(self) -> ModelConfig:
        return ModelConfig.toy(**self.model) if self.toy else ModelConfig(**self.model)

    def train_config(self) -> TrainConfig:
        return TrainConfig(**self.train)

    def resolved(self) -> dict:
        out = asdict(self)
        out["model"] = self.model_config().to_dict()
        out["train"] = self.train_config().to_dict()
        return out

    def save(self, path: Path) -> None:
        path.write_text(json.dumps(self.resolved(), indent=2) + "\n", encoding="utf-8")


def resolve_config(args: argparse.Namespace) -> RunConfig:
    cfg = RunConfig()
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.is_file():
            raise InputError(f"config file not found: {path}")
        try:
            data = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise InputError(f"{path}: invalid JSON ({exc.msg})") from None
        for key, value in data.items():
            if not hasattr(cfg, key):
                raise InputError(f"{path}: unknown config key {key!r}")
            current = getattr(cfg, key)
            setattr(cfg, key, {**current, **value} if isinstance(current, dict) else value)
    if getattr(args, "manifest", None):
        cfg.manifest = args.manifest
    if getattr(args, "out", None):
        cfg.out = args.out
    if getattr(args, "toy", False):
        cfg.toy = True
    seed = getattr(args, "seed", None)
    if seed is not None:
        cfg.train = {**cfg.train, "seed": seed}
        cfg.evaluation = {**cfg.evaluation, "seed": seed}
    try:
        cfg.model_config()
        cfg.train_config()
    except (TypeError, ValueError) as exc:
        raise InputError(f"invalid configuration: {exc}") from None
    return cfg


def _require(value, flag: str):
    if not value:
        raise InputError(f"{flag} is required")
    return value


def _write_if_changed(path: Path, data: bytes) -> bool:
    if path.is_file() and path.read_bytes() == data:
        return False
    path.write_bytes(data)
    return True


def _npy_bytes(array: np.ndarray) -> bytes:
    import io
    buf = io.BytesIO()
    np.save(buf, array, allow_pickle=False)
    return buf.getvalue()


# ---------------------------------------------------------------- commands


def cmd_preprocess(cfg: RunConfig) -> dict:
    """Cache preprocessed samples as .npy files; unchanged files are not rewritten."""
    manifest = load_manifest(_require(cfg.manifest, "--manifest"))
    out = Path(_require(cfg.out, "--out"))
    size = cfg.model_config().image_size
    samples_dir = out / "samples"
    samples_dir.mkdir(parents=True, exist_ok=True)
    index, changed = [], 0
    for i, record in enumerate(manifest):
        sample = preprocess_sample(record, (size, size))
        image_id = M.image_id_for(i, record.image_path)
        changed += _write_if_changed(samples_dir / f"{image_id}_image.npy", _npy_bytes(sample.image))
        changed += _write_if_changed(samples_dir / f"{image_id}_mask.npy", _npy_bytes(sample.mask))
        index.append({"image_id": image_id, "image_path": str(record.image_path), "case_id": record.case_id,
                      "source_id": record.source_id, "foreground_pixels": int(sample.mask.sum())})
    summary = {"n_samples": len(index), "image_size": size,
               "sources": {s: sum(r["source_id"] == s for r in index) for s in sorted({r["source_id"] for r in index})},
               "n_cases": len({r["case_id"] for r in index})}
    changed += _write_if_changed(out / "index.jsonl", "".join(json.dumps(r) + "\n" for r in index).encode())
    changed += _write_if_changed(out / "summary.json", (json.dumps(summary, indent=2) + "\n").encode())
    changed += _write_if_changed(out / "config.json", (json.dumps(cfg.resolved(), indent=2) + "\n").encode())
    summary["files_changed"] = changed
    log.info("preprocessed %d samples into %s (%d files written)", len(index), out, changed)
    return summary


def cmd_split(cfg: RunConfig) -> Path:
    manifest = load_manifest(_require(cfg.manifest, "--manifest"))
    out = Path(_require(cfg.out, "--out"))
    out.mkdir(parents=True, exist_ok=True)
    try:
        folds = make_folds(manifest, k=int(cfg.split["k"]), seed=cfg.train_config().seed,
                           group_by_case=bool(cfg.split["group_by_case"]))
    except ValueError as exc:
        raise InputError(str(exc)) from None
    return save_folds(folds, out / "folds.json", root=manifest.root)


def cmd_train(cfg: RunConfig, only_folds: list[int] | None = None):
    manifest = load_manifest(_require(cfg.manifest, "--manifest"))
    out = Path(_require(cfg.out, "--out"))
    out.mkdir(parents=True, exist_ok=True)
    model_cfg, train_cfg = cfg.model_config(), cfg.train_config()
    try:
        folds = make_folds(manifest, k=int(cfg.split["k"]), seed=train_cfg.seed,
                           group_by_case=bool(cfg.split["group_by_case"]))
    except ValueError as exc:
        raise InputError(str(exc)) from None
    cfg.save(out / "config.json")
    save_folds(folds, out / "folds.json", root=manifest.root)
    result = run_cross_validation(manifest, model_cfg, train_cfg, out, folds=folds, only_folds=only_folds,
                                  n_resamples=int(cfg.evaluation["n_resamples"]))
    (out / "cv_result.json").write_text(json.dumps(result.to_dict(), indent=2) + "\n", encoding="utf-8")
    failed = [f for f in result.folds if f.status != "ok"]
    if failed:
        raise TrainingDiverged("; ".join(f"fold {f.fold_index}: {f.error}" for f in failed))
    return result


def load_segmenter(checkpoint: str | Path, expected: ModelConfig | None = None):
    """Return ``(segment_fn, model_config)`` for a saved checkpoint."""
    model, _ = load_checkpoint(checkpoint, expected=expected)

    def segment(image: np.ndarray) -> np.ndarray:
        return predict_masks(model, torch.from_numpy(np.asarray(image, dtype=np.float32))[None])[0]

    return segment, model.cfg


def cmd_evaluate(cfg: RunConfig, checkpoint: str | Path) -> M.EvaluationReport:
    checkpoint = Path(_require(checkpoint, "--checkpoint"))
    if not checkpoint.is_file():
        raise InputError(f"checkpoint not found: {checkpoint}")
    manifest = load_manifest(_require(cfg.manifest, "--manifest"))
    out = Path(_require(cfg.out, "--out"))
    expected = cfg.model_config() if (cfg.model or cfg.toy) else None
    try:
        segment, model_cfg = load_segmenter(checkpoint, expected)
    except (ValueError, RuntimeError) as exc:
        raise InputError(f"incompatible checkpoint: {exc}") from None
    size = model_cfg.image_size
    pred_dir = out / "predictions"
    pred_dir.mkdir(parents=True, exist_ok=True)

    def samples():
        for i, record in enumerate(manifest):
            image_id = M.image_id_for(i, record.image_path)
            try:
                yield image_id, record.image_path, preprocess_sample(record, (size, size))
            except ManifestError as exc:
                yield image_id, record.image_path, exc

    def save_prediction(image_id, sample, pred):
        stack = np.stack([sample.image, sample.mask, pred]).astype(np.float32)
        _write_if_changed(pred_dir / f"{image_id}.npy", _npy_bytes(stack))

    report = M.evaluate_dataset(segment, samples(), n_resamples=int(cfg.evaluation["n_resamples"]),
                                seed=int(cfg.evaluation["seed"]), on_prediction=save_prediction)
    M.write_per_image(report, out / "per_image.csv")
    M.write_aggregate(report, out / "aggregate.json")
    resolved = cfg.resolved()
    resolved["model"] = model_cfg.to_dict()
    resolved["checkpoint"] = str(checkpoint.resolve())
    (out / "config.json").write_text(json.dumps(resolved, indent=2) + "\n", encoding="utf-8")
    return report


def cmd_analyze(cfg: RunConfig, results: str | Path, predictions: str | Path) -> A.FailureReport:
    results = Path(_require(results, "--results"))
    predictions = Path(_require(predictions, "--predictions"))
    if not results.is_file():
        raise InputError(f"per-image results not found: {results}")
    out = Path(_require(cfg.out, "--out"))
    rows = M.read_per_image(results)
    missing = [r["image_id"] for r in rows if not (predictions / f"{r['image_id']}.npy").is_file()]
    if missing:
        raise InputError(f"missing prediction files for {len(missing)} images, e.g. {missing[0]}")
    opts = cfg.analysis
    stacks, entries = {}, []
    for row in rows:
        stack = np.load(predictions / f"{row['image_id']}.npy")
        stacks[row["image_id"]] = stack
        stats = A.connected_components(stack[2].astype(np.uint8), connectivity=int(opts["connectivity"]))
        entries.append((row["image_id"], row["dsc"], stats))
    report = A.bucket_failures(entries, complete_below=float(opts["complete_below"]),
                               poor_below=float(opts["poor_below"]))
    overlay_dir = out / "overlays"
    overlay_dir.mkdir(parents=True, exist_ok=True)
    dsc_of = {r["image_id"]: r["dsc"] for r in rows}
    for image_id in report.complete_failures + report.poor_cases:
        image, gt, pred = stacks[image_id]
        raster = A.render_overlay(image, gt.astype(np.uint8), pred.astype(np.uint8), dsc_of[image_id])
        A.save_overlay(raster, overlay_dir, image_id)
    A.write_failure_report(report, out / "failure_report.json")
    return report


# ---------------------------------------------------------------- argument parsing


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="eusseg", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, manifest=True):
        if manifest:
            p.add_argument("--manifest", help="JSON-lines manifest of image/mask records")
        p.add_argument("--config", help="JSON run configuration")
        p.add_argument("--out", help="output directory")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--toy", action="store_true", help="use the desk-scale model preset")
        return p

    common(sub.add_parser("preprocess", help="cache preprocessed samples"))
    common(sub.add_parser("split", help="write cross-validation fold assignments"))
    p = common(sub.add_parser("train", help="k-fold cross-validated training"))
    p.add_argument("--fold", type=int, action="append", help="train only this fold (repeatable)")
    p = common(sub.add_parser("evaluate", help="score a checkpoint on a manifest"))
    p.add_argument("--checkpoint", help="model checkpoint (.pt)")
    p = common(sub.add_parser("analyze", help="failure analysis of per-image results"), manifest=False)
    p.add_argument("--results", help="per_image.csv from evaluate")
    p.add_argument("--predictions", help="predictions directory from evaluate")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        if args.command == "preprocess":
            summary = cmd_preprocess(cfg)
            print(json.dumps(summary))
        elif args.command == "split":
            print(cmd_split(cfg))
        elif args.command == "train":
            result = cmd_train(cfg, only_folds=args.fold)
            print(json.dumps({"aggregate": result.to_dict()["aggregate"], "k": len(result.folds)}))
        elif args.command == "evaluate":
            report = cmd_evaluate(cfg, args.checkpoint)
            print(json.dumps(report.summary()["metrics"]))
        elif args.command == "analyze":
            report = cmd_analyze(cfg, args.results, args.predictions)
            print(json.dumps({"n_images": report.n_images,
                              "complete_failures": len(report.complete_failures),
                              "poor_cases": len(report.poor_cases),
                              "multi_prediction_rate": report.multi_prediction_percent}))
    except (InputError, ManifestError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (TrainingDiverged, FloatingPointError, RuntimeError) as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
