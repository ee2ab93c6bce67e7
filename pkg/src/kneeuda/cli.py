"""Command-line interface: one command per pipeline stage, composed via
file artifacts. Every command echoes the exact configuration it resolved
to (``resolved_config.json``) so a run is reconstructible from its output
directory, writes its outputs to a temporary directory first and renames
it into place, and maps every package error class to a stable exit code.

Relative ``--out`` paths resolve against ``$KNEEUDA_OUT_ROOT`` when set.
"""

from __future__ import annotations

import functools
import json
import os
import shutil
import sys
from contextlib import contextmanager
from dataclasses import asdict
from pathlib import Path

import click
import numpy as np

from . import synth
from .checkpoint import Checkpoint, arrays_to_state, load_checkpoint, save_checkpoint
from .errors import CheckpointError, ConfigError, KneeUdaError
from .evaluation import (
    bootstrap_roc,
    classification_metrics,
    loocv,
    mcnemar,
    roc_auc,
    roc_curve_points,
    split_source,
)
from .manifest import DatasetManifest, ManifestEntry, load_manifest, save_manifest
from .networks import Encoder3D, EncoderConfig, Head, desk_config
from .preprocess import AugmentConfig, crop_roi, locate_roi, resize_volume, zscore_normalize
from .training import (
    AdaptConfig,
    SourceTrainConfig,
    adapt_target,
    predict_scores,
    train_source,
    write_trace,
)
from .volumes import save_volume

PHENOTYPES = ("cartilage_meniscus", "subchondral_bone")


# ---------------------------------------------------------------------------
# plumbing

def _out_path(out: str) -> Path:
    path = Path(out)
    root = os.environ.get("KNEEUDA_OUT_ROOT")
    if root and not path.is_absolute():
        path = Path(root) / path
    return path


@contextmanager
def _atomic_out(out: str):
    """Yield a temp directory that is renamed to the declared output path
    on success and removed on failure, so partial outputs never land."""
    final = _out_path(out)
    if final.exists():
        raise ConfigError(f"output path already exists: {final}")
    final.parent.mkdir(parents=True, exist_ok=True)
    tmp = final.parent / f".{final.name}.tmp"
    if tmp.exists():
        shutil.rmtree(tmp)
    tmp.mkdir()
    try:
        yield tmp
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    tmp.rename(final)
    click.echo(f"wrote {final}")


def _write_json(path: Path, obj) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _echo_config(out_dir: Path, command: str, resolved: dict) -> None:
    _write_json(out_dir / "resolved_config.json",
                {"command": command, **resolved})


def _handle_errors(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except KneeUdaError as e:
            click.echo(f"error: {e}", err=True)
            sys.exit(e.exit_code)

    return wrapper


def _parse_shape(text: str, flag: str) -> tuple[int, int, int]:
    try:
        parts = tuple(int(p) for p in text.split(","))
    except ValueError:
        raise ConfigError(f"{flag} must be three comma-separated ints, got {text!r}")
    if len(parts) != 3 or any(p <= 0 for p in parts):
        raise ConfigError(f"{flag} must be three positive ints, got {text!r}")
    return parts


def _load_config_file(path: str | None) -> dict:
    if path is None:
        return {}
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except OSError as e:
        raise ConfigError(f"cannot read config file {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"config file {path} is not valid JSON: {e}") from e
    if not isinstance(doc, dict):
        raise ConfigError(f"config file {path} must hold a JSON object")
    return doc


def _build(cls, section: dict, name: str, **overrides):
    """Instantiate a config dataclass from a config-file section plus
    command-line overrides; unknown keys are rejected up front."""
    section = dict(section)
    aug = section.pop("augment", None)
    known = set(cls.__dataclass_fields__)
    unknown = set(section) - known
    if unknown:
        raise ConfigError(f"unknown keys in config section {name!r}: {sorted(unknown)}")
    kwargs = {**section, **overrides}
    for key in ("block_layers", "discriminator_hidden", "input_shape",
                "lesion_radius", "lesion_region", "shape", "spacing"):
        if key in kwargs and isinstance(kwargs[key], list):
            kwargs[key] = tuple(kwargs[key])
    if aug is not None and "augment" in known:
        kwargs["augment"] = _build(AugmentConfig, aug, f"{name}.augment")
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"invalid config section {name!r}: {e}") from e


def _encoder_config(doc: dict) -> EncoderConfig:
    if "encoder" in doc:
        return _build(EncoderConfig, doc["encoder"], "encoder")
    return desk_config()


def _labeled(samples, phenotype: str):
    for s in samples:
        if s.label is None or s.label.get(phenotype) is None:
            raise ConfigError(f"sample {s.sample_id} lacks a {phenotype} label")
    return [int(s.label.get(phenotype)) for s in samples]


def _restore(ckpt: Checkpoint, encoder_cfg: EncoderConfig):
    encoder = Encoder3D(encoder_cfg)
    arrays_to_state(encoder, ckpt.encoder)
    head = Head(encoder.feature_dim)
    arrays_to_state(head, ckpt.head)
    encoder.eval()
    head.eval()
    return encoder, head


def _encoder_config_from_ckpt(ckpt: Checkpoint) -> EncoderConfig:
    raw = ckpt.metadata.get("encoder_config")
    if raw is None:
        raise CheckpointError("checkpoint metadata lacks the encoder configuration")
    return _build(EncoderConfig, raw, "checkpoint.encoder_config")


def _read_predictions(path: str):
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except OSError as e:
        raise ConfigError(f"cannot read predictions {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"predictions {path}: invalid JSON: {e}") from e
    records = doc["predictions"] if isinstance(doc, dict) else doc
    try:
        scores = [float(r["score"]) for r in records]
        preds = [int(r["prediction"]) for r in records]
        labels = [int(r["label"]) for r in records]
    except (KeyError, TypeError) as e:
        raise ConfigError(f"predictions {path}: malformed record: {e}") from e
    if not records:
        raise ConfigError(f"predictions {path}: empty")
    return scores, preds, labels


def _eval_report(scores, preds, labels, seed: int, threshold: float) -> dict:
    report = classification_metrics(preds, labels, threshold=threshold).to_json()
    boot = bootstrap_roc(scores, labels, seed=seed, keep_curves=False)
    report["auroc"] = roc_auc(scores, labels)
    report["auroc_bootstrap"] = {"mean": boot.mean, "sd": boot.sd,
                                 "n_resamples": boot.n_resamples}
    return report


def _roc_plot(path: Path, scores, labels, seed: int) -> None:
    """Mean ROC curve with the per-resample band."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    boot = bootstrap_roc(scores, labels, seed=seed, keep_curves=True)
    fig, ax = plt.subplots(figsize=(4, 4))
    for fpr, tpr in boot.curves:
        ax.plot(fpr, tpr, color="steelblue", alpha=0.08, linewidth=1)
    fpr, tpr = roc_curve_points(scores, labels)
    ax.plot(fpr, tpr, color="navy", linewidth=2,
            label=f"AUROC {roc_auc(scores, labels):.2f} "
                  f"(boot {boot.mean:.2f} ± {boot.sd:.2f})")
    ax.plot([0, 1], [0, 1], color="gray", linestyle="--", linewidth=1)
    ax.set_xlabel("false positive rate")
    ax.set_ylabel("true positive rate")
    ax.legend(loc="lower right", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)


# ---------------------------------------------------------------------------
# commands

@click.group()
def main():
    """Phenotype classification with unsupervised domain adaptation."""


@main.command("synth")
@click.option("--n-source", type=int, required=True)
@click.option("--n-target", type=int, required=True)
@click.option("--shift-preset", default="target",
              type=click.Choice(sorted(synth.SHIFT_PRESETS)),
              help="target-domain shift preset; the source domain always "
                   "uses the unshifted parameters")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", required=True)
@_handle_errors
def synth_cmd(n_source, n_target, shift_preset, seed, out):
    """Generate a synthetic source/target dataset pair."""
    src_params = synth.source_params()
    tgt_params = synth.SHIFT_PRESETS[shift_preset]()
    with _atomic_out(out) as out_dir:
        src_man = synth.generate_synthetic(n_source, "source", src_params,
                                           seed, out_dir / "source")
        tgt_man = synth.generate_synthetic(n_target, "target", tgt_params,
                                           seed, out_dir / "target")
        _echo_config(out_dir, "synth", {
            "n_source": n_source, "n_target": n_target, "seed": seed,
            "shift_preset": shift_preset,
            "source_params": src_params.to_json(),
            "target_params": tgt_params.to_json()})
        _write_json(out_dir / "report.json", {
            "source": {"n": len(src_man),
                       "positives": sum(e.labels["cartilage_meniscus"]
                                        for e in src_man.entries)},
            "target": {"n": len(tgt_man),
                       "positives": sum(e.labels["cartilage_meniscus"]
                                        for e in tgt_man.entries)}})


@main.command("preprocess")
@click.option("--manifest", "manifest_path", required=True)
@click.option("--resize", default="48,48,24", show_default=True,
              help="working grid the raw volume is resampled to")
@click.option("--roi", default="32,32,16", show_default=True,
              help="crop window extracted around the joint ROI")
@click.option("--out", required=True)
@_handle_errors
def preprocess_cmd(manifest_path, resize, roi, out):
    """Resize, ROI-crop and normalize every sample in a manifest."""
    resize_shape = _parse_shape(resize, "--resize")
    roi_shape = _parse_shape(roi, "--roi")
    manifest = load_manifest(manifest_path)
    with _atomic_out(out) as out_dir:
        entries = []
        for entry in manifest.entries:
            sample = manifest.load_sample(entry)
            sample = resize_volume(sample, resize_shape)
            center = locate_roi(sample.mask, roi_shape)
            sample = zscore_normalize(crop_roi(sample, center, roi_shape))
            header = save_volume(sample, out_dir / "data")
            entries.append(ManifestEntry(
                sample_id=entry.sample_id,
                volume=str(header.relative_to(out_dir)),
                domain=entry.domain,
                mask=f"data/{entry.sample_id}.mask.u16" if sample.mask else None,
                labels=entry.labels, split=entry.split))
        save_manifest(DatasetManifest(
            entries=entries,
            metadata={**manifest.metadata,
                      "preprocess": {"resize": list(resize_shape),
                                     "roi": list(roi_shape)}},
            root=out_dir), out_dir / "manifest.json")
        _echo_config(out_dir, "preprocess", {
            "manifest": str(manifest_path), "resize": list(resize_shape),
            "roi": list(roi_shape), "n_samples": len(entries)})


@main.command("train-source")
@click.option("--manifest", "manifest_path", required=True)
@click.option("--phenotype", type=click.Choice(PHENOTYPES), required=True)
@click.option("--config", "config_path", default=None,
              help="JSON file with encoder/source_train sections")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", required=True)
@_handle_errors
def train_source_cmd(manifest_path, phenotype, config_path, seed, out):
    """Split the source dataset 70/10/20 and train the source classifier."""
    doc = _load_config_file(config_path)
    encoder_cfg = _encoder_config(doc)
    train_cfg = _build(SourceTrainConfig, doc.get("source_train", {}),
                       "source_train", seed=seed)
    manifest = load_manifest(manifest_path)
    samples = manifest.load_all()
    labels = _labeled(samples, phenotype)
    by_id = {s.sample_id: s for s in samples}
    tr, va, te = split_source([s.sample_id for s in samples], seed=seed,
                              stratify_by=labels)
    ckpt, trace = train_source([by_id[i] for i in tr], [by_id[i] for i in va],
                               train_cfg, encoder_cfg, phenotype)
    encoder, head = _restore(ckpt, encoder_cfg)
    test = [by_id[i] for i in te]
    scores = predict_scores(encoder, head, test)
    y_test = [int(by_id[i].label.get(phenotype)) for i in te]
    preds = [int(s >= 0.5) for s in scores]
    with _atomic_out(out) as out_dir:
        save_checkpoint(ckpt, out_dir / "checkpoint")
        write_trace(trace, out_dir / "trace.jsonl")
        _write_json(out_dir / "predictions.json", {"predictions": [
            {"sample_id": i, "score": float(s), "prediction": p, "label": y}
            for i, s, p, y in zip(te, scores, preds, y_test)]})
        _write_json(out_dir / "report.json", {
            "phenotype": phenotype,
            "splits": {"train": len(tr), "val": len(va), "test": len(te)},
            "selected_epoch": ckpt.metadata["selected_epoch"],
            "selection_value": ckpt.metadata["selection_value"],
            "test": _eval_report(list(scores), preds, y_test, seed, 0.5)})
        _roc_plot(out_dir / "roc_test.png", list(scores), y_test, seed)
        _echo_config(out_dir, "train-source", {
            "manifest": str(manifest_path), "phenotype": phenotype,
            "seed": seed, "encoder": asdict(encoder_cfg),
            "source_train": asdict(train_cfg)})


@main.command("adapt")
@click.option("--source-ckpt", "source_ckpt_path", required=True)
@click.option("--source-manifest", required=True)
@click.option("--target-manifest", required=True)
@click.option("--config", "config_path", default=None)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", required=True)
@_handle_errors
def adapt_cmd(source_ckpt_path, source_manifest, target_manifest, config_path,
              seed, out):
    """Adversarially adapt the target encoder against a frozen source encoder."""
    doc = _load_config_file(config_path)
    source_ckpt = load_checkpoint(source_ckpt_path)
    encoder_cfg = (_build(EncoderConfig, doc["encoder"], "encoder")
                   if "encoder" in doc else _encoder_config_from_ckpt(source_ckpt))
    adapt_cfg = _build(AdaptConfig, doc.get("adapt", {}), "adapt", seed=seed)
    src = load_manifest(source_manifest).load_all()
    tgt = [s.stripped() for s in load_manifest(target_manifest).load_all()]
    adapted, trace = adapt_target(source_ckpt, src, tgt, adapt_cfg, encoder_cfg)
    with _atomic_out(out) as out_dir:
        save_checkpoint(adapted, out_dir / "checkpoint")
        write_trace(trace, out_dir / "trace.jsonl")
        _write_json(out_dir / "report.json", {
            "epochs": adapt_cfg.epochs,
            "n_source": len(src), "n_target": len(tgt),
            "final_disc_batch_accuracy":
                trace[-1]["disc_batch_accuracy"] if trace else None})
        _echo_config(out_dir, "adapt", {
            "source_ckpt": str(source_ckpt_path),
            "source_manifest": str(source_manifest),
            "target_manifest": str(target_manifest), "seed": seed,
            "encoder": asdict(encoder_cfg),
            "adapt": {**asdict(adapt_cfg),
                      "discriminator_hidden": list(adapt_cfg.discriminator_hidden)}})


@main.command("loocv")
@click.option("--target-manifest", required=True)
@click.option("--mode", type=click.Choice(["uda", "nonuda"]), required=True)
@click.option("--source-ckpt", "source_ckpt_path", default=None,
              help="required in uda mode")
@click.option("--source-manifest", default=None, help="required in uda mode")
@click.option("--phenotype", type=click.Choice(PHENOTYPES),
              default="cartilage_meniscus", show_default=True)
@click.option("--config", "config_path", default=None)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", required=True)
@_handle_errors
def loocv_cmd(target_manifest, mode, source_ckpt_path, source_manifest,
              phenotype, config_path, seed, out):
    """Leave-one-out evaluation of the target classifier.

    uda mode re-adapts the target encoder on each fold's remaining
    samples (labels stripped) and classifies the held-out sample with the
    source head; nonuda mode trains a fresh classifier on the fold's
    labeled samples."""
    doc = _load_config_file(config_path)
    tgt = load_manifest(target_manifest).load_all()
    _labeled(tgt, phenotype)

    if mode == "uda":
        if source_ckpt_path is None or source_manifest is None:
            raise ConfigError("uda mode needs --source-ckpt and --source-manifest")
        source_ckpt = load_checkpoint(source_ckpt_path)
        encoder_cfg = (_build(EncoderConfig, doc["encoder"], "encoder")
                       if "encoder" in doc else _encoder_config_from_ckpt(source_ckpt))
        adapt_cfg = _build(AdaptConfig, doc.get("adapt", {}), "adapt")
        src = load_manifest(source_manifest).load_all()

        def train_fn(train_set, fold_seed):
            cfg = _build(AdaptConfig, doc.get("adapt", {}), "adapt",
                         seed=fold_seed)
            adapted, _ = adapt_target(source_ckpt, src,
                                      [s.stripped() for s in train_set],
                                      cfg, encoder_cfg)
            return _restore(adapted, encoder_cfg)

        run_config = {"adapt": {**asdict(adapt_cfg),
                                "discriminator_hidden":
                                    list(adapt_cfg.discriminator_hidden)},
                      "source_ckpt": str(source_ckpt_path),
                      "source_manifest": str(source_manifest)}
    else:
        encoder_cfg = _encoder_config(doc)
        base_cfg = _build(SourceTrainConfig, doc.get("source_train", {}),
                          "source_train")

        def train_fn(train_set, fold_seed):
            cfg = _build(SourceTrainConfig, doc.get("source_train", {}),
                         "source_train", seed=fold_seed)
            ckpt, _ = train_source(train_set, None, cfg, encoder_cfg, phenotype)
            return _restore(ckpt, encoder_cfg)

        run_config = {"source_train": asdict(base_cfg)}

    def eval_fn(model, sample):
        encoder, head = model
        score = float(predict_scores(encoder, head, [sample])[0])
        return int(score >= 0.5), score, int(sample.label.get(phenotype))

    folds = loocv(tgt, train_fn, eval_fn, seed=seed)
    records = [{**rec, "sample_id": tgt[rec["fold"]].sample_id} for rec in folds]
    scores = [r["score"] for r in records]
    preds = [r["prediction"] for r in records]
    labels = [r["label"] for r in records]
    with _atomic_out(out) as out_dir:
        _write_json(out_dir / "predictions.json", {"predictions": records})
        _write_json(out_dir / "report.json", {
            "mode": mode, "phenotype": phenotype, "n_folds": len(records),
            **_eval_report(scores, preds, labels, seed, 0.5)})
        _roc_plot(out_dir / "roc.png", scores, labels, seed)
        _echo_config(out_dir, "loocv", {
            "target_manifest": str(target_manifest), "mode": mode,
            "phenotype": phenotype, "seed": seed,
            "encoder": asdict(encoder_cfg), **run_config})


@main.command("evaluate")
@click.option("--preds", "preds_path", required=True,
              help="predictions JSON written by train-source or loocv")
@click.option("--threshold", type=float, default=0.5, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", required=True)
@_handle_errors
def evaluate_cmd(preds_path, threshold, seed, out):
    """Metrics, bootstrap AUROC and ROC plot for one prediction set."""
    scores, _, labels = _read_predictions(preds_path)
    preds = [int(s >= threshold) for s in scores]
    with _atomic_out(out) as out_dir:
        _write_json(out_dir / "report.json",
                    _eval_report(scores, preds, labels, seed, threshold))
        _roc_plot(out_dir / "roc.png", scores, labels, seed)
        _echo_config(out_dir, "evaluate", {
            "preds": str(preds_path), "threshold": threshold, "seed": seed})


@main.command("compare")
@click.option("--preds-a", required=True)
@click.option("--preds-b", required=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", required=True)
@_handle_errors
def compare_cmd(preds_a, preds_b, seed, out):
    """Paired comparison of two classifiers on the same samples."""
    scores_a, pa, labels_a = _read_predictions(preds_a)
    scores_b, pb, labels_b = _read_predictions(preds_b)
    if labels_a != labels_b:
        raise ConfigError("prediction files carry different labels; "
                          "a paired test needs the same samples in order")
    result = mcnemar(pa, pb, labels_a)
    with _atomic_out(out) as out_dir:
        _write_json(out_dir / "report.json", {
            "mcnemar": result.to_json(),
            "a": _eval_report(scores_a, pa, labels_a, seed, 0.5),
            "b": _eval_report(scores_b, pb, labels_b, seed, 0.5)})
        _echo_config(out_dir, "compare", {
            "preds_a": str(preds_a), "preds_b": str(preds_b), "seed": seed})


if __name__ == "__main__":
    main()
