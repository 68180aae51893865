"""Command-line orchestration of the full pipeline.

Exit codes: 0 success, 1 validation error (bad input, missing files, config
mismatch), 2 runtime failure during processing.
"""

from __future__ import annotations

import sys
from pathlib import Path

import click
import numpy as np

EXIT_VALIDATION = 1
EXIT_RUNTIME = 2


def _load_config(path):
    from .config import ExperimentConfig

    if path is None:
        return ExperimentConfig()
    return ExperimentConfig.from_file(path)


def _config_option(fn):
    return click.option(
        "--config", "config_path", type=click.Path(exists=True, dir_okay=False),
        default=None, help="Experiment config (YAML or JSON); defaults otherwise.",
    )(fn)


def _check_num_classes(cfg, man):
    if man.num_classes is not None and man.num_classes != cfg.num_classes:
        raise ValueError(
            f"manifest declares {man.num_classes} classes but config has {cfg.num_classes}"
        )


def _stage1_paths(ckpt_dir: Path, tag: str):
    return ckpt_dir / f"stage1_a_{tag}.npz", ckpt_dir / f"stage1_b_{tag}.npz"


def _load_stage1_pair(cfg, ckpt_dir: Path, tag: str):
    from .checkpoint import load_checkpoint
    from .models import DeepLab2D

    path_a, path_b = _stage1_paths(ckpt_dir, tag)
    net_a = DeepLab2D(cfg.net2d, cfg.num_classes, cfg.feature2d_channels, instance_id=0)
    net_b = DeepLab2D(cfg.net2d, cfg.num_classes, cfg.feature2d_channels, instance_id=1)
    load_checkpoint(path_a, net_a, expect_config_hash=cfg.hash())
    load_checkpoint(path_b, net_b, expect_config_hash=cfg.hash())
    return net_a, net_b


def _load_fine(cfg, ckpt_dir: Path, tag: str):
    from .checkpoint import load_checkpoint
    from .models import FineNet

    net = FineNet(cfg)
    load_checkpoint(ckpt_dir / f"stage2_{tag}.npz", net, expect_config_hash=cfg.hash())
    return net


def _load_cached_subjects(cfg, cache_dir, subject_ids, need_labels: bool):
    from .preprocess import load_preprocessed

    out = []
    for sid in subject_ids:
        vol, labels, prov = load_preprocessed(cache_dir, sid, cfg.data.target_spacing)
        if need_labels and labels is None:
            raise ValueError(f"subject {sid!r} has no mask in the preprocessed cache")
        out.append((sid, vol, labels, prov))
    return out


@click.group()
def cli():
    """Two-stage semi-supervised spine MR segmentation."""


@cli.command("preprocess")
@_config_option
@click.option("--manifest", "manifest_path", required=True, type=click.Path(exists=True))
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False))
def preprocess_cmd(config_path, manifest_path, out_dir):
    """Resample, crop, normalize and standardize every manifest subject."""
    from .manifest import load_manifest
    from .preprocess import load_volume, preprocess_subject, save_preprocessed

    cfg = _load_config(config_path)
    man = load_manifest(manifest_path)
    _check_num_classes(cfg, man)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for entry in (*man.labeled, *man.unlabeled):
        volume, labels = load_volume(entry.image, entry.mask, num_classes=cfg.num_classes)
        if not entry.labeled:
            labels = None
        vol, lab, prov = preprocess_subject(
            entry.subject_id, volume, labels,
            cfg.data.target_spacing, cfg.data.inplane_size, cfg.data.min_depth,
        )
        save_preprocessed(out_dir, vol, lab, prov)
        click.echo(f"{entry.subject_id}: {volume.shape} -> {vol.shape}")
    cfg.save(out_dir / "config.yaml")


@cli.command("make-folds")
@_config_option
@click.option("--manifest", "manifest_path", required=True, type=click.Path(exists=True))
@click.option("--out", "out_path", required=True, type=click.Path(dir_okay=False))
def make_folds_cmd(config_path, manifest_path, out_path):
    """Plan the cross-validation folds from the manifest."""
    from .manifest import load_manifest
    from .train.folds import make_folds

    cfg = _load_config(config_path)
    man = load_manifest(manifest_path)
    plan = make_folds(man.labeled_ids, cfg.seed, cfg.n_folds, man.unlabeled_ids)
    Path(out_path).parent.mkdir(parents=True, exist_ok=True)
    plan.save(out_path)
    click.echo(f"folds: {[len(f) for f in plan.folds]}, unlabeled pool: {len(plan.unlabeled)}")


@cli.command("train-stage1")
@_config_option
@click.option("--folds", "folds_path", required=True, type=click.Path(exists=True))
@click.option("--fold", type=int, required=True)
@click.option("--cache", "cache_dir", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False))
@click.option("--epochs", type=int, default=None, help="Override the configured epoch count.")
def train_stage1_cmd(config_path, folds_path, fold, cache_dir, out_dir, epochs):
    """Train the two cross-supervised per-slice networks for one fold."""
    from .train.cache import validation_dsc
    from .train.cps import Stage1Trainer
    from .train.data2d import SliceDataset, slice_loader
    from .train.folds import FoldPlan

    cfg = _load_config(config_path)
    plan = FoldPlan.load(folds_path)
    train_ids, val_ids = plan.split(fold)
    train_subjects = _load_cached_subjects(cfg, cache_dir, train_ids, need_labels=True)
    val_subjects = _load_cached_subjects(cfg, cache_dir, val_ids, need_labels=True)
    labeled = SliceDataset([(sid, vol, lab) for sid, vol, lab, _ in train_subjects])
    labeled_loader = slice_loader(labeled, cfg.stage1.batch_size, cfg.seed)
    unlabeled_loader = None
    if plan.unlabeled:
        pool = _load_cached_subjects(cfg, cache_dir, plan.unlabeled, need_labels=False)
        unlabeled = SliceDataset([(sid, vol, None) for sid, vol, _, _ in pool])
        unlabeled_loader = slice_loader(unlabeled, cfg.stage1.batch_size, cfg.seed + 1)
    val_pairs = [(vol, lab) for _, vol, lab, _ in val_subjects]
    trainer = Stage1Trainer(cfg, out_dir)
    history = trainer.fit(
        labeled_loader,
        unlabeled_loader,
        val_fn=lambda a, b: validation_dsc(a, b, val_pairs),
        epochs=epochs,
    )
    cfg.save(Path(out_dir) / "config.yaml")
    click.echo(f"stage one done: {len(history)} epochs, final loss {history[-1]['total']:.4f}")


@cli.command("cache-stage1")
@_config_option
@click.option("--folds", "folds_path", required=True, type=click.Path(exists=True))
@click.option("--cache", "cache_dir", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--checkpoints", "ckpt_dir", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False))
@click.option("--tag", default="last", type=click.Choice(["last", "best"]))
def cache_stage1_cmd(config_path, folds_path, cache_dir, ckpt_dir, out_dir, tag):
    """Freeze the stage-one outputs of every labeled subject to disk."""
    from .train.cache import compute_stage1_artifacts, save_stage1_cache, stage1_source_hash
    from .train.folds import FoldPlan

    cfg = _load_config(config_path)
    plan = FoldPlan.load(folds_path)
    net_a, net_b = _load_stage1_pair(cfg, Path(ckpt_dir), tag)
    path_a, path_b = _stage1_paths(Path(ckpt_dir), tag)
    source = stage1_source_hash(path_a, path_b)
    subjects = [sid for fold in plan.folds for sid in fold]
    for sid, vol, _, _ in _load_cached_subjects(cfg, cache_dir, subjects, need_labels=False):
        artifacts = compute_stage1_artifacts(net_a, net_b, vol)
        save_stage1_cache(out_dir, sid, artifacts, source, cfg.hash())
        click.echo(f"{sid}: cached {artifacts.confidence.shape} + {artifacts.features.shape}")


@cli.command("train-stage2")
@_config_option
@click.option("--folds", "folds_path", required=True, type=click.Path(exists=True))
@click.option("--fold", type=int, required=True)
@click.option("--cache", "cache_dir", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--stage1-cache", "s1_cache_dir", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--stage1-checkpoints", "s1_ckpt_dir", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False))
@click.option("--tag", default="last", type=click.Choice(["last", "best"]))
@click.option("--epochs", type=int, default=None)
def train_stage2_cmd(
    config_path, folds_path, fold, cache_dir, s1_cache_dir, s1_ckpt_dir, out_dir, tag, epochs
):
    """Train the volumetric network on cached stage-one artifacts for one fold."""
    import torch

    from .infer.pipeline import infer_preprocessed
    from .metrics import mean_foreground_dsc
    from .train.cache import load_stage1_cache, stage1_source_hash
    from .train.folds import FoldPlan
    from .train.patches import make_patch_source
    from .train.stage2 import Stage2Trainer

    cfg = _load_config(config_path)
    plan = FoldPlan.load(folds_path)
    train_ids, val_ids = plan.split(fold)
    path_a, path_b = _stage1_paths(Path(s1_ckpt_dir), tag)
    source = stage1_source_hash(path_a, path_b)
    rng = np.random.default_rng(cfg.seed + fold)
    sources = []
    for sid, vol, lab, _ in _load_cached_subjects(cfg, cache_dir, train_ids, need_labels=True):
        artifacts = load_stage1_cache(
            s1_cache_dir, sid, expect_source_hash=source, expect_config_hash=cfg.hash()
        )
        sources.append(
            make_patch_source(sid, vol, lab, artifacts, cfg.stage2.patch_size, rng)
        )
    val_set = []
    for sid, vol, lab, _ in _load_cached_subjects(cfg, cache_dir, val_ids, need_labels=True):
        artifacts = load_stage1_cache(
            s1_cache_dir, sid, expect_source_hash=source, expect_config_hash=cfg.hash()
        )
        val_set.append((vol, lab, artifacts))

    def val_fn(net):
        scores = []
        for vol, lab, artifacts in val_set:
            probs = infer_preprocessed(None, None, net, vol, cfg, artifacts=artifacts)
            pred = probs.argmax(dim=0).numpy()
            scores.append(mean_foreground_dsc(pred, lab.data, lab.num_classes))
        return float(np.mean(scores)) if scores else float("nan")

    trainer = Stage2Trainer(cfg, out_dir)
    history = trainer.fit(sources, val_fn=val_fn if val_set else None, epochs=epochs)
    cfg.save(Path(out_dir) / "config.yaml")
    click.echo(f"stage two done: {len(history)} epochs, final loss {history[-1]['total']:.4f}")


@cli.command("infer")
@_config_option
@click.option("--checkpoints", "ckpt_dirs", multiple=True, required=True,
              type=click.Path(exists=True, file_okay=False),
              help="One per fold; several are probability-ensembled.")
@click.option("--tag", default="last", type=click.Choice(["last", "best"]))
@click.option("--input", "input_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--out", "out_path", required=True, type=click.Path(dir_okay=False))
@click.option("--qc", "qc_path", default=None, type=click.Path(dir_okay=False),
              help="Write a mid-slice overlay PNG here.")
@click.option("--probs", "probs_path", default=None, type=click.Path(dir_okay=False),
              help="Write preprocessed-space class probabilities (npz) here.")
def infer_cmd(config_path, ckpt_dirs, tag, input_path, out_path, qc_path, probs_path):
    """Segment one volume and write the label map in its original geometry."""
    from .infer.pipeline import run_two_stage, write_qc_overlay
    from .preprocess import load_volume, save_labelmap

    cfg = _load_config(config_path)
    models = []
    for d in ckpt_dirs:
        net_a, net_b = _load_stage1_pair(cfg, Path(d), tag)
        models.append((net_a, net_b, _load_fine(cfg, Path(d), tag)))
    raw, _ = load_volume(input_path, mask_path=None)
    subject_id = Path(input_path).name.split(".")[0]
    labels, prov, probs = run_two_stage(subject_id, raw, models, cfg)
    Path(out_path).parent.mkdir(parents=True, exist_ok=True)
    save_labelmap(out_path, labels, raw.spacing)
    if qc_path:
        write_qc_overlay(qc_path, raw.data, labels)
    if probs_path:
        np.savez_compressed(probs_path, probs=probs.numpy(), provenance=prov.to_json())
    click.echo(f"{subject_id}: wrote {out_path} ({labels.shape}, {len(models)} model(s))")


@cli.command("evaluate")
@_config_option
@click.option("--pred", "pred_dir", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--gt", "gt_dir", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False))
def evaluate_cmd(config_path, pred_dir, gt_dir, out_dir):
    """Per-structure mean DSC between matching <subject>.nii[.gz] files."""
    from .metrics import format_report, structure_report, subject_dsc, write_dsc_csv
    from .nifti import read_nifti

    cfg = _load_config(config_path)
    pred_dir, gt_dir, out_dir = Path(pred_dir), Path(gt_dir), Path(out_dir)
    preds = sorted(p for p in pred_dir.iterdir() if p.name.endswith((".nii", ".nii.gz")))
    if not preds:
        raise ValueError(f"no predictions in {pred_dir}")
    per_subject = {}
    for pred_path in preds:
        sid = pred_path.name.split(".")[0]
        gt_path = gt_dir / pred_path.name
        if not gt_path.exists():
            raise ValueError(f"no ground truth for {sid!r} at {gt_path}")
        pred, _ = read_nifti(pred_path)
        gt, _ = read_nifti(gt_path)
        per_subject[sid] = subject_dsc(
            np.rint(pred).astype(np.int16), np.rint(gt).astype(np.int16), cfg.num_classes
        )
    out_dir.mkdir(parents=True, exist_ok=True)
    write_dsc_csv(out_dir / "dsc.csv", per_subject, cfg.num_classes)
    means, overall = structure_report(per_subject, cfg.num_classes)
    table = format_report(means, overall)
    (out_dir / "report.txt").write_text(table + "\n")
    click.echo(table)


@cli.command("report")
@_config_option
@click.option("--metrics", "metrics_path", required=True, type=click.Path(exists=True, dir_okay=False))
def report_cmd(config_path, metrics_path):
    """Render the per-structure table from a metrics CSV written by evaluate."""
    import csv as csv_mod

    from .labels import structure_names
    from .metrics import format_report

    cfg = _load_config(config_path)
    by_structure = {name: [] for name in structure_names(cfg.num_classes)}
    with open(metrics_path, newline="") as fh:
        for row in csv_mod.DictReader(fh):
            name, value = row["structure"], row["dsc"]
            if name not in by_structure:
                raise ValueError(f"unknown structure {name!r} in {metrics_path}")
            if value != "":
                by_structure[name].append(float(value))
    means = {n: (float(np.mean(v)) if v else None) for n, v in by_structure.items()}
    present = [v for vals in by_structure.values() for v in vals]
    overall = float(np.mean(present)) if present else float("nan")
    click.echo(format_report(means, overall))


def main(argv=None) -> int:
    try:
        cli.main(args=argv, standalone_mode=False)
        return 0
    except click.ClickException as err:
        err.show()
        return EXIT_VALIDATION
    except click.exceptions.Abort:
        click.echo("aborted", err=True)
        return EXIT_VALIDATION
    except (ValueError, FileNotFoundError, KeyError, TypeError) as err:
        click.echo(f"error: {err}", err=True)
        return EXIT_VALIDATION
    except Exception as err:  # noqa: BLE001 - boundary: everything else is a runtime failure
        click.echo(f"failure: {err}", err=True)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
