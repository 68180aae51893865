"""Desk-scale end-to-end run on synthetic phantoms.

Generates n phantoms, holds the last n_held out (they double as the
transductive unlabeled pool for stage one), trains both stages with the
reduced config, and reports mean foreground DSC of the full two-stage
pipeline on the training and held-out subjects.

    python scripts/run_phantom_experiment.py --out /tmp/phantom_run
"""

import argparse
import dataclasses
import sys
import time
from pathlib import Path

import numpy as np
import torch

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

from spineseg.config import compact_config
from spineseg.infer.pipeline import infer_preprocessed
from spineseg.metrics import mean_foreground_dsc
from spineseg.phantom import make_phantom_dataset
from spineseg.preprocess import preprocess_subject
from spineseg.train.cache import compute_stage1_artifacts, validation_dsc
from spineseg.train.cps import Stage1Trainer
from spineseg.train.data2d import SliceDataset, slice_loader
from spineseg.train.patches import make_patch_source
from spineseg.train.stage2 import Stage2Trainer


def run(
    out_dir,
    n=8,
    n_held=2,
    epochs1=60,
    epochs2=40,
    seed=7,
    cps_weight=1.0,
    patches_per_subject=12,
    quiet=False,
):
    t0 = time.time()
    torch.set_num_threads(1)
    out_dir = Path(out_dir)
    cfg = compact_config(seed=seed)
    cfg = dataclasses.replace(
        cfg,
        stage1=dataclasses.replace(cfg.stage1, cps_weight=cps_weight, val_every=max(epochs1, 1)),
        stage2=dataclasses.replace(
            cfg.stage2,
            val_every=max(epochs2, 1),
            patches_per_subject=patches_per_subject,
        ),
    )

    def log(msg):
        if not quiet:
            print(f"[{time.time() - t0:7.1f}s] {msg}", flush=True)

    subjects = []
    for sid, vol, lab in make_phantom_dataset(n, seed=seed):
        v, l, _ = preprocess_subject(
            sid, vol, lab, cfg.data.target_spacing, cfg.data.inplane_size, cfg.data.min_depth
        )
        subjects.append((sid, v, l))
    train, held = subjects[: n - n_held], subjects[n - n_held :]
    log(f"{len(train)} training phantoms, {len(held)} held out")

    labeled_loader = slice_loader(SliceDataset(train), cfg.stage1.batch_size, cfg.seed)
    unlabeled_loader = None
    if cps_weight != 0.0 and held:
        pool = SliceDataset([(sid, vol, None) for sid, vol, _ in held])
        unlabeled_loader = slice_loader(pool, cfg.stage1.batch_size, cfg.seed + 1)

    s1 = Stage1Trainer(cfg, out_dir / "s1")
    hist1 = s1.fit(labeled_loader, unlabeled_loader, val_fn=None, epochs=epochs1)
    log(f"stage one: {epochs1} epochs, final loss {hist1[-1]['total']:.4f}")
    log(
        "stage-one DSC train={:.4f} held={:.4f}".format(
            validation_dsc(s1.net_a, s1.net_b, [(v, l) for _, v, l in train]),
            validation_dsc(s1.net_a, s1.net_b, [(v, l) for _, v, l in held]),
        )
    )

    rng = np.random.default_rng(cfg.seed)
    artifacts = {
        sid: compute_stage1_artifacts(s1.net_a, s1.net_b, vol) for sid, vol, _ in subjects
    }
    sources = [
        make_patch_source(sid, vol, lab, artifacts[sid], cfg.stage2.patch_size, rng)
        for sid, vol, lab in train
    ]
    log("stage-one artifacts cached")

    s2 = Stage2Trainer(cfg, out_dir / "s2")
    hist2 = s2.fit(sources, val_fn=None, epochs=epochs2)
    log(f"stage two: {epochs2} epochs, final loss {hist2[-1]['total']:.4f}")

    def two_stage_dsc(group):
        scores = []
        for sid, vol, lab in group:
            probs = infer_preprocessed(None, None, s2.net, vol, cfg, artifacts=artifacts[sid])
            pred = probs.argmax(dim=0).numpy()
            scores.append(mean_foreground_dsc(pred, lab.data, lab.num_classes))
        return float(np.mean(scores))

    train_dsc = two_stage_dsc(train)
    held_dsc = two_stage_dsc(held)
    log(f"two-stage DSC train={train_dsc:.4f} held={held_dsc:.4f}")
    return {"train_dsc": train_dsc, "held_dsc": held_dsc, "seconds": time.time() - t0}


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", required=True)
    ap.add_argument("--n", type=int, default=8)
    ap.add_argument("--held", type=int, default=2)
    ap.add_argument("--epochs1", type=int, default=60)
    ap.add_argument("--epochs2", type=int, default=40)
    ap.add_argument("--seed", type=int, default=7)
    ap.add_argument("--cps-weight", type=float, default=1.0)
    ap.add_argument("--pps", type=int, default=12, help="stage-two patches per subject per epoch")
    args = ap.parse_args()
    result = run(
        args.out,
        n=args.n,
        n_held=args.held,
        epochs1=args.epochs1,
        epochs2=args.epochs2,
        seed=args.seed,
        cps_weight=args.cps_weight,
        patches_per_subject=args.pps,
    )
    print(result)


if __name__ == "__main__":
    main()
