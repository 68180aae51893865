"""End-to-end CLI contract: exit codes and the full subcommand chain."""

import dataclasses
import shutil

import numpy as np
import pytest

from spineseg.cli import cli, main
from spineseg.config import compact_config
from spineseg.nifti import read_nifti
from spineseg.phantom import write_phantom_dataset

SUBCOMMANDS = [
    "preprocess",
    "make-folds",
    "train-stage1",
    "cache-stage1",
    "train-stage2",
    "infer",
    "evaluate",
    "report",
]


def test_all_subcommands_registered():
    assert sorted(cli.commands) == sorted(SUBCOMMANDS)


@pytest.fixture(scope="session")
def cli_tree(tmp_path_factory):
    """Phantom dataset + config file shared by the pipeline chain tests."""
    root = tmp_path_factory.mktemp("cli")
    manifest = write_phantom_dataset(root / "data", n=4, seed=2, n_unlabeled=1)
    cfg = compact_config()
    cfg = dataclasses.replace(
        cfg,
        n_folds=2,
        stage1=dataclasses.replace(cfg.stage1, epochs=1, batch_size=4),
        stage2=dataclasses.replace(cfg.stage2, epochs=1, batch_size=2, patches_per_subject=2),
    )
    cfg_path = root / "config.yaml"
    cfg.save(cfg_path)
    return {"root": root, "manifest": str(manifest), "config": str(cfg_path)}


class TestExitCodes:
    def test_unknown_command_is_validation(self, capsys):
        assert main(["frobnicate"]) == 1
        capsys.readouterr()

    def test_missing_required_option_is_validation(self, capsys):
        assert main(["preprocess"]) == 1
        capsys.readouterr()

    def test_missing_input_file_is_validation(self, tmp_path, capsys):
        code = main(
            ["make-folds", "--manifest", str(tmp_path / "nope.yaml"), "--out", str(tmp_path / "f")]
        )
        assert code == 1
        capsys.readouterr()

    def test_domain_validation_error(self, cli_tree, tmp_path, capsys):
        # manifest declares 8 classes; the default config expects 20
        code = main(
            ["preprocess", "--manifest", cli_tree["manifest"], "--out", str(tmp_path / "pp")]
        )
        assert code == 1
        assert "classes" in capsys.readouterr().err

    def test_runtime_failure_maps_to_two(self, cli_tree, tmp_path, capsys, monkeypatch):
        import spineseg.preprocess as pp

        def boom(*a, **k):
            raise RuntimeError("backend fell over")

        monkeypatch.setattr(pp, "preprocess_subject", boom)
        code = main(
            [
                "preprocess", "--config", cli_tree["config"],
                "--manifest", cli_tree["manifest"], "--out", str(tmp_path / "pp"),
            ]
        )
        assert code == 2
        assert "failure" in capsys.readouterr().err


@pytest.fixture(scope="session")
def pipeline_run(cli_tree):
    """Drive the whole chain once; individual tests assert on the artifacts."""
    root = cli_tree["root"]
    c = ["--config", cli_tree["config"]]
    steps = [
        ["preprocess", *c, "--manifest", cli_tree["manifest"], "--out", str(root / "pp")],
        ["make-folds", *c, "--manifest", cli_tree["manifest"], "--out", str(root / "folds.json")],
        [
            "train-stage1", *c, "--folds", str(root / "folds.json"), "--fold", "0",
            "--cache", str(root / "pp"), "--out", str(root / "s1"),
        ],
        [
            "cache-stage1", *c, "--folds", str(root / "folds.json"),
            "--cache", str(root / "pp"), "--checkpoints", str(root / "s1"),
            "--out", str(root / "s1cache"),
        ],
        [
            "train-stage2", *c, "--folds", str(root / "folds.json"), "--fold", "0",
            "--cache", str(root / "pp"), "--stage1-cache", str(root / "s1cache"),
            "--stage1-checkpoints", str(root / "s1"), "--out", str(root / "s2"),
        ],
        [
            "infer", *c, "--checkpoints", str(root / "s1"),
            "--input", str(root / "data" / "phantom00" / "image.nii.gz"),
            "--out", str(root / "pred" / "phantom00.nii.gz"),
            "--qc", str(root / "pred" / "phantom00.png"),
            "--probs", str(root / "pred" / "phantom00_probs.npz"),
        ],
    ]
    codes = {}
    for step in steps:
        if step[0] == "infer":
            # infer expects the stage-two checkpoint beside the stage-one pair
            shutil.copy(root / "s2" / "stage2_last.npz", root / "s1" / "stage2_last.npz")
        codes[step[0]] = main(step)
    return {"root": root, "codes": codes}


class TestPipelineChain:
    def test_every_step_succeeds(self, pipeline_run):
        assert all(code == 0 for code in pipeline_run["codes"].values()), pipeline_run["codes"]

    def test_artifacts_exist(self, pipeline_run):
        root = pipeline_run["root"]
        for rel in (
            "pp/phantom00.npz",
            "folds.json",
            "s1/stage1_a_last.npz",
            "s1/stage1_log.csv",
            "s1cache/phantom00.stage1.npz",
            "s2/stage2_last.npz",
            "pred/phantom00.nii.gz",
            "pred/phantom00.png",
            "pred/phantom00_probs.npz",
        ):
            assert (root / rel).exists(), rel

    def test_prediction_matches_input_grid(self, pipeline_run):
        root = pipeline_run["root"]
        pred, _ = read_nifti(root / "pred" / "phantom00.nii.gz")
        image, _ = read_nifti(root / "data" / "phantom00" / "image.nii.gz")
        assert pred.shape == image.shape
        assert np.all(pred == np.rint(pred))

    def test_evaluate_and_report(self, pipeline_run, cli_tree, capsys):
        root = pipeline_run["root"]
        gt_dir = root / "gt"
        gt_dir.mkdir(exist_ok=True)
        shutil.copy(root / "data" / "phantom00" / "mask.nii.gz", gt_dir / "phantom00.nii.gz")
        code = main(
            [
                "evaluate", "--config", cli_tree["config"],
                "--pred", str(root / "pred"), "--gt", str(gt_dir),
                "--out", str(root / "metrics"),
            ]
        )
        assert code == 0
        assert (root / "metrics" / "dsc.csv").exists()
        assert (root / "metrics" / "report.txt").exists()
        capsys.readouterr()
        code = main(
            [
                "report", "--config", cli_tree["config"],
                "--metrics", str(root / "metrics" / "dsc.csv"),
            ]
        )
        assert code == 0
        out = capsys.readouterr().out
        assert "overall" in out
        assert "structure" in out

    def test_checkpoint_config_mismatch_is_validation(self, pipeline_run, capsys):
        root = pipeline_run["root"]
        code = main(
            [
                "infer",  # no --config: defaults mismatch the trained checkpoints
                "--checkpoints", str(root / "s1"),
                "--input", str(root / "data" / "phantom00" / "image.nii.gz"),
                "--out", str(root / "pred" / "again.nii.gz"),
            ]
        )
        assert code == 1
        capsys.readouterr()
