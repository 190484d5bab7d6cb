import csv
import hashlib
import json
import os
import subprocess
import sys

import pytest

from radiogenomic.cli import COMMANDS, EXIT_CONFIG, EXIT_DATA, EXIT_OK, FOLD_TABLE_COLUMNS, load_config, main

TINY = {
    "seed": 0,
    "out": "run",
    "phantom": {"n_cases": 12, "spec": {"grid": [16, 16, 16], "n_genes": 150, "wt_radius": [3, 5],
                                        "missing_fraction": 0.25, "module_size": 10}},
    "synthesis": {"train": {"steps": 20, "batch": 4, "eval_every": 10, "depth": 2}},
    "segmentation": {"train": {"steps": 20, "batch": 4, "depth": 2, "lr": 0.003}},
    "ablation": {"train": {"steps": 10, "batch": 4, "depth": 2}},
    "features": {"mask_source": "truth", "scales": [1, 2, 4]},
    "survival": {"models": ["SVR", "SVC"], "rfe_targets": {"radiomic": 4, "genomic": 6}, "folds": 3},
    "explain": {"budget": 64, "background": 5},
}


def write_config(folder, **overrides):
    cfg = {**TINY, **overrides}
    path = folder / "config.json"
    path.write_text(json.dumps(cfg))
    return str(path)


def run(config, command, *extra):
    return main(["--log-level", "ERROR", command, "--config", config, *extra])


def tree_digest(root):
    out = {}
    for dirpath, _, files in os.walk(root):
        for f in files:
            p = os.path.join(dirpath, f)
            out[os.path.relpath(p, root)] = hashlib.sha256(open(p, "rb").read()).hexdigest()
    return out


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    folder = tmp_path_factory.mktemp("cli")
    config = write_config(folder)
    for command in COMMANDS:
        assert run(config, command) == EXIT_OK, command
    return folder, config, folder / "run"


# ---------------------------------------------------------------- pipeline contract


def test_segmentation_metrics_csv(pipeline):
    _, _, out = pipeline
    rows = read_rows(out / "segmentation" / "metrics.csv")
    assert rows[0][:7] == ["model", "dice_et", "dice_wt", "dice_tc", "hd_et", "hd_wt", "hd_tc"]
    assert len(rows) == 1 + 4 + 1
    for row in rows[1:]:
        dices = [float(v) for v in row[1:4]]
        assert all(0.0 <= d <= 1.0 for d in dices)
        [float(v) for v in row[4:7]]


def test_report_outputs(pipeline):
    _, _, out = pipeline
    rows = read_rows(out / "report" / "folds_fused_SVR.csv")
    assert rows[0] == list(FOLD_TABLE_COLUMNS)
    assert rows[-1][0] == "average"
    for name in ("shap_bar.png", "mse_by_feature_set.png", "psnr.png", "ablation.png"):
        data = (out / "report" / name).read_bytes()
        assert data.startswith(b"\x89PNG") and len(data) > 1000
    comparison = read_rows(out / "report" / "feature_set_comparison.csv")
    assert {r[0] for r in comparison[1:]} == {"radiomic", "genomic", "fused"}


def test_every_command_writes_run_metadata(pipeline):
    _, _, out = pipeline
    for command in COMMANDS:
        meta = json.loads((out / "runs" / f"{command}.json").read_text())
        assert meta["seed"] == 0
        assert len(meta["config_hash"]) == 64
        assert {"numpy", "torch", "scikit-learn"} <= set(meta["versions"])
        for rel in meta["outputs"]:
            assert (out / rel).exists(), rel


def test_synthesis_fills_withheld_modalities(pipeline):
    _, _, out = pipeline
    rows = read_rows(out / "completed" / "provenance.csv")
    assert rows[0] == ["case_id", "T1c", "Flair", "T2"]
    assert len(rows) == 13
    assert sum(r[3] == "synthesized" for r in rows[1:]) == 3
    assert all(r[1] == r[2] == "real" for r in rows[1:])


def test_rerun_gives_identical_csvs(pipeline):
    folder, config, out = pipeline
    for command in COMMANDS:
        assert run(config, command, "--out", str(folder / "again")) == EXIT_OK, command
    first = {k: v for k, v in tree_digest(out).items() if k.endswith(".csv")}
    second = {k: v for k, v in tree_digest(folder / "again").items() if k.endswith(".csv")}
    assert len(first) >= 15
    assert first == second


def test_commands_are_idempotent_and_leave_inputs_alone(pipeline):
    folder, config, out = pipeline
    dataset_before = tree_digest(out / "dataset")
    outside_before = {k for k in tree_digest(folder) if not k.startswith(("run" + os.sep, "again" + os.sep))}
    before = tree_digest(out / "survival")
    for command in ("features-extract", "survival-train", "survival-eval"):
        assert run(config, command) == EXIT_OK
    assert tree_digest(out / "survival") == before
    assert tree_digest(out / "dataset") == dataset_before
    outside_after = {k for k in tree_digest(folder) if not k.startswith(("run" + os.sep, "again" + os.sep))}
    assert outside_after == outside_before


# ---------------------------------------------------------------- errors


def test_unknown_command_prints_usage():
    proc = subprocess.run([sys.executable, "-m", "radiogenomic.cli", "frobnicate"], capture_output=True, text=True)
    assert proc.returncode != 0
    assert "usage" in proc.stderr
    proc = subprocess.run([sys.executable, "-m", "radiogenomic.cli"], capture_output=True, text=True)
    assert proc.returncode == EXIT_CONFIG
    assert "usage" in proc.stderr


@pytest.mark.parametrize("overrides, message", [
    ({"segmentation": {"trian": {}}}, "segmentation.trian"),
    ({"segmentation": {"folds": "four"}}, "segmentation.folds"),
    ({"phantom": {"spec": {"grid": [2, 2, 2]}}}, "phantom.spec"),
    ({"survival": {"models": ["SVM"]}}, "survival.models"),
    ({"dataset": "nowhere"}, "dataset"),
])
def test_invalid_config_names_the_field(tmp_path, capsys, overrides, message):
    config = write_config(tmp_path, **overrides)
    assert run(config, "seg-train") == EXIT_CONFIG
    assert message in capsys.readouterr().err


def test_seed_is_required(tmp_path, capsys):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"out": "x"}))
    assert run(str(path), "phantom-generate") == EXIT_CONFIG
    assert "seed" in capsys.readouterr().err
    assert run(str(path), "phantom-generate", "--seed", "3", "--out", str(tmp_path / "o")) == EXIT_OK


def test_missing_stage_input_is_data_error(tmp_path, capsys):
    config = write_config(tmp_path)
    assert run(config, "seg-train") == EXIT_DATA
    assert "phantom-generate" in capsys.readouterr().err


def test_flags_override_config(tmp_path):
    config = write_config(tmp_path)
    cfg = load_config(config, 9, str(tmp_path / "elsewhere"))
    assert cfg.seed == 9
    assert cfg.out == str(tmp_path / "elsewhere")
    cfg = load_config(config, None, None)
    assert cfg.seed == 0 and cfg.out == str(tmp_path / "run")
