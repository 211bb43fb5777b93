"""Unit tests for report emission helpers and the command-line pipeline."""

import json
import os

import numpy as np
import pytest

from metashift import reporting, shift
from metashift.cli import main
from metashift.errors import MissingArtifactError, ValidationError


# ---------------------------------------------------------------------------
# reporting helpers

def test_config_hash_ignores_paths_and_runtime_flags():
    base = {"seed": 1, "tasks": "mini", "out": "/a", "jobs": 4, "func": print}
    moved = {"seed": 1, "tasks": "mini", "out": "/b", "jobs": 1, "func": id}
    assert reporting.config_hash(base) == reporting.config_hash(moved)
    assert reporting.config_hash({**base, "seed": 2}) != reporting.config_hash(base)


def test_csv_roundtrip_with_config_header(tmp_path):
    path = tmp_path / "x.csv"
    reporting.write_csv(path, ["a", "b"], [["1", "2.5"], ["3", "4.5"]], "deadbeef")
    assert path.read_text().startswith("# config=deadbeef\n")
    header, rows = reporting.read_csv(path)
    assert header == ["a", "b"]
    assert rows == [["1", "2.5"], ["3", "4.5"]]


def test_read_csv_errors(tmp_path):
    with pytest.raises(MissingArtifactError):
        reporting.read_csv(tmp_path / "nope.csv")
    empty = tmp_path / "e.csv"
    empty.write_text("# config=x\n")
    with pytest.raises(ValidationError):
        reporting.read_csv(empty)


def test_matrix_roundtrip_exact(tmp_path, rng):
    M = rng.standard_normal((3, 3))
    ids = [4, 7, 9]
    path = tmp_path / "m.csv"
    reporting.write_matrix_csv(path, M, ids, "h")
    back, back_ids = reporting.read_matrix_csv(path)
    assert back_ids == ids
    assert np.array_equal(back, M)  # repr() round-trips float64 exactly


def test_dendrogram_roundtrip(tmp_path):
    dend = shift.Dendrogram(3, [(0, 1, 1.5), (3, 2, 2.25)])
    path = tmp_path / "d.txt"
    reporting.write_dendrogram(path, dend, "h")
    back = reporting.read_dendrogram(path)
    assert back.n_leaves == 3
    assert back.merges == [(0, 1, 1.5), (3, 2, 2.25)]


def test_json_roundtrip_carries_config(tmp_path):
    path = tmp_path / "s.json"
    reporting.write_json(path, {"test": [1, 2]}, "abc")
    blob = reporting.read_json(path)
    assert blob["config"] == "abc"
    assert blob["test"] == [1, 2]


# ---------------------------------------------------------------------------
# CLI

def test_cli_generate_writes_archive_and_manifest(tmp_path):
    out = tmp_path / "arch"
    assert main(["generate", "--tasks", "mini", "--reps", "2",
                 "--out", str(out), "--seed", "3"]) == 0
    manifest = json.loads((out / "manifest.json").read_text())
    assert len(manifest["tasks"]) == 27
    assert len(list(out.glob("*.stsk"))) == 27


def test_cli_generate_refuses_nonempty_dir(tmp_path):
    out = tmp_path / "arch"
    main(["generate", "--tasks", "mini", "--reps", "2", "--out", str(out)])
    assert main(["generate", "--tasks", "mini", "--reps", "2",
                 "--out", str(out)]) == 2
    assert main(["generate", "--tasks", "mini", "--reps", "2",
                 "--out", str(out), "--force"]) == 0


def test_cli_missing_artifacts_exit_3(tmp_path):
    assert main(["report", "--out", str(tmp_path)]) == 3
    assert main(["eval", "--archive", str(tmp_path / "none"),
                 "--out", str(tmp_path)]) == 3


def test_cli_out_defaults_to_env_var(tmp_path, monkeypatch):
    monkeypatch.setenv("METASHIFT_OUT", str(tmp_path / "envout"))
    assert main(["report"]) == 3  # resolved the env root, then found no results
    assert (tmp_path / "envout").is_dir()


def test_cli_config_file_sets_defaults(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"tasks": "mini", "reps": 2, "seed": 8}))
    out = tmp_path / "arch"
    assert main(["--config", str(cfg), "generate", "--out", str(out)]) == 0
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["master_seed"] == 8
    # flags still override config values
    out2 = tmp_path / "arch2"
    assert main(["--config", str(cfg), "generate", "--out", str(out2),
                 "--seed", "9"]) == 0
    assert json.loads((out2 / "manifest.json").read_text())["master_seed"] == 9


def test_cli_ood_generation(tmp_path):
    out = tmp_path / "ood"
    assert main(["generate", "--tasks", "ood", "--bins", "3", "--reps", "4",
                 "--out", str(out)]) == 0
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["kind"] == "ood_snr"
    assert len(manifest["tasks"]) == 3
