import json

import numpy as np
import pytest
import torch
import yaml

from cardioforge import node
from cardioforge.augment import AugmentConfig, default_noise_bank, make_augmented_dataset
from cardioforge.cli import main
from cardioforge.create_model import DataConfig, RunConfig
from cardioforge.load_cfg import load_run_config, read_yaml, resolve_config_path
from cardioforge.node import build_splits, run_key
from cardioforge.signal_io import derive_seed, load_record, read_manifest
from cardioforge.state import Label
from cardioforge.train import augment_seed

SMOKE_CONFIG = """\
name: smoke
mode: single_pcg
target_fs: 4125
seed: 0
schedule:
  name: smoke
  stages:
    - sources: [original]
      epochs: 1
encoder_preset: toy
head: {hidden_size: 16}
fixtures: {n_subjects: 10, duration_s: 10.0}
train:
  optimizer: {batch_size: 8}
"""


def _run(capsys, tmp_path, *argv, out: str = "run") -> tuple[int, dict]:
    code = main([*argv, "--out", str(tmp_path / out), "--log-file", str(tmp_path / "cardioforge.log")])
    stdout, stderr = capsys.readouterr()
    stream = stdout if code == 0 else stderr
    return code, json.loads(stream.strip().splitlines()[-1])


def test_jobs_must_be_positive(capsys, tmp_path):
    code, error = _run(capsys, tmp_path, "fixtures", "--jobs", "0")
    assert code == 1
    assert error["error_type"] == "ArgumentError"


def test_unknown_command_is_rejected_by_the_parser():
    with pytest.raises(SystemExit) as excinfo:
        main(["deploy"])
    assert excinfo.value.code == 2


def test_missing_upstream_artifacts(capsys, tmp_path):
    code, error = _run(capsys, tmp_path, "report")
    assert code == 1
    assert (error["command"], error["error_type"]) == ("report", "ConfigError")

    code, error = _run(capsys, tmp_path, "preprocess")
    assert code == 1
    assert "fixtures" in error["message"]


def test_unknown_config_reference(capsys, tmp_path):
    code, error = _run(capsys, tmp_path, "fixtures", "--config", "no_such_preset")
    assert code == 1
    assert error["error_type"] == "ConfigError"


def test_fixtures_command(capsys, tmp_path):
    code, summary = _run(capsys, tmp_path, "fixtures", "--n-subjects", "4", "--seed", "7")
    assert code == 0
    assert (summary["status"], summary["n_subjects"], summary["n_abnormal"]) == ("ok", 4, 2)
    artifacts = json.loads((tmp_path / "run" / "artifacts.json").read_text(encoding="utf-8"))
    assert "fixtures/manifest.jsonl" in artifacts
    assert "resolved_config.yaml" in artifacts
    assert (tmp_path / "run" / "resolved_config.yaml").read_text(encoding="utf-8").count("seed: 7") == 1


def test_split_keys_per_mode(make_entries):
    entries = make_entries(8, 8)
    sites = ["aortic", "pulmonic", "tricuspid", "mitral"]
    multichannel = RunConfig(mode="multichannel", data=DataConfig(sites=sites, k_folds=4))
    splits = build_splits(entries, multichannel)
    assert sorted(splits) == [f"0_fold{i}" for i in range(4)]
    tested = [subject for split in splits.values() for subject in split["test"]]
    assert sorted(tested) == sorted(entry.subject_id for entry in entries)
    for split in splits.values():
        assert not set(split["train"]) & set(split["val"])
        assert not set(split["train"]) & set(split["test"])

    repeated = build_splits(entries, RunConfig(runs=2))
    assert sorted(repeated) == ["0", "1"]
    assert run_key({"run_id": "3", "fold": None}, RunConfig()) == "3"
    assert run_key({"fold": 2}, multichannel) == "0_fold2"


@pytest.mark.slow
def test_single_pcg_pipeline(capsys, tmp_path):
    config = tmp_path / "smoke.yaml"
    config.write_text(SMOKE_CONFIG, encoding="utf-8")
    for command in ("fixtures", "preprocess", "train", "evaluate"):
        code, summary = _run(capsys, tmp_path, command, "--config", str(config))
        assert code == 0, summary
    assert summary["run"] == "0"
    assert -1.0 <= summary["subject"]["mcc"] <= 1.0

    code, summary = _run(capsys, tmp_path, "report", "--config", str(config))
    assert code == 0
    assert summary["n_reports"] == 2
    run_dir = tmp_path / "run"
    assert (run_dir / "train" / "0" / "model.json").is_file()
    assert (run_dir / "report" / "summary.csv").is_file()
    splits = json.loads((run_dir / "preprocessed" / "splits.json").read_text(encoding="utf-8"))
    assert [len(splits["runs"]["0"][part]) for part in ("train", "val", "test")] == [6, 2, 2]


def _records(manifest, subjects=None):
    return [load_record(entry, manifest.parent) for entry in read_manifest(manifest)
            if subjects is None or entry.subject_id in subjects]


def test_exported_augmentations_match_training_copies(capsys, tmp_path):
    config = tmp_path / "augment.yaml"
    config.write_text(SMOKE_CONFIG.replace("      epochs: 1\n",
                                           "      epochs: 1\n      normal_augments: [1]\n      abnormal_augments: [2]\n"),
                      encoding="utf-8")
    for command in ("fixtures", "preprocess", "augment"):
        code, summary = _run(capsys, tmp_path, command, "--config", str(config))
        assert code == 0, summary
    assert summary["copies"] == {"Normal": 1, "Abnormal": 2}
    assert summary["n_augmented"] == 3 * 1 + 3 * 2

    run_dir = tmp_path / "run"
    splits = json.loads((run_dir / "preprocessed" / "splits.json").read_text(encoding="utf-8"))
    originals = _records(run_dir / "preprocessed" / "manifest.jsonl", set(splits["runs"]["0"]["train"]))
    cfg = load_run_config(RunConfig, config)
    expected = make_augmented_dataset(originals, {"Normal": 1, "Abnormal": 2}, cfg.train_config().augment,
                                      seed=augment_seed(derive_seed(cfg.seed, "train", "0"), "original"),
                                      bank=default_noise_bank(cfg.target_fs, seed=derive_seed(cfg.seed, "noise_bank")))
    exported = _records(run_dir / "augmented" / "0" / "manifest.jsonl")
    assert [r.provenance["record_id"] for r in exported] == [r.provenance["record_id"] for r in expected]
    for saved, built in zip(exported, expected):
        for saved_channel, built_channel in zip(saved.channels, built.channels):
            np.testing.assert_allclose(saved_channel.samples, built_channel.samples, atol=1e-6)


def test_evaluate_with_a_perfect_model(capsys, tmp_path, monkeypatch):
    config = tmp_path / "smoke.yaml"
    config.write_text(SMOKE_CONFIG, encoding="utf-8")
    for command in ("fixtures", "preprocess"):
        assert _run(capsys, tmp_path, command, "--config", str(config))[0] == 0
    model_path = tmp_path / "run" / "train" / "0" / "model.json"
    model_path.parent.mkdir(parents=True)
    model_path.write_text("{}", encoding="utf-8")
    monkeypatch.setattr(node, "load_model_checkpoint", lambda path: (None, {}))
    monkeypatch.setattr(node, "predict_fragments",
                        lambda model, fragments: np.array([Label(frag.label).index for frag in fragments], float))

    code, summary = _run(capsys, tmp_path, "evaluate", "--config", str(config))
    assert code == 0, summary
    assert summary["subject"] == {"acc": 1.0, "mcc": 1.0}
    assert summary["fragment"] == {"acc": 1.0, "mcc": 1.0}


@pytest.fixture
def torch_global_state():
    deterministic, threads = torch.are_deterministic_algorithms_enabled(), torch.get_num_threads()
    yield
    torch.use_deterministic_algorithms(deterministic)
    torch.set_num_threads(threads)


@pytest.mark.slow
def test_deterministic_reruns_are_byte_identical(capsys, tmp_path, torch_global_state):
    config = tmp_path / "smoke.yaml"
    config.write_text(SMOKE_CONFIG, encoding="utf-8")
    for out in ("first", "second"):
        for command in ("fixtures", "preprocess", "train", "evaluate", "report"):
            code, summary = _run(capsys, tmp_path, command, "--config", str(config), "--deterministic", out=out)
            assert code == 0, summary

    compared = [path.relative_to(tmp_path / "first") for path in sorted((tmp_path / "first").rglob("*"))
                if path.suffix in {".csv", ".json", ".jsonl"}]
    assert any(path.parts[0] == "report" for path in compared)
    assert any(path.parts[0] == "train" and path.name.startswith("epoch_") for path in compared)
    for path in compared:
        assert (tmp_path / "first" / path).read_bytes() == (tmp_path / "second" / path).read_bytes(), path


DESK_COMMANDS = ("fixtures", "preprocess", "synth-train", "synth-generate", "train", "evaluate")


def _without_augmentation(tmp_path):
    document = read_yaml(resolve_config_path("desk"))
    document["name"] = "desk_no_augment"
    document["train"]["augment_scale"] = 0.0
    document["train"]["augment"] = AugmentConfig.disabled().model_dump(mode="json")
    path = tmp_path / "desk_no_augment.yaml"
    path.write_text(yaml.safe_dump(document, sort_keys=False), encoding="utf-8")
    return path


@pytest.mark.slow
def test_desk_training_separates_fixture_subjects(capsys, tmp_path):
    plain = _without_augmentation(tmp_path)
    test_mcc, augmented_val, plain_val = [], [], []
    for seed in range(5):
        out = f"seed{seed}"
        for command in DESK_COMMANDS:
            code, summary = _run(capsys, tmp_path, command, "--config", "desk", "--seed", str(seed), out=out)
            assert code == 0, summary
            if command == "train":
                augmented_val.append(summary["best_val_mcc"])
        test_mcc.append(summary["subject"]["mcc"])
        code, summary = _run(capsys, tmp_path, "train", "--config", str(plain), "--seed", str(seed), out=out)
        assert code == 0, summary
        plain_val.append(summary["best_val_mcc"])

    assert sum(mcc >= 0.8 for mcc in test_mcc) >= 4, test_mcc
    assert np.mean(augmented_val) >= np.mean(plain_val), (augmented_val, plain_val)


@pytest.mark.slow
@pytest.mark.parametrize("preset, extra", [("desk_multimodal", []), ("desk_multichannel", ["--fold", "0"])])
def test_multi_input_pipelines(capsys, tmp_path, preset, extra):
    for command in (*DESK_COMMANDS, "report"):
        code, summary = _run(capsys, tmp_path, command, "--config", preset, *extra)
        assert code == 0, summary
    assert summary["n_reports"] == 2
    run_dir = tmp_path / "run"
    key = "0_fold0" if preset == "desk_multichannel" else "0"
    metrics = json.loads((run_dir / "eval" / key / "metrics.json").read_text(encoding="utf-8"))
    assert [report["level"] for report in metrics] == ["fragment", "subject"]
    assert all(-1.0 <= report["mcc"] <= 1.0 for report in metrics)
