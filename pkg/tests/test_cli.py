import json

import pytest

from brainstacks.cli import EXIT_CONFIG, EXIT_NUMERIC, EXIT_PREREQ, main

from conftest import micro_config


@pytest.fixture
def cfg_path(tmp_path):
    p = tmp_path / "config.json"
    micro_config(tmp_path / "out").save(p)
    return p


@pytest.mark.parametrize(
    "argv",
    [["train"], ["oracle"], ["train-router"], ["eval"], ["generate", "calc 1+2"], ["report", "comparison"], ["compare-lora"]],
)
def test_missing_prerequisites_exit_3(cfg_path, argv, capsys):
    assert main(argv + ["--config", str(cfg_path)]) == EXIT_PREREQ
    assert "missing prerequisite" in capsys.readouterr().err


def test_missing_config_file_exits_2(tmp_path, capsys):
    assert main(["pretrain", "--config", str(tmp_path / "nope.json")]) == EXIT_CONFIG
    assert "config" in capsys.readouterr().err


def test_malformed_config_exits_2(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text(json.dumps({"domains": ["format", "poetry"]}))
    assert main(["pretrain", "--config", str(p)]) == EXIT_CONFIG


def test_unknown_dump_domain_exits_2(cfg_path):
    assert main(["dump-data", "--domain", "poetry", "--config", str(cfg_path)]) == EXIT_CONFIG


def test_dump_data_writes_jsonl(cfg_path, tmp_path, capsys):
    assert main(["dump-data", "--domain", "arithmetic", "--config", str(cfg_path)]) == 0
    paths = capsys.readouterr().out.split()
    assert paths and all("arithmetic_" in p for p in paths)
    first = json.loads(open(paths[0]).readline())
    assert first["domain"] == "arithmetic"


def test_seed_and_out_overrides(cfg_path, tmp_path):
    out = tmp_path / "elsewhere"
    assert main(["pretrain", "--config", str(cfg_path), "--seed", "3", "--out", str(out)]) == 0
    assert (out / "base.bin").exists()


def test_numeric_failure_exits_4(micro_run, tmp_path, monkeypatch):
    from brainstacks import pipeline
    from brainstacks.errors import TrainingInstabilityError

    def boom(*a, **k):
        raise TrainingInstabilityError("non-finite loss", param_name="loss")

    monkeypatch.setattr(pipeline, "train", boom)
    assert main(["train", "--config", str(micro_run / "config.json"), "--out", str(tmp_path)]) == EXIT_NUMERIC


def test_generate_reports_weights_and_loads(micro_run, capsys):
    assert main(["generate", "calc 12+34", "--max-new", "4", "--config", str(micro_run / "config.json")]) == 0
    out = capsys.readouterr().out
    assert out.startswith("weights: ") and "format=" in out and "loaded:" in out


def test_eval_single_mode(micro_run, capsys):
    assert main(["eval", "--mode", "isolated", "--config", str(micro_run / "config.json")]) == 0
    assert set(json.loads(capsys.readouterr().out)) == {"isolated"}
    # restore the full eval for report tests that share the run
    assert main(["eval", "--config", str(micro_run / "config.json")]) == 0


def test_train_resume_on_complete_run_is_a_noop(micro_run):
    manifest = (micro_run / "ns" / "manifest.json").read_text()
    assert main(["train", "--resume", "--config", str(micro_run / "config.json")]) == 0
    assert (micro_run / "ns" / "manifest.json").read_text() == manifest
