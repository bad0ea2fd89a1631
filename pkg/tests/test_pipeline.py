from __future__ import annotations

import json
import logging

import pytest

from cfiguard.cli import main
from cfiguard.detector import AlertReport
from cfiguard.neuralnet import Model
from cfiguard.payloads import read_manifest

ENV = {
    "CFIGUARD_SEED": "3",
    "CFIGUARD_HIDDEN": "32,16",
    "CFIGUARD_EPOCHS": "3",
    "CFIGUARD_BATCH_SIZE": "64",
    "CFIGUARD_LEARNING_RATE": "0.05",
    "CFIGUARD_MIN_GADGETS": "80",
    "CFIGUARD_SIM_STEPS": "3000",
    "CFIGUARD_PAYLOAD_COUNT": "8",
}


@pytest.fixture(autouse=True)
def isolated_logger():
    logger = logging.getLogger("cfiguard")
    saved = list(logger.handlers)
    for handler in saved:
        logger.removeHandler(handler)
    yield
    for handler in list(logger.handlers):
        handler.close()
        logger.removeHandler(handler)
    for handler in saved:
        logger.addHandler(handler)


@pytest.fixture
def workspace(monkeypatch, tmp_path):
    for key, value in ENV.items():
        monkeypatch.setenv(key, value)
    monkeypatch.setenv("CFIGUARD_RUNTIME_DIR", str(tmp_path / "runtime"))
    return tmp_path


def _stages(root):
    work = root / "work"
    return {
        "listing": work / "program.listing",
        "truth": work / "program.truth",
        "cfg": work / "cfg.json",
        "table": work / "offsets.table",
        "trace": work / "benign.dctr",
        "refined": work / "cfg.refined.json",
        "chains": work / "chains.txt",
        "dataset": work / "dataset.bin",
        "model": work / "model.json",
        "baseline": work / "baseline.json",
        "attacks": work / "attacks",
        "reports": work / "reports",
    }


def _build_artifacts(paths) -> None:
    steps = [
        ["synth", "--out", str(paths["listing"]), "--truth", str(paths["truth"])],
        ["cfg", "build", str(paths["listing"]), "--out", str(paths["cfg"])],
        ["table", "build", str(paths["cfg"]), "--out", str(paths["table"])],
        ["simulate", str(paths["cfg"]), "--truth", str(paths["truth"]), "--out", str(paths["trace"])],
        ["cfg", "refine", str(paths["cfg"]), str(paths["trace"]), "--table", str(paths["table"]), "--out", str(paths["refined"])],
        ["chains", "split", str(paths["refined"]), "--out", str(paths["chains"])],
        ["dataset", "build", str(paths["chains"]), "--table", str(paths["table"]), "--out", str(paths["dataset"])],
        ["train", str(paths["dataset"]), "--out", str(paths["model"])],
        ["baseline", str(paths["dataset"]), "--out", str(paths["baseline"])],
        ["attack", "gen", str(paths["refined"]), str(paths["trace"]), "--out", str(paths["attacks"])],
    ]
    for argv in steps:
        assert main(argv) == 0, argv


def test_end_to_end_pipeline(workspace, capsys):
    paths = _stages(workspace)
    _build_artifacts(paths)
    capsys.readouterr()

    assert main(["eval", str(paths["dataset"]), "--model", str(paths["model"]), "--baseline", str(paths["baseline"])]) == 0
    output = capsys.readouterr().out
    assert output.startswith("accuracy ")
    assert "Method" in output and "LR" in output
    assert (workspace / "runtime" / "reports" / "eval.json").is_file()
    eval_out = workspace / "work" / "eval_test.json"
    assert main(["eval", str(paths["dataset"]), "--model", str(paths["model"]), "--out", str(eval_out)]) == 0
    assert json.loads(eval_out.read_text())["partition"] == "test"

    records = read_manifest(paths["attacks"] / "manifest.jsonl")
    assert len(records) == 8
    attack_traces = [str(paths["attacks"] / record.trace) for record in records]

    benign_exit = main(
        ["detect", str(paths["trace"]), "--cfg", str(paths["refined"]), "--table", str(paths["table"]),
         "--oracle", "--out", str(paths["reports"])]
    )
    assert benign_exit == 0
    benign_report = AlertReport.read(paths["reports"] / "benign.report.json")
    assert not benign_report.detected
    assert benign_report.classifier == "oracle"

    attack_exit = main(
        ["detect", *attack_traces, "--cfg", str(paths["refined"]), "--table", str(paths["table"]),
         "--oracle", "--jobs", "4", "--out", str(paths["reports"])]
    )
    assert attack_exit == 3
    summary = [json.loads(line) for line in (paths["reports"] / "detect_summary.jsonl").read_text().splitlines()]
    assert [row["trace"] for row in summary] == [record.trace for record in records]
    assert all(row["detected"] for row in summary)
    capsys.readouterr()

    report_paths = [str(paths["reports"] / f"attack_{number:03d}.report.json") for number in range(8)]
    assert main(["report", *report_paths, "--manifest", str(paths["attacks"] / "manifest.jsonl")]) == 0
    output = capsys.readouterr().out
    assert "payload-level detection: 8/8" in output
    assert "missed:" not in output

    model_exit = main(
        ["detect", str(paths["trace"]), *attack_traces[:2], "--cfg", str(paths["refined"]),
         "--table", str(paths["table"]), "--model", str(paths["model"]), "--out", str(paths["reports"])]
    )
    assert model_exit in (0, 3)
    assert AlertReport.read(paths["reports"] / "benign.report.json").provenance["model"] == Model.read(paths["model"]).digest


def test_pipeline_is_deterministic(workspace, capsys):
    first = _stages(workspace / "first")
    second = _stages(workspace / "second")
    _build_artifacts(first)
    _build_artifacts(second)
    capsys.readouterr()

    for name in ("listing", "truth", "cfg", "table", "trace", "refined", "chains", "dataset", "model", "baseline"):
        assert first[name].read_bytes() == second[name].read_bytes(), name
    assert (first["attacks"] / "manifest.jsonl").read_text() == (second["attacks"] / "manifest.jsonl").read_text()


def test_missing_input_file_exits_1(workspace):
    paths = _stages(workspace)
    assert main(["cfg", "build", str(paths["listing"])]) == 1


def test_bad_ratios_exit_1(workspace, capsys):
    assert main(["dataset", "build", "chains.txt", "--table", "t.table", "--ratios", "0.8,0.1,0.2"]) == 1
    assert "ratios must sum to 1" in capsys.readouterr().err


def test_usage_error_exits_1(workspace):
    with pytest.raises(SystemExit) as excinfo:
        main(["detect"])
    assert excinfo.value.code == 1


def test_detect_needs_model_or_oracle(workspace):
    paths = _stages(workspace)
    assert main(["synth", "--out", str(paths["listing"]), "--truth", str(paths["truth"])]) == 0
    assert main(["cfg", "build", str(paths["listing"]), "--out", str(paths["cfg"])]) == 0
    assert main(["table", "build", str(paths["cfg"]), "--out", str(paths["table"])]) == 0
    assert main(["detect", str(paths["listing"]), "--cfg", str(paths["cfg"]), "--table", str(paths["table"])]) == 1


def test_corrupt_trace_exits_2(workspace):
    paths = _stages(workspace)
    assert main(["synth", "--out", str(paths["listing"]), "--truth", str(paths["truth"])]) == 0
    assert main(["cfg", "build", str(paths["listing"]), "--out", str(paths["cfg"])]) == 0
    assert main(["table", "build", str(paths["cfg"]), "--out", str(paths["table"])]) == 0
    bogus = workspace / "bogus.dctr"
    bogus.write_bytes(b"NOPE" + bytes(17))

    assert main(["detect", str(bogus), "--cfg", str(paths["cfg"]), "--table", str(paths["table"]), "--oracle"]) == 2


def test_corrupt_cfg_exits_2(workspace):
    broken = workspace / "cfg.json"
    broken.write_text("{not json", encoding="utf-8")
    assert main(["table", "build", str(broken), "--out", str(workspace / "t.table")]) == 2


def _summary(reports_dir):
    return [json.loads(line) for line in (reports_dir / "detect_summary.jsonl").read_text().splitlines()]


@pytest.mark.slow
def test_full_scale_accuracy(monkeypatch, tmp_path, capsys):
    monkeypatch.setenv("CFIGUARD_RUNTIME_DIR", str(tmp_path / "runtime"))
    monkeypatch.setenv("CFIGUARD_MIN_GADGETS", "500")
    monkeypatch.setenv("CFIGUARD_SEED", "1")
    monkeypatch.setenv("CFIGUARD_PAYLOAD_COUNT", "64")
    paths = _stages(tmp_path)
    _build_artifacts(paths)
    capsys.readouterr()

    assert main(["eval", str(paths["dataset"]), "--model", str(paths["model"])]) == 0
    metrics = json.loads((tmp_path / "runtime" / "reports" / "eval.json").read_text())["rows"]["Model"]
    assert metrics["accuracy"] >= 0.97
    assert metrics["false_positive_rate"] <= 0.02
    assert metrics["false_negative_rate"] <= 0.02

    records = read_manifest(paths["attacks"] / "manifest.jsonl")
    assert len(records) == 64
    attack_traces = [str(paths["attacks"] / record.trace) for record in records]
    attack_reports = paths["reports"] / "attacks"
    assert main(
        ["detect", *attack_traces, "--cfg", str(paths["refined"]), "--table", str(paths["table"]),
         "--model", str(paths["model"]), "--jobs", "4", "--out", str(attack_reports)]
    ) == 3
    assert sum(row["detected"] for row in _summary(attack_reports)) == 64

    controls = []
    for number in range(64):
        control = tmp_path / "work" / "controls" / f"control_{number:03d}.dctr"
        assert main(
            ["simulate", str(paths["cfg"]), "--truth", str(paths["truth"]), "--seed", str(1000 + number),
             "--out", str(control)]
        ) == 0
        controls.append(str(control))
    control_reports = paths["reports"] / "controls"
    assert main(
        ["detect", *controls, "--cfg", str(paths["refined"]), "--table", str(paths["table"]),
         "--model", str(paths["model"]), "--jobs", "4", "--out", str(control_reports)]
    ) in (0, 3)
    assert sum(row["detected"] for row in _summary(control_reports)) <= 2
