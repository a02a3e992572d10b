import json

import pytest

from jumpsupport.cli import main
from jumpsupport.errors import ConfigurationError
from jumpsupport.runner import run_scenario
from jumpsupport.scenario import (
    bundled_path,
    bundled_paths,
    build_scenario,
    list_scenarios,
    load_scenario,
    parse_text,
    validate_scenario,
)

TRIVIAL = bundled_path("trivial_constant")


def test_list_prints_every_bundled_scenario(capsys):
    assert main(["list"]) == 0
    out = capsys.readouterr().out
    for row in list_scenarios():
        assert row["file"] in out


def test_validate_bundled(capsys):
    assert main(["validate", str(TRIVIAL)]) == 0
    assert "trivial_constant: ok" in capsys.readouterr().out


@pytest.mark.parametrize("path", bundled_paths(), ids=lambda p: p.name)
def test_every_bundled_scenario_loads_and_validates(path):
    scen = load_scenario(path)
    assert isinstance(validate_scenario(scen), list)


def test_run_writes_reports(tmp_path, capsys):
    assert main(["run", str(TRIVIAL), "--out", str(tmp_path), "--paths", "50"]) == 0
    report = json.loads((tmp_path / "report.json").read_text())
    assert report["passed"] is True
    assert report["scenario"]["execution"]["n_paths"] == 50
    assert (tmp_path / "summary.txt").exists()
    assert (tmp_path / "path_0.csv").exists()
    assert "PASS" in capsys.readouterr().out


def test_failing_verdict_exits_one(tmp_path):
    data = json.loads(TRIVIAL.read_text())
    data["model"]["drift"] = {"kind": "constant", "value": [1.0]}
    cfg = tmp_path / "moving.json"
    cfg.write_text(json.dumps(data))
    assert main(["run", str(cfg), "--out", str(tmp_path / "out"), "--paths", "10"]) == 1


def test_parse_error_reports_line_and_column(tmp_path, capsys):
    cfg = tmp_path / "bad.json"
    cfg.write_text('{\n  "name": "x",\n  "model": {,}\n}\n')
    assert main(["validate", str(cfg)]) == 2
    err = capsys.readouterr().err
    assert "3:13" in err


def test_missing_field_names_its_path(tmp_path, capsys):
    data = json.loads(TRIVIAL.read_text())
    del data["model"]["levy"]["kind"]
    cfg = tmp_path / "missing.json"
    cfg.write_text(json.dumps(data))
    assert main(["validate", str(cfg)]) == 2
    assert "model.levy" in capsys.readouterr().err


def test_unknown_experiment_kind_rejected(tmp_path):
    data = json.loads(TRIVIAL.read_text())
    data["experiment"]["kind"] = "nonsense"
    with pytest.raises(ConfigurationError, match="nonsense"):
        run_scenario(build_scenario(data), tmp_path)


def test_parse_text_rejects_non_object():
    with pytest.raises(ConfigurationError):
        parse_text("[1, 2]")


@pytest.mark.parametrize("name", ["poisson_counts", "galerkin_first_coordinate"])
def test_reports_identical_across_thread_counts(tmp_path, name):
    cfg = str(bundled_path(name))
    outs = []
    for threads in (1, 4):
        out = tmp_path / f"t{threads}"
        main(["run", cfg, "--out", str(out), "--paths", "3000", "--threads", str(threads)])
        outs.append(out)
    assert (outs[0] / "report.json").read_bytes() == (outs[1] / "report.json").read_bytes()
    csvs = sorted(p.name for p in outs[0].glob("*.csv"))
    assert csvs
    for c in csvs:
        assert (outs[0] / c).read_bytes() == (outs[1] / c).read_bytes()
