import json
import subprocess
import sys

import jsonschema
import pytest

from gwclass.cli import REPORT_SCHEMA, load_config, main
from gwclass.errors import ConfigError
from gwclass.varsel import TRACE_SCHEMA

BASE = """
[run]
seed = 3
out = out

[synth]
n_units = 300
n_classes = 3
n_variables = 3
coefficient_field = east_west_sign_flip
redundancy = 0:0.97

[select]
use_selection = false

[global]
n_trees = 20

[autocorr]
n_perm = 99

[gw]
bandwidths = 50, 100
n_trees = 10
"""

STAGES = ["synth", "select-vars", "fit-global", "autocorr", "fit-gw", "report"]


def write_config(tmp_path, text=BASE, name="run.ini"):
    path = tmp_path / name
    path.write_text(text)
    return path


def run_all(cfg, out, workers=1):
    for stage in STAGES:
        assert main([stage, "--config", str(cfg), "--out", str(out),
                     "--workers", str(workers)]) == 0, stage


def snapshot(directory):
    return {p.name: p.read_bytes() for p in sorted(directory.iterdir())}


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("pipe")
    cfg = write_config(tmp)
    run_all(cfg, tmp / "a")
    return tmp, cfg


def test_rerun_byte_identical(pipeline):
    tmp, cfg = pipeline
    run_all(cfg, tmp / "b")
    a, b = snapshot(tmp / "a"), snapshot(tmp / "b")
    assert a.keys() == b.keys()
    for name in a:
        assert a[name] == b[name], name


def test_workers_do_not_change_outputs(pipeline):
    tmp, cfg = pipeline
    out = tmp / "w3"
    for stage in ["synth", "fit-gw"]:
        assert main([stage, "--config", str(cfg), "--out", str(out), "--workers", "3"]) == 0
    a = snapshot(tmp / "a")
    for name, data in snapshot(out).items():
        assert data == a[name], name


def test_one_file_set_per_class(pipeline):
    tmp, _ = pipeline
    names = {p.name for p in (tmp / "a").iterdir()}
    for c in range(3):
        assert {f"gw_logistic_{c}.csv", f"gw_forest_{c}.csv", f"bandwidth_logistic_{c}.csv",
                f"bandwidth_forest_{c}.csv", f"coefficients_{c}.csv"} <= names
    gw = json.loads((tmp / "a" / "gw_scores.json").read_text())
    for learner in ("logistic", "forest"):
        assert [r["class"] for r in gw["learners"][learner]["classes"]] == ["0", "1", "2"]
        assert all("n_skipped" in r for r in gw["learners"][learner]["classes"])


def test_trace_validates_against_schema(pipeline):
    tmp, _ = pipeline
    trace = json.loads((tmp / "a" / "selection_trace.json").read_text())
    jsonschema.validate(trace, TRACE_SCHEMA)
    assert trace["input_variables"] == ["x0", "x1", "x2", "x3"]


def test_report_schema_and_ordering(pipeline):
    tmp, _ = pipeline
    report = json.loads((tmp / "a" / "report.json").read_text())
    jsonschema.validate(report, REPORT_SCHEMA)
    assert set(report["global"]) == {"multinomial_lr", "forest"}
    for rows in report["coefficients"].values():
        means = [r["mean_abs"] for r in rows]
        assert means == sorted(means, reverse=True)
    assert set(report["learner_gap"]) == {"0", "1", "2"}


def test_report_missing_stage(tmp_path, capsys):
    cfg = write_config(tmp_path)
    out = tmp_path / "out"
    assert main(["synth", "--config", str(cfg)]) == 0
    assert main(["report", "--config", str(cfg)]) == 3
    err = capsys.readouterr().err
    assert "fit-global" in err
    assert not (out / "report.json").exists()


def test_fit_stage_without_synth_names_stage(tmp_path, capsys):
    cfg = write_config(tmp_path)
    assert main(["fit-global", "--config", str(cfg)]) == 3
    assert "'synth'" in capsys.readouterr().err


def test_selection_required_when_enabled(tmp_path, capsys):
    cfg = write_config(tmp_path, BASE.replace("use_selection = false", "use_selection = true"))
    assert main(["synth", "--config", str(cfg)]) == 0
    assert main(["fit-global", "--config", str(cfg)]) == 3
    assert "select-vars" in capsys.readouterr().err


@pytest.mark.parametrize("text", [
    BASE.replace("seed = 3\n", ""),                          # seeds are mandatory
    BASE.replace("n_units = 300", "n_units = 10"),           # invalid synthetic spec
    BASE.replace("n_classes = 3", "n_classes = three"),
    BASE.replace("[gw]", "[gw]\nkernel = triangle"),
    BASE.replace("[gw]", "[gw]\nbandwith = 4"),             # misspelt key
    BASE + "\n[extra]\nx = 1\n",
    BASE.replace("bandwidths = 50, 100", "bandwidths = 50, 1.5"),
])
def test_config_errors_exit_2(tmp_path, text):
    cfg = write_config(tmp_path, text)
    assert main(["synth", "--config", str(cfg)]) == 2
    assert not (tmp_path / "out" / "units.csv").exists()


def test_missing_config_file(tmp_path):
    assert main(["synth", "--config", str(tmp_path / "nope.ini")]) == 2


def test_bad_units_file_exit_3(tmp_path, capsys):
    (tmp_path / "units.csv").write_text("id,x,y,f1,label\na,0,0,1.0,0\nb,1,1,oops,1\n")
    cfg = write_config(tmp_path, "[run]\nseed = 1\n[data]\nunits = units.csv\n"
                                 "[select]\nuse_selection = false\n")
    assert main(["fit-global", "--config", str(cfg)]) == 3
    err = capsys.readouterr().err
    assert "row 3" in err and "f1" in err


def test_perfect_model_surface_exit_4(tmp_path, capsys):
    cfg = write_config(tmp_path)
    out = tmp_path / "out"
    out.mkdir()
    rows = ["unit_id,x,y,label,predicted,fold,error"]
    rows += [f"u{i},{i % 5},{i // 5},a,a,0,0" for i in range(25)]
    (out / "error_surface_forest.csv").write_text("\n".join(rows) + "\n")
    assert main(["autocorr", "--config", str(cfg)]) == 4
    assert "error" in capsys.readouterr().err


def test_separable_global_macro(tmp_path):
    # near-deterministic labels: the softmax is almost a hard argmax
    text = BASE.replace("coefficient_field = east_west_sign_flip", "coefficient_field = constant"
                        ).replace("n_units = 300", "n_units = 1500"
                        ).replace("n_variables = 3", "n_variables = 2"
                        ).replace("redundancy = 0:0.97", "base_coefficients = 0,0;500,0;0,500")
    cfg = write_config(tmp_path, text.replace("[global]", "[global]\nmodels = multinomial_lr"))
    assert main(["synth", "--config", str(cfg)]) == 0
    assert main(["fit-global", "--config", str(cfg)]) == 0
    scores = json.loads((tmp_path / "out" / "global_scores.json").read_text())
    assert scores["models"]["multinomial_lr"]["macro_f1"] >= 0.99


def test_config_overrides(tmp_path):
    cfg = load_config(write_config(tmp_path), out=str(tmp_path / "elsewhere"), workers=4)
    assert cfg.out == tmp_path / "elsewhere" and cfg.workers == 4
    assert cfg.data.units == tmp_path / "elsewhere" / "units.csv"
    assert cfg.gw.bandwidths == (50, 100)
    assert cfg.global_.fold_seed == 3
    with pytest.raises(ConfigError):
        load_config(write_config(tmp_path), workers=0)


def test_console_entry_point(tmp_path):
    cfg = write_config(tmp_path)
    res = subprocess.run([sys.executable, "-m", "gwclass.cli", "synth", "--config", str(cfg)],
                         capture_output=True, text=True)
    assert res.returncode == 0
    assert res.stdout.strip().splitlines()[0].endswith("units.csv")
    bad = subprocess.run([sys.executable, "-m", "gwclass.cli", "nonsense"], capture_output=True)
    assert bad.returncode == 2
