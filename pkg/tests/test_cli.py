import csv
import json
import subprocess
import sys

import pytest

from stoplab.cli import CONFIG_SCHEMA, Config, main
from stoplab.errors import ConfigError

SMALL = {"grid": {"dt": 1e-3, "horizon": 1.0},
         "family": {"initial": 0.1, "levels": 3},
         "sizes": {"outer": 6, "continuations": 50, "paths": 100}}


def _write(tmp_path, doc, name="cfg.json"):
    p = tmp_path / name
    p.write_text(json.dumps({"schema_version": 1, **doc}))
    return str(p)


def _err(capsys):
    return json.loads(capsys.readouterr().err.strip().splitlines()[-1])


def test_verify_identity_writes_both_artifacts(tmp_path, capsys):
    cfg = _write(tmp_path, {"experiment": "check:product_drift", "seed": 3, **SMALL})
    code = main(["verify", "--config", cfg, "--out", str(tmp_path / "o")])
    assert code == 0
    out = capsys.readouterr().out.splitlines()
    assert out[0] == "id,verdict,left,right,stderr,seed,runtime_s"
    assert out[1].startswith("product_drift,pass,") and out[1].endswith(",3,")
    for f in ("check_product_drift.csv", "check_product_drift.json",
              "check_product_drift_report.json"):
        assert (tmp_path / "o" / f).exists()


def test_format_json_and_runtime(tmp_path, capsys):
    cfg = _write(tmp_path, {"experiment": "check:linearity", "seed": 3, **SMALL})
    main(["verify", "--config", cfg, "--out", str(tmp_path), "--format", "json",
          "--record-runtime"])
    doc = json.loads(capsys.readouterr().out)
    assert doc[0]["id"] == "linearity" and doc[0]["runtime_s"] > 0
    assert set(doc[0]) >= {"id", "verdict", "left", "right", "stderr", "ci", "tolerances",
                           "seed", "runtime_s"}


def test_seed_override_and_missing_seed(tmp_path, capsys):
    cfg = _write(tmp_path, {"experiment": "check:linearity", **SMALL})
    assert main(["verify", "--config", cfg, "--out", str(tmp_path)]) == 2
    assert _err(capsys)["field"] == "seed"
    assert main(["verify", "--config", cfg, "--out", str(tmp_path), "--seed", "9"]) == 0
    row = (tmp_path / "check_linearity.csv").read_text().splitlines()[1]
    assert row.split(",")[5] == "9"


@pytest.mark.parametrize("doc,field", [
    ({"grid": {"dt": -1e-3}}, "grid.dt"),
    ({"grid": {"dt": 1e-3, "step": 2}}, "grid.step"),
    ({"colour": "red"}, "colour"),
    ({"family": {"factor": 1.5}}, "family.factor"),
    ({"sizes": {"continuations": 1}}, "sizes.continuations"),
    ({"options": {"bogus": 1}}, "options.bogus"),
    ({"anchor": {"kind": "sometime"}}, "anchor"),
    ({"process": {"kind": "brownian", "x0": "zero"}}, "process"),
])
def test_config_errors_name_the_field(tmp_path, capsys, doc, field):
    cfg = _write(tmp_path, {"experiment": "drift", "seed": 1,
                            "process": {"kind": "brownian"}, **doc})
    assert main(["estimate", "--config", cfg, "--out", str(tmp_path)]) == 2
    rec = _err(capsys)
    assert rec["field"] == field and rec["exit_code"] == 2 and rec["error"] == "config_error"


def test_bad_schema_version_and_unknown_experiment():
    with pytest.raises(ConfigError) as exc:
        Config({"schema_version": 2, "experiment": "drift", "seed": 1})
    assert exc.value.details["field"] == "schema_version"
    with pytest.raises(ConfigError):
        Config({"schema_version": 1, "experiment": "check:nothing", "seed": 1})
    with pytest.raises(ConfigError) as exc:
        Config({"schema_version": 1, "seed": 1})
    assert exc.value.details["field"] == "experiment"
    assert CONFIG_SCHEMA["additionalProperties"] is False


def test_unreadable_config(tmp_path, capsys):
    assert main(["run", "--config", str(tmp_path / "missing.json")]) == 2
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert main(["run", "--config", str(bad)]) == 2
    assert _err(capsys)["field"] == "config"


def test_numeric_error_exit_code(tmp_path, capsys):
    # every stop collapses onto S when the finest scale is below dt
    cfg = _write(tmp_path, {"experiment": "drift", "seed": 1, "process": {"kind": "brownian"},
                            "grid": {"dt": 0.01, "horizon": 1.0},
                            "family": {"initial": 0.01, "levels": 2},
                            "sizes": {"outer": 2, "continuations": 4}})
    assert main(["estimate", "--config", cfg, "--out", str(tmp_path)]) == 3
    rec = _err(capsys)
    assert rec["error"] == "degenerate_stopping_family" and rec["exit_code"] == 3


def test_simulate_artifacts(tmp_path):
    cfg = _write(tmp_path, {"experiment": "simulate", "seed": 5,
                            "process": {"kind": "gbm", "mu": 0.1, "vol": 0.2},
                            "grid": {"dt": 0.01, "horizon": 0.1}, "sizes": {"paths": 3}})
    assert main(["simulate", "--config", cfg, "--out", str(tmp_path / "s")]) == 0
    meta = json.loads((tmp_path / "s" / "simulate.json").read_text())
    assert meta["paths"] == ["simulate_path00000.csv", "simulate_path00001.csv",
                             "simulate_path00002.csv"]
    rows = list(csv.reader(open(tmp_path / "s" / "simulate_path00001.csv")))
    assert len(rows) == 12 and float(rows[1][1]) == 1.0


def test_estimate_drift_and_covariance_matrix(tmp_path):
    cfg = _write(tmp_path, {"experiment": "drift", "seed": 2,
                            "process": {"kind": "brownian"}, **SMALL,
                            "output": {"prefix": "bm"}})
    assert main(["estimate", "--config", cfg, "--out", str(tmp_path)]) == 0
    assert (tmp_path / "bm.csv").read_text().startswith("scale_index,scale,ratio")
    assert "extrapolated" in json.loads((tmp_path / "bm.json").read_text())
    cfg = _write(tmp_path, {"experiment": "covariance", "seed": 2,
                            "process": {"kind": "correlated_bm", "corr": [[1, 0.5], [0.5, 1]]},
                            "options": {"matrix": True}, **SMALL, "output": {"prefix": "cv"}})
    assert main(["run", "--config", cfg, "--out", str(tmp_path)]) == 0
    rows = (tmp_path / "cv.csv").read_text().splitlines()
    assert rows[0] == "i,j,extrapolated,stderr,finest" and len(rows) == 5


def test_estimate_rejects_checks(tmp_path, capsys):
    cfg = _write(tmp_path, {"experiment": "check:linearity", "seed": 1})
    assert main(["estimate", "--config", cfg, "--out", str(tmp_path)]) == 2


def test_suite_cli(tmp_path, capsys):
    assert main(["suite", "--list"]) == 0
    ids = capsys.readouterr().out.split()
    assert "linearity" in ids and ids == sorted(ids)
    assert main(["suite", "--seed", "1"]) == 2
    capsys.readouterr()
    cfg = _write(tmp_path, {"experiment": "suite", "seed": 4, **SMALL})
    code = main(["suite", "--config", cfg, "--checks", "linearity,chain_rule",
                 "--out", str(tmp_path)])
    assert code == 0
    rows = (tmp_path / "suite_summary.csv").read_text().splitlines()
    assert [r.split(",")[0] for r in rows[1:]] == ["chain_rule", "linearity"]


def test_console_script_runs(tmp_path):
    cfg = _write(tmp_path, {"experiment": "check:variance_sum", "seed": 1, **SMALL})
    res = subprocess.run([sys.executable, "-m", "stoplab", "verify", "--config", cfg,
                          "--out", str(tmp_path)], capture_output=True, text=True)
    assert res.returncode == 0, res.stderr
    assert res.stdout.splitlines()[1].startswith("variance_sum,pass")
