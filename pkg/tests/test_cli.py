import csv
import io
import os
import subprocess
import sys

import pytest

from randnls.cli import main, run_stem, resolve, read_config
from randnls.errors import ConfigurationError
from randnls.sample_size_bounds import ToleranceBudget, sufficient


def run(args, tmp_path=None):
    out, err = io.StringIO(), io.StringIO()
    code = main(args, stdout=out, stderr=err)
    return code, out.getvalue(), err.getvalue()


def rows(text):
    return list(csv.DictReader(io.StringIO(text)))


def test_sample_size_default_table():
    code, out, _ = run(["sample-size", "--eps", "0.1"])
    assert code == 0
    table = rows(out)
    assert len(table) == 30
    assert [r["delta"] for r in table[:2]] == ["0.01", "0.02"]
    last = table[-1]
    assert last["delta"] == "0.3"
    assert int(last["tight_lower"]) == sufficient(ToleranceBudget(0.1, 0.3), "lower").n
    for r in table:
        for side in ("lower", "upper"):
            assert int(r["tight_" + side]) <= int(r["loose"])
    assert out.endswith("\r\n")


def test_sample_size_rank_columns():
    _, out1, _ = run(["sample-size", "--r", "1"])
    _, out4, _ = run(["sample-size", "--r", "4"])
    for a, b in zip(rows(out1), rows(out4)):
        for side in ("tight_lower", "tight_upper", "tight_two_sided"):
            assert int(b[side]) <= int(a[side])


def test_sample_size_single_row():
    code, out, _ = run(["sample-size", "--delta-min", "0.2", "--delta-max", "0.2"])
    assert code == 0 and len(rows(out)) == 1


@pytest.mark.parametrize("args", [
    ["sample-size", "--delta-min", "0.3", "--delta-max", "0.1"],
    ["sample-size", "--eps", "1.5"],
    ["sample-size", "--eps", "abc"],
    ["sample-size", "--bogus", "1"],
    ["frobnicate"],
    [],
    ["trace-coverage", "--side", "middle"],
    ["invert", "--variant", "ix"],
])
def test_usage_errors(args):
    assert run(args)[0] == 2


def test_configuration_errors(tmp_path):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("not_a_key = 3\n")
    assert run(["sample-size", "--config", str(cfg)])[0] == 3
    assert run(["sample-size", "--config", str(tmp_path / "missing.cfg")])[0] == 3
    cfg.write_text("eps 0.1\n")
    assert run(["sample-size", "--config", str(cfg)])[0] == 3
    assert run(["invert", "--grid", "8", "--p", "7"])[0] == 3


def test_config_then_flag_override(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("# budget\neps = 0.2\ndelta-min = 0.1  # first\ndelta_max = 0.12\n")
    assert read_config(cfg) == {"eps": "0.2", "delta_min": "0.1", "delta_max": "0.12"}
    _, out, _ = run(["sample-size", "--config", str(cfg)])
    t = rows(out)
    assert [r["eps"] for r in t] == ["0.2"] * 3
    _, out, _ = run(["sample-size", "--config", str(cfg), "--eps", "0.05"])
    assert rows(out)[0]["eps"] == "0.05"
    with pytest.raises(ConfigurationError):
        resolve("sample-size", {}, {"eps": "x"})


def test_outputs_and_manifest(tmp_path):
    args = ["sample-size", "--delta-min", "0.1", "--delta-max", "0.12", "--out", str(tmp_path)]
    assert run(args)[0] == 0
    params = resolve("sample-size", {"delta_min": 0.1, "delta_max": 0.12})
    stem = run_stem("sample-size", params)
    assert sorted(os.listdir(tmp_path)) == [f"{stem}.csv", f"{stem}.manifest"]
    man = (tmp_path / f"{stem}.manifest").read_text()
    assert "subcommand sample-size" in man and f"output {stem}.csv" in man
    assert "version artifact" in man and "param eps 0.1" in man


def test_trace_coverage_exit_codes():
    code, out, _ = run(["trace-coverage", "--fixture", "equal5", "--trials", "2000"])
    assert code == 0 and rows(out)[0]["passed"] == "1"
    # far too few probes for the rank-1 fixture: coverage collapses
    code, out, _ = run(["trace-coverage", "--n", "1", "--trials", "2000"])
    assert code == 1 and rows(out)[0]["passed"] == "0"


def test_extremal_verify_small():
    code, out, _ = run(["extremal-verify", "--alpha", "1", "--beta", "1", "--n", "2",
                        "--x", "0.5,3.0", "--step", "0.25", "--samples", "20000"])
    assert code == 0
    assert {r["inside"] for r in rows(out)} == {"1"}


INVERT = ["invert", "--grid", "8", "--p", "3", "--variant", "i", "--seed", "2"]


def test_invert_byte_identical(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert run(INVERT + ["--out", str(a)])[0] == 0
    assert run(INVERT + ["--out", str(b)])[0] == 0
    names = sorted(os.listdir(a))
    assert names == sorted(os.listdir(b))
    suffixes = {n.split(".", 1)[1] for n in names}
    assert suffixes == {"summary.csv", "iterations.csv", "report.txt", "mu.grid", "manifest"}
    for n in names:
        if n.endswith(".manifest"):
            continue
        assert (a / n).read_bytes() == (b / n).read_bytes()
    summary = rows(next((a / n).read_text() for n in names if n.endswith("summary.csv")))
    assert summary[0]["variant"] == "i"


def test_console_entry_point():
    res = subprocess.run([sys.executable, "-m", "randnls.cli", "sample-size",
                          "--delta-min", "0.3"], capture_output=True, text=True)
    assert res.returncode == 0 and res.stdout.startswith("eps,delta,r,loose")
