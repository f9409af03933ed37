from __future__ import annotations

import json

import pytest

from stalesync.cli import ConfigError, main, parse_config
from stalesync.workloads import SparseMatrix, read_lsq

CSVS = ["breakdown.csv", "gamma.csv", "objective.csv", "regret.csv", "staleness.csv", "variance.csv"]

BASE = """\
workload = lsq
model = ESSP
staleness_s = 2
workers = 3
clocks = 40
delay = uniform
delay_lo = 0
delay_hi = 6
replicas = 2
"""


def write_cfg(path, text, out):
    path.write_text(text + f"output_dir = {out}\n")
    return str(path)


def test_run_writes_manifest(tmp_path):
    cfg = write_cfg(tmp_path / "a.cfg", BASE, tmp_path / "out")
    assert main(["run", cfg]) == 0
    names = sorted(p.name for p in (tmp_path / "out").iterdir())
    assert names == sorted(CSVS + ["summary.json"])
    summary = json.loads((tmp_path / "out" / "summary.json").read_text())
    assert summary["config"]["model"] == "ESSP" and len(summary["replica_delay_seeds"]) == 2
    assert summary["diverged"] is False


def test_rerun_is_byte_identical(tmp_path, monkeypatch):
    cfg = write_cfg(tmp_path / "a.cfg", BASE, tmp_path / "unused")
    outputs = []
    for name in ("one", "two"):
        monkeypatch.setenv("STALESYNC_OUT", str(tmp_path / name))
        assert main(["run", cfg]) == 0
        outputs.append({p.name: p.read_bytes() for p in (tmp_path / name).iterdir()})
    assert outputs[0] == outputs[1]
    assert not (tmp_path / "unused").exists()


def test_overrides_on_command_line(tmp_path):
    cfg = write_cfg(tmp_path / "a.cfg", BASE, tmp_path / "out")
    assert main(["run", cfg, "--clocks", "10", "--replicas=1"]) == 0
    summary = json.loads((tmp_path / "out" / "summary.json").read_text())
    assert summary["config"]["clocks"] == 10 and summary["table_clock"] == 10


def test_vap_with_staleness_rejected_with_line_number(tmp_path, capsys):
    cfg = write_cfg(tmp_path / "bad.cfg", "model = VAP\nstaleness_s = 3\nvap_v0 = 1.0\n", tmp_path / "out")
    assert main(["run", cfg]) == 1
    err = capsys.readouterr().err
    assert "bad.cfg:2" in err and "staleness_s" in err
    assert not (tmp_path / "out").exists()


@pytest.mark.parametrize(
    "text, needle",
    [
        ("model = SSP\n", "staleness_s"),
        ("bogus = 1\n", "bogus"),
        ("workers = 2\nworkers = 3\n", "workers"),
        ("workers = two\n", "workers"),
        ("model = ESSP\nstaleness_s = -1\n", "staleness_s"),
        ("model = XYZ\n", "model"),
    ],
)
def test_invalid_configs(text, needle):
    with pytest.raises(ConfigError, match=needle):
        parse_config(text, "x.cfg")


def test_divergence_exit_code(tmp_path):
    text = "workload = mf\nmodel = SSP\nstaleness_s = 0\nn_rows = 40\nn_cols = 30\nrank = 3\neta0 = 50\nclocks = 30\n"
    cfg = write_cfg(tmp_path / "d.cfg", text, tmp_path / "out")
    assert main(["run", cfg]) == 2
    assert json.loads((tmp_path / "out" / "summary.json").read_text())["diverged"] is True


def test_compare_bsp_and_ssp0_agree(tmp_path):
    common = "workload = lsq\nworkers = 3\nclocks = 30\ndelay = uniform\ndelay_hi = 5\n"
    a = write_cfg(tmp_path / "a.cfg", common + "model = BSP\n", tmp_path / "cmp")
    b = write_cfg(tmp_path / "b.cfg", common + "model = SSP\nstaleness_s = 0\n", tmp_path / "cmp")
    assert main(["compare", a, b]) == 0
    lines = (tmp_path / "cmp" / "compare.csv").read_text().splitlines()
    assert lines[0] == "model,s,clock,virtual_time,objective"
    bsp = [l.split(",", 1)[1] for l in lines[1:] if l.startswith("BSP")]
    ssp = [l.split(",", 1)[1] for l in lines[1:] if l.startswith("SSP")]
    assert bsp == ssp and len(bsp) == 31


def test_compare_single_config_and_mismatch(tmp_path):
    a = write_cfg(tmp_path / "a.cfg", BASE, tmp_path / "cmp")
    assert main(["compare", a]) == 0
    assert len(json.loads((tmp_path / "cmp" / "summary.json").read_text())["runs"]) == 1
    b = write_cfg(tmp_path / "b.cfg", BASE.replace("workers = 3", "workers = 4"), tmp_path / "cmp")
    assert main(["compare", a, b]) == 1


def test_gen_data_round_trip(tmp_path):
    assert main(["gen-data", "mf", "--out", str(tmp_path / "m.txt"), "--n-rows", "20", "--n-cols", "10"]) == 0
    m = SparseMatrix.read(tmp_path / "m.txt")
    assert (m.n_rows, m.n_cols) == (20, 10) and m.nnz > 0
    assert main(["gen-data", "lsq", "--out", str(tmp_path / "l.txt"), "--components", "50"]) == 0
    assert read_lsq(tmp_path / "l.txt").A.shape == (50, 10)


def test_run_from_data_file(tmp_path):
    main(["gen-data", "lsq", "--out", str(tmp_path / "l.txt"), "--components", "60", "--dimension", "4"])
    text = f"model = SSP\nstaleness_s = 1\nworkers = 2\nclocks = 30\ndimension = 4\ndata_file = {tmp_path / 'l.txt'}\n"
    cfg = write_cfg(tmp_path / "f.cfg", text, tmp_path / "out")
    assert main(["run", cfg]) == 0
