from __future__ import annotations

import json
import subprocess
import sys
from pathlib import Path

import pytest

from pfmc.cli import EXIT_CAPACITY, EXIT_OK, EXIT_VALIDATION, main

CONFIGS = Path(__file__).resolve().parent.parent / "configs"


def write(tmp_path: Path, name: str, data: dict) -> str:
    path = tmp_path / name
    path.write_text(json.dumps(data))
    return str(path)


def test_validate_ok(capsys):
    assert main(["validate", str(CONFIGS / "overlap_psi4.json")]) == EXIT_OK
    assert "kind=overlap" in capsys.readouterr().out


def test_validate_schema_error(tmp_path, capsys):
    path = write(tmp_path, "bad.json", {"kind": "overlap", "inputs": {"map": {"identity": 4}}})
    assert main(["validate", path]) == EXIT_VALIDATION
    assert "inputs.ket" in capsys.readouterr().err


def test_missing_file_is_validation_error(tmp_path):
    assert main(["validate", str(tmp_path / "nope.json")]) == EXIT_VALIDATION


def test_invalid_json(tmp_path):
    path = tmp_path / "broken.json"
    path.write_text("{not json")
    assert main(["validate", str(path)]) == EXIT_VALIDATION


def test_capacity_error_exit_code(tmp_path, capsys):
    cfg = {"kind": "overlap", "budget": {"eps": 1e-6, "delta": 0.01},
           "inputs": {"map": {"random_matrix": {"num_modes": 8, "seed": 1, "scale": 2.0}},
                      "ket": {"psi4": 2}}}
    path = write(tmp_path, "big.json", cfg)
    assert main(["run", path, "--out", str(tmp_path)]) == EXIT_CAPACITY
    assert "1000000000" in capsys.readouterr().err


def test_run_writes_outputs(tmp_path):
    out = tmp_path / "out"
    assert main(["run", str(CONFIGS / "overlap_psi4.json"), "--out", str(out),
                 "--seed", "11", "--threads", "2"]) == EXIT_OK
    side = json.loads((out / "overlap_psi4.json").read_text())
    assert side["seed"] == 11
    assert (out / "overlap_psi4.csv").read_text().startswith("observable,params,")


def test_oracle_prints_csv(capsys):
    assert main(["oracle", str(CONFIGS / "wilson_2x2.json")]) == EXIT_OK
    lines = capsys.readouterr().out.strip().splitlines()
    assert lines[0].startswith("observable,") and len(lines) == 4


def test_plotdata_roundtrip(tmp_path, capsys):
    assert main(["run", str(CONFIGS / "wilson_2x2.json"), "--out", str(tmp_path)]) == EXIT_OK
    spec = write(tmp_path, "spec.json", {"x": "time"})
    capsys.readouterr()
    assert main(["plotdata", str(tmp_path / "wilson_2x2.csv"), spec]) == EXIT_OK
    lines = capsys.readouterr().out.strip().splitlines()
    assert lines[0] == "x,y,yerr,series" and len(lines) == 4


def test_plotdata_missing_series(tmp_path, capsys):
    assert main(["run", str(CONFIGS / "wilson_2x2.json"), "--out", str(tmp_path)]) == EXIT_OK
    spec = write(tmp_path, "spec.json", {"x": "time", "series": ["czz"]})
    assert main(["plotdata", str(tmp_path / "wilson_2x2.csv"), spec]) == EXIT_VALIDATION
    assert "available series" in capsys.readouterr().err


def test_bad_thread_count_is_usage_error():
    with pytest.raises(SystemExit) as info:
        main(["run", str(CONFIGS / "overlap_psi4.json"), "--threads", "0"])
    assert info.value.code == 2


def test_console_script_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "pfmc.cli", "validate",
                           str(CONFIGS / "extent.json")], capture_output=True, text=True)
    assert proc.returncode == 0 and "kind=extent" in proc.stdout
