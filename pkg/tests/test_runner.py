from __future__ import annotations

import csv
import io
import json
import math
from pathlib import Path

import pytest

from pfmc import __version__
from pfmc.errors import ValidationError
from pfmc.estimators import hoeffding_samples
from pfmc.runner import (CSV_COLUMNS, ExperimentConfig, emit_plot_data, load_config,
                         read_result_csv, run_experiment, run_oracle)

CONFIGS = Path(__file__).resolve().parent.parent / "configs"
QUICK = ["overlap_psi4", "overlap_fock", "correlator", "marginal", "binned", "rdm",
         "hamiltonian", "noci", "orbital_gradient", "wilson_2x2", "hs_parity_1x2", "extent",
         "afqmc_1x2"]


def rows_of(text: str) -> list[dict]:
    return list(csv.DictReader(io.StringIO(text)))


def overlap_config(**extra) -> dict:
    cfg = {"kind": "overlap", "seed": 3, "budget": {"eps": 0.05, "delta": 0.05},
           "inputs": {"map": {"identity": 8}, "ket": {"psi4": 2}}}
    cfg.update(extra)
    return cfg


@pytest.mark.parametrize("path", sorted(CONFIGS.glob("*.json")), ids=lambda p: p.stem)
def test_shipped_configs_validate(path):
    if path.stem.startswith("plot"):
        pytest.skip("plot spec")
    assert isinstance(load_config(path), ExperimentConfig)


@pytest.mark.parametrize("name", QUICK)
def test_quick_configs_match_oracle(name):
    cfg = load_config(CONFIGS / f"{name}.json")
    result = run_experiment(cfg)
    exact = run_oracle(cfg)
    assert len(result.rows) == len(exact.rows) > 0
    for row, ref in zip(result.rows, exact.rows):
        assert row.observable == ref.observable and row.params == ref.params
        assert abs(row.value - ref.value) <= row.epsilon, (row.params, row.value, ref.value)


def test_identity_overlap_row():
    result = run_experiment(overlap_config())
    (row,) = result.rows
    assert row.observable == "overlap"
    assert row.value == pytest.approx(1.0, abs=0.05)


def test_noci_equal_maps_unit_overlap():
    result = run_experiment(load_config(CONFIGS / "noci.json"))
    s_lr = next(r for r in result.rows if r.observable == "S_LR")
    assert s_lr.value == pytest.approx(1.0, abs=1e-9)


def test_schema_errors_name_the_field():
    with pytest.raises(ValidationError, match="kind"):
        load_config({"kind": "teleport", "inputs": {}})
    with pytest.raises(ValidationError, match="inputs.ket"):
        load_config({"kind": "overlap", "inputs": {"map": {"identity": 4}}})
    with pytest.raises(ValidationError, match="colour"):
        load_config(overlap_config(colour="red"))
    with pytest.raises(ValidationError, match="budget.eps"):
        load_config(overlap_config(budget={"eps": -1}))
    with pytest.raises(ValidationError, match="seed"):
        load_config(overlap_config(seed=2**64))


def test_semantic_errors_surface_as_validation():
    cfg = overlap_config(inputs={"map": {"identity": 4}, "ket": {"psi4": 2}})
    with pytest.raises(ValidationError, match="modes"):
        run_experiment(cfg)
    bad_quench = {"kind": "quench_suite", "inputs": {"quench": {
        "lattice": {"lx": 2, "ly": 2}, "dimers": [[0, 3], [1, 2]]}}}
    with pytest.raises(ValidationError, match="nearest"):
        run_experiment(bad_quench)


def test_rows_meet_recorded_budget():
    result = run_experiment(load_config(CONFIGS / "correlator.json"))
    for row in result.rows:
        assert row.samples >= hoeffding_samples(row.bound, row.epsilon, row.delta)


def test_csv_layout_and_sidecar(tmp_path):
    result = run_experiment(overlap_config(name="demo"))
    csv_path, json_path = result.write(tmp_path)
    assert csv_path.name == "demo.csv"
    rows = read_result_csv(csv_path)
    assert list(rows[0]) == CSV_COLUMNS
    assert json.loads(rows[0]["params"]) == {}
    side = json.loads(json_path.read_text())
    assert side["version"] == __version__
    assert side["seed"] == 3
    assert side["config"]["kind"] == "overlap"


def strip_wall_time(text: str) -> list[list[str]]:
    return [row[:-1] for row in csv.reader(io.StringIO(text))]


def test_deterministic_given_seed():
    cfg = load_config(CONFIGS / "wilson_2x2.json")
    first = run_experiment(cfg).to_csv()
    second = run_experiment(cfg).to_csv()
    assert strip_wall_time(first) == strip_wall_time(second)
    reseeded = run_experiment(cfg.model_copy(update={"seed": cfg.seed + 1})).to_csv()
    assert strip_wall_time(first) != strip_wall_time(reseeded)


def test_thread_count_does_not_change_values():
    cfg = load_config(CONFIGS / "correlator.json")
    one = run_experiment(cfg, threads=1).to_csv()
    many = run_experiment(cfg, threads=8).to_csv()
    assert strip_wall_time(one) == strip_wall_time(many)


def test_row_seeds_are_independent_of_other_rows():
    cfg = load_config(CONFIGS / "correlator.json")
    full = run_experiment(cfg)
    inputs = dict(cfg.inputs, modes=cfg.inputs["modes"][:1])
    partial = run_experiment(cfg.model_copy(update={"inputs": inputs}))
    assert partial.rows[0].value == full.rows[0].value


def test_golden_quench_oracle():
    cfg = load_config(CONFIGS / "quench_2x3.json")
    exact = rows_of(run_oracle(cfg).to_csv())
    golden = read_result_csv(CONFIGS / "golden" / "quench_2x3_oracle.csv")
    assert len(exact) == len(golden) == 20
    for mine, ref in zip(exact, golden):
        assert mine["observable"] == ref["observable"] and mine["params"] == ref["params"]
        assert float(mine["value_re"]) == pytest.approx(float(ref["value_re"]), abs=1e-10)


def test_envelope_grid_rows():
    result = run_experiment(load_config(CONFIGS / "envelope.json"))
    assert len(result.rows) == 2 * 5 * 4
    worst = [r for r in result.rows if r.observable == "envelope_worst"]
    assert any(math.isinf(r.samples) for r in worst)
    text = result.to_csv()
    assert ",inf," in text


def test_plot_data_envelope_grid():
    result = run_experiment(load_config(CONFIGS / "envelope.json"))
    out = rows_of(emit_plot_data(result, {"x": "t", "y": "value_re", "yerr": None,
                                          "series_by": "W", "series": ["4.0"]}))
    assert len(out) == 2 * 4
    assert {r["series"] for r in out} == {"4.0"}
    assert [float(r["x"]) for r in out] == sorted(float(r["x"]) for r in out)


def test_plot_data_wilson_perimeter_scan():
    rows = [{"observable": "wilson", "params": json.dumps({"perimeter": p, "time": 1.0}),
             "value_re": str(0.9 ** p), "std_error": "0.01"} for p in (8, 4, 6)]
    out = rows_of(emit_plot_data(rows, {"x": "perimeter"}))
    assert [r["x"] for r in out] == ["4", "6", "8"]
    assert all(r["series"] == "wilson" for r in out)
    assert out[0]["yerr"] == "0.01"


def test_plot_data_empty_is_header_only():
    assert emit_plot_data([], {"x": "time"}) == "x,y,yerr,series\n"


def test_plot_data_missing_series_lists_available():
    rows = [{"observable": "czz", "params": "{\"time\": 0.0}", "value_re": "1",
             "std_error": "0"}]
    with pytest.raises(ValidationError, match=r"available series: \['czz'\]"):
        emit_plot_data(rows, {"x": "time", "series": ["doublons"]})


def test_plot_data_unknown_column():
    rows = [{"observable": "czz", "params": "{}", "value_re": "1", "std_error": "0"}]
    with pytest.raises(ValidationError, match="time"):
        emit_plot_data(rows, {"x": "time"})
