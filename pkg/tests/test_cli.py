import csv
import json
import math
import statistics
from pathlib import Path

import pytest

from tsbin.cli import main
from tsbin.experiment import (
    REPORT_COLUMNS,
    CellConfig,
    ConfigError,
    emit_report,
    fingerprint,
    load_records,
    parse_config,
    run_cell,
    run_matrix,
    seed_values,
    sweep_cells,
)

TINY_TRAIN = {"epochs": 2, "batches_per_epoch": 2, "batch_size": 8, "sample_paths": 10}


def tiny_doc(**over):
    doc = {
        "dataset": {"name": "tiny", "synthetic": {"n_series": 3, "length": 72}, "seed": 0},
        "horizon": 6,
        "seeds": [0, 1, 2],
        "train": dict(TINY_TRAIN),
        "grid": {"model": "feedforward", "input_repr": "grb(16)",
                 "output_repr": ["ms-student-t", "grb(1024)", "lab(1024)"]},
    }
    doc.update(over)
    return doc


@pytest.fixture(scope="module")
def matrix(tmp_path_factory):
    out = tmp_path_factory.mktemp("matrix")
    cells = parse_config(tiny_doc())
    return cells, run_matrix(cells, out), out


# ---------------------------------------------------------------------------
# config


def test_unknown_repr_rejected_at_parse_time():
    with pytest.raises(ConfigError) as err:
        parse_config(tiny_doc(grid={"model": "ff", "input_repr": "plqs(64)", "output_repr": "ms"}))
    for mode in ("ms", "pit", "grb", "lab", "hyb"):
        assert mode in str(err.value)


def test_unknown_model_and_overrides_rejected():
    with pytest.raises(ConfigError):
        parse_config(tiny_doc(grid={"model": "lstm", "input_repr": "ms", "output_repr": "ms"}))
    with pytest.raises(ConfigError):
        parse_config(tiny_doc(train={"epochz": 3}))
    with pytest.raises(ConfigError):
        parse_config(tiny_doc(train={"seed": 3}))
    with pytest.raises(ConfigError):
        parse_config({"dataset": {"synthetic": {}}})


def test_table_style_ids_accepted():
    cells = parse_config(tiny_doc(grid={"model": ["wavenet", "ff"],
                                        "input_repr": ["grb(bin1024)", "hyb(16,128,1024)", "hyb(grb,lab)"],
                                        "output_repr": "ms-student-t"}))
    assert len(cells) == 6
    assert {c.model for c in cells} == {"dilated-cnn", "feed-forward"}
    assert cells[0].input_repr == "grb(1024)" and cells[0].output_repr == "ms"


def test_fingerprint_ignores_key_order_and_seeds():
    a = parse_config(tiny_doc())[0]
    doc = tiny_doc(seeds=[5])
    doc = json.loads(json.dumps(doc, sort_keys=True))
    doc["train"] = dict(reversed(list(doc["train"].items())))
    b = parse_config(doc)[0]
    assert a.fingerprint() == b.fingerprint()
    assert fingerprint({"x": 1, "y": 2}) == fingerprint({"y": 2, "x": 1})
    c = parse_config(tiny_doc(horizon=5))[0]
    assert c.fingerprint() != a.fingerprint()


def test_aliases_share_fingerprint():
    a = parse_config(tiny_doc(grid={"model": "ff", "input_repr": "grb(bin64)", "output_repr": "st"}))
    b = parse_config(tiny_doc(grid={"model": "feedforward", "input_repr": "grb(64)",
                                    "output_repr": "ms-student-t"}))
    assert a[0].fingerprint() == b[0].fingerprint()


def test_sweep_expansion():
    sweep = {"param": "output_bins", "values": [8, 32, 128, 512, 1024],
             "base": {"model": "ff", "input_repr": "grb(1024)", "output_repr": "lab(64,linear)"}}
    cells = [c for c, _ in sweep_cells(sweep)]
    assert [c["output_repr"] for c in cells] == [f"lab({b},linear)" for b in (8, 32, 128, 512, 1024)]
    emb = sweep_cells({"param": "embedding_dim", "values": [2, 4]})
    assert [c["network"]["embedding_dim"] for c, _ in emb] == [2, 4]
    with pytest.raises(ConfigError):
        sweep_cells({"param": "depth", "values": [1]})


# ---------------------------------------------------------------------------
# runs


def test_matrix_has_one_row_per_output(matrix, tmp_path):
    cells, records, out = matrix
    assert len(records) == 3
    paths = emit_report(records, tmp_path)
    rows = list(csv.DictReader(paths["csv"].open()))
    assert [r["output_repr"] for r in rows] == ["ms", "grb(1024)", "lab(1024)"]


def test_aggregate_recomputed_independently(matrix):
    _, records, out = matrix
    for rec in records:
        assert len(rec.per_seed) == 3 and rec.complete
        # read raw per-seed files back instead of using the in-memory record
        vals = [json.loads((out / "runs" / rec.fingerprint / f"seed-{s}" / "metrics.json")
                           .read_text())["mean_wql"] for s in (0, 1, 2)]
        mean = sum(vals) / 3
        std = math.sqrt(sum((v - mean) ** 2 for v in vals) / 2)
        got_mean, got_std = rec.aggregate("mean_wql")
        assert got_mean == pytest.approx(mean, rel=1e-14)
        assert got_std == pytest.approx(std, rel=1e-12)
        assert rec.row()["seeds"] == 3


def test_best_flag_is_argmin(matrix, tmp_path):
    _, records, _ = matrix
    rows = list(csv.DictReader(emit_report(records, tmp_path)["csv"].open()))
    assert list(rows[0]) == list(REPORT_COLUMNS)
    text = (tmp_path / "results.txt").read_text().splitlines()
    values = [float(r["mean_wql_mean"]) for r in rows]
    starred = [k for k, line in enumerate(text[2:2 + len(rows)]) if " *" in line]
    assert starred == [values.index(min(values))]


def test_artifacts_written(matrix):
    _, records, out = matrix
    rdir = out / "runs" / records[1].fingerprint
    assert (rdir / "config.json").exists() and (rdir / "record.json").exists()
    for name in ("model.bin", "forecasts.csv", "metrics.json"):
        assert (rdir / "seed-0" / name).exists()
    rows = list(csv.DictReader((rdir / "seed-0" / "forecasts.csv").open()))
    assert len(rows) == 3 * 6
    assert float(rows[0]["q0.1"]) <= float(rows[0]["q0.5"]) <= float(rows[0]["q0.9"])


def test_rerun_is_identical(matrix, tmp_path):
    cells, records, _ = matrix
    again = run_cell(cells[1], tmp_path)
    assert again.fingerprint == records[1].fingerprint
    assert [e["mean_wql"] for e in again.per_seed] == [e["mean_wql"] for e in records[1].per_seed]
    assert [e["nd"] for e in again.per_seed] == [e["nd"] for e in records[1].per_seed]


def test_resume_recomputes_only_deleted_cell(tmp_path):
    cells = parse_config(tiny_doc(seeds=[0]))
    first = run_matrix(cells, tmp_path)
    assert [r.trained for r in first] == [1, 1, 1]
    assert [r.trained for r in run_matrix(cells, tmp_path)] == [0, 0, 0]
    victim = tmp_path / "runs" / cells[2].fingerprint() / "seed-0"
    for f in victim.iterdir():
        f.unlink()
    again = run_matrix(cells, tmp_path)
    assert [r.trained for r in again] == [0, 0, 1]
    assert again[2].per_seed[0]["mean_wql"] == first[2].per_seed[0]["mean_wql"]
    assert [r.trained for r in run_matrix(cells, tmp_path, resume=False)] == [1, 1, 1]


def test_failed_seed_recorded_without_aborting(tmp_path):
    # context 2*tau = 80 plus tau exceeds the 72-step series: every seed fails
    bad = CellConfig(dataset={"synthetic": {"n_series": 2, "length": 72}}, horizon=40,
                     model="ff", input_repr="grb(16)", output_repr="grb(16)", seeds=(0, 1),
                     train=TINY_TRAIN)
    rec = run_cell(bad, tmp_path)
    assert [e["status"] for e in rec.per_seed] == ["failed", "failed"]
    assert not rec.complete and math.isnan(rec.aggregate("mean_wql")[0])
    assert (tmp_path / "runs" / bad.fingerprint() / "seed-0" / "failure.json").exists()
    assert seed_values([rec]).shape == (1, 2)


def test_report_regeneration_is_byte_identical(matrix, tmp_path):
    cells, _, out = matrix
    a = emit_report(load_records(cells, out), tmp_path / "a")
    b = emit_report(load_records(cells, out), tmp_path / "b")
    assert a["csv"].read_bytes() == b["csv"].read_bytes()
    assert a["txt"].read_bytes() == b["txt"].read_bytes()


def test_report_floats_round_trip(matrix, tmp_path):
    _, records, _ = matrix
    rows = list(csv.DictReader(emit_report(records, tmp_path)["csv"].open()))
    for rec, row in zip(records, rows):
        vals = [e["nd"] for e in rec.per_seed]
        assert float(row["nd_mean"]) == math.fsum(vals) / len(vals)
        assert float(row["nd_std"]) == statistics.stdev(vals)


def test_unwritable_report_path(matrix, tmp_path):
    _, records, _ = matrix
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(Exception):
        emit_report(records, blocker)
    with pytest.raises(ConfigError):
        emit_report([], tmp_path)


# ---------------------------------------------------------------------------
# command line


def write_doc(tmp_path, doc, name="cfg.json") -> Path:
    p = tmp_path / name
    p.write_text(json.dumps(doc))
    return p


def test_cli_run_and_report(tmp_path, capsys):
    cfg = write_doc(tmp_path, tiny_doc())
    out = tmp_path / "out"
    assert main(["run", "--config", str(cfg), "--out", str(out), "--seeds", "0,1"]) == 0
    first = (out / "results.csv").read_bytes()
    assert main(["report", "--config", str(cfg), "--out", str(out), "--seeds", "0,1"]) == 0
    assert (out / "results.csv").read_bytes() == first
    rows = list(csv.DictReader((out / "results.csv").open()))
    assert len(rows) == 3 and {r["seeds"] for r in rows} == {"2"}
    capsys.readouterr()


def test_cli_exit_codes(tmp_path, capsys):
    bad = write_doc(tmp_path, tiny_doc(grid={"model": "ff", "input_repr": "plqs", "output_repr": "ms"}))
    assert main(["run", "--config", str(bad), "--out", str(tmp_path)]) == 2
    assert "supported" in capsys.readouterr().err
    failing = tiny_doc(horizon=40, seeds=[0], grid={"model": "ff", "input_repr": "grb(16)",
                                                    "output_repr": "grb(16)"})
    cfg = write_doc(tmp_path, failing, "fail.json")
    assert main(["run", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 1
    assert main(["report", "--config", str(write_doc(tmp_path, tiny_doc(), "x.json")),
                 "--out", str(tmp_path / "empty")]) == 2


def test_cli_sweep_writes_curve(tmp_path, capsys):
    doc = tiny_doc(seeds=[0])
    del doc["grid"]
    doc["sweep"] = {"param": "output_bins", "values": [8, 32, 128, 512, 1024],
                    "base": {"model": "ff", "input_repr": "grb(16)", "output_repr": "grb(16)"}}
    cfg = write_doc(tmp_path, doc)
    assert main(["sweep", "--config", str(cfg), "--out", str(tmp_path)]) == 0
    rows = list(csv.DictReader((tmp_path / "sweep-output_bins.csv").open()))
    assert [r["output_bins"] for r in rows] == ["8", "32", "128", "512", "1024"]
    assert len(rows) == 5
    capsys.readouterr()


def test_cli_analyses(tmp_path, capsys):
    cfg = write_doc(tmp_path, {"dataset": {"synthetic": {"n_series": 5, "length": 100,
                                                         "noise": 0.1}, "seed": 1}})
    assert main(["analyze-reconstruction", "--config", str(cfg), "--out", str(tmp_path),
                 "--bins", "16,64"]) == 0
    rows = list(csv.DictReader((tmp_path / "reconstruction-l2.csv").open()))
    assert [(r["kind"], r["bins"]) for r in rows] == [("quantile", "16"), ("quantile", "64"),
                                                      ("linear", "16"), ("linear", "64")]
    assert main(["analyze-cdf", "--config", str(cfg), "--out", str(tmp_path), "--bins", "64"]) == 0
    summary = json.loads((tmp_path / "cdf-summary.json").read_text())
    assert summary["ks_binned"] < summary["ks_bound"]
    capsys.readouterr()


def test_cli_dataset_path_relative_to_config(tmp_path, capsys):
    from tsbin.core import SynthSpec, synth_panel, write_panel

    write_panel(synth_panel(SynthSpec(n_series=3, length=72), 0), tmp_path / "data" / "p.jsonl")
    doc = tiny_doc(seeds=[0])
    doc["dataset"] = {"path": "data/p.jsonl", "freq": "H"}
    cfg = write_doc(tmp_path, doc)
    assert main(["run", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 0
    assert list(csv.DictReader((tmp_path / "o" / "results.csv").open()))[0]["dataset"] == "p"
    capsys.readouterr()


def test_parallel_jobs_match_serial(matrix, tmp_path):
    cells, records, _ = matrix
    par = run_matrix(cells[:2], tmp_path, jobs=2)
    for a, b in zip(par, records):
        assert [e["mean_wql"] for e in a.per_seed] == [e["mean_wql"] for e in b.per_seed]
        assert a.trained == 3
