import json
from pathlib import Path

import numpy as np
import pytest

import records
from physics import EmitterConfiguration, Polarization, min_decay
from structures import triangular_fragment


def test_record_stream_roundtrip(tmp_path: Path):
    path = tmp_path / "out" / "records.jsonl"
    with records.RecordWriter(str(path)) as writer:
        writer.append({"n": 3, "r_min": 0.5, "best_gamma": np.float64(0.125), "seeds_used": [np.int64(4)]})
        writer.append({"n": 4, "r_min": 0.6, "best_gamma": None, "seeds_used": []})
        assert writer.count == 2
    lines = path.read_text(encoding="utf-8").splitlines()
    assert len(lines) == 2
    assert lines[0].startswith('{"schema_version": 1, "n": 3, "r_min": 0.5')
    rows = records.read_records(str(path))
    assert rows[0]["best_gamma"] == 0.125
    assert rows[0]["seeds_used"] == [4]
    assert rows[1]["best_gamma"] is None


def test_read_records_rejects_other_schema(tmp_path: Path):
    path = tmp_path / "records.jsonl"
    path.write_text(json.dumps({"schema_version": 99, "n": 3}) + "\n", encoding="utf-8")
    with pytest.raises(records.SchemaMismatchError):
        records.read_records(str(path))
    path.write_text("not json\n", encoding="utf-8")
    with pytest.raises(records.SchemaMismatchError):
        records.read_records(str(path))


def test_write_json_atomic_leaves_no_tmp(tmp_path: Path):
    path = tmp_path / "derun.json"
    records.write_json_atomic(str(path), {"best_gamma": 0.5, "vector": np.array([1.0, 2.0])})
    assert not (tmp_path / "derun.json.tmp").exists()
    data = records.read_json(str(path))
    assert data["schema_version"] == records.SCHEMA_VERSION
    assert data["vector"] == [1.0, 2.0]


def test_non_finite_values_are_refused(tmp_path: Path):
    with pytest.raises(ValueError):
        records.write_json_atomic(str(tmp_path / "x.json"), {"gamma": float("nan")})


def test_configuration_file_roundtrip(tmp_path: Path):
    cfg = triangular_fragment(6, 0.6123456789).transformed(angle=0.3, shift=(0.1, -0.2))
    path = tmp_path / "best.json"
    records.save_configuration(str(path), cfg, best_gamma=0.01)
    back = records.load_configuration(str(path))
    for pol in (Polarization.SIGMA_Z, Polarization.SIGMA_PLUS):
        assert min_decay(back, pol).gamma_min == pytest.approx(min_decay(cfg, pol).gamma_min, abs=1e-12)


def test_load_configuration_needs_positions(tmp_path: Path):
    path = tmp_path / "bad.json"
    records.write_json_atomic(str(path), {"n": 2})
    with pytest.raises(records.SchemaMismatchError):
        records.load_configuration(str(path))


def test_fmt_uses_twelve_significant_digits():
    assert records.fmt(1.0 / 3.0) == "0.333333333333"
    assert records.fmt(None) == ""
    assert records.fmt(True) == "true"
    assert records.fmt([0.5, 2]) == "0.5 2"


def test_csv_projection(tmp_path: Path):
    path = tmp_path / "records.csv"
    rows = [{"n": 6, "r_min": 0.3, "polarization": "sigma_z", "mode": "free2d", "best_gamma": 1e-3, "geometry_class": "linear_regular", "extra": 1}]
    records.write_csv(str(path), rows)
    text = path.read_text(encoding="utf-8").splitlines()
    assert text[0] == "n,r_min,polarization,mode,best_gamma,geometry_class"
    assert text[1] == "6,0.3,sigma_z,free2d,0.001,linear_regular"


def test_format_table_aligns_columns():
    table = records.format_table(("mode", "decay"), [(0, 0.5), (10, 1.25)])
    lines = table.splitlines()
    assert lines[0].split() == ["mode", "decay"]
    assert len({len(line) for line in lines[2:]}) == 1
