import csv
import io
import json
import math
import os
import threading
from typing import Any, Dict, Iterable, Optional, Sequence

import numpy as np

from physics import EmitterConfiguration

SCHEMA_VERSION = 1

RECORD_CSV_COLUMNS = ("n", "r_min", "polarization", "mode", "best_gamma", "geometry_class")


class SchemaMismatchError(RuntimeError):
    pass


def fmt(value: Any) -> str:
    """Text form used in tables and CSV: 12 significant digits for reals."""
    if value is None:
        return ""
    if isinstance(value, (bool, np.bool_)):
        return str(bool(value)).lower()
    if isinstance(value, (float, np.floating)):
        if math.isnan(value):
            return "nan"
        return f"{float(value):.12g}"
    if isinstance(value, (list, tuple)):
        return " ".join(fmt(v) for v in value)
    return str(value)


def _plain(value: Any) -> Any:
    if isinstance(value, np.ndarray):
        return [_plain(v) for v in value.tolist()]
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, np.floating):
        return float(value)
    if isinstance(value, np.bool_):
        return bool(value)
    if isinstance(value, dict):
        return {str(k): _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    return value


def _dumps(payload: Dict[str, Any], indent: Optional[int] = None) -> str:
    return json.dumps(_plain(payload), ensure_ascii=False, indent=indent, allow_nan=False)


def _with_schema(payload: Dict[str, Any]) -> Dict[str, Any]:
    out = {"schema_version": SCHEMA_VERSION}
    out.update((k, v) for k, v in payload.items() if k != "schema_version")
    return out


def _check_schema(data: Any, where: str) -> Dict[str, Any]:
    if not isinstance(data, dict):
        raise SchemaMismatchError(f"{where}: expected a JSON object")
    version = data.get("schema_version")
    if version != SCHEMA_VERSION:
        raise SchemaMismatchError(f"{where}: schema_version {version!r}, this build reads {SCHEMA_VERSION}")
    return data


def write_json_atomic(path: str, payload: Dict[str, Any]) -> None:
    text = _dumps(_with_schema(payload), indent=2) + "\n"
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    write_text(path, text)


def read_json(path: str) -> Dict[str, Any]:
    with open(path, "r", encoding="utf-8") as fh:
        return _check_schema(json.load(fh), path)


class RecordWriter:
    """Append-only JSON-lines stream; one object per line, key order preserved."""

    def __init__(self, path: str):
        self.path = path
        self.count = 0
        self._lock = threading.RLock()
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        self._fh = open(path, "w", encoding="utf-8", newline="\n")

    def append(self, record: Dict[str, Any]) -> None:
        line = _dumps(_with_schema(record))
        with self._lock:
            self._fh.write(line + "\n")
            self._fh.flush()
            self.count += 1

    def extend(self, records: Iterable[Dict[str, Any]]) -> None:
        for rec in records:
            self.append(rec)

    def close(self) -> None:
        with self._lock:
            if not self._fh.closed:
                self._fh.close()

    def __enter__(self) -> "RecordWriter":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def read_records(path: str) -> list[Dict[str, Any]]:
    out: list[Dict[str, Any]] = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                data = json.loads(line)
            except json.JSONDecodeError as exc:
                raise SchemaMismatchError(f"{path}:{lineno}: not a JSON record ({exc.msg})") from exc
            out.append(_check_schema(data, f"{path}:{lineno}"))
    return out


def csv_text(rows: Iterable[Dict[str, Any]], columns: Sequence[str]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        writer.writerow([fmt(row.get(col)) for col in columns])
    return buf.getvalue()


def write_csv(path: str, rows: Iterable[Dict[str, Any]], columns: Sequence[str] = RECORD_CSV_COLUMNS) -> None:
    text = csv_text(rows, columns)
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)
    os.replace(tmp, path)


def format_table(columns: Sequence[str], rows: Iterable[Sequence[Any]]) -> str:
    cells = [[fmt(v) for v in row] for row in rows]
    widths = [len(c) for c in columns]
    for row in cells:
        widths = [max(w, len(v)) for w, v in zip(widths, row)]
    lines = ["  ".join(c.ljust(w) for c, w in zip(columns, widths)).rstrip()]
    lines.append("  ".join("-" * w for w in widths))
    for row in cells:
        lines.append("  ".join(v.rjust(w) for v, w in zip(row, widths)).rstrip())
    return "\n".join(lines) + "\n"


def write_text(path: str, text: str) -> None:
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)
    os.replace(tmp, path)


def save_configuration(path: str, cfg: EmitterConfiguration, **meta: Any) -> None:
    payload: Dict[str, Any] = {"n": cfg.n, "positions": cfg.to_list()}
    payload.update(meta)
    write_json_atomic(path, payload)


def load_configuration(path: str) -> EmitterConfiguration:
    data = read_json(path)
    positions = data.get("positions")
    if not isinstance(positions, list):
        raise SchemaMismatchError(f"{path}: missing 'positions' array")
    return EmitterConfiguration.from_list(positions)
