"""Delimited metric streams."""

from __future__ import annotations

import csv
import math


def format_value(v) -> str:
    if isinstance(v, float):
        return "nan" if math.isnan(v) else repr(v)
    return str(v)


class CsvWriter:
    """Append-as-you-go CSV with a fixed column order."""

    def __init__(self, path, columns):
        self.columns = list(columns)
        self._fh = open(path, "w", newline="")
        self._w = csv.writer(self._fh)
        self._w.writerow(self.columns)
        self._fh.flush()

    def write(self, row: dict) -> None:
        missing = [c for c in self.columns if c not in row]
        if missing:
            raise KeyError(f"metrics row missing columns {missing}")
        self._w.writerow([format_value(row[c]) for c in self.columns])
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
        return False


def write_csv(path, columns, rows) -> None:
    with CsvWriter(path, columns) as w:
        for r in rows:
            w.write(r)


def read_csv(path) -> list:
    with open(path, newline="") as fh:
        return [{k: float(v) for k, v in r.items()} for r in csv.DictReader(fh)]
