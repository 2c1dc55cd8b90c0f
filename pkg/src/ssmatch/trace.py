"""Simulation traces and their CSV form.

A trace file starts with ``# key: value`` header lines (values JSON encoded),
followed by one CSV header row and the numeric rows.
"""
from __future__ import annotations

import io
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


@dataclass
class Trace:
    header: dict
    columns: list
    data: np.ndarray
    extras: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=float).reshape(-1, len(self.columns))
        self._index = {c: k for k, c in enumerate(self.columns)}

    def __len__(self):
        return self.data.shape[0]

    def has(self, name: str) -> bool:
        return name in self._index

    def column(self, name: str) -> np.ndarray:
        return self.data[:, self._index[name]]

    def set_column(self, name: str, values) -> None:
        self.data[:, self._index[name]] = values

    def matching(self, prefix: str) -> list:
        return [c for c in self.columns if c.startswith(prefix)]

    def to_csv_text(self) -> str:
        buf = io.StringIO()
        for key, value in self.header.items():
            buf.write(f"# {key}: {json.dumps(value, sort_keys=True)}\n")
        buf.write(",".join(self.columns) + "\n")
        if len(self):
            np.savetxt(buf, self.data, fmt="%.17g", delimiter=",")
        return buf.getvalue()

    def to_csv(self, path) -> None:
        Path(path).write_text(self.to_csv_text())

    @classmethod
    def from_csv(cls, path) -> "Trace":
        header = {}
        body = []
        for line in Path(path).read_text().splitlines():
            if line.startswith("# "):
                key, _, value = line[2:].partition(": ")
                header[key] = json.loads(value)
            elif line:
                body.append(line)
        columns = body[0].split(",")
        rows = [[float(v) for v in ln.split(",")] for ln in body[1:]]
        return cls(header, columns, np.array(rows, dtype=float).reshape(len(rows), len(columns)))
