"""CSV trace files: one header row, then one row per recorded step."""

from __future__ import annotations

import csv
import io
import os

from sosd.model import TRAINABLE
from sosd.telemetry import MatrixMetrics, MetricsRecord

__all__ = [
    "COLUMNS",
    "TraceFormatError",
    "TraceWriter",
    "append_trace_row",
    "format_row",
    "parse_trace",
    "read_trace",
    "write_trace",
]

MATRIX_FIELDS = ("fro_norm", "nuc_norm", "cond", "grad_norm", "sd_var")
COLUMNS = (
    ("step", "loss", "lr")
    + tuple(f"{m}_{f}" for m in TRAINABLE for f in MATRIX_FIELDS)
    + ("gamma_min", "omega_min", "beta_est")
)


class TraceFormatError(ValueError):
    pass


def _num(x: float) -> str:
    return format(float(x), ".17g")


def format_row(rec: MetricsRecord) -> list[str]:
    row = [str(int(rec.step)), _num(rec.loss), _num(rec.lr)]
    for m in TRAINABLE:
        mm = rec.matrices[m]
        row += [_num(getattr(mm, f)) for f in MATRIX_FIELDS]
    row += [_num(rec.gamma_min), _num(rec.omega_min), _num(rec.beta_est)]
    return row


class TraceWriter:
    """Append-only trace writer; each row is flushed as written (and fsynced if asked)."""

    def __init__(self, path, fsync: bool = False):
        self.path = os.fspath(path)
        self.fsync = fsync
        self.last_step = None
        exists = os.path.exists(self.path) and os.path.getsize(self.path) > 0
        if exists:
            rows = read_trace(self.path)
            self.last_step = rows[-1].step if rows else None
        self._fh = open(self.path, "a", encoding="utf-8", newline="")
        self._csv = csv.writer(self._fh, lineterminator="\n")
        if not exists:
            self._csv.writerow(COLUMNS)
            self._flush()

    def _flush(self):
        self._fh.flush()
        if self.fsync:
            os.fsync(self._fh.fileno())

    def append(self, rec: MetricsRecord) -> None:
        if self.last_step is not None and rec.step <= self.last_step:
            raise ValueError(f"step {rec.step} does not follow last written step {self.last_step}")
        self._csv.writerow(format_row(rec))
        self._flush()
        self.last_step = rec.step

    def close(self):
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def append_trace_row(path, rec: MetricsRecord) -> None:
    with TraceWriter(path) as w:
        w.append(rec)


def parse_trace(text: str) -> list[MetricsRecord]:
    rows = list(csv.reader(io.StringIO(text)))
    if not rows:
        raise TraceFormatError("empty trace")
    if tuple(rows[0]) != COLUMNS:
        raise TraceFormatError("unexpected header")
    out = []
    last = None
    for lineno, row in enumerate(rows[1:], start=2):
        if len(row) != len(COLUMNS):
            raise TraceFormatError(f"line {lineno}: expected {len(COLUMNS)} fields, got {len(row)}")
        try:
            step = int(row[0])
            vals = [float(x) for x in row[1:]]
        except ValueError:
            raise TraceFormatError(f"line {lineno}: non-numeric field") from None
        if last is not None and step <= last:
            raise TraceFormatError(f"line {lineno}: step {step} not increasing")
        last = step
        k = len(MATRIX_FIELDS)
        mats = {}
        for i, m in enumerate(TRAINABLE):
            chunk = vals[2 + i * k : 2 + (i + 1) * k]
            mats[m] = MatrixMetrics(*chunk)
        g, o, b = vals[2 + 3 * k :]
        out.append(MetricsRecord(step, vals[0], vals[1], mats, g, o, b))
    return out


def read_trace(path) -> list[MetricsRecord]:
    with open(path, encoding="utf-8", newline="") as fh:
        return parse_trace(fh.read())


def write_trace(path, records) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(COLUMNS)
        for r in records:
            w.writerow(format_row(r))
