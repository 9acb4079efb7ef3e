"""Run manifests and snapshot-series analysis.

A manifest is the run's config file plus two sections::

    [run]
    id = toy-0
    trace = trace.csv

    [snapshots]
    0.W_Q = snapshots/000000_W_Q.sosd
    0.W_K = snapshots/000000_W_K.sosd

Snapshot keys are ``<step>.<matrix name>``; matrix names are free-form, so
weights exported from another model can be analyzed the same way. Relative
paths resolve against the manifest's directory.
"""

from __future__ import annotations

import configparser
import csv
import os
from dataclasses import dataclass, field

import numpy as np

from sosd.config import RunConfig, parse_config, to_parser
from sosd.snapshots import SnapshotFormatError, read_snapshot
from sosd.spectral import DegenerateSpectrumError, cosine_similarity, sd_variation, snapshot

__all__ = [
    "AnalysisResult",
    "ManifestError",
    "RunManifest",
    "analyze_snapshots",
    "load_manifest",
    "write_analysis",
    "write_manifest",
]


class ManifestError(ValueError):
    def __init__(self, message: str, entry=None):
        super().__init__(message if entry is None else f"{message}: {entry}")
        self.entry = entry


@dataclass
class RunManifest:
    run_id: str
    entries: list[tuple[int, str, str]]
    config: RunConfig | None = None
    trace: str | None = None
    base_dir: str = "."

    def resolve(self, path: str) -> str:
        return path if os.path.isabs(path) else os.path.join(self.base_dir, path)

    def matrices(self) -> list[str]:
        seen = []
        for _, name, _ in self.entries:
            if name not in seen:
                seen.append(name)
        return seen

    def series(self, matrix: str) -> list[tuple[int, str]]:
        return [(s, p) for s, m, p in self.entries if m == matrix]


def write_manifest(path, manifest: RunManifest) -> None:
    if manifest.config is not None:
        p = to_parser(manifest.config)
    else:
        p = configparser.ConfigParser(interpolation=None)
        p.optionxform = str
    run = {"id": manifest.run_id}
    if manifest.trace:
        run["trace"] = manifest.trace
    p["run"] = run
    p["snapshots"] = {f"{s}.{m}": rel for s, m, rel in manifest.entries}
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        p.write(fh)
    os.replace(tmp, path)


def load_manifest(path) -> RunManifest:
    with open(path, encoding="utf-8") as fh:
        text = fh.read()
    p = configparser.ConfigParser(interpolation=None)
    p.optionxform = str
    try:
        p.read_string(text)
    except configparser.Error as exc:
        raise ManifestError(f"malformed manifest: {exc}") from None
    if not p.has_section("snapshots"):
        raise ManifestError("manifest has no [snapshots] section")
    entries = []
    last = -1
    for key, rel in p.items("snapshots"):
        step_s, _, name = key.partition(".")
        try:
            step = int(step_s)
        except ValueError:
            raise ManifestError("bad snapshot key", key) from None
        if not name:
            raise ManifestError("snapshot key lacks a matrix name", key)
        if step < last:
            raise ManifestError("snapshot steps must be nondecreasing", key)
        last = step
        entries.append((step, name, rel.strip()))
    config = parse_config(text) if p.has_section("model") else None
    run_id = p.get("run", "id", fallback=os.path.splitext(os.path.basename(path))[0])
    trace = p.get("run", "trace", fallback=None)
    return RunManifest(run_id, entries, config, trace, os.path.dirname(os.path.abspath(path)))


@dataclass
class MatrixSeries:
    steps: list[int]
    cos_to_final: list[float]
    spectral_cos_to_final: list[float]
    sd_var: list[float]  # to the previous snapshot; NaN for the first


@dataclass
class AnalysisResult:
    series: dict[str, MatrixSeries] = field(default_factory=dict)


def _safe(fn, *args) -> float:
    try:
        return fn(*args)
    except (ValueError, DegenerateSpectrumError):
        return float("nan")


def analyze_snapshots(manifest: RunManifest) -> AnalysisResult:
    """Cosine-to-final of weights and spectra, plus SD variation between snapshots."""
    out = AnalysisResult()
    for name in manifest.matrices():
        items = manifest.series(name)
        if len(items) < 2:
            raise ManifestError("need at least two snapshots", name)
        mats = []
        for step, rel in items:
            path = manifest.resolve(rel)
            entry = f"{step}.{name} = {rel}"
            try:
                W = read_snapshot(path)
            except FileNotFoundError:
                raise ManifestError("missing snapshot file", entry) from None
            except SnapshotFormatError as exc:
                raise ManifestError(f"corrupt snapshot ({exc})", entry) from None
            if mats and W.shape != mats[0].shape:
                raise ManifestError(f"shape drift {mats[0].shape} -> {W.shape}", entry)
            mats.append(W)
        spectra = [snapshot(W) for W in mats]
        WT, ST = mats[-1], spectra[-1].singular_values
        s = MatrixSeries([st for st, _ in items], [], [], [])
        for i, (W, sp) in enumerate(zip(mats, spectra)):
            s.cos_to_final.append(_safe(cosine_similarity, W, WT))
            s.spectral_cos_to_final.append(_safe(cosine_similarity, sp.singular_values, ST))
            s.sd_var.append(float("nan") if i == 0 else _safe(sd_variation, spectra[i - 1], sp))
        out.series[name] = s
    return out


ANALYSIS_COLUMNS = ("step", "matrix", "cos_to_final", "spectral_cos_to_final", "sd_var")


def write_analysis(path, result: AnalysisResult) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(ANALYSIS_COLUMNS)
        for name, s in result.series.items():
            for i, step in enumerate(s.steps):
                w.writerow([
                    step, name,
                    format(s.cos_to_final[i], ".17g"),
                    format(s.spectral_cos_to_final[i], ".17g"),
                    format(s.sd_var[i], ".17g"),
                ])


def first_crossing(steps, values, level: float) -> int | None:
    """First step whose value reaches ``level``."""
    arr = np.asarray(values, dtype=np.float64)
    hit = np.nonzero(arr >= level)[0]
    return int(steps[hit[0]]) if hit.size else None
