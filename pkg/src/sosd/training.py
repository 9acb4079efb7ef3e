"""Full-batch training loop with per-step spectral telemetry."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from sosd.config import RunConfig
from sosd.model import TRAINABLE, Batch, ModelState, backward, forward, gen_dataset, init_params
from sosd.optim import init_opt_state, lr_at, optimizer_step
from sosd.spectral import DegenerateSpectrumError, norms_from_snapshot, sd_variation, snapshot
from sosd.telemetry import (
    MatrixMetrics,
    MetricsRecord,
    PhaseReport,
    ThresholdConstants,
    estimate_beta,
    margins,
    measure_constants,
    phase_report,
    running_max_grad,
)

__all__ = ["TrainResult", "train"]

NAN = float("nan")


@dataclass
class TrainResult:
    config: RunConfig
    state: ModelState
    init_state: ModelState
    batch: Batch
    records: list[MetricsRecord]
    constants: ThresholdConstants | None
    phases: PhaseReport | None

    def series(self, matrix: str, key: str) -> np.ndarray:
        return np.array([r.get(matrix, key) for r in self.records])

    @property
    def losses(self) -> np.ndarray:
        return np.array([r.loss for r in self.records])


def _measure(W: np.ndarray, G: np.ndarray):
    snap = snapshot(W)
    gn = float(np.linalg.norm(G))
    if snap.trace == 0:
        return snap, MatrixMetrics(0.0, 0.0, math.inf, gn)
    nb = norms_from_snapshot(snap)
    return snap, MatrixMetrics(nb.frobenius, nb.nuclear, nb.condition_number, gn)


def train(
    cfg: RunConfig,
    on_record: Callable[[MetricsRecord], None] | None = None,
    on_snapshot: Callable[[int, ModelState], None] | None = None,
    analyze: bool = True,
    batch: Batch | None = None,
) -> TrainResult:
    """Run ``cfg.total_steps`` optimizer steps and collect one record per visited state.

    Records are handed to ``on_record`` one step late, once their look-ahead
    fields (SD variation and beta estimate) are known. ``on_snapshot`` is
    called for every step selected by the config's snapshot cadence. A given
    ``batch`` replaces the synthetic data (and disables resampling).
    """
    T = cfg.total_steps
    state = init_params(cfg.model)
    init_state = state.copy()
    batch0 = batch if batch is not None else gen_dataset(cfg.model, cfg.noise, cfg.data_seed)
    resample = cfg.resample and batch is None
    opt = init_opt_state(cfg.optimizer, state)
    records: list[MetricsRecord] = []
    prev = None  # (record, snapshots, weights, grads)
    gh0 = NAN

    for t in range(T + 1):
        cur = gen_dataset(cfg.model, cfg.noise, cfg.data_seed, draw=t) if resample and t else batch0
        cache = forward(state, cur)
        grads = backward(state, cur, cache)
        gw = grads.for_weights()
        snaps, mats = {}, {}
        for name in TRAINABLE:
            snaps[name], mats[name] = _measure(getattr(state, name), gw[name])
        nuclear = {k: m.nuc_norm for k, m in mats.items()}
        try:
            gamma, omega = margins(state, cache, cur.labels, nuclear)
        except ValueError:
            gamma = omega = NAN
        gh = float(np.linalg.norm(grads.G_H))
        if t == 0:
            gh0 = gh
        rec = MetricsRecord(
            step=t,
            loss=cache.loss,
            lr=lr_at(cfg.schedule, t, T),
            matrices=mats,
            gamma_min=gamma,
            omega_min=omega,
            gh_norm=gh,
        )
        weights = state.trainable()
        if prev is not None:
            p_rec, p_snaps, p_w, p_g = prev
            for name in TRAINABLE:
                try:
                    p_rec.matrices[name].sd_var = sd_variation(p_snaps[name], snaps[name])
                except DegenerateSpectrumError:
                    pass
            try:
                p_rec.beta_est = estimate_beta(p_w, weights, p_g, gw)
            except ValueError:
                pass
            records.append(p_rec)
            if on_record:
                on_record(p_rec)
        if on_snapshot and cfg.snapshot_due(t):
            on_snapshot(t, state)
        prev = (rec, snaps, weights, gw)
        if t < T:
            state, opt = optimizer_step(state, grads, cfg.optimizer, opt, rec.lr)

    records.append(prev[0])
    if on_record:
        on_record(prev[0])

    constants = phases = None
    if analyze:
        constants, phases = analyze_records(cfg, records, init_state, batch0, gh0)
    return TrainResult(cfg, state, init_state, batch0, records, constants, phases)


def analyze_records(cfg: RunConfig, records, init_state: ModelState, batch: Batch, gh0: float):
    d = cfg.model.d
    G = float(running_max_grad(records)[-1])
    kappa = {m: max(r.get(m, "cond") for r in records) for m in TRAINABLE}
    init_norms = {m: float(np.linalg.norm(getattr(init_state, m))) for m in TRAINABLE}
    final_nuc = {m: records[-1].get(m, "nuc_norm") for m in TRAINABLE}
    try:
        constants = measure_constants(
            batch.X, gh0, init_norms, kappa, G, cfg.schedule.base_lr, final_nuc
        )
    except ValueError:
        constants = None
    try:
        phases = phase_report(records, d, constants, window=cfg.window)
    except ValueError:
        phases = None
    return constants, phases
