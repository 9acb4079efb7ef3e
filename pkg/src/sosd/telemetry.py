"""Per-step measurements, threshold prediction and two-phase detection."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from sosd.model import TRAINABLE, ForwardCache, ModelState
from sosd.spectral import snapshot

__all__ = [
    "AssumptionReport",
    "MatrixMetrics",
    "MetricsRecord",
    "PhaseReport",
    "ThresholdConstants",
    "assumption_monitor",
    "descent_monitor",
    "detect_sosd_onset",
    "epsilon_series",
    "estimate_beta",
    "estimate_t_beta",
    "gap",
    "lipschitz_monitor",
    "margins",
    "measure_constants",
    "phase1_bound_proof",
    "phase_report",
    "predict_thresholds",
    "stability_bound",
]

NAN = float("nan")


@dataclass
class MatrixMetrics:
    fro_norm: float
    nuc_norm: float
    cond: float
    grad_norm: float
    sd_var: float = NAN
    cos_to_final: float = NAN


@dataclass
class MetricsRecord:
    """One row of telemetry.

    ``sd_var`` and ``beta_est`` at step t look one step ahead (t -> t+1), so
    they are NaN on the final row of a trace.
    """

    step: int
    loss: float
    lr: float
    matrices: dict[str, MatrixMetrics]
    gamma_min: float = NAN
    omega_min: float = NAN
    beta_est: float = NAN
    gh_norm: float = NAN

    def get(self, matrix: str, key: str) -> float:
        return getattr(self.matrices[matrix], key)


def series(records, matrix: str, key: str) -> np.ndarray:
    return np.array([r.get(matrix, key) for r in records], dtype=np.float64)


def gap(u) -> float:
    """Largest entry minus second largest entry (0 on ties)."""
    u = np.asarray(u, dtype=np.float64).ravel()
    if u.size < 2:
        raise ValueError("gap needs at least two entries")
    top2 = np.partition(u, -2)[-2:]
    return float(top2[1] - top2[0])


def _row_gaps(S: np.ndarray) -> np.ndarray:
    top2 = np.partition(S, -2, axis=1)[:, -2:]
    return top2[:, 1] - top2[:, 0]


def margins(
    state: ModelState,
    cache: ForwardCache,
    labels,
    nuclear: dict[str, float] | None = None,
) -> tuple[float, float]:
    """Minimum normalized attention gap and minimum normalized logit margin.

    ``nuclear`` may carry precomputed nuclear norms keyed by matrix name.
    Both values may be negative (omega) or zero early in training.
    """
    if nuclear is None:
        nuclear = {k: snapshot(getattr(state, k)).trace for k in TRAINABLE}
    nq, nk, nv = nuclear["W_Q"], nuclear["W_K"], nuclear["W_V"]
    if min(nq, nk, nv) <= 0:
        raise ValueError("margins need nonzero nuclear norms")
    y = np.asarray(labels)
    gamma = float(np.min(_row_gaps(cache.M / (nq * nk))))
    Zb = cache.Z / nv
    rows = np.arange(len(y))
    true = Zb[rows, y]
    others = Zb.copy()
    others[rows, y] = -np.inf
    omega = float(np.min(true - others.max(axis=1)))
    return gamma, omega


def _flat(x) -> np.ndarray:
    if isinstance(x, dict):
        return np.concatenate([np.ravel(x[k]) for k in sorted(x)])
    if isinstance(x, (list, tuple)):
        return np.concatenate([np.ravel(v) for v in x])
    return np.ravel(np.asarray(x, dtype=np.float64))


def estimate_beta(theta_t, theta_next, grad_t, grad_next) -> float:
    """Secant estimate ``|grad change| / |parameter change|``.

    Arguments may be arrays, sequences of arrays, or dicts of arrays; they are
    flattened and concatenated in a consistent order.
    """
    dtheta = _flat(theta_next) - _flat(theta_t)
    den = float(np.linalg.norm(dtheta))
    if den == 0:
        raise ValueError("zero parameter displacement")
    return float(np.linalg.norm(_flat(grad_next) - _flat(grad_t))) / den


def stability_bound(d: int, eta: float, G: float, tau: float) -> float:
    """Per-step cap ``(1 + sqrt(d)) * eta * G / tau`` on SD variation."""
    if not tau > 0:
        raise ValueError("nuclear norm must be positive")
    return (1.0 + math.sqrt(d)) * eta * G / tau


@dataclass
class ThresholdConstants:
    d: int
    eta: float
    G: float
    v0: float
    q0: float
    k0: float
    C_V: float
    C_M: float
    epsilon: float | dict[str, float]
    C: float = 1.0
    T_V: float = NAN
    T_QK: float = NAN
    T_star: float = NAN
    T_QK_closed_form: float = NAN
    lambda_eps: float = NAN
    lambda_nonpositive: bool = False

    @property
    def C_0(self) -> float:
        return self.C_M * self.v0

    def eps_for(self, matrix: str) -> float:
        if isinstance(self.epsilon, dict):
            return self.epsilon[matrix]
        return float(self.epsilon)

    def as_dict(self) -> dict:
        out = {k: getattr(self, k) for k in (
            "d", "eta", "G", "v0", "q0", "k0", "C_V", "C_M", "C_0", "C",
            "T_V", "T_QK", "T_star", "T_QK_closed_form", "lambda_eps",
            "lambda_nonpositive",
        )}
        for m in TRAINABLE:
            out[f"epsilon_{m}"] = self.eps_for(m)
        return out


def predict_thresholds(c: ThresholdConstants) -> tuple[float, float, float]:
    """Fill ``c`` with the predicted hitting times and return (T_V, T_QK, T_star).

    With a per-matrix epsilon, T_V uses W_V's value and T_QK the smaller of
    W_Q's and W_K's.
    """
    eps_v = c.eps_for("W_V")
    eps_qk = min(c.eps_for("W_Q"), c.eps_for("W_K"))
    for name in ("eta", "G", "C_V", "C_M", "v0", "q0"):
        if not getattr(c, name) > 0:
            raise ValueError(f"{name} must be positive")
    if not (eps_v > 0 and eps_qk > 0):
        raise ValueError("epsilon must be positive")
    rd = math.sqrt(c.d)
    drive = (1.0 + rd) * c.eta * c.G

    T_V = max(0.0, (drive - eps_v * c.v0) / (eps_v * c.C_V * rd))

    lam = math.log(1.0 + rd) - math.log(eps_qk * c.q0 * rd)
    C0 = c.C_0
    c.lambda_eps = lam
    if lam <= 0:
        c.lambda_nonpositive = True
        T_QK = 0.0
        c.T_QK_closed_form = 0.0
    else:
        c.lambda_nonpositive = False
        T_QK = math.sqrt(C0 * C0 + 2.0 * C0 * lam * c.eta * c.G)
        c.T_QK_closed_form = (-C0 + math.sqrt(C0 * C0 + 2.0 * C0 * lam)) / (c.C_M * c.C_V)

    branch_v = drive / (eps_v * c.C_V * rd)
    T_star = c.C * max(branch_v, T_QK)
    c.T_V, c.T_QK, c.T_star = T_V, T_QK, T_star
    return T_V, T_QK, T_star


def measure_constants(
    X: np.ndarray,
    gh_norm0: float,
    init_norms: dict[str, float],
    kappa_max: dict[str, float],
    G: float,
    eta: float,
    final_nuclear: dict[str, float],
    epsilon: float | None = None,
    C: float = 1.0,
) -> ThresholdConstants:
    """Assemble the run constants and predicted thresholds.

    ``init_norms`` are step-0 Frobenius norms; ``kappa_max`` running maxima of
    the condition numbers. Unless ``epsilon`` is given, each matrix gets the
    stability bound at its final nuclear norm.
    """
    n, d = X.shape[0], X.shape[1]
    lam_min = float(snapshot(X).singular_values[-1])
    C_V = lam_min * gh_norm0 / math.sqrt(n)
    base = (math.sqrt(n) - 1.0) * lam_min**3 * gh_norm0 / (n**1.5 * d**2.5)
    C_Q = base / (kappa_max["W_K"] * kappa_max["W_V"])
    C_K = base / (kappa_max["W_Q"] * kappa_max["W_V"])
    if epsilon is None:
        eps = {m: stability_bound(d, eta, G, final_nuclear[m]) for m in TRAINABLE}
    else:
        eps = float(epsilon)
    c = ThresholdConstants(
        d=d,
        eta=eta,
        G=G,
        v0=init_norms["W_V"],
        q0=init_norms["W_Q"],
        k0=init_norms["W_K"],
        C_V=C_V,
        C_M=min(C_Q, C_K),
        epsilon=eps,
        C=C,
    )
    predict_thresholds(c)
    return c


def detect_sosd_onset(values, eps, window: int = 50, start: int = 0) -> int | None:
    """Smallest t >= start with values[s] < eps for every s in [t, t + window).

    ``eps`` may be a scalar or a per-step array of the same length as
    ``values``. NaN entries never count as stable.
    """
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        raise ValueError("empty trace")
    if window < 1:
        raise ValueError("window must be at least 1")
    e = np.broadcast_to(np.asarray(eps, dtype=np.float64), v.shape)
    below = v < e
    run = 0
    for t in range(max(start, 0), v.size):
        run = run + 1 if below[t] else 0
        if run >= window:
            return t - window + 1
    return None


def running_max_grad(records) -> np.ndarray:
    g = np.array([max(r.get(m, "grad_norm") for m in TRAINABLE) for r in records])
    return np.maximum.accumulate(g)


def epsilon_series(records, d: int, matrix: str, G: np.ndarray | None = None) -> np.ndarray:
    """Stability bound at every step from the step's lr, nuclear norm and running-max G."""
    if G is None:
        G = running_max_grad(records)
    lr = np.array([r.lr for r in records])
    tau = series(records, matrix, "nuc_norm")
    return (1.0 + math.sqrt(d)) * lr * G / tau


@dataclass
class AssumptionReport:
    norm_decreases: list[tuple[int, str]]
    max_condition: dict[str, float]
    G: float
    gh_norm_below_floor: bool | None
    skipped_steps: list[int] = field(default_factory=list)

    @property
    def monotone(self) -> bool:
        return not self.norm_decreases


def assumption_monitor(records) -> AssumptionReport:
    """Report norm-monotonicity violations, max condition numbers and G."""
    if len(records) < 2:
        raise ValueError("need at least two records")
    decreases = []
    for m in TRAINABLE:
        f = series(records, m, "fro_norm")
        for i in np.nonzero(np.diff(f) < 0)[0]:
            decreases.append((records[i + 1].step, m))
    decreases.sort()
    cond = {m: float(np.nanmax(series(records, m, "cond"))) for m in TRAINABLE}
    G = float(running_max_grad(records)[-1])
    gh = np.array([r.gh_norm for r in records])
    gh_flag = None if np.all(np.isnan(gh)) else bool(np.nanmin(gh) < 1e-12)
    skipped = [r.step for r in records if any(np.isnan(r.get(m, "nuc_norm")) for m in TRAINABLE)]
    return AssumptionReport(decreases, cond, G, gh_flag, skipped)


def lipschitz_monitor(records, d: int) -> dict[str, float]:
    """Worst slack of ``bound - sd_var`` per matrix along the trace.

    The bound is ``(1 + sqrt(d)) / min(tau_t, tau_{t+1}) * lr_t * |G_t|``.
    """
    out = {}
    lr = np.array([r.lr for r in records[:-1]])
    for m in TRAINABLE:
        tau = series(records, m, "nuc_norm")
        g = series(records, m, "grad_norm")[:-1]
        sd = series(records, m, "sd_var")[:-1]
        bound = (1.0 + math.sqrt(d)) / np.minimum(tau[:-1], tau[1:]) * lr * g
        out[m] = float(np.min(bound - sd))
    return out


def descent_monitor(records) -> dict[str, float]:
    """Soft trajectory check of the two descent inequalities with a running-max beta.

    Returns counts of violations and of steps where ``lr * beta < 2``.
    """
    beta_hat = 0.0
    lower = upper = checked = 0
    for r, nxt in zip(records[:-1], records[1:]):
        if not math.isnan(r.beta_est):
            beta_hat = max(beta_hat, r.beta_est)
        if not r.lr * beta_hat < 2 or beta_hat == 0:
            continue
        g2 = sum(r.get(m, "grad_norm") ** 2 for m in TRAINABLE)
        dL = r.loss - nxt.loss
        tol = 1e-6 * max(1.0, r.loss)
        checked += 1
        lower += dL < r.lr * (1 - r.lr * beta_hat / 2) * g2 - tol
        upper += dL > r.lr * (1 + r.lr * beta_hat / 2) * g2 + tol
    return {"checked": checked, "lower_violations": lower, "upper_violations": upper}


def estimate_t_beta(beta, horizon: int = 100, factor: float = 2.0) -> int | None:
    """First t after which beta stays within ``factor`` of its trailing median for ``horizon`` steps."""
    b = np.asarray(beta, dtype=np.float64)
    ok = np.zeros(b.size, dtype=bool)
    for s in range(b.size):
        hist = b[max(0, s - horizon + 1) : s + 1]
        hist = hist[~np.isnan(hist)]
        if hist.size == 0 or np.isnan(b[s]):
            continue
        med = np.median(hist)
        ok[s] = med / factor <= b[s] <= med * factor
    return detect_sosd_onset(~ok, 0.5, horizon) if b.size else None


def phase1_bound_proof(d: int, D: float) -> float:
    """Phase I decrement bound as derived in the proof with step size 1/beta."""
    return 3.0 * D * D / (2.0 * (1.0 + math.sqrt(d)))


@dataclass
class PhaseReport:
    sosd_onset: dict[str, int | None]
    phase1_end: int | None
    phase2_start: int | None
    beta_threshold_estimate: int | None
    phase1_mean_dL: float
    phase2_mean_dL: float
    p_hat: float | None
    D_estimate: float
    phase1_bound: float
    phase1_bound_proof: float
    peak: dict[str, float] = field(default_factory=dict)
    floor: dict[str, float] = field(default_factory=dict)
    peak_step: dict[str, int] = field(default_factory=dict)
    notes: list[str] = field(default_factory=list)

    @property
    def phase_ratio(self) -> float:
        if self.phase2_mean_dL > 0:
            return self.phase1_mean_dL / self.phase2_mean_dL
        return math.inf if self.phase1_mean_dL > 0 else NAN

    @property
    def phase1_bound_holds(self) -> bool:
        return self.phase1_mean_dL >= self.phase1_bound


def phase_report(
    records,
    d: int,
    thresholds: ThresholdConstants | None = None,
    window: int = 50,
    epsilon: float | None = None,
    from_peak: bool = True,
    floor_fraction: float = 0.1,
) -> PhaseReport:
    """Locate SoSD onsets and summarize the two loss-descent phases.

    By default the onset search for each matrix starts at its SD-variation
    peak, with epsilon the per-step stability bound (or a fixed ``epsilon``).
    """
    from sosd.verification import check_phase1_bound, fit_phase2_exponent

    if len(records) < 3:
        raise ValueError("need at least three records")
    T = len(records) - 1  # number of transitions
    loss = np.array([r.loss for r in records])
    dL = loss[:-1] - loss[1:]
    G = running_max_grad(records)
    sd = {m: series(records, m, "sd_var")[:T] for m in TRAINABLE}
    notes = []

    onsets, peak, floor, peak_step = {}, {}, {}, {}
    tail = max(1, int(round(floor_fraction * T)))
    for m in TRAINABLE:
        eps = epsilon if epsilon is not None else epsilon_series(records, d, m, G)[:T]
        k = int(np.nanargmax(sd[m]))
        peak_step[m] = k
        peak[m] = float(sd[m][k])
        floor[m] = float(np.nanmedian(sd[m][-tail:]))
        onsets[m] = detect_sosd_onset(sd[m], eps, window, start=k if from_peak else 0)

    found = [o for o in onsets.values() if o is not None]
    if len(found) < len(TRAINABLE):
        notes.append("SoSD onset not found for every matrix")
    if found:
        T_s = max(found)
        T_f = max(min(found) - 1, 0)
    else:
        T_s = T_f = None

    if T_f is not None:
        p1 = dL[: T_f + 1]
        p2 = dL[T_s + 1 :]
        m1 = float(np.mean(p1)) if p1.size else NAN
        m2 = float(np.mean(p2)) if p2.size else NAN
        sdmax = np.max(np.vstack([sd[m] for m in TRAINABLE]), axis=0)
        p_hat = fit_phase2_exponent(list(zip(sdmax[T_s + 1 :], dL[T_s + 1 :])))
        taus = np.vstack([series(records, m, "nuc_norm")[:T] for m in TRAINABLE])
        sds = np.vstack([sd[m] for m in TRAINABLE])
        D = float(np.min(np.max(taus[:, : T_f + 1] * sds[:, : T_f + 1], axis=0)))
    else:
        m1 = m2 = D = NAN
        p_hat = None

    eta = thresholds.eta if thresholds is not None else records[0].lr or records[1].lr
    bound = check_phase1_bound(d, eta, D) if D == D else NAN
    bound_proof = phase1_bound_proof(d, D) if D == D else NAN
    beta = np.array([r.beta_est for r in records])
    if np.any(~np.isnan(beta)) and abs(np.nanmax(beta) * eta - 1.0) < 0.1:
        notes.append("beta*eta is close to 1; the proof-form phase I bound applies")

    return PhaseReport(
        sosd_onset=onsets,
        phase1_end=T_f,
        phase2_start=T_s,
        beta_threshold_estimate=estimate_t_beta(beta[:T]),
        phase1_mean_dL=m1,
        phase2_mean_dL=m2,
        p_hat=p_hat,
        D_estimate=D,
        phase1_bound=bound,
        phase1_bound_proof=bound_proof,
        peak=peak,
        floor=floor,
        peak_step=peak_step,
        notes=notes,
    )
