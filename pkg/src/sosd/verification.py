"""Seeded randomized checks of the matrix inequalities behind the SoSD analysis.

Each trial draws its own generator from ``(seed, lemma code, trial index)`` so
reports are identical regardless of evaluation order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from sosd.model import (
    TRAINABLE,
    Batch,
    ModelConfig,
    backward,
    forward,
    gen_dataset,
    init_params,
    linearized_attention,
    softmax_rows,
)
from sosd.spectral import sd_variation, snapshot, svd

__all__ = [
    "LEMMAS",
    "SuiteReport",
    "check_descent_lemma",
    "check_inequality_suite",
    "check_phase1_bound",
    "finite_diff_gradcheck",
    "fit_phase2_exponent",
    "gradcheck_instance",
    "random_gradcheck_configs",
]

LEMMAS = ("L1", "L2", "L3", "L4", "L6", "L7", "L8")
TOL = 1e-9
L8_FACTOR = 3.5
L8_START_NORM = 1e-2


@dataclass
class SuiteReport:
    lemma: str
    trials: int
    violations: int
    worst_slack: float
    min_margin: float
    seed: int
    dims: tuple[int, int]
    extra: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return self.violations == 0

    def to_text(self) -> str:
        lines = [
            f"lemma: {self.lemma}",
            f"trials: {self.trials}",
            f"violations: {self.violations}",
            f"worst_slack: {self.worst_slack:.17g}",
            f"min_margin: {self.min_margin:.17g}",
            f"seed: {self.seed}",
            f"dims: {self.dims[0]}-{self.dims[1]}",
        ]
        lines += [f"{k}: {_fmt(v)}" for k, v in sorted(self.extra.items())]
        lines.append(f"status: {'PASS' if self.passed else 'FAIL'}")
        return "\n".join(lines)


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.17g}"
    return str(v)


class _Tally:
    def __init__(self, tol: float):
        self.tol = tol
        self.violations = 0
        self.worst = math.inf
        self.margin = math.inf

    def add(self, slack: float):
        self.worst = min(self.worst, slack)
        if slack < -self.tol or math.isnan(slack):
            self.violations += 1
        else:
            self.margin = min(self.margin, slack)


def _rng(seed: int, code: int, trial: int) -> np.random.Generator:
    return np.random.default_rng([seed, code, trial])


def _log_uniform(rng, lo=1e-3, hi=1e3) -> float:
    return float(np.exp(rng.uniform(np.log(lo), np.log(hi))))


def _random_matrix(rng, m, n, scale=None) -> np.ndarray:
    W = rng.normal(size=(m, n))
    target = _log_uniform(rng) if scale is None else scale
    return W * (target / np.linalg.norm(W))


def _random_orthogonal(rng, m) -> np.ndarray:
    Q, R = np.linalg.qr(rng.normal(size=(m, m)))
    return Q * np.sign(np.diag(R))


def _slack_l1(rng, lo, hi) -> float:
    n = int(rng.integers(lo, hi + 1))
    a = rng.uniform(0.01, 1.0, n) * _log_uniform(rng)
    if rng.random() < 0.5:
        b = a * (1 + 0.1 * rng.normal(size=n))
        b = np.abs(b) + 1e-300
    else:
        b = rng.uniform(0.01, 1.0, n) * _log_uniform(rng)
    alpha, beta = a.sum(), b.sum()
    lhs = np.linalg.norm(a / alpha - b / beta)
    rhs = (1 + math.sqrt(n)) / min(alpha, beta) * np.linalg.norm(a - b)
    return float(rhs - lhs)


def _slack_l2(rng, lo, hi) -> float:
    m = int(rng.integers(lo, hi + 1))
    n = int(rng.integers(lo, hi + 1))
    Wa = _random_matrix(rng, m, n)
    mode = rng.integers(3)
    if mode == 0:
        Wb = _random_matrix(rng, m, n)
    elif mode == 1:
        Wb = Wa + _random_matrix(rng, m, n, np.linalg.norm(Wa) * 10 ** rng.uniform(-6, 0))
    else:
        Wb = _random_orthogonal(rng, m) @ Wa
    sa, sb = snapshot(Wa).singular_values, snapshot(Wb).singular_values
    return float(np.linalg.norm(Wa - Wb) - np.linalg.norm(sa - sb))


def _slack_l3(rng, lo, hi) -> float:
    m = int(rng.integers(lo, hi + 1))
    n = int(rng.integers(lo, hi + 1))
    A = _random_matrix(rng, m, n)
    B = _random_matrix(rng, m, n)
    if rng.random() < 0.3:
        # shared singular vectors make the inequality tight
        U, sa, V = svd(A)
        sb = np.sort(rng.uniform(0, 1, len(sa)))[::-1] * np.linalg.norm(B)
        B = U @ np.diag(sb) @ V.T
    lhs = float(np.sum(A * B))
    rhs = float(snapshot(A).singular_values @ snapshot(B).singular_values)
    # rounding in both sides scales with |A||B|
    return (rhs - lhs) / max(1.0, np.linalg.norm(A) * np.linalg.norm(B))


def _slack_l4(rng, lo, hi) -> float:
    d = int(rng.integers(lo, hi + 1))
    W = _random_matrix(rng, d, d)
    G = _random_matrix(rng, d, d)
    eta = _log_uniform(rng, 1e-4, 1.0)
    W1 = W - eta * G
    t0, t1 = snapshot(W), snapshot(W1)
    lhs = sd_variation(t0, t1)
    rhs = (1 + math.sqrt(d)) / min(t0.trace, t1.trace) * np.linalg.norm(W1 - W)
    return float(rhs - lhs)


def _softmax_input(rng, lo, hi) -> np.ndarray:
    m = int(rng.integers(lo, hi + 1))
    return rng.normal(size=m) * _log_uniform(rng, 1e-2, 30.0)


def _slack_l6(rng, lo, hi) -> float:
    u = _softmax_input(rng, lo, hi)
    m = u.size
    j = int(np.argmax(u))
    g = float(u[j] - np.max(np.delete(u, j)))
    s = softmax_rows(u[None, :])[0]
    eg = math.exp(-g)
    first = (m - 1) * eg - (1 - s[j])
    second = eg - float(np.max(np.delete(s, j)))
    return min(first, second)


def _slack_l7(rng, lo, hi) -> float:
    a = softmax_rows(_softmax_input(rng, lo, hi)[None, :])[0]
    J = np.diag(a) - np.outer(a, a)
    ev = np.linalg.eigvalsh(J)
    tr = 1.0 - float(a @ a)
    return min(float(ev[0]), tr - float(ev[-1]), 2 * (1 - a.max()) - tr)


def l8_ratio(M: np.ndarray) -> float:
    """Residual ratio of the first-order attention expansion when M is halved."""
    r1 = np.linalg.norm(softmax_rows(M) - linearized_attention(M))
    r2 = np.linalg.norm(softmax_rows(M / 2) - linearized_attention(M / 2))
    return float(r1 / r2)


def _slack_l8(rng, lo, hi) -> float:
    n = int(rng.integers(lo, hi + 1))
    M = rng.normal(size=(n, n))
    M *= L8_START_NORM / np.linalg.norm(M)
    return l8_ratio(M) - L8_FACTOR


_CHECKS = {
    "L1": (1, _slack_l1),
    "L2": (2, _slack_l2),
    "L3": (3, _slack_l3),
    "L4": (4, _slack_l4),
    "L6": (6, _slack_l6),
    "L7": (7, _slack_l7),
    "L8": (8, _slack_l8),
}


def check_inequality_suite(
    lemma: str,
    trials: int = 1000,
    seed: int = 0,
    dim_range: tuple[int, int] = (2, 16),
    tol: float = TOL,
) -> SuiteReport:
    """Instantiate one inequality on ``trials`` random inputs and tally the slack.

    Slack is ``rhs - lhs``; a violation is slack below ``-tol``. L3 slack is
    divided by ``max(1, |A|_F |B|_F)`` because both sides scale with that product.
    """
    if lemma not in _CHECKS:
        raise ValueError(f"unknown lemma {lemma!r}; expected one of {LEMMAS}")
    if trials < 1:
        raise ValueError("trials must be at least 1")
    lo, hi = dim_range
    if lo < 2 or hi < lo:
        raise ValueError("dim_range must satisfy 2 <= lo <= hi")
    code, fn = _CHECKS[lemma]
    tally = _Tally(tol)
    for i in range(trials):
        tally.add(fn(_rng(seed, code, i), lo, hi))
    return SuiteReport(lemma, trials, tally.violations, tally.worst, tally.margin, seed, (lo, hi))


def check_descent_lemma(beta: float, eta: float, trials: int = 1000, seed: int = 0) -> SuiteReport:
    """Both descent inequalities on ``L(w) = beta/2 |w|^2`` with exact gradients.

    On this family the lower bound holds with equality for every step size,
    so ``extra['equality_gap']`` records the largest relative gap seen.
    """
    if not beta > 0:
        raise ValueError("beta must be positive")
    if not 0 < eta <= 2 / beta:
        raise ValueError("eta must lie in (0, 2/beta]")
    tally = _Tally(TOL)
    eq_gap = 0.0
    for i in range(trials):
        rng = _rng(seed, 5, i)
        w = rng.normal(size=int(rng.integers(1, 17))) * _log_uniform(rng, 1e-2, 1e2)
        grad = beta * w
        w1 = w - eta * grad
        dL = 0.5 * beta * (w @ w) - 0.5 * beta * (w1 @ w1)
        g2 = float(grad @ grad)
        lower = eta * (1 - eta * beta / 2) * g2
        upper = eta * (1 + eta * beta / 2) * g2
        scale = max(1.0, abs(dL))
        tally.add(min(dL - lower, upper - dL) / scale)
        eq_gap = max(eq_gap, abs(dL - lower) / scale)
    return SuiteReport(
        "L5", trials, tally.violations, tally.worst, tally.margin, seed, (1, 16),
        extra={"beta": beta, "eta": eta, "equality_gap": eq_gap},
    )


def random_gradcheck_configs(count: int = 20, seed: int = 0) -> list[ModelConfig]:
    rng = np.random.default_rng([seed, 9])
    out = []
    for i in range(count):
        n, d = (int(v) for v in rng.integers(2, 9, 2))
        C = int(rng.integers(2, 6))
        out.append(ModelConfig(n=n, d=d, C=C, init_sigma=float(rng.uniform(0.3, 1.0)), seed=seed * 1000 + i))
    return out


def gradcheck_instance(state, batch: Batch, h: float = 1e-5) -> float:
    """Worst relative error between analytic and central-difference weight gradients.

    The denominator is ``max(|analytic|, |numeric|, 1e-3 * max|analytic|)`` over
    the matrix, so entries that are zero up to rounding do not dominate.
    """
    cache = forward(state, batch)
    grads = backward(state, batch, cache).for_weights()
    worst = 0.0
    for name in TRAINABLE:
        W = getattr(state, name)
        num = np.zeros_like(W)
        for idx in np.ndindex(W.shape):
            Wp, Wm = W.copy(), W.copy()
            Wp[idx] += h
            Wm[idx] -= h
            lp = forward(state.replace(**{name: Wp}), batch).loss
            lm = forward(state.replace(**{name: Wm}), batch).loss
            num[idx] = (lp - lm) / (2 * h)
        a = grads[name]
        floor = 1e-3 * np.max(np.abs(a))
        den = np.maximum(np.maximum(np.abs(a), np.abs(num)), floor)
        err = np.where(den > 0, np.abs(a - num) / np.where(den > 0, den, 1.0), 0.0)
        worst = max(worst, float(err.max()))
    return worst


def finite_diff_gradcheck(configs=None, seed: int = 0, threshold: float = 1e-6) -> SuiteReport:
    """Compare analytic gradients with central differences on small models."""
    if configs is None:
        configs = random_gradcheck_configs(20, seed)
    errors = []
    for k, cfg in enumerate(configs):
        if not isinstance(cfg, ModelConfig):
            n, d, C = cfg
            cfg = ModelConfig(n=n, d=d, C=C, init_sigma=0.5, seed=seed * 1000 + k)
        if cfg.n > 8 or cfg.d > 8 or cfg.C > 5:
            raise ValueError("gradcheck configs need n, d <= 8 and C <= 5")
        state = init_params(cfg)
        batch = gen_dataset(cfg, noise=1.0, seed=cfg.seed + 1)
        errors.append(gradcheck_instance(state, batch))
    worst = max(errors) if errors else 0.0
    violations = sum(e >= threshold for e in errors)
    dims = (min(c.d if isinstance(c, ModelConfig) else c[1] for c in configs),
            max(c.d if isinstance(c, ModelConfig) else c[1] for c in configs)) if configs else (0, 0)
    return SuiteReport(
        "gradcheck", len(errors), violations, threshold - worst, threshold - worst, seed, dims,
        extra={"worst_relative_error": worst, "threshold": threshold},
    )


def check_phase1_bound(d: int, eta: float, D: float) -> float:
    """Per-step loss decrement bound ``3 D^2 eta / (2 (1 + sqrt(d)))`` for Phase I."""
    return 3.0 * D * D * eta / (2.0 * (1.0 + math.sqrt(d)))


def fit_phase2_exponent(pairs, min_pairs: int = 5) -> float | None:
    """Least-squares slope of ``log dL`` against ``log dSigma``.

    Pairs with a nonpositive or non-finite coordinate are dropped. Returns
    ``None`` when fewer than ``min_pairs`` remain or the abscissae are constant.
    """
    arr = np.asarray(list(pairs), dtype=np.float64).reshape(-1, 2)
    keep = np.all(np.isfinite(arr), axis=1) & np.all(arr > 0, axis=1)
    arr = arr[keep]
    if len(arr) < min_pairs:
        return None
    x, y = np.log(arr[:, 0]), np.log(arr[:, 1])
    xc = x - x.mean()
    sxx = float(xc @ xc)
    if sxx <= 1e-24 * max(1.0, float(x @ x)):
        return None
    return float(xc @ (y - y.mean()) / sxx)
