"""Single-layer, single-head attention classifier with analytic gradients.

The model maps a token matrix ``X`` (n x d) to per-token class probabilities::

    Q, K, V = X W_Q, X W_K, X W_V
    A = softmax_rows(Q K^T / sqrt(d))
    P = softmax_rows(A V W_C)

``W_C`` is a fixed semi-orthogonal d x C projection. Loss is the mean
negative log-probability of the true labels.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from sosd.spectral import as_matrix

__all__ = [
    "Batch",
    "ForwardCache",
    "GradientSet",
    "ModelConfig",
    "ModelState",
    "TRAINABLE",
    "backward",
    "forward",
    "gen_dataset",
    "init_params",
    "linearized_attention",
    "loss_only",
    "softmax_rows",
]

TRAINABLE = ("W_Q", "W_K", "W_V")


@dataclass(frozen=True)
class ModelConfig:
    n: int = 16
    d: int = 32
    C: int = 8
    init_sigma: float = 0.01
    seed: int = 0

    def __post_init__(self):
        for name, lo in (("n", 2), ("d", 2), ("C", 2)):
            v = getattr(self, name)
            if int(v) != v or v < lo:
                raise ValueError(f"{name} must be an integer >= {lo}, got {v!r}")
        if not self.init_sigma > 0:
            raise ValueError(f"init_sigma must be positive, got {self.init_sigma!r}")


@dataclass
class ModelState:
    W_Q: np.ndarray
    W_K: np.ndarray
    W_V: np.ndarray
    W_C: np.ndarray

    def __post_init__(self):
        d = self.W_Q.shape[0]
        for name in TRAINABLE:
            if getattr(self, name).shape != (d, d):
                raise ValueError(f"{name} must be {d}x{d}, got {getattr(self, name).shape}")
        if self.W_C.ndim != 2 or self.W_C.shape[0] != d:
            raise ValueError(f"W_C must have {d} rows, got shape {self.W_C.shape}")

    @property
    def d(self) -> int:
        return self.W_Q.shape[0]

    @property
    def C(self) -> int:
        return self.W_C.shape[1]

    def trainable(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in TRAINABLE}

    def replace(self, **weights) -> "ModelState":
        kw = {name: getattr(self, name) for name in (*TRAINABLE, "W_C")}
        if "W_C" in weights:
            raise ValueError("W_C is fixed and cannot be replaced")
        kw.update(weights)
        return ModelState(**kw)

    def copy(self) -> "ModelState":
        return ModelState(*(getattr(self, k).copy() for k in (*TRAINABLE, "W_C")))


@dataclass(frozen=True)
class Batch:
    X: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        X = as_matrix(self.X, "X")
        y = np.asarray(self.labels)
        if y.ndim != 1 or len(y) != X.shape[0]:
            raise ValueError(f"labels must be a vector of length {X.shape[0]}")
        if not np.issubdtype(y.dtype, np.integer):
            raise ValueError("labels must be integers")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "labels", y.astype(np.int64))

    @property
    def n(self) -> int:
        return self.X.shape[0]

    def one_hot(self, C: int) -> np.ndarray:
        if self.labels.min() < 0 or self.labels.max() >= C:
            raise ValueError(f"labels must lie in [0, {C})")
        return np.eye(C)[self.labels]


@dataclass(frozen=True)
class ForwardCache:
    Q: np.ndarray
    K: np.ndarray
    V: np.ndarray
    M: np.ndarray
    A: np.ndarray
    H: np.ndarray
    Z: np.ndarray
    P: np.ndarray
    loss: float


@dataclass(frozen=True)
class GradientSet:
    G_WQ: np.ndarray
    G_WK: np.ndarray
    G_WV: np.ndarray
    G_Z: np.ndarray
    G_H: np.ndarray
    G_A: np.ndarray
    G_M: np.ndarray

    def for_weights(self) -> dict[str, np.ndarray]:
        return {"W_Q": self.G_WQ, "W_K": self.G_WK, "W_V": self.G_WV}

    def norm(self) -> float:
        """Frobenius norm of the concatenated trainable gradient."""
        return float(np.sqrt(sum(np.sum(g * g) for g in self.for_weights().values())))


def softmax_rows(S: np.ndarray) -> np.ndarray:
    E = np.exp(S - S.max(axis=1, keepdims=True))
    return E / E.sum(axis=1, keepdims=True)


def init_params(config: ModelConfig) -> ModelState:
    """Draw W_Q, W_K, W_V from N(0, sigma^2) and a fixed semi-orthogonal W_C."""
    rng = np.random.default_rng(config.seed)
    d, s = config.d, config.init_sigma
    W_Q = rng.normal(0.0, s, (d, d))
    W_K = rng.normal(0.0, s, (d, d))
    W_V = rng.normal(0.0, s, (d, d))
    G = rng.normal(size=(d, config.C))
    # orthonormal columns, or orthonormal rows when C > d
    tall = config.C <= d
    Qf, R = np.linalg.qr(G if tall else G.T)
    Qf = Qf * np.where(np.diag(R) < 0, -1.0, 1.0)
    W_C = Qf if tall else Qf.T
    return ModelState(W_Q, W_K, W_V, W_C)


def gen_dataset(config: ModelConfig, noise: float = 0.3, seed: int = 0, draw: int = 0) -> Batch:
    """Class-conditional Gaussian tokens around random unit class means.

    Class means depend on ``seed`` only; ``draw`` selects an independent set of
    labels and noise around the same means (used for resampled batches).
    """
    if noise < 0:
        raise ValueError("noise must be nonnegative")
    n, d, C = config.n, config.d, config.C
    mu = np.random.default_rng(seed).normal(size=(C, d))
    mu /= np.linalg.norm(mu, axis=1, keepdims=True)
    rng = np.random.default_rng([seed, draw])
    labels = rng.integers(0, C, n)
    xi = rng.normal(size=(n, d))
    return Batch(mu[labels] + noise * xi, labels)


def _check_shapes(state: ModelState, batch: Batch):
    if batch.X.shape[1] != state.d:
        raise ValueError(f"X has {batch.X.shape[1]} features but the model expects {state.d}")
    if batch.labels.min() < 0 or batch.labels.max() >= state.C:
        raise ValueError(f"labels must lie in [0, {state.C})")


def forward(state: ModelState, batch: Batch) -> ForwardCache:
    _check_shapes(state, batch)
    X, d = batch.X, state.d
    Q = X @ state.W_Q
    K = X @ state.W_K
    V = X @ state.W_V
    M = Q @ K.T / np.sqrt(d)
    A = softmax_rows(M)
    H = A @ V
    Z = H @ state.W_C
    Zs = Z - Z.max(axis=1, keepdims=True)
    logZ = np.log(np.exp(Zs).sum(axis=1))
    P = softmax_rows(Z)
    rows = np.arange(batch.n)
    # log-sum-exp form keeps the loss finite when P underflows
    loss = float(np.mean(logZ - Zs[rows, batch.labels]))
    return ForwardCache(Q, K, V, M, A, H, Z, P, loss)


def loss_only(state: ModelState, batch: Batch) -> float:
    return forward(state, batch).loss


def backward(state: ModelState, batch: Batch, cache: ForwardCache) -> GradientSet:
    """Exact gradients of the mean cross-entropy with respect to every stage."""
    _check_shapes(state, batch)
    n, d = batch.n, state.d
    if cache.A.shape != (n, n) or cache.P.shape != (n, state.C) or cache.Q.shape != (n, d):
        raise ValueError("forward cache does not match this state and batch")
    if not all(np.all(np.isfinite(a)) for a in (cache.A, cache.P, cache.Q, cache.K, cache.V)):
        raise ValueError("forward cache contains non-finite values")
    X, A = batch.X, cache.A
    G_Z = (cache.P - batch.one_hot(state.C)) / n
    G_H = G_Z @ state.W_C.T
    G_A = G_H @ cache.V.T
    # row-wise J(a)^T g with J(a) = diag(a) - a a^T
    G_M = A * (G_A - np.sum(G_A * A, axis=1, keepdims=True))
    rd = np.sqrt(d)
    G_WQ = X.T @ G_M @ cache.K / rd
    G_WK = X.T @ G_M.T @ cache.Q / rd
    G_WV = X.T @ A.T @ G_H
    return GradientSet(G_WQ, G_WK, G_WV, G_Z, G_H, G_A, G_M)


def linearized_attention(M) -> np.ndarray:
    """First-order expansion of the row softmax around zero scores.

    Returns ``(1/n) 11^T + (1/n) (M - rowmean(M))``. Each row sums to one.
    """
    M = as_matrix(M, "M")
    n = M.shape[1]
    centered = M - M.mean(axis=1, keepdims=True)
    return (1.0 + centered) / n
