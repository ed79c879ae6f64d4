"""Soft-DTW value and gradient, hard DTW, Beta CDF and class-trajectory targets."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numba
import numpy as np

from .exceptions import BadClass, DimMismatch, DomainError, NonFiniteValue

CONSTANT = "constant"
IMPLICIT = "implicit"
TARGET_KINDS = (CONSTANT, IMPLICIT)
BACKGROUND_CLASS = 0
IMPLICIT_ALPHA = 3
IMPLICIT_BETA = 20


@dataclass(frozen=True)
class SoftDtwConfig:
    gamma: float = 0.1

    def __post_init__(self):
        if not (0.0 < self.gamma <= 1e6):
            raise ValueError(f"gamma must lie in (0, 1e6], got {self.gamma}")


@dataclass
class SoftDtwResult:
    value: float
    dp_table: np.ndarray
    grad_first: Optional[np.ndarray] = None


@dataclass
class TargetSequence:
    values: np.ndarray
    kind: str
    target_class: int

    def __len__(self):
        return self.values.shape[0]


def _as_pair(A, B):
    A = np.asarray(A, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    if A.ndim == 1:
        A = A[:, None]
    if B.ndim == 1:
        B = B[:, None]
    if A.ndim != 2 or B.ndim != 2 or A.shape[1] != B.shape[1]:
        raise DimMismatch(f"cannot compare sequences of shapes {A.shape} and {B.shape}")
    if A.shape[0] < 1 or B.shape[0] < 1:
        raise DimMismatch("sequences must have at least one frame")
    if not (np.all(np.isfinite(A)) and np.all(np.isfinite(B))):
        raise NonFiniteValue("soft-DTW inputs must be finite")
    return A, B


def pairwise_cost_matrix(A, B) -> np.ndarray:
    """Squared Euclidean cost between every row of ``A`` and every row of ``B``."""
    A, B = _as_pair(A, B)
    return _cost_kernel(A, B)


@numba.njit(cache=True, nogil=True)
def _cost_kernel(A, B):
    # sequential accumulation over features keeps the rounding order fixed
    n, m, c = A.shape[0], B.shape[0], A.shape[1]
    D = np.empty((n, m))
    for i in range(n):
        for j in range(m):
            acc = 0.0
            for k in range(c):
                diff = A[i, k] - B[j, k]
                acc += diff * diff
            D[i, j] = acc
    return D


@numba.njit(cache=True, nogil=True)
def _soft_forward(D, gamma):
    n, m = D.shape
    R = np.full((n + 2, m + 2), np.inf)
    R[0, 0] = 0.0
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            r0 = -R[i - 1, j - 1] / gamma
            r1 = -R[i - 1, j] / gamma
            r2 = -R[i, j - 1] / gamma
            rmax = max(max(r0, r1), r2)
            s = math.exp(r0 - rmax) + math.exp(r1 - rmax) + math.exp(r2 - rmax)
            R[i, j] = D[i - 1, j - 1] - gamma * (math.log(s) + rmax)
    return R


@numba.njit(cache=True, nogil=True)
def _soft_backward(D, R, gamma):
    n, m = D.shape
    Dp = np.zeros((n + 2, m + 2))
    Dp[1:n + 1, 1:m + 1] = D
    Rb = R.copy()
    for i in range(n + 2):
        Rb[i, m + 1] = -np.inf
    for j in range(m + 2):
        Rb[n + 1, j] = -np.inf
    Rb[n + 1, m + 1] = R[n, m]
    E = np.zeros((n + 2, m + 2))
    E[n + 1, m + 1] = 1.0
    for j in range(m, 0, -1):
        for i in range(n, 0, -1):
            a = math.exp((Rb[i + 1, j] - Rb[i, j] - Dp[i + 1, j]) / gamma)
            b = math.exp((Rb[i, j + 1] - Rb[i, j] - Dp[i, j + 1]) / gamma)
            c = math.exp((Rb[i + 1, j + 1] - Rb[i, j] - Dp[i + 1, j + 1]) / gamma)
            E[i, j] = E[i + 1, j] * a + E[i, j + 1] * b + E[i + 1, j + 1] * c
    return E[1:n + 1, 1:m + 1]


@numba.njit(cache=True, nogil=True)
def _hard_forward(D):
    n, m = D.shape
    R = np.full((n + 1, m + 1), np.inf)
    R[0, 0] = 0.0
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            R[i, j] = D[i - 1, j - 1] + min(R[i - 1, j - 1], R[i - 1, j], R[i, j - 1])
    return R[n, m]


@numba.njit(cache=True, nogil=True)
def _soft_value_only(A, B, gamma):
    # Two-row variant for bulk distance queries (KNN, per-class scoring).
    n = A.shape[0]
    m = B.shape[0]
    k = A.shape[1]
    prev = np.full(m + 1, np.inf)
    cur = np.full(m + 1, np.inf)
    prev[0] = 0.0
    for i in range(n):
        cur[0] = np.inf
        for j in range(m):
            cost = 0.0
            for c in range(k):
                t = A[i, c] - B[j, c]
                cost += t * t
            r0 = -prev[j] / gamma
            r1 = -prev[j + 1] / gamma
            r2 = -cur[j] / gamma
            rmax = max(max(r0, r1), r2)
            s = math.exp(r0 - rmax) + math.exp(r1 - rmax) + math.exp(r2 - rmax)
            cur[j + 1] = cost - gamma * (math.log(s) + rmax)
        for j in range(m + 1):
            prev[j] = cur[j]
        prev[0] = np.inf
    return prev[m]


def _gamma(cfg) -> float:
    if cfg is None:
        return SoftDtwConfig().gamma
    if isinstance(cfg, SoftDtwConfig):
        return cfg.gamma
    return SoftDtwConfig(float(cfg)).gamma


def softdtw_value(A, B, cfg=None) -> SoftDtwResult:
    """Soft-DTW discrepancy with squared Euclidean cost.

    ``dp_table`` is the ``(n+2) x (m+2)`` accumulated-cost table with
    infinite borders; the value sits at ``dp_table[n, m]``.
    """
    A, B = _as_pair(A, B)
    R = _soft_forward(pairwise_cost_matrix(A, B), _gamma(cfg))
    n, m = A.shape[0], B.shape[0]
    return SoftDtwResult(value=float(R[n, m]), dp_table=R)


def softdtw_gradient(A, B, cfg=None) -> SoftDtwResult:
    """Soft-DTW value plus its gradient with respect to ``A``."""
    A, B = _as_pair(A, B)
    gamma = _gamma(cfg)
    D = pairwise_cost_matrix(A, B)
    R = _soft_forward(D, gamma)
    E = _soft_backward(D, R, gamma)
    # d cost(i, j) / d A_i = 2 (A_i - B_j)
    grad = 2.0 * (E.sum(axis=1)[:, None] * A - E @ B)
    n, m = A.shape[0], B.shape[0]
    return SoftDtwResult(value=float(R[n, m]), dp_table=R, grad_first=grad)


def softdtw_distance(A, B, gamma: float) -> float:
    """Value-only soft-DTW in O(m) memory; inputs must already be validated float64."""
    return float(_soft_value_only(A, B, gamma))


def hard_dtw(A, B) -> float:
    """Classic min-plus DTW with steps down, right and diagonal."""
    A, B = _as_pair(A, B)
    return float(_hard_forward(pairwise_cost_matrix(A, B)))


def beta_cdf(x: float, alpha: int, beta: int) -> float:
    """Regularized incomplete beta ``I_x(alpha, beta)`` for integer shapes.

    Uses the binomial-tail identity
    ``I_x(a, b) = sum_{j=a}^{a+b-1} C(a+b-1, j) x^j (1-x)^(a+b-1-j)``.
    """
    if not (isinstance(alpha, (int, np.integer)) and isinstance(beta, (int, np.integer))):
        raise DomainError("beta_cdf needs integer shape parameters")
    if alpha < 1 or beta < 1:
        raise DomainError("shape parameters must be positive")
    x = float(x)
    if not 0.0 <= x <= 1.0:
        raise DomainError(f"x={x} outside [0, 1]")
    if x == 0.0:
        return 0.0
    if x == 1.0:
        return 1.0
    total = alpha + beta - 1

    def term(j):
        return math.comb(total, j) * x**j * (1.0 - x) ** (total - j)

    # sum the smaller tail so values near 1 come from 1 - (small, accurate) and stay monotone
    if x <= alpha / (alpha + beta):
        return min(1.0, math.fsum(term(j) for j in range(alpha, total + 1)))
    return max(0.0, 1.0 - math.fsum(term(j) for j in range(alpha)))


def _trajectory(length: int, n_classes: int, target_class: int, kind: str) -> TargetSequence:
    if kind not in TARGET_KINDS:
        raise ValueError(f"unknown target kind {kind!r}")
    if length < 1:
        raise ValueError("target length must be >= 1")
    if n_classes < 2:
        raise BadClass("need at least two classes")
    if not 0 <= target_class < n_classes:
        raise BadClass(f"class {target_class} outside [0, {n_classes})")
    values = np.zeros((length, n_classes))
    if kind == CONSTANT or target_class == BACKGROUND_CLASS:
        values[:, target_class] = 1.0
        kind = CONSTANT
    else:
        cdf = np.array([beta_cdf(t / length, IMPLICIT_ALPHA, IMPLICIT_BETA) for t in range(1, length + 1)])
        values[:, target_class] = cdf
        values[:, BACKGROUND_CLASS] = 1.0 - cdf
    return TargetSequence(values=values, kind=kind, target_class=target_class)


def build_target_sequence(l: int, C: int, target_class: int, kind: str = IMPLICIT) -> TargetSequence:
    """Fixed-length class trajectory; residual implicit mass goes to class 0."""
    return _trajectory(l, C, target_class, kind)


def build_ideal_reference(n: int, C: int, target_class: int, kind: str = IMPLICIT) -> TargetSequence:
    """Same construction as the target, at the prediction's own length ``n``."""
    return _trajectory(n, C, target_class, kind)
