"""Canonical classification model and the multinomial-logistic Fisher matrix.

Data: ``x_{i,c} = t e_c + z`` with ``z ~ N(0, I_D)``, so class means sit on
scaled canonical basis vectors and the signal strength is ``s = t**2``.
Under symmetric probabilities (``1 - alpha`` on the true class,
``alpha / (C - 1)`` elsewhere) the expected FIM has a closed-form spectrum
with four eigenvalue groups, implemented in :func:`theorem_spectrum`.

Parameter vectors are ordered ``theta[d * C + a]`` (feature ``d``, output
``a``), i.e. the gradient ``x ⊗ (p - y)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ._parallel import ordered_map
from .blocks import ClassArray

__all__ = [
    "CCMConfig",
    "SymmetricProbs",
    "TheoremSpectrum",
    "sample_ccm",
    "symmetric_probs",
    "logreg_fim",
    "expected_fim",
    "theorem_spectrum",
    "circulant_eigs",
    "arrow_eigs",
    "misclassification_ratio_report",
    "monte_carlo_fim",
    "monte_carlo_error",
    "PARAM_GRID",
]

DENSE_CAP = 4096
DISCRIMINANT_CLAMP = 1e-12
MC_CHUNK = 256

# (D, C) x alpha x s grid on which the closed form is checked against dense eig.
PARAM_GRID = [
    (D, C, alpha, s)
    for D, C in [(4, 2), (5, 3), (8, 4), (12, 5)]
    for alpha in (0.1, 0.3, 0.6)
    for s in (0.0, 1.0, 4.0, 25.0)
]


@dataclass(frozen=True)
class CCMConfig:
    D: int
    C: int
    N: int
    t: float
    seed: int = 0

    def __post_init__(self):
        if self.C > self.D:
            raise ValueError(f"need C <= D, got C={self.C}, D={self.D}")
        if self.C < 1 or self.N < 1:
            raise ValueError("C and N must be positive")
        if self.t < 0:
            raise ValueError("t must be nonnegative")

    @property
    def s(self) -> float:
        return self.t**2


@dataclass(frozen=True)
class SymmetricProbs:
    alpha: float
    C: int

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.C < 2:
            raise ValueError("symmetric probabilities need C >= 2")

    def matrix(self) -> np.ndarray:
        """Row ``c`` is the probability vector of an example from class ``c``."""
        P = np.full((self.C, self.C), self.alpha / (self.C - 1))
        np.fill_diagonal(P, 1.0 - self.alpha)
        return P

    def for_samples(self, N: int) -> np.ndarray:
        """``(N, C, C)`` array, identical for every example."""
        return np.broadcast_to(self.matrix(), (N, self.C, self.C)).copy()


def symmetric_probs(alpha: float, C: int) -> SymmetricProbs:
    return SymmetricProbs(alpha, C)


@dataclass(frozen=True)
class TheoremSpectrum:
    """Eigenvalue groups ``(value, multiplicity)`` in order top, mini, bulk, zero."""

    groups: tuple[tuple[float, int], ...]

    @property
    def dim(self) -> int:
        return sum(m for _, m in self.groups)

    def values(self) -> np.ndarray:
        """The full multiset, sorted ascending."""
        return np.sort(np.concatenate([np.full(m, v) for v, m in self.groups]))

    def as_dict(self) -> dict:
        names = ("top", "mini", "bulk", "zero")
        return {n: {"value": float(v), "multiplicity": int(m)} for n, (v, m) in zip(names, self.groups)}


def sample_ccm(cfg: CCMConfig) -> ClassArray:
    rng = np.random.default_rng(cfg.seed)
    X = rng.standard_normal((cfg.N, cfg.C, cfg.D))
    X[:, np.arange(cfg.C), np.arange(cfg.C)] += cfg.t
    return ClassArray(X)


def logreg_fim(X: ClassArray | np.ndarray, P: np.ndarray) -> np.ndarray:
    """``Ave_{i,c} (x ⊗ I_C)(diag p - p p^T)(x ⊗ I_C)^T`` as a dense DC x DC matrix."""
    data = X.data if isinstance(X, ClassArray) else np.asarray(X, dtype=np.float64)
    P = np.asarray(P, dtype=np.float64)
    N, C, D = data.shape
    if P.shape != (N, C, C):
        raise ValueError(f"probabilities need shape {(N, C, C)}, got {P.shape}")
    if D * C > DENSE_CAP:
        raise ValueError(f"D*C = {D * C} exceeds the dense cap {DENSE_CAP}")
    if np.any(P < -1e-12) or np.max(np.abs(P.sum(axis=-1) - 1.0)) > 1e-8:
        raise ValueError("each probability vector must be nonnegative and sum to 1 (tol 1e-8)")
    U = np.einsum("ica,ab->icab", P, np.eye(C)) - np.einsum("ica,icb->icab", P, P)
    x = data.reshape(N * C, D)
    G = np.einsum("nd,ne,nab->daeb", x, x, U.reshape(N * C, C, C), optimize=True) / (N * C)
    G = G.reshape(D * C, D * C)
    return (G + G.T) / 2


def _class_U(alpha: float, C: int) -> np.ndarray:
    P = SymmetricProbs(alpha, C).matrix()
    return np.stack([np.diag(p) - np.outer(p, p) for p in P])


def expected_fim(D: int, C: int, alpha: float, s: float) -> np.ndarray:
    """Expected FIM under the CCM with symmetric probabilities.

    ``(s / C) blkdiag(U_1, ..., U_C, 0) + I_D ⊗ mean_c U_c``, where
    ``U_c = diag(p_c) - p_c p_c^T``.
    """
    if C > D:
        raise ValueError(f"need C <= D, got C={C}, D={D}")
    if s < 0:
        raise ValueError("s must be nonnegative")
    if D * C > DENSE_CAP:
        raise ValueError(f"D*C = {D * C} exceeds the dense cap {DENSE_CAP}")
    U = _class_U(alpha, C)
    G = np.kron(np.eye(D), U.mean(axis=0))
    for c in range(C):
        G[c * C:(c + 1) * C, c * C:(c + 1) * C] += (s / C) * U[c]
    return G


def theorem_spectrum(D: int, C: int, alpha: float, s: float) -> TheoremSpectrum:
    """Closed-form eigenvalues of :func:`expected_fim`.

    Group sizes follow the index ranges ``1..C``, ``C+1..C(C-1)``,
    ``C(C-1)+1..D(C-1)`` and the remaining ``D`` zeros.
    """
    if C < 2:
        raise ValueError("need C >= 2")
    k = alpha / (C - 1)
    base = 2.0 - alpha * C / (C - 1)
    top = k * (s * (1.0 - alpha) + base)
    mini = k * (s / C + base)
    bulk = k * base
    return TheoremSpectrum(
        (
            (top, C),
            (mini, C * (C - 1) - C),
            (bulk, (D - C) * (C - 1)),
            (0.0, D),
        )
    )


def circulant_eigs(a: float, b: float, C: int) -> np.ndarray:
    """Eigenvalues of the C x C matrix with ``a`` on the diagonal and ``b`` elsewhere."""
    if C < 1:
        raise ValueError("C must be positive")
    return np.sort(np.concatenate([[a + b * (C - 1)], np.full(C - 1, a - b)]))


def arrow_eigs(a: float, b: float, d: float, e: float, C: int) -> np.ndarray:
    """Eigenvalues of ``[[a, b 1^T], [b 1, (d - e) I + e 1 1^T]]`` of size C.

    The inner block is (C-1) x (C-1) with ``d`` on its diagonal and ``e``
    off it.
    """
    if C < 2:
        raise ValueError("need C >= 2")
    T = a + d + e * (C - 2)
    det = a * (d + e * (C - 2)) - b * b * (C - 1)
    disc = T * T - 4.0 * det
    if disc < -DISCRIMINANT_CLAMP:
        raise ArithmeticError(f"negative discriminant {disc}")
    root = np.sqrt(max(disc, 0.0))
    return np.sort(np.concatenate([[(T + root) / 2, (T - root) / 2], np.full(C - 2, d - e)]))


def misclassification_ratio_report(D: int, C: int, alpha: float, s: float) -> dict[str, float]:
    """Ratios among the three nonzero eigenvalue groups of the expected FIM."""
    top, mini, bulk, _ = (v for v, _ in theorem_spectrum(D, C, alpha, s).groups)
    if abs(bulk) < 1e-300:
        raise ZeroDivisionError(f"bulk eigenvalue is zero at alpha={alpha}, C={C}")
    return {"top/bulk": top / bulk, "top/mini": top / mini, "mini/bulk": mini / bulk}


def _mc_chunk(args) -> np.ndarray:
    D, C, t, P, seed, chunk, count = args
    rng = np.random.default_rng([seed, chunk])
    X = rng.standard_normal((count, C, D))
    X[:, np.arange(C), np.arange(C)] += t
    return logreg_fim(X, np.broadcast_to(P, (count, C, C))) * count


def monte_carlo_fim(
    D: int, C: int, alpha: float, s: float, K: int, seed: int = 0, threads: int | None = None
) -> np.ndarray:
    """Average of :func:`logreg_fim` over ``K`` CCM draws per class.

    Probabilities are held at the symmetric values rather than recomputed
    from a model, which is the setting in which :func:`expected_fim` is
    exact. Draws are generated in fixed chunks with their own RNG streams
    and summed in chunk order, so the result does not depend on ``threads``.
    """
    if K < 1:
        raise ValueError("K must be positive")
    P = SymmetricProbs(alpha, C).matrix()
    t = float(np.sqrt(s))
    counts = [min(MC_CHUNK, K - start) for start in range(0, K, MC_CHUNK)]
    jobs = [(D, C, t, P, seed, j, n) for j, n in enumerate(counts)]
    total = np.zeros((D * C, D * C))
    for part in ordered_map(_mc_chunk, jobs, threads):
        total += part
    return total / K


def monte_carlo_error(
    D: int, C: int, alpha: float, s: float, K: int, replicates: int = 8, seed: int = 0, threads: int | None = None
) -> float:
    """Root-mean-square Frobenius error of :func:`monte_carlo_fim` over independent replicates."""
    exact = expected_fim(D, C, alpha, s)
    errs = [
        np.linalg.norm(monte_carlo_fim(D, C, alpha, s, K, seed=seed * 1_000_003 + r, threads=threads) - exact)
        for r in range(replicates)
    ]
    return float(np.sqrt(np.mean(np.square(errs))))
