"""Lanczos-based spectral density estimation and eigen-extraction.

The pipeline for an operator ``A`` is

1. :func:`normalization` - a short Lanczos run bounds the spectrum and
   returns ``(A - cI)/d`` with spectrum inside ``[-1, 1]``;
2. :func:`lanczos_approx_spec` - stochastic Lanczos quadrature: every probe
   contributes Gaussian bumps at its Ritz values, weighted by the squared
   first components of the tridiagonal eigenvectors;
3. optionally :func:`subspace_iteration` + :func:`~spectrascope.linop.deflate`
   beforehand, so a handful of outliers do not eat the resolution of the bulk.

:func:`log_spec` runs the same quadrature on ``log(|lambda| + eps)``.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.linalg import eigh_tridiagonal

from ._parallel import ordered_map
from .linop import AffineOperator, LinearOperator, shift_scale

__all__ = [
    "TridiagResult",
    "NormalizationParams",
    "SpectrumEstimate",
    "DegenerateSpectrumError",
    "tridiag_eig",
    "slow_lanczos",
    "fast_lanczos",
    "ritz_vectors",
    "normalization",
    "smoothing_width",
    "lanczos_approx_spec",
    "log_spec",
    "subspace_iteration",
    "eigen_residuals",
    "estimate_spectrum",
    "density_l1_distance",
    "probe_rng",
]


class DegenerateSpectrumError(ArithmeticError):
    """The spectrum is (numerically) a single point, so it cannot be rescaled."""


@dataclass(frozen=True)
class TridiagResult:
    ritz_values: np.ndarray
    first_components: np.ndarray
    alphas: np.ndarray
    betas: np.ndarray
    eigvecs: np.ndarray = field(repr=False)
    start: np.ndarray | None = field(default=None, repr=False)

    @property
    def weights(self) -> np.ndarray:
        return self.first_components**2

    @property
    def steps(self) -> int:
        return len(self.alphas)


@dataclass(frozen=True)
class NormalizationParams:
    lambda_min: float
    lambda_max: float
    c: float
    d: float
    tau: float
    log_mode: bool = False


@dataclass
class SpectrumEstimate:
    grid: np.ndarray
    density: np.ndarray
    sigma: float
    M: int
    K: int
    n_vec: int
    kappa: float
    seed: int
    c: float = 0.0
    d: float = 1.0
    log_mode: bool = False
    epsilon: float = 0.0
    outliers: list[dict] = field(default_factory=list)

    def denormalized(self) -> tuple[np.ndarray, np.ndarray]:
        """Grid and density in the operator's own units (log units in log mode)."""
        return self.c + self.d * self.grid, self.density / self.d

    def mass(self) -> float:
        return float(np.trapezoid(self.density, self.grid))

    def to_dict(self) -> dict:
        out = asdict(self)
        out["grid"] = [float(x) for x in self.grid]
        out["density"] = [float(x) for x in self.density]
        out["outliers"] = [{"value": float(o["value"]), "residual": float(o["residual"])} for o in self.outliers]
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "SpectrumEstimate":
        data = dict(data)
        data["grid"] = np.asarray(data["grid"], dtype=np.float64)
        data["density"] = np.asarray(data["density"], dtype=np.float64)
        return cls(**data)

    def save_json(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1) + "\n")

    @classmethod
    def load_json(cls, path: str | Path) -> "SpectrumEstimate":
        return cls.from_dict(json.loads(Path(path).read_text()))


def probe_rng(seed: int, stream: int) -> np.random.Generator:
    """Independent generator for probe ``stream``; stream 0 is reserved for normalization."""
    return np.random.default_rng([int(seed), int(stream)])


def tridiag_eig(alphas, betas) -> TridiagResult:
    """Eigendecomposition of the symmetric tridiagonal matrix (alphas; betas).

    Uses LAPACK's implicit QL/QR driver (``stev``), which stays robust on
    the near-degenerate matrices that long unreorthogonalized Lanczos runs
    produce.
    """
    alphas = np.asarray(alphas, dtype=np.float64)
    betas = np.asarray(betas, dtype=np.float64)
    if alphas.ndim != 1 or len(alphas) == 0:
        raise ValueError("need at least one diagonal entry")
    if len(betas) != len(alphas) - 1:
        raise ValueError(f"expected {len(alphas) - 1} off-diagonal entries, got {len(betas)}")
    if len(alphas) == 1:
        values, vecs = alphas.copy(), np.ones((1, 1))
    else:
        values, vecs = eigh_tridiagonal(alphas, betas, lapack_driver="stev")
    return TridiagResult(values, vecs[0].copy(), alphas, betas, vecs)


def _start_vector(dim: int, rng: np.random.Generator | None, v0) -> np.ndarray:
    if v0 is None:
        rng = rng if rng is not None else np.random.default_rng()
        v0 = rng.standard_normal(dim)
    v0 = np.array(v0, dtype=np.float64)
    if v0.shape != (dim,):
        raise ValueError(f"start vector must have length {dim}")
    norm = np.linalg.norm(v0)
    if norm == 0:
        raise ValueError("start vector is zero")
    return v0 / norm


def _recurrence(op: LinearOperator, v: np.ndarray, steps: int, tol: float):
    """Three-term Lanczos recurrence keeping only (v_prev, v, v_next)."""
    alphas: list[float] = []
    betas: list[float] = []
    v_prev = np.zeros_like(v)
    beta = 0.0
    scale = 1.0
    for m in range(steps):
        w = op.matvec(v) - beta * v_prev
        alpha = float(w @ v)
        w -= alpha * v
        alphas.append(alpha)
        if m == steps - 1:
            break
        beta = float(np.linalg.norm(w))
        scale = max(scale, abs(alpha), beta)
        if beta <= tol * scale:
            break
        betas.append(beta)
        v_prev, v = v, w / beta
    return np.array(alphas), np.array(betas)


def fast_lanczos(
    op: LinearOperator,
    M: int,
    seed: int | None = None,
    *,
    rng: np.random.Generator | None = None,
    v0=None,
    tol: float = 1e-14,
) -> TridiagResult:
    """``M`` Lanczos steps without reorthogonalization; O(p) memory.

    Stops early when an invariant subspace is found (beta below ``tol``
    relative to the largest recurrence coefficient seen). Ghost copies of
    converged Ritz values are expected and left in place.
    """
    if M < 1:
        raise ValueError(f"M must be >= 1, got {M}")
    if rng is None and seed is not None:
        rng = np.random.default_rng(seed)
    v = _start_vector(op.dim, rng, v0)
    alphas, betas = _recurrence(op, v, M, tol)
    res = tridiag_eig(alphas, betas)
    return TridiagResult(res.ritz_values, res.first_components, alphas, betas, res.eigvecs, v)


def ritz_vectors(op: LinearOperator, result: TridiagResult, columns) -> np.ndarray:
    """Lift selected Ritz vectors to R^p by replaying the recurrence.

    The basis is never stored: the same three-term recurrence is run a
    second time from ``result.start`` and ``sum_j Y[j, k] v_j`` accumulated
    on the fly.
    """
    if result.start is None:
        raise ValueError("result does not carry its start vector")
    columns = list(columns)
    coeffs = result.eigvecs[:, columns]
    out = np.zeros((op.dim, len(columns)))
    v_prev = np.zeros(op.dim)
    v = result.start.copy()
    steps = result.steps
    for m in range(steps):
        out += np.outer(v, coeffs[m])
        if m == steps - 1:
            break
        w = op.matvec(v) - (result.betas[m - 1] if m > 0 else 0.0) * v_prev
        w -= result.alphas[m] * v
        v_prev, v = v, w / result.betas[m]
    return out


def slow_lanczos(
    op: LinearOperator,
    reorthogonalize: bool = True,
    seed: int | None = None,
    *,
    v0=None,
    tol: float = 1e-12,
) -> TridiagResult:
    """Full ``p``-step Lanczos storing the basis (test-sized operators only)."""
    p = op.dim
    v = _start_vector(p, np.random.default_rng(seed), v0)
    V = np.zeros((p, p))
    V[:, 0] = v
    alphas: list[float] = []
    betas: list[float] = []
    beta = 0.0
    scale = 1.0
    for m in range(p):
        w = op.matvec(V[:, m])
        if m > 0:
            w -= beta * V[:, m - 1]
        alpha = float(w @ V[:, m])
        w -= alpha * V[:, m]
        alphas.append(alpha)
        if m == p - 1:
            break
        if reorthogonalize:
            basis = V[:, : m + 1]
            # two Gram-Schmidt passes: one is not enough once orthogonality degrades
            w -= basis @ (basis.T @ w)
            w -= basis @ (basis.T @ w)
        beta = float(np.linalg.norm(w))
        scale = max(scale, abs(alpha), beta)
        if beta <= tol * scale:
            break
        betas.append(beta)
        V[:, m + 1] = w / beta
    res = tridiag_eig(alphas, betas)
    return TridiagResult(res.ritz_values, res.first_components, res.alphas, res.betas, res.eigvecs, v)


def _residual_bounds(op: LinearOperator, M0: int, rng: np.random.Generator) -> tuple[float, float]:
    res = fast_lanczos(op, M0, rng=rng)
    last = len(res.ritz_values) - 1
    vecs = ritz_vectors(op, res, [0, last])
    bounds = []
    for k, theta in ((0, res.ritz_values[0]), (1, res.ritz_values[last])):
        y = vecs[:, k]
        y = y / np.linalg.norm(y)
        bounds.append(float(np.linalg.norm(op.matvec(y) - theta * y)))
    return res.ritz_values[0] - bounds[0], res.ritz_values[last] + bounds[1]


def _with_margin(lo: float, hi: float, tau: float, log_mode: bool) -> NormalizationParams:
    if hi - lo < 1e-12:
        raise DegenerateSpectrumError(f"spectrum range [{lo}, {hi}] is degenerate")
    margin = tau * (hi - lo)
    lo, hi = lo - margin, hi + margin
    return NormalizationParams(lo, hi, (lo + hi) / 2, (hi - lo) / 2, tau, log_mode)


def normalization(
    op: LinearOperator,
    M0: int = 32,
    tau: float = 0.05,
    seed: int = 0,
    *,
    rng: np.random.Generator | None = None,
) -> tuple[AffineOperator, NormalizationParams]:
    """Rescale ``op`` so its spectrum lies in ``[-1, 1]``.

    The extreme Ritz values of an ``M0``-step run are widened by their
    residual norms ``||A y - theta y||`` and then by a margin of ``tau``
    times the range.
    """
    if M0 < 2:
        raise ValueError(f"M0 must be >= 2, got {M0}")
    rng = rng if rng is not None else probe_rng(seed, 0)
    lo, hi = _residual_bounds(op, M0, rng)
    params = _with_margin(lo, hi, tau, log_mode=False)
    return shift_scale(op, params.c, params.d), params


def smoothing_width(M: int, kappa: float) -> float:
    """Gaussian bump width used for an ``M``-step quadrature on ``[-1, 1]``."""
    if kappa <= 1:
        raise ValueError(f"kappa must exceed 1, got {kappa}")
    if M < 2:
        raise ValueError(f"M must be >= 2 for a finite smoothing width, got {M}")
    return 2.0 / ((M - 1) * math.sqrt(8.0 * math.log(kappa)))


def _bumps(grid: np.ndarray, centers: np.ndarray, weights: np.ndarray, sigma: float) -> np.ndarray:
    z = (grid[:, None] - centers[None, :]) / sigma
    return np.exp(-0.5 * z * z) @ weights / (sigma * math.sqrt(2.0 * math.pi))


def _run_probes(op, M, n_vec, seed, threads) -> list[TridiagResult]:
    def one(l: int) -> TridiagResult:
        return fast_lanczos(op, M, rng=probe_rng(seed, l))

    return ordered_map(one, range(1, n_vec + 1), threads)


def lanczos_approx_spec(
    op: LinearOperator,
    M: int = 128,
    K: int = 1024,
    n_vec: int = 1,
    kappa: float = 3.0,
    seed: int = 0,
    *,
    params: NormalizationParams | None = None,
    threads: int | None = None,
) -> SpectrumEstimate:
    """Smoothed spectral density of an operator already normalized to ``[-1, 1]``.

    ``params`` only records how to map the grid back to original units.
    Probe ``l`` draws its start vector from ``probe_rng(seed, l)``; the
    per-probe densities are summed in probe order, so the result does not
    depend on ``threads``.
    """
    if n_vec < 1 or K < 2:
        raise ValueError("need n_vec >= 1 and K >= 2")
    sigma = smoothing_width(M, kappa)
    grid = np.linspace(-1.0, 1.0, K)
    density = np.zeros(K)
    for res in _run_probes(op, M, n_vec, seed, threads):
        density += _bumps(grid, res.ritz_values, res.weights, sigma)
    density /= n_vec
    c, d = (params.c, params.d) if params is not None else (0.0, 1.0)
    return SpectrumEstimate(grid, density, sigma, M, K, n_vec, kappa, seed, c, d)


def log_spec(
    op: LinearOperator,
    M: int = 2048,
    K: int = 1024,
    n_vec: int = 1,
    kappa: float = 3.0,
    epsilon: float = 1e-5,
    seed: int = 0,
    *,
    M0: int = 32,
    tau: float = 0.05,
    change_of_measure: bool = True,
    threads: int | None = None,
) -> SpectrumEstimate:
    """Density of ``f(lambda) = log(|lambda| + epsilon)`` over the spectrum of ``op``.

    Ritz values theta are mapped through ``f`` before smoothing. With
    ``change_of_measure`` each bump is additionally scaled by
    ``1 / (|theta| + epsilon)``; pass ``False`` for the mass-preserving
    variant, whose total integrates to one.

    The range is found as in :func:`normalization` on the raw operator,
    then ``f`` is applied to the bounds before the margin is added. When
    the bounds straddle zero the lower end is ``log(epsilon)``.
    """
    if epsilon <= 0:
        raise ValueError(f"epsilon must be positive, got {epsilon}")
    sigma = smoothing_width(M, kappa)
    lo, hi = _residual_bounds(op, M0, probe_rng(seed, 0))
    top = max(abs(lo), abs(hi))
    bottom = 0.0 if lo <= 0.0 <= hi else min(abs(lo), abs(hi))
    params = _with_margin(math.log(bottom + epsilon), math.log(top + epsilon), tau, log_mode=True)

    grid = np.linspace(-1.0, 1.0, K)
    density = np.zeros(K)
    for res in _run_probes(op, M, n_vec, seed, threads):
        mag = np.abs(res.ritz_values) + epsilon
        centers = (np.log(mag) - params.c) / params.d
        weights = res.weights / mag if change_of_measure else res.weights
        density += _bumps(grid, centers, weights, sigma)
    density /= n_vec
    return SpectrumEstimate(
        grid, density, sigma, M, K, n_vec, kappa, seed, params.c, params.d, True, epsilon
    )


def _apply_block(op: LinearOperator, Q: np.ndarray) -> np.ndarray:
    entries = getattr(op, "entries", None)
    if entries is not None:
        return entries @ Q
    return np.column_stack([op.matvec(Q[:, j]) for j in range(Q.shape[1])])


def subspace_iteration(
    op: LinearOperator,
    r: int,
    T: int = 128,
    seed: int = 0,
    *,
    norm_values: bool = False,
    rng: np.random.Generator | None = None,
) -> list[tuple[float, np.ndarray]]:
    """Leading ``r`` eigenpairs (by magnitude) via orthogonal iteration.

    After ``T`` steps of ``Q <- qr(A Q)`` the values are the Rayleigh
    quotients of the Ritz vectors of ``span(Q)``, sorted ascending.
    ``norm_values=True`` instead reports the column norms of the last
    ``A Q`` product alongside the columns of ``Q``; those norms are
    magnitudes, so signs of negative eigenvalues are lost.
    """
    if r <= 0:
        raise ValueError(f"rank must be positive, got {r}")
    if r > op.dim:
        raise ValueError(f"rank {r} exceeds dimension {op.dim}")
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    rng = rng if rng is not None else probe_rng(seed, 1_000_003)
    V = rng.standard_normal((op.dim, r))
    V /= np.linalg.norm(V, axis=0)
    Q, _ = np.linalg.qr(V)
    for _ in range(T):
        V = _apply_block(op, Q)
        Q, _ = np.linalg.qr(V)
    if norm_values:
        values = np.linalg.norm(V, axis=0)
        vectors = Q
    else:
        AQ = _apply_block(op, Q)
        small = Q.T @ AQ
        values, S = np.linalg.eigh((small + small.T) / 2)
        vectors = Q @ S
    order = np.argsort(values, kind="stable")
    return [(float(values[k]), vectors[:, k].copy()) for k in order]


def eigen_residuals(op: LinearOperator, pairs) -> list[float]:
    """``||A v - lambda v||`` for each (value, vector) pair."""
    return [float(np.linalg.norm(op.matvec(v) - lam * v)) for lam, v in pairs]


def estimate_spectrum(
    op: LinearOperator,
    M: int = 128,
    K: int = 1024,
    n_vec: int = 1,
    kappa: float = 3.0,
    seed: int = 0,
    *,
    M0: int = 32,
    tau: float = 0.05,
    deflate_rank: int = 0,
    T: int = 128,
    log_mode: bool = False,
    epsilon: float = 1e-5,
    threads: int | None = None,
    norm_values: bool = False,
) -> SpectrumEstimate:
    """Deflate (optional), normalize and estimate, recording the outliers."""
    from .linop import deflate

    outliers: list[dict] = []
    if deflate_rank > 0:
        pairs = subspace_iteration(op, deflate_rank, T, seed, norm_values=norm_values)
        residuals = eigen_residuals(op, pairs)
        outliers = [{"value": lam, "residual": res} for (lam, _), res in zip(pairs, residuals)]
        op = deflate(op, pairs)
    if log_mode:
        est = log_spec(op, M, K, n_vec, kappa, epsilon, seed, M0=M0, tau=tau, threads=threads)
    else:
        normed, params = normalization(op, M0, tau, seed)
        est = lanczos_approx_spec(normed, M, K, n_vec, kappa, seed, params=params, threads=threads)
        est.epsilon = 0.0
    est.outliers = outliers
    return est


def density_l1_distance(estimate: SpectrumEstimate, eigenvalues, bins: int = 100) -> float:
    """L1 distance between the estimate and a histogram of exact eigenvalues.

    Both are reduced to probability masses on ``bins`` equal bins spanning
    the exact spectrum; the estimate's mass is integrated from its grid
    with the trapezoid rule. Only meaningful in linear mode.
    """
    eigenvalues = np.asarray(eigenvalues, dtype=np.float64)
    edges = np.linspace(eigenvalues.min(), eigenvalues.max(), bins + 1)
    hist = np.histogram(eigenvalues, edges)[0].astype(np.float64)
    hist /= hist.sum()
    x, dens = estimate.denormalized()
    cdf = np.concatenate([[0.0], np.cumsum(np.diff(x) * (dens[1:] + dens[:-1]) / 2)])
    mass = np.diff(np.interp(edges, x, cdf))
    total = mass.sum()
    if total <= 0:
        raise ValueError("estimate carries no mass over the eigenvalue range")
    return float(np.abs(mass / total - hist).sum())
