"""Spectral attribution by knocking one matrix out of another.

A spectral feature of ``A`` (say, a group of outliers) is attributed to
``B`` when it disappears from the spectrum after ``B`` is removed, either
by subtraction (``A - B``) or by projecting ``B``'s column space out of
``A`` on both sides.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .svg import scatter_svg

__all__ = [
    "KnockoutSpec",
    "AttributionScatter",
    "subtract_knockout",
    "project_knockout",
    "apply_knockout",
    "attribution_scatter",
    "RANK_TOL",
]

RANK_TOL = 1e-10


@dataclass(frozen=True)
class KnockoutSpec:
    kind: str  # "subtract" or "project"
    target: np.ndarray

    def __post_init__(self):
        if self.kind not in ("subtract", "project"):
            raise ValueError(f"unknown knockout kind {self.kind!r}")


@dataclass
class AttributionScatter:
    before: np.ndarray
    after: np.ndarray
    top_mask: np.ndarray

    @property
    def ranks(self) -> np.ndarray:
        return np.arange(1, len(self.before) + 1)

    @staticmethod
    def _unit(v: np.ndarray) -> np.ndarray:
        lo, hi = v.min(), v.max()
        if hi == lo:
            return np.zeros_like(v)
        return (v - lo) / (hi - lo)

    def normalized(self) -> tuple[np.ndarray, np.ndarray]:
        """Both axes mapped to ``[0, 1]`` independently."""
        return self._unit(self.before), self._unit(self.after)

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["rank", "lambda_before", "lambda_after", "is_top_C"])
            for r, b, a, t in zip(self.ranks, self.before, self.after, self.top_mask):
                writer.writerow([int(r), repr(float(b)), repr(float(a)), int(bool(t))])

    @classmethod
    def from_csv(cls, path: str | Path) -> "AttributionScatter":
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        return cls(
            np.array([float(r["lambda_before"]) for r in rows]),
            np.array([float(r["lambda_after"]) for r in rows]),
            np.array([r["is_top_C"] == "1" for r in rows]),
        )

    def to_svg(self, title: str = "knockout attribution") -> str:
        b, a = self.normalized()
        return scatter_svg(a, b, self.top_mask, title=title)


def subtract_knockout(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    A = np.asarray(A, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    if A.shape != B.shape:
        raise ValueError(f"shape mismatch: {A.shape} vs {B.shape}")
    return A - B


def _range_bases(B: np.ndarray, tol: float) -> tuple[np.ndarray, np.ndarray]:
    U, s, Vt = np.linalg.svd(B, full_matrices=False)
    if s.size == 0 or s[0] == 0:
        return U[:, :0], Vt[:0].T
    rank = int(np.sum(s > tol * s[0]))
    return U[:, :rank], Vt[:rank].T


def project_knockout(A: np.ndarray, B: np.ndarray, tol: float = RANK_TOL) -> np.ndarray:
    """``(I - U U^T) A (I - V V^T)`` with U, V the left/right singular bases of B.

    For symmetric ``B`` the same basis is used on both sides, so a
    symmetric ``A`` stays exactly symmetric.
    """
    A = np.asarray(A, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    if A.shape[0] != B.shape[0]:
        raise ValueError(f"row mismatch: A has {A.shape[0]}, B has {B.shape[0]}")
    U, V = _range_bases(B, tol)
    left = A - U @ (U.T @ A)
    if B.shape[0] == B.shape[1] and np.array_equal(B, B.T) and A.shape[0] == A.shape[1]:
        out = left - (left @ U) @ U.T
        return (out + out.T) / 2 if np.array_equal(A, A.T) else out
    if A.shape[1] != V.shape[0]:
        raise ValueError(f"column mismatch: A has {A.shape[1]}, B has {V.shape[0]}")
    return left - (left @ V) @ V.T


def apply_knockout(A: np.ndarray, spec: KnockoutSpec) -> np.ndarray:
    if spec.kind == "subtract":
        return subtract_knockout(A, spec.target)
    return project_knockout(A, spec.target)


def _spectrum(M: np.ndarray) -> np.ndarray:
    """Eigenvalues for symmetric input, singular values otherwise; descending."""
    if M.shape[0] == M.shape[1] and np.allclose(M, M.T, rtol=0, atol=1e-12 * max(np.abs(M).max(), 1e-300)):
        vals = np.linalg.eigvalsh((M + M.T) / 2)
    else:
        vals = np.linalg.svd(M, compute_uv=False)
    return np.sort(vals)[::-1]


def attribution_scatter(
    A: np.ndarray, spec: KnockoutSpec, top_k: int, C: int, *, log: bool = False
) -> AttributionScatter:
    """Rank-paired spectra of ``A`` before and after a knockout.

    Both spectra are sorted descending and paired by rank; the first ``C``
    pairs are flagged. With ``log`` the values are replaced by their
    natural log (floored at 1e-300).
    """
    A = np.asarray(A, dtype=np.float64)
    dim = min(A.shape)
    if top_k > dim:
        raise ValueError(f"top_k={top_k} exceeds matrix dimension {dim}")
    if C > top_k:
        raise ValueError(f"C={C} exceeds top_k={top_k}")
    before = _spectrum(A)[:top_k]
    after = _spectrum(apply_knockout(A, spec))[:top_k]
    if log:
        before = np.log(np.maximum(before, 1e-300))
        after = np.log(np.maximum(after, 1e-300))
    mask = np.zeros(top_k, dtype=bool)
    mask[:C] = True
    return AttributionScatter(before, after, mask)
