"""Class and cross-class block arrays and their second-moment decompositions.

A :class:`ClassArray` holds vectors ``v[i, c]`` (example ``i`` of class
``c``); a :class:`CrossClassArray` holds ``v[i, c, c']`` where ``c'`` runs
over counterfactual labels. Two class-mean conventions are in use:

* unweighted means (:func:`class_means`) average over *all* cross-classes;
* the weighted decomposition (:func:`weighted_decompose`) builds class
  means from the ``c' != c`` cross-class means only, with softmax weights.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

__all__ = [
    "ClassArray",
    "CrossClassArray",
    "WeightScheme",
    "MomentDecomposition",
    "ZeroBlockWeightError",
    "global_mean",
    "class_means",
    "cross_class_means",
    "second_moment",
    "between_class",
    "between_cross_class",
    "within_cross_class",
    "weighted_decompose",
    "class_moment_split",
    "per_class_moment",
    "save_blocks",
    "load_blocks",
    "save_weights",
    "load_weights",
]

ZERO_WEIGHT_THRESHOLD = 1e-300


class ZeroBlockWeightError(ValueError):
    """A cross-class block carries no weight, so its normalized weights are undefined."""


@dataclass(frozen=True)
class ClassArray:
    """``data[i, c]`` is the D-vector of example ``i`` in class ``c``."""

    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim != 3:
            raise ValueError(f"ClassArray needs shape (N, C, D), got {data.shape}")
        if min(data.shape) == 0:
            raise ValueError("ClassArray must be nonempty")
        object.__setattr__(self, "data", data)

    @property
    def N(self) -> int:
        return self.data.shape[0]

    @property
    def C(self) -> int:
        return self.data.shape[1]

    @property
    def D(self) -> int:
        return self.data.shape[2]

    def flat(self) -> np.ndarray:
        return self.data.reshape(-1, self.D)


@dataclass(frozen=True)
class CrossClassArray:
    """``data[i, c, c2]`` is the D-vector for example ``i`` of class ``c`` at cross-class ``c2``."""

    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim != 4 or data.shape[1] != data.shape[2]:
            raise ValueError(f"CrossClassArray needs shape (N, C, C, D), got {data.shape}")
        if min(data.shape) == 0:
            raise ValueError("CrossClassArray must be nonempty")
        object.__setattr__(self, "data", data)

    @property
    def N(self) -> int:
        return self.data.shape[0]

    @property
    def C(self) -> int:
        return self.data.shape[1]

    @property
    def D(self) -> int:
        return self.data.shape[3]


@dataclass(frozen=True)
class WeightScheme:
    """Nonnegative weights ``w[i, c, c2]`` and the marginals derived from them."""

    w: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.w, dtype=np.float64)
        if w.ndim != 3 or w.shape[1] != w.shape[2]:
            raise ValueError(f"weights need shape (N, C, C), got {w.shape}")
        if np.any(w < 0):
            raise ValueError("weights must be nonnegative")
        object.__setattr__(self, "w", w)

    @classmethod
    def from_probs(cls, probs: np.ndarray) -> "WeightScheme":
        """``w = p / (N C)`` for softmax outputs ``probs[i, c, :]``."""
        probs = np.asarray(probs, dtype=np.float64)
        N, C = probs.shape[:2]
        return cls(probs / (N * C))

    @classmethod
    def uniform(cls, N: int, C: int) -> "WeightScheme":
        return cls(np.full((N, C, C), 1.0 / (N * C * C)))

    @property
    def block(self) -> np.ndarray:
        """``w_{c,c'} = sum_i w_{i,c,c'}``."""
        return self.w.sum(axis=0)

    @property
    def pi_example(self) -> np.ndarray:
        """``pi_{i,c,c'} = w_{i,c,c'} / w_{c,c'}``."""
        block = self.block
        _check_offdiag(block)
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(block > ZERO_WEIGHT_THRESHOLD, self.w / block, 0.0)

    @property
    def class_weight(self) -> np.ndarray:
        """``w_c = sum_{c' != c} w_{c,c'}``."""
        block = self.block
        return block.sum(axis=1) - np.diag(block)

    @property
    def pi_cross(self) -> np.ndarray:
        """``pi_{c,c'} = w_{c,c'} / w_c`` for ``c' != c`` (zero on the diagonal)."""
        block = self.block.copy()
        np.fill_diagonal(block, 0.0)
        return block / self.class_weight[:, None]

    @property
    def pi_class(self) -> np.ndarray:
        """``pi_c = w_c / sum_c w_c``."""
        wc = self.class_weight
        return wc / wc.sum()


@dataclass
class MomentDecomposition:
    total: np.ndarray
    parts: dict[str, np.ndarray] = field(default_factory=dict)

    def reconstruction(self) -> np.ndarray:
        return sum(self.parts.values())

    def relative_error(self) -> float:
        return float(np.linalg.norm(self.total - self.reconstruction()) / np.linalg.norm(self.total))


def _check_offdiag(block: np.ndarray) -> None:
    C = block.shape[0]
    off = ~np.eye(C, dtype=bool)
    if np.any(block[off] <= ZERO_WEIGHT_THRESHOLD):
        bad = [(int(a), int(b)) for a, b in zip(*np.nonzero(off & (block <= ZERO_WEIGHT_THRESHOLD)))]
        raise ZeroBlockWeightError(f"cross-class blocks with zero weight: {bad}")


def _sym(m: np.ndarray) -> np.ndarray:
    return (m + m.T) / 2


def _outer_mean(vectors: np.ndarray) -> np.ndarray:
    """Average of v v^T over all leading axes."""
    flat = vectors.reshape(-1, vectors.shape[-1])
    return _sym(flat.T @ flat / flat.shape[0])


# -- unweighted means and moments ---------------------------------------------


def cross_class_means(arr: CrossClassArray) -> np.ndarray:
    return arr.data.mean(axis=0)


def class_means(arr: ClassArray | CrossClassArray) -> np.ndarray:
    if isinstance(arr, CrossClassArray):
        return cross_class_means(arr).mean(axis=1)
    return arr.data.mean(axis=0)


def global_mean(arr: ClassArray | CrossClassArray) -> np.ndarray:
    return class_means(arr).mean(axis=0)


def second_moment(arr: ClassArray | CrossClassArray) -> np.ndarray:
    return _outer_mean(arr.data)


def between_class(arr: ClassArray | CrossClassArray) -> np.ndarray:
    return _outer_mean(class_means(arr))


def between_cross_class(arr: CrossClassArray) -> np.ndarray:
    if not isinstance(arr, CrossClassArray):
        raise TypeError("between-cross-class covariance needs a CrossClassArray")
    z = cross_class_means(arr) - class_means(arr)[:, None, :]
    return _outer_mean(z)


def within_cross_class(arr: ClassArray | CrossClassArray) -> np.ndarray:
    """Within-cross-class covariance (within-class covariance for a ClassArray)."""
    if isinstance(arr, CrossClassArray):
        z = arr.data - cross_class_means(arr)[None]
    else:
        z = arr.data - class_means(arr)[None]
    return _outer_mean(z)


def class_moment_split(arr: ClassArray) -> dict[str, np.ndarray]:
    """``total = class + within`` for a class-structured array."""
    return {"total": second_moment(arr), "class": between_class(arr), "within": within_cross_class(arr)}


def per_class_moment(
    arr: ClassArray | CrossClassArray, c: int, weights: WeightScheme | None = None
) -> np.ndarray:
    """Class-specific second moment.

    For a ClassArray this is ``Ave_i v v^T`` within class ``c``. For a
    weighted CrossClassArray it is ``C * sum_{i,c'} w_{i,c,c'} v v^T``,
    scaled so that the per-class moments average to the full weighted
    second moment, mirroring ``Ave_c H_c = H``.
    """
    if isinstance(arr, ClassArray):
        return _outer_mean(arr.data[:, c])
    block = arr.data[:, c]  # (N, C', D)
    if weights is None:
        return _outer_mean(block)
    w = weights.w[:, c].reshape(-1)
    flat = block.reshape(-1, arr.D)
    return _sym(arr.C * (flat * w[:, None]).T @ flat)


# -- weighted decomposition ---------------------------------------------------


def weighted_second_moment(arr: CrossClassArray, weights: WeightScheme) -> np.ndarray:
    flat = arr.data.reshape(-1, arr.D)
    w = weights.w.reshape(-1)
    return _sym((flat * w[:, None]).T @ flat)


def weighted_cross_class_means(arr: CrossClassArray, weights: WeightScheme) -> np.ndarray:
    """``g_{c,c'} = sum_i pi_{i,c,c'} v_{i,c,c'}``."""
    return np.einsum("icd,icdk->cdk", weights.pi_example, arr.data)


def weighted_class_means(arr: CrossClassArray, weights: WeightScheme) -> np.ndarray:
    """``g_c = sum_{c' != c} pi_{c,c'} g_{c,c'}``."""
    return np.einsum("cd,cdk->ck", weights.pi_cross, weighted_cross_class_means(arr, weights))


def weighted_decompose(arr: CrossClassArray, weights: WeightScheme) -> MomentDecomposition:
    """Split ``sum w v v^T`` into class, cross, within and same-class parts.

    The four parts add up to the total exactly (up to rounding) because
    each grouping step is a weighted mean-variance split: first over
    examples inside every (c, c') block, then over the ``c' != c`` block
    means of each class around their class mean ``g_c``.
    """
    if weights.w.shape != arr.data.shape[:3]:
        raise ValueError(f"weights shape {weights.w.shape} does not match array {arr.data.shape[:3]}")
    block_w = weights.block
    _check_offdiag(block_w)
    C = arr.C
    g_cc = weighted_cross_class_means(arr, weights)  # (C, C, D)
    g_c = np.einsum("cd,cdk->ck", weights.pi_cross, g_cc)
    w_c = weights.class_weight
    pi_cross = weights.pi_cross

    dev_blocks = arr.data - g_cc[None]
    flat = dev_blocks.reshape(-1, arr.D)
    within = (flat * weights.w.reshape(-1)[:, None]).T @ flat

    off = ~np.eye(C, dtype=bool)
    z = (g_cc - g_c[:, None, :])[off]  # (C*(C-1), D)
    zw = (w_c[:, None] * pi_cross)[off]
    cross = (z * zw[:, None]).T @ z

    klass = (g_c * w_c[:, None]).T @ g_c
    diag = np.arange(C)
    g_same = g_cc[diag, diag]
    same = (g_same * block_w[diag, diag][:, None]).T @ g_same

    parts = {"class": _sym(klass), "cross": _sym(cross), "within": _sym(within), "diag_cc": _sym(same)}
    return MomentDecomposition(weighted_second_moment(arr, weights), parts)


# -- binary formats -----------------------------------------------------------

_MAGIC3 = b"BLK3"
_MAGIC2 = b"BLK2"
_MAGICW = b"WGT3"


def save_blocks(path: str | Path, arr: ClassArray | CrossClassArray) -> None:
    with open(path, "wb") as fh:
        if isinstance(arr, CrossClassArray):
            fh.write(_MAGIC3)
            fh.write(struct.pack("<4Q", arr.N, arr.C, arr.C, arr.D))
        else:
            fh.write(_MAGIC2)
            fh.write(struct.pack("<3Q", arr.N, arr.C, arr.D))
        fh.write(arr.data.astype("<f8").tobytes(order="C"))


def load_blocks(path: str | Path) -> ClassArray | CrossClassArray:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic == _MAGIC3:
            N, C, C2, D = struct.unpack("<4Q", fh.read(32))
            if C2 != C:
                raise ValueError(f"{path}: cross-class count {C2} != class count {C}")
            shape = (N, C, C, D)
        elif magic == _MAGIC2:
            shape = struct.unpack("<3Q", fh.read(24))
        else:
            raise ValueError(f"{path}: not a BLK2/BLK3 file")
        data = np.frombuffer(fh.read(), dtype="<f8")
    if data.size != int(np.prod(shape)):
        raise ValueError(f"{path}: expected {int(np.prod(shape))} values, found {data.size}")
    data = data.reshape(shape).astype(np.float64)
    return CrossClassArray(data) if len(shape) == 4 else ClassArray(data)


def save_weights(path: str | Path, weights: WeightScheme) -> None:
    with open(path, "wb") as fh:
        fh.write(_MAGICW)
        fh.write(weights.w.astype("<f8").tobytes(order="C"))


def load_weights(path: str | Path, N: int, C: int) -> WeightScheme:
    """Read a WGT3 file; the header carries no shape, so N and C come from the paired array."""
    with open(path, "rb") as fh:
        if fh.read(4) != _MAGICW:
            raise ValueError(f"{path}: not a WGT3 file")
        data = np.frombuffer(fh.read(), dtype="<f8")
    if data.size != N * C * C:
        raise ValueError(f"{path}: expected {N * C * C} weights, found {data.size}")
    return WeightScheme(data.reshape(N, C, C).astype(np.float64))
