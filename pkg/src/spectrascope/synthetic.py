"""Random test matrices with known spectral structure."""

from __future__ import annotations

import numpy as np


def spiked_wishart(n: int, spikes=(5.0, 4.0, 3.0), seed: int = 0) -> np.ndarray:
    """``X + Z Z^T / n`` with ``X = diag(spikes, 0, ...)`` and Gaussian ``Z`` (n x n)."""
    rng = np.random.default_rng(seed)
    Z = rng.standard_normal((n, n))
    Y = Z @ Z.T / n
    for k, s in enumerate(spikes):
        Y[k, k] += s
    return (Y + Y.T) / 2


def pareto_wishart(p: int, n: int | None = None, alpha: float = 1.0, seed: int = 0) -> np.ndarray:
    """``Z Z^T / n`` with i.i.d. Pareto(alpha) entries in the p x n matrix ``Z``.

    Heavy-tailed entries give a power-law spectral density.
    """
    n = 2 * p if n is None else n
    rng = np.random.default_rng(seed)
    Z = rng.pareto(alpha, size=(p, n)) + 1.0
    Y = Z @ Z.T / n
    return (Y + Y.T) / 2


def goe(n: int, seed: int = 0) -> np.ndarray:
    """Gaussian orthogonal ensemble sample scaled to spectrum ~[-2, 2]."""
    rng = np.random.default_rng(seed)
    A = rng.standard_normal((n, n))
    return (A + A.T) / np.sqrt(2.0 * n) / np.sqrt(2.0)


def parse_spec(text: str) -> np.ndarray:
    """Build a matrix from a generator string such as ``spiked:n=300,spikes=5,4,3``.

    Known kinds: ``spiked`` (n, spikes, seed), ``pareto`` (p, n, alpha, seed),
    ``goe`` (n, seed).
    """
    kind, _, rest = text.partition(":")
    kwargs: dict[str, str] = {}
    key = None
    for token in filter(None, rest.split(",")):
        if "=" in token:
            key, value = token.split("=", 1)
            kwargs[key.strip()] = value.strip()
        elif key is not None:
            # continuation of a comma-separated list value, e.g. spikes=5,4,3
            kwargs[key] += "," + token.strip()
        else:
            raise ValueError(f"cannot parse generator spec {text!r}")
    seed = int(kwargs.pop("seed", 0))
    try:
        if kind == "spiked":
            spikes = tuple(float(s) for s in kwargs.pop("spikes", "5,4,3").split(","))
            out = spiked_wishart(int(kwargs.pop("n", 300)), spikes, seed)
        elif kind == "pareto":
            p = int(kwargs.pop("p", 500))
            n = int(kwargs.pop("n", 2 * p))
            out = pareto_wishart(p, n, float(kwargs.pop("alpha", 1.0)), seed)
        elif kind == "goe":
            out = goe(int(kwargs.pop("n", 100)), seed)
        else:
            raise ValueError(f"unknown generator {kind!r}")
    except KeyError as exc:
        raise ValueError(f"bad generator spec {text!r}") from exc
    if kwargs:
        raise ValueError(f"unused generator options: {sorted(kwargs)}")
    return out
