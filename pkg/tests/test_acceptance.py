"""Acceptance checks, one test per criterion.

Each test records a one-line PASS/FAIL (or WARN) verdict that is printed
immediately and repeated in the terminal summary.
"""

import time
import warnings

import numpy as np
import pytest

from conftest import ACCEPTANCE_RESULTS
from spectrascope import ccm, mlpnet
from spectrascope.blocks import ClassArray, CrossClassArray, WeightScheme, between_class, second_moment, weighted_decompose
from spectrascope.cli import main
from spectrascope.knockout import project_knockout
from spectrascope.lanczos import (
    density_l1_distance,
    estimate_spectrum,
    fast_lanczos,
    normalization,
    probe_rng,
    subspace_iteration,
)
from spectrascope.linop import DenseSymOperator
from spectrascope.synthetic import spiked_wishart

pytestmark = pytest.mark.acceptance


def _report(n: int, ok: bool, detail: str, status: str | None = None) -> None:
    status = status or ("PASS" if ok else "FAIL")
    ACCEPTANCE_RESULTS[n] = (status, detail)
    print(f"criterion {n}: {status} {detail}")


def test_criterion_01_closed_form_spectrum():
    start = time.perf_counter()
    worst = 0.0
    for D, C, alpha, s in ccm.PARAM_GRID:
        closed = ccm.theorem_spectrum(D, C, alpha, s).values()
        dense = np.linalg.eigvalsh(ccm.expected_fim(D, C, alpha, s))
        worst = max(worst, float(np.abs(closed - dense).max()))
    elapsed = time.perf_counter() - start
    ok = len(ccm.PARAM_GRID) == 48 and worst < 1e-10 and elapsed < 10
    _report(1, ok, f"max abs diff {worst:.2e} over {len(ccm.PARAM_GRID)} points in {elapsed:.2f}s")
    assert ok


def test_criterion_02_decomposition_reconstruction():
    start = time.perf_counter()
    rng = np.random.default_rng(2024)
    errors = []
    for _ in range(100):
        N, C, D = rng.integers(1, 8), rng.integers(2, 6), rng.integers(1, 12)
        arr = CrossClassArray(rng.standard_normal((N, C, C, D)) + rng.standard_normal((1, C, C, D)))
        logits = 3 * rng.standard_normal((N, C, C))
        p = np.exp(logits) / np.exp(logits).sum(axis=-1, keepdims=True)
        errors.append(weighted_decompose(arr, WeightScheme.from_probs(p)).relative_error())
    elapsed = time.perf_counter() - start
    ok = max(errors) < 1e-12 and elapsed < 5
    _report(2, ok, f"worst relative error {max(errors):.2e} over 100 instances in {elapsed:.2f}s")
    assert ok


def test_criterion_03_lanczos_verification():
    start = time.perf_counter()
    A = spiked_wishart(300, (5.0, 4.0, 3.0), seed=0)
    op = DenseSymOperator(A)
    exact = np.linalg.eigvalsh(A)
    top = np.array([v for v, _ in subspace_iteration(op, 3, T=128, seed=0)])
    top_err = float(np.abs(top - exact[-3:]).max())
    # n_vec is not fixed by the criterion; 128 probes average out single-probe noise
    est = estimate_spectrum(op, M=128, K=1024, n_vec=128, kappa=3.0, seed=0)
    l1 = density_l1_distance(est, exact, bins=100)
    elapsed = time.perf_counter() - start
    ok = top_err < 1e-6 and l1 < 0.15 and elapsed < 30
    _report(3, ok, f"top-3 error {top_err:.2e}, L1 {l1:.3f}, {elapsed:.1f}s")
    assert ok


def _fd_layer_gradient(params, x, label, l, step=1e-4):
    W = params.weights[l - 1]
    out = np.zeros(W.size)

    def value(Wl):
        weights = list(params.weights)
        weights[l - 1] = Wl
        z = mlpnet.forward(mlpnet.MLPParams(weights), x).pre[-1][0]
        z = z - z.max()
        return np.log(np.exp(z).sum()) - z[label]

    for idx in range(W.size):
        a, b = divmod(idx, W.shape[0])  # column-stacking: index a * d_l + b is entry (b, a)
        E = np.zeros_like(W)
        E[b, a] = step
        out[idx] = (value(W + E) - value(W - E)) / (2 * step)
    return out


def test_criterion_04_gradient_and_kronecker_identity():
    rng = np.random.default_rng(4)
    worst, exact_kron = 0.0, True
    for trial in range(50):
        depth = int(rng.integers(1, 4))
        dims = [int(d) for d in rng.integers(2, 7, size=depth + 1)]
        params = mlpnet.init_params(dims, seed=trial)
        x = rng.standard_normal(dims[0])
        label = int(rng.integers(dims[-1]))
        l = int(rng.integers(1, depth + 1))
        tr = mlpnet.forward(params, x)
        back = mlpnet.extended_backward(params, tr)
        g = mlpnet.extended_gradient(tr, back, l)[0, label]
        fd = _fd_layer_gradient(params, x, label, l)
        worst = max(worst, float(np.abs(g - fd).max() / max(np.abs(fd).max(), 1e-12)))
        exact_kron &= np.array_equal(g, np.kron(tr.inputs[l - 1][0], back.deltas[l - 1][0, label]))
    ok = worst < 1e-5 and exact_kron
    _report(4, ok, f"max relative FD error {worst:.2e}; Kronecker form exact: {exact_kron}")
    assert ok


def test_criterion_05_linear_model_hessian_equals_G():
    params = mlpnet.init_params([30, 10], seed=5)  # p = 300
    data = ccm.sample_ccm(ccm.CCMConfig(D=30, C=10, N=6, t=2.0, seed=5))
    G = mlpnet.assemble_G(params, data)
    H = mlpnet.hessian_fd(params, data)
    rel = float(np.linalg.norm(H - G) / np.linalg.norm(G))
    ok = params.n_params <= 500 and rel < 1e-4
    _report(5, ok, f"relative Frobenius error {rel:.2e} at p={params.n_params}")
    assert ok


def _planted_instance(seed=6, D=200, C=4, N=100):
    rng = np.random.default_rng(seed)
    means = np.linalg.qr(rng.standard_normal((D, C)))[0].T * 20.0
    arr = ClassArray(means[None] + rng.standard_normal((N, C, D)))
    return second_moment(arr), between_class(arr)


def test_criterion_06_planted_knockout():
    A, B = _planted_instance()
    before = np.sort(np.linalg.eigvalsh(A))[::-1]
    after = np.sort(np.linalg.eigvalsh(project_knockout(A, B)))[::-1]
    again = np.sort(np.linalg.eigvalsh(project_knockout(*_planted_instance())))[::-1]
    deterministic = np.array_equal(after, again)
    dropped = bool(np.all(after[:4] < before[4]))
    ok = dropped and deterministic
    _report(
        6, ok,
        f"top-4 after {np.round(after[:4], 4).tolist()} vs 5th before {before[4]:.4f}; deterministic: {deterministic}",
    )
    assert ok


def test_criterion_07_monte_carlo_rate():
    Ks = (1000, 4000, 16000)
    errs = [ccm.monte_carlo_error(5, 3, 0.3, 4.0, K, replicates=16, seed=7) for K in Ks]
    ratios = [errs[0] / errs[1], errs[1] / errs[2]]
    ok = all(1.5 <= r <= 2.5 for r in ratios)
    _report(7, ok, f"RMS errors {[f'{e:.4f}' for e in errs]}, ratios {[f'{r:.2f}' for r in ratios]}")
    assert ok


def test_criterion_08_quadrature_invariants():
    worst_w, worst_m = 0.0, 0.0
    for A in (spiked_wishart(300, seed=0), spiked_wishart(200, seed=8)):
        normed, _ = normalization(DenseSymOperator(A), seed=0)
        B = normed.matvec
        for l in range(1, 33):
            res = fast_lanczos(normed, 128, rng=probe_rng(0, l))
            v = res.start
            w, theta = res.weights, res.ritz_values
            worst_w = max(worst_w, abs(w.sum() - 1.0))
            Av = B(v)
            exact = (1.0, float(v @ Av), float(Av @ Av))
            for j in range(3):
                worst_m = max(worst_m, abs(float(w @ theta**j) - exact[j]))
    ok = worst_w < 1e-10 and worst_m < 1e-8
    _report(8, ok, f"weight-sum error {worst_w:.2e}, moment error {worst_m:.2e} over 64 probes")
    assert ok


def test_criterion_09_cfac_aligns_better():
    wins, scores = 0, []
    for seed in range(5):
        data = ccm.sample_ccm(ccm.CCMConfig(D=16, C=4, N=40, t=3.0, seed=seed))
        params = mlpnet.train_sgd(
            mlpnet.init_params([16, 32, 32, 4], seed=seed), data, lr=0.02, epochs=30, batch=16, seed=seed
        )
        L = params.L
        G = np.linalg.eigvalsh(mlpnet.assemble_G(params, data, L))
        K = np.linalg.eigvalsh(mlpnet.kfac_layer(params, data, L))
        C = np.linalg.eigvalsh(mlpnet.cfac_layer(params, data, L))
        k = 32
        sc, sk = mlpnet.spectral_alignment(G, C, k), mlpnet.spectral_alignment(G, K, k)
        scores.append((round(sc, 3), round(sk, 3)))
        wins += sc >= sk
    ok = wins >= 4
    detail = f"CFAC >= KFAC on {wins}/5 seeds; (CFAC, KFAC) scores {scores}"
    _report(9, ok, detail, status="PASS" if ok else "WARN")
    if not ok:
        warnings.warn(f"KFAC/CFAC alignment claim not reproduced: {detail}")


def _run_all_subcommands(root, threads):
    out = root / f"t{threads}"
    t = ["--threads", str(threads), "--seed", "3"]
    tr = out / "train"
    assert main(["train", "--ccm", "D=10,C=3,N=12,t=3,seed=1", "--widths", "8,8", "--epochs", "6", "--out", str(tr), *t]) == 0
    net = ["--mlp", str(tr / "model.mlp1"), "--data", str(tr / "data.blk")]
    runs = [
        ["spectrum", "--synthetic", "spiked:n=150", "--deflate", "3", "--nvec", "8", "--out", str(out / "sp")],
        ["spectrum", *net, "--quantity", "G", "--deflate", "4", "--log", "--M", "200", "--nvec", "4", "--out", str(out / "sl")],
        ["attribute", *net, "--quantity", "G", "--part", "class+cross", "--C", "3", "--top-k", "20", "--out", str(out / "at")],
        ["ccm-verify", "--mc", "2000", "--out", str(out / "cc")],
        ["kfac-compare", *net, "--out", str(out / "kf")],
        ["decompose", *net, "--quantity", "Delta", "--out", str(out / "de")],
    ]
    for args in runs:
        assert main([*args, *t]) == 0
    return {p.relative_to(out): p.read_bytes() for p in sorted(out.rglob("*")) if p.is_file()}


def test_criterion_10_cli_determinism(tmp_path):
    outputs = [_run_all_subcommands(tmp_path, n) for n in (1, 2, 8)]
    repeat = _run_all_subcommands(tmp_path / "again", 8)
    same = all(o == outputs[0] for o in outputs[1:]) and repeat == outputs[0]
    _report(10, same, f"{len(outputs[0])} output files byte-identical across 1, 2 and 8 threads and a repeat run: {same}")
    assert same
