"""Command-line front end.

Subcommands: ``spectrum``, ``attribute``, ``ccm-verify``, ``kfac-compare``,
``train`` and ``decompose``. Outputs carry no timestamps, so a fixed seed
and configuration give byte-identical files for any ``--threads`` value.

Exit codes: 0 success, 2 configuration error, 3 numerical degeneracy,
4 I/O error.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import ccm, knockout, mlpnet
from .blocks import (
    ClassArray,
    CrossClassArray,
    WeightScheme,
    ZeroBlockWeightError,
    between_class,
    global_mean,
    load_blocks,
    load_weights,
    second_moment,
    weighted_decompose,
    within_cross_class,
)
from .lanczos import DegenerateSpectrumError, estimate_spectrum
from .linop import DENSE_LIMIT, DenseSymOperator, load_matrix, save_matrix
from .svg import density_svg
from .synthetic import parse_spec

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4

QUANTITIES = ("G", "KFAC", "CFAC", "H", "Delta", "W", "Hess", "E")
PARTS = ("class", "cross", "within", "diag_cc", "global_mean")

log = logging.getLogger("spectrascope")


class ConfigError(ValueError):
    pass


# -- output helpers -------------------------------------------------------------


def _wants(args, kind: str) -> bool:
    return args.format == "all" or args.format == kind


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_json(path: Path, data) -> None:
    path.write_text(json.dumps(data, indent=1, sort_keys=True) + "\n")


def _write_csv(path: Path, header: list[str], rows) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([repr(float(x)) if isinstance(x, (float, np.floating)) else x for x in row])
    path.write_text(buf.getvalue())


# -- operator sources ---------------------------------------------------------------


def _load_dataset(path: str) -> ClassArray:
    arr = load_blocks(path)
    if not isinstance(arr, ClassArray):
        raise ConfigError(f"{path}: expected a class-structured (BLK2) dataset")
    return arr


def _mlp_quantity(params: mlpnet.MLPParams, data: ClassArray, quantity: str, layer: int | None) -> np.ndarray:
    """Dense matrix for a named network quantity (layer-restricted where given)."""
    if quantity not in QUANTITIES:
        raise ConfigError(f"unknown quantity {quantity!r}; choose from {', '.join(QUANTITIES)}")
    if quantity == "G":
        return mlpnet.assemble_G(params, data, layer)
    if quantity in ("KFAC", "CFAC"):
        if layer is None:
            return mlpnet.kfac_full(params, data) if quantity == "KFAC" else mlpnet.cfac_full(params, data)
        fn = mlpnet.kfac_layer if quantity == "KFAC" else mlpnet.cfac_layer
        return fn(params, data, layer)
    if quantity in ("Hess", "E"):
        if layer is not None:
            raise ConfigError(f"{quantity} is only available over all layers")
        H = mlpnet.hessian_fd(params, data)
        return H if quantity == "Hess" else H - mlpnet.assemble_G(params, data)
    l = layer if layer is not None else params.L
    if not 1 <= l <= params.L:
        raise ConfigError(f"layer must be in 1..{params.L}")
    if quantity == "H":
        return second_moment(mlpnet.layer_features(params, data)[l - 1])
    if quantity == "Delta":
        arr, weights = _delta_blocks(params, data, l)
        return weighted_decompose(arr, weights).total
    W = params.weights[l - 1]
    return W @ W.T


def _delta_blocks(params, data: ClassArray, l: int) -> tuple[CrossClassArray, WeightScheme]:
    x = data.data.reshape(-1, data.D)
    trace = mlpnet.forward(params, x)
    back = mlpnet.extended_backward(params, trace)
    N, C = data.N, data.C
    arr = CrossClassArray(back.deltas[l - 1].reshape(N, C, C, -1))
    return arr, WeightScheme.from_probs(trace.probs.reshape(N, C, C))


def _source_matrix(args) -> np.ndarray:
    given = [bool(args.matrix), bool(args.synthetic), bool(args.mlp)]
    if sum(given) != 1:
        raise ConfigError("give exactly one of --matrix, --synthetic, --mlp")
    if args.matrix:
        A = load_matrix(args.matrix)
        if not np.array_equal(A, A.T):
            raise ConfigError(f"{args.matrix}: matrix is not symmetric")
        return A
    if args.synthetic:
        return parse_spec(args.synthetic)
    if not args.data:
        raise ConfigError("--mlp needs --data")
    params = mlpnet.load_checkpoint(args.mlp)
    return _mlp_quantity(params, _load_dataset(args.data), args.quantity, args.layer)


# -- subcommands ----------------------------------------------------------------


def cmd_spectrum(args) -> int:
    A = _source_matrix(args)
    if A.shape[0] > DENSE_LIMIT:
        raise ConfigError(f"dimension {A.shape[0]} exceeds {DENSE_LIMIT}")
    M = args.M if args.M is not None else (2048 if args.log else 128)
    M = min(M, A.shape[0] - args.deflate)
    est = estimate_spectrum(
        DenseSymOperator(A),
        M,
        args.K,
        args.nvec,
        args.kappa,
        args.seed,
        M0=min(args.M0, A.shape[0]),
        tau=args.tau,
        deflate_rank=args.deflate,
        T=args.T,
        log_mode=args.log,
        epsilon=args.epsilon,
        threads=args.threads,
        norm_values=args.norm_values,
    )
    out = _out_dir(args)
    if _wants(args, "json"):
        _write_json(out / "spectrum.json", est.to_dict())
    x, dens = est.denormalized()
    if _wants(args, "csv"):
        _write_csv(out / "spectrum.csv", ["x", "density"], zip(x, dens))
    if _wants(args, "svg"):
        rug = [o["value"] for o in est.outliers]
        if args.log:
            rug = [float(np.log(abs(v) + args.epsilon)) for v in rug]
        label = "log(|eigenvalue| + epsilon)" if args.log else "eigenvalue"
        (out / "spectrum.svg").write_text(density_svg(x, dens, rug=rug, xlabel=label))
    return EXIT_OK


def _parts_for(args) -> tuple[np.ndarray, dict[str, np.ndarray]]:
    """Total second moment and its named parts for the attribute/decompose commands."""
    if args.blocks:
        arr = load_blocks(args.blocks)
        if isinstance(arr, ClassArray):
            return second_moment(arr), {
                "class": between_class(arr),
                "within": within_cross_class(arr),
                "global_mean": np.outer(global_mean(arr), global_mean(arr)),
            }
        weights = load_weights(args.weights, arr.N, arr.C) if args.weights else WeightScheme.uniform(arr.N, arr.C)
        return _cross_parts(arr, weights)
    if not (args.mlp and args.data):
        raise ConfigError("need --blocks, or --mlp with --data")
    params = mlpnet.load_checkpoint(args.mlp)
    data = _load_dataset(args.data)
    if args.quantity == "H":
        l = args.layer or params.L
        feats = mlpnet.layer_features(params, data)[l - 1]
        g = global_mean(feats)
        return second_moment(feats), {
            "class": between_class(feats),
            "within": within_cross_class(feats),
            "global_mean": np.outer(g, g),
        }
    if args.quantity == "G":
        return _cross_parts(*mlpnet.cross_class_gradients(params, data, args.layer))
    if args.quantity == "Delta":
        return _cross_parts(*_delta_blocks(params, data, args.layer or params.L))
    raise ConfigError(f"quantity {args.quantity!r} has no class decomposition; use G, H or Delta")


def _cross_parts(arr: CrossClassArray, weights: WeightScheme):
    dec = weighted_decompose(arr, weights)
    flat = arr.data.reshape(-1, arr.D)
    w = weights.w.reshape(-1)
    m = (w @ flat) / w.sum()
    parts = dict(dec.parts)
    parts["global_mean"] = w.sum() * np.outer(m, m)
    return dec.total, parts


def cmd_attribute(args) -> int:
    if args.target:
        A = _source_matrix(args)
        B = load_matrix(args.target)
        label = args.target
    else:
        A, parts = _parts_for(args)
        names = args.part.split("+")
        unknown = [n for n in names if n not in parts]
        if unknown:
            raise ConfigError(f"unknown part(s) {unknown}; available: {', '.join(sorted(parts))}")
        B = sum(parts[n] for n in names)
        label = args.part
    top_k = args.top_k or A.shape[0]
    scatter = knockout.attribution_scatter(A, knockout.KnockoutSpec(args.kind, B), top_k, args.C, log=args.log)
    out = _out_dir(args)
    if _wants(args, "csv") or _wants(args, "json"):
        scatter.to_csv(out / "attribution.csv")
    if _wants(args, "svg"):
        (out / "attribution.svg").write_text(scatter.to_svg(title=f"knockout of {label}"))
    return EXIT_OK


def _ccm_report(D, C, alpha, s, mc_K, seed, threads) -> dict:
    closed = ccm.theorem_spectrum(D, C, alpha, s)
    dense = np.linalg.eigvalsh(ccm.expected_fim(D, C, alpha, s))
    report = {
        "params": {"D": D, "C": C, "alpha": alpha, "s": s},
        "groups": closed.as_dict(),
        "closed_form": [float(v) for v in closed.values()],
        "dense_eig": [float(v) for v in dense],
        "max_abs_diff": float(np.max(np.abs(closed.values() - dense))),
        "monte_carlo_frobenius_err": None,
    }
    if mc_K:
        est = ccm.monte_carlo_fim(D, C, alpha, s, mc_K, seed=seed, threads=threads)
        report["monte_carlo_frobenius_err"] = float(np.linalg.norm(est - ccm.expected_fim(D, C, alpha, s)))
    try:
        report["ratios"] = ccm.misclassification_ratio_report(D, C, alpha, s)
    except ZeroDivisionError:
        report["ratios"] = None
    return report


def cmd_ccm_verify(args) -> int:
    if args.grid:
        points = ccm.PARAM_GRID
    else:
        points = [(args.D, args.C, args.alpha, args.s)]
    reports = [_ccm_report(D, C, a, s, args.mc, args.seed, args.threads) for D, C, a, s in points]
    out = _out_dir(args)
    if _wants(args, "json"):
        _write_json(out / "ccm_verify.json", reports if args.grid else reports[0])
    if _wants(args, "csv"):
        rows = [
            (r["params"]["D"], r["params"]["C"], r["params"]["alpha"], r["params"]["s"], r["max_abs_diff"],
             "" if r["monte_carlo_frobenius_err"] is None else r["monte_carlo_frobenius_err"])
            for r in reports
        ]
        _write_csv(out / "ccm_verify.csv", ["D", "C", "alpha", "s", "max_abs_diff", "monte_carlo_frobenius_err"], rows)
    worst = max(r["max_abs_diff"] for r in reports)
    print(f"max_abs_diff {worst:.3e} over {len(reports)} parameter set(s)")
    return EXIT_OK


def cmd_kfac_compare(args) -> int:
    params = mlpnet.load_checkpoint(args.mlp)
    data = _load_dataset(args.data)
    rows, layers = [], []
    for l in range(1, params.L + 1):
        spectra = {
            "G": np.linalg.eigvalsh(mlpnet.assemble_G(params, data, l))[::-1],
            "KFAC": np.linalg.eigvalsh(mlpnet.kfac_layer(params, data, l))[::-1],
            "CFAC": np.linalg.eigvalsh(mlpnet.cfac_layer(params, data, l))[::-1],
        }
        k = min(args.top_k, len(spectra["G"]))
        score_k = mlpnet.spectral_alignment(spectra["G"], spectra["KFAC"], k)
        score_c = mlpnet.spectral_alignment(spectra["G"], spectra["CFAC"], k)
        layers.append(
            {
                "layer": l,
                "k": k,
                "alignment_kfac": score_k,
                "alignment_cfac": score_c,
                "top_eigenvalues": {name: [float(v) for v in vals[:k]] for name, vals in spectra.items()},
            }
        )
        rows.append((l, k, score_k, score_c))
    last = layers[-1]
    status = "PASS" if last["alignment_cfac"] >= last["alignment_kfac"] else "WARN"
    out = _out_dir(args)
    if _wants(args, "json"):
        _write_json(out / "kfac_compare.json", {"layers": layers, "last_layer_status": status})
    if _wants(args, "csv"):
        _write_csv(out / "kfac_compare.csv", ["layer", "k", "alignment_kfac", "alignment_cfac"], rows)
    print(f"last layer: CFAC {last['alignment_cfac']:.4f} vs KFAC {last['alignment_kfac']:.4f} [{status}]")
    return EXIT_OK


def _parse_ccm(text: str) -> ccm.CCMConfig:
    kw = {}
    for token in filter(None, text.split(",")):
        key, _, value = token.partition("=")
        kw[key.strip()] = value.strip()
    try:
        cfg = ccm.CCMConfig(
            D=int(kw.pop("D")), C=int(kw.pop("C")), N=int(kw.pop("N")), t=float(kw.pop("t", 1.0)),
            seed=int(kw.pop("seed", 0)),
        )
    except KeyError as exc:
        raise ConfigError(f"--ccm needs D, C and N (got {text!r})") from exc
    if kw:
        raise ConfigError(f"unused --ccm options: {sorted(kw)}")
    return cfg


def cmd_train(args) -> int:
    from .blocks import save_blocks

    if bool(args.data) == bool(args.ccm):
        raise ConfigError("give exactly one of --data, --ccm")
    data = _load_dataset(args.data) if args.data else ccm.sample_ccm(_parse_ccm(args.ccm))
    widths = [int(w) for w in args.widths.split(",") if w] if args.widths else []
    params = mlpnet.init_params([data.D, *widths, data.C], seed=args.seed)
    out = _out_dir(args)
    rows, history = [], []

    def record(epoch, current, value):
        for l, m in enumerate(mlpnet.separation_metrics(mlpnet.layer_features(current, data)), start=1):
            rows.append((epoch, l, value, m["trace_class"], m["trace_within"], m["whisker_ratio"]))

    current = mlpnet.train_sgd(
        params, data, args.lr, args.momentum, args.weight_decay, args.epochs, args.batch,
        seed=args.seed, history=history, callback=record,
    )
    mlpnet.save_checkpoint(out / "model.mlp1", current)
    save_blocks(out / "data.blk", data)
    _write_csv(out / "metrics.csv", ["epoch", "layer", "loss", "trace_class", "trace_within", "whisker_ratio"], rows)
    final = mlpnet.separation_metrics(mlpnet.layer_features(current, data))
    ratios = [m["trace_class"] / m["trace_within"] if m["trace_within"] > 0 else float("inf") for m in final]
    status = "PASS" if ratios[-1] > ratios[0] else "WARN"
    summary = {
        "final_loss": history[-1] if history else mlpnet.loss(current, data),
        "accuracy": mlpnet.accuracy(current, data),
        "class_to_within_ratio": ratios,
        "separation_status": status,
    }
    if _wants(args, "json"):
        _write_json(out / "train_summary.json", summary)
    print(f"accuracy {summary['accuracy']:.3f}; separation last/first layer [{status}]")
    return EXIT_OK


def cmd_decompose(args) -> int:
    total, parts = _parts_for(args)
    recon = sum(v for k, v in parts.items() if k != "global_mean")
    rel = float(np.linalg.norm(total - recon) / np.linalg.norm(total))
    k = min(args.top_k or 10, total.shape[0])
    summary = {
        "relative_error": rel,
        "dim": int(total.shape[0]),
        "parts": {
            name: {
                "frobenius": float(np.linalg.norm(M)),
                "trace": float(np.trace(M)),
                "top_eigenvalues": [float(v) for v in np.linalg.eigvalsh(M)[::-1][:k]],
            }
            for name, M in sorted({"total": total, **parts}.items())
        },
    }
    out = _out_dir(args)
    if _wants(args, "json"):
        _write_json(out / "decompose.json", summary)
    if _wants(args, "csv"):
        _write_csv(out / "decompose.csv", ["part", "frobenius", "trace"],
                   [(n, p["frobenius"], p["trace"]) for n, p in summary["parts"].items()])
    if args.format == "all":
        for name, M in parts.items():
            save_matrix(out / f"part_{name}.mtx", M)
    print(f"relative reconstruction error {rel:.3e}")
    return EXIT_OK


# -- parser -------------------------------------------------------------------------


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=None, help="worker threads (default: $SPECTRASCOPE_THREADS or all cores)")
    p.add_argument("--out", default=".", help="output directory")
    p.add_argument("--format", choices=("json", "csv", "svg", "all"), default="all")


def _sources(p: argparse.ArgumentParser) -> None:
    p.add_argument("--matrix", help="symmetric matrix as CSV or MTX1")
    p.add_argument("--synthetic", help="generator spec, e.g. spiked:n=300,spikes=5,4,3")
    p.add_argument("--mlp", help="MLP1 checkpoint")
    p.add_argument("--data", help="BLK2 dataset for --mlp")
    p.add_argument("--quantity", default="G", help=f"network quantity: {', '.join(QUANTITIES)}")
    p.add_argument("--layer", type=int, default=None, help="1-based layer (default: all or last)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="spectrascope", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("spectrum", help="estimate a spectral density")
    _sources(p)
    p.add_argument("--M", type=int, default=None, help="Lanczos steps (default 128, or 2048 with --log)")
    p.add_argument("--M0", type=int, default=32)
    p.add_argument("--K", type=int, default=1024)
    p.add_argument("--nvec", type=int, default=1)
    p.add_argument("--kappa", type=float, default=3.0)
    p.add_argument("--tau", type=float, default=0.05)
    p.add_argument("--T", type=int, default=128)
    p.add_argument("--deflate", type=int, default=0)
    p.add_argument("--log", action="store_true")
    p.add_argument("--epsilon", type=float, default=1e-5)
    p.add_argument("--norm-values", action="store_true", help="report AQ column norms as outlier values")
    _common(p)
    p.set_defaults(func=cmd_spectrum)

    p = sub.add_parser("attribute", help="knockout attribution scatter")
    _sources(p)
    p.add_argument("--blocks", help="BLK2/BLK3 array to decompose")
    p.add_argument("--weights", help="WGT3 weights for a BLK3 array")
    p.add_argument("--target", help="explicit knockout matrix (CSV or MTX1)")
    p.add_argument("--part", default="class", help=f"part(s) joined by '+': {', '.join(PARTS)}")
    p.add_argument("--kind", choices=("project", "subtract"), default="project")
    p.add_argument("--top-k", type=int, default=None)
    p.add_argument("--C", type=int, required=True)
    p.add_argument("--log", action="store_true")
    _common(p)
    p.set_defaults(func=cmd_attribute)

    p = sub.add_parser("ccm-verify", help="closed-form vs dense FIM spectrum")
    p.add_argument("--D", type=int, default=5)
    p.add_argument("--C", type=int, default=3)
    p.add_argument("--alpha", type=float, default=0.3)
    p.add_argument("--s", type=float, default=4.0)
    p.add_argument("--grid", action="store_true", help="sweep the built-in parameter grid")
    p.add_argument("--mc", type=int, default=0, help="Monte-Carlo draws per class (0 = skip)")
    _common(p)
    p.set_defaults(func=cmd_ccm_verify)

    p = sub.add_parser("kfac-compare", help="per-layer G vs KFAC/CFAC spectra")
    p.add_argument("--mlp", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--top-k", type=int, default=32)
    _common(p)
    p.set_defaults(func=cmd_kfac_compare)

    p = sub.add_parser("train", help="train an MLP and record separation metrics")
    p.add_argument("--data")
    p.add_argument("--ccm", help="synthetic data, e.g. D=16,C=4,N=40,t=3")
    p.add_argument("--widths", default="32,32")
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--lr", type=float, default=0.02)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--weight-decay", type=float, default=5e-4)
    p.add_argument("--batch", type=int, default=16)
    _common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("decompose", help="class/cross-class second-moment decomposition")
    _sources(p)
    p.add_argument("--blocks")
    p.add_argument("--weights")
    p.add_argument("--top-k", type=int, default=10)
    _common(p)
    p.set_defaults(func=cmd_decompose)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if getattr(args, "threads", None) is not None and args.threads < 1:
        parser.error("--threads must be positive")
    try:
        return args.func(args)
    except (DegenerateSpectrumError, ZeroBlockWeightError, ArithmeticError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ConfigError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
