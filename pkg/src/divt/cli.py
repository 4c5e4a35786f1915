"""Command-line entry point.

Subcommands cover the whole pipeline: ``tokenize`` (cluster + form tokens),
``sweep`` (token-count statistics over thresholds), ``analyze`` (layer-wise
similarity profiles), ``gradcheck`` (analytic vs numeric gradients),
``render`` (cluster-map PPM), and ``bench`` (wall-clock of this artifact).

Machine-readable JSON/CSV files are the primary output; stdout carries a
human summary. Every output gets a sibling ``<out>.manifest.json``
recording the command, inputs, configuration, seed, and tool version.
Outputs are written atomically and are byte-identical across reruns and
thread counts; ``DIVT_THREADS`` caps per-file parallelism.

Exit codes: 0 success, 1 check failure, 2 input/format error,
3 parameter error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from . import __version__
from .clustering import (
    GranularityConfig,
    cluster,
    cluster_export_dict,
    render_cluster_ppm,
)
from .embedding_io import (
    PatchSet,
    atomic_write_bytes,
    load_layerwise,
    load_patch_set,
)
from .errors import FormatError, ParameterError, ShapeError
from .metrics import (
    LLAMA_7B,
    kv_cache_bytes,
    sweep_csv,
    sweep_json_dict,
    theta_sweep,
)
from .oracle import finite_diff_grad, max_relative_error
from .similarity import corpus_similarity_profile
from .token_former import (
    DEFAULT_N_MAX,
    backward,
    form_tokens,
    attention_weights,
    init_params,
    load_params,
    params_to_vector,
    vector_to_params,
)

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_INPUT_ERROR = 2
EXIT_PARAMETER_ERROR = 3


class _Parser(argparse.ArgumentParser):
    # Spec'd exit-code contract: bad flags are parameter errors (3), not
    # argparse's default 2.
    def error(self, message):
        self.exit(EXIT_PARAMETER_ERROR, f"{self.prog}: error: {message}\n")


def _thread_count() -> int:
    env = os.environ.get("DIVT_THREADS")
    if env is None:
        return os.cpu_count() or 1
    try:
        n = int(env)
    except ValueError:
        raise ParameterError(f"DIVT_THREADS must be an integer, got {env!r}")
    if n < 1:
        raise ParameterError(f"DIVT_THREADS must be >= 1, got {n}")
    return n


def _pmap(fn, items):
    items = list(items)
    threads = _thread_count()
    if threads == 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def _collect_inputs(path: str, suffix: str) -> list[str]:
    if os.path.isdir(path):
        names = sorted(n for n in os.listdir(path) if n.endswith(suffix))
        if not names:
            raise FileNotFoundError(f"{path}: no {suffix} files")
        return [os.path.join(path, n) for n in names]
    if not os.path.exists(path):
        raise FileNotFoundError(f"{path}: no such file")
    return [path]


def _write_json(path: str, obj) -> None:
    atomic_write_bytes(path, (json.dumps(obj, indent=2) + "\n").encode("utf-8"))


def _write_text(path: str, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def _write_manifest(anchor: str, command: str, inputs, config: dict, seed, outputs) -> str:
    manifest = {
        "command": command,
        "inputs": [str(p) for p in inputs],
        "config": config,
        "seed": seed,
        "tool_version": __version__,
        "outputs": [str(p) for p in outputs],
    }
    path = anchor.rstrip("/\\") + ".manifest.json"
    _write_json(path, manifest)
    return path


def _check_theta(theta: float) -> float:
    if not -1.0 < theta < 1.0:
        raise ParameterError(f"theta must lie strictly inside (-1, 1), got {theta}")
    return theta


def _parse_theta_list(text: str) -> list[float]:
    try:
        thetas = [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise ParameterError(f"could not parse theta list {text!r}")
    if not thetas:
        raise ParameterError("empty theta list")
    return [_check_theta(t) for t in thetas]


def _matrix_csv(matrix: np.ndarray) -> str:
    lines = [",".join(repr(float(v)) for v in row) for row in np.atleast_2d(matrix)]
    return "\n".join(lines) + "\n"


def _params_for(corpus: list[PatchSet], args):
    if args.params:
        return load_params(args.params)
    d = corpus[0].dim
    n_max = max(DEFAULT_N_MAX, max(ps.n_patches for ps in corpus))
    return init_params(d, d, d, d, n_max=n_max, seed=args.seed)


def cmd_tokenize(args) -> int:
    paths = _collect_inputs(args.input, ".divt")
    theta = _check_theta(args.theta)
    corpus = _pmap(load_patch_set, paths)
    params = _params_for(corpus, args)
    cfg = GranularityConfig(theta)
    os.makedirs(args.out, exist_ok=True)

    def process(ps: PatchSet):
        cl = cluster(ps, cfg)
        tokens = form_tokens(ps, cl, params)
        record = cluster_export_dict(cl, id=ps.id, theta=theta, grid_h=ps.grid_h, grid_w=ps.grid_w)
        record["tokens"] = [[float(v) for v in row] for row in tokens.tokens]
        out_path = os.path.join(args.out, f"{ps.id}.json")
        _write_json(out_path, record)
        written = [out_path]
        if args.attention:
            att_path = os.path.join(args.out, f"{ps.id}.attention.csv")
            _write_text(att_path, _matrix_csv(attention_weights(ps, cl, params)))
            written.append(att_path)
        return ps.id, cl.k_clusters, written

    results = _pmap(process, corpus)
    outputs = [p for _, _, written in results for p in written]
    _write_manifest(
        args.out,
        "tokenize",
        paths,
        {"theta": theta, "params": args.params, "attention": bool(args.attention)},
        args.seed,
        outputs,
    )
    for image_id, k, _ in results:
        print(f"{image_id}: k={k}")
    print(f"tokenized {len(results)} image(s) -> {args.out}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    paths = _collect_inputs(args.input, ".divt")
    thetas = _parse_theta_list(args.thetas)
    corpus = _pmap(load_patch_set, paths)
    report = theta_sweep(corpus, thetas)
    json_path = os.path.splitext(args.csv)[0] + ".json"
    _write_text(args.csv, sweep_csv(report))
    _write_json(json_path, sweep_json_dict(report))
    _write_manifest(
        args.csv, "sweep", paths, {"thetas": [r.theta for r in report.rows]}, None,
        [args.csv, json_path],
    )
    for row in report.rows:
        print(f"theta={row.theta}: mean={row.mean:.2f} std={row.std:.2f} "
              f"min={row.min} max={row.max}")
    return EXIT_OK


def cmd_analyze(args) -> int:
    paths = _collect_inputs(args.input, ".divl")
    corpus = _pmap(load_layerwise, paths)
    profile = corpus_similarity_profile(corpus)
    lines = ["layer,mean_similarity,stddev"]
    for layer, mean, std in profile:
        lines.append(f"{layer},{mean!r},{std!r}")
    _write_text(args.csv, "\n".join(lines) + "\n")
    _write_manifest(args.csv, "analyze", paths, {"n_images": len(corpus)}, None, [args.csv])
    for layer, mean, std in profile:
        print(f"layer {layer}: mean similarity {mean:.4f} (std {std:.4f})")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    theta = _check_theta(args.theta)
    if args.eps <= 0:
        raise ParameterError("eps must be positive")
    rng = np.random.default_rng(args.seed)
    rows = rng.normal(size=(args.n, args.d))
    rows /= np.linalg.norm(rows, axis=1, keepdims=True)
    ps = PatchSet(rows, 1, args.n, id="gradcheck")
    cl = cluster(ps, GranularityConfig(theta))
    params = init_params(args.d, args.d_att, args.d_att, args.d_out, n_max=args.n,
                         seed=args.seed)

    def loss_of(vec: np.ndarray) -> float:
        tokens = form_tokens(ps, cl, vector_to_params(vec, params)).tokens
        return 0.5 * float(np.sum(tokens * tokens))

    tokens = form_tokens(ps, cl, params)
    analytic = params_to_vector(backward(ps, cl, params, tokens.tokens))
    numeric = finite_diff_grad(loss_of, params_to_vector(params), args.eps)
    err = max_relative_error(analytic, numeric)
    print(f"n={args.n} d={args.d} theta={theta} k={cl.k_clusters}")
    print(f"max relative gradient error: {err:.3e} (tolerance {args.rtol:.1e})")
    if err < args.rtol:
        print("gradcheck: PASS")
        return EXIT_OK
    print("gradcheck: FAIL")
    return EXIT_CHECK_FAILED


def cmd_render(args) -> int:
    with open(args.cluster_json, "rb") as fh:
        try:
            record = json.load(fh)
        except json.JSONDecodeError as exc:
            raise FormatError(f"{args.cluster_json}: invalid JSON ({exc})")
    try:
        grid_h = int(record["grid_h"])
        grid_w = int(record["grid_w"])
        assignment = np.asarray(record["assignment"], dtype=np.int64)
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"{args.cluster_json}: missing or malformed fields ({exc})")
    if assignment.size != grid_h * grid_w:
        raise FormatError(
            f"{args.cluster_json}: {assignment.size} assignments do not fit "
            f"a {grid_h}x{grid_w} grid"
        )
    if args.scale < 1:
        raise ParameterError("scale must be >= 1")
    atomic_write_bytes(args.ppm, render_cluster_ppm(assignment, grid_h, grid_w, args.scale))
    _write_manifest(args.ppm, "render", [args.cluster_json], {"scale": args.scale},
                    None, [args.ppm])
    print(f"rendered {record.get('k', assignment.max() + 1)} clusters -> {args.ppm}")
    return EXIT_OK


def cmd_bench(args) -> int:
    paths = _collect_inputs(args.input, ".divt")
    theta = _check_theta(args.theta)
    corpus = _pmap(load_patch_set, paths)
    params = _params_for(corpus, args)
    cfg = GranularityConfig(theta)
    cluster_ms = []
    token_ms = []
    counts = []
    for _ in range(args.repeats):
        for ps in corpus:
            t0 = time.perf_counter()
            cl = cluster(ps, cfg)
            t1 = time.perf_counter()
            form_tokens(ps, cl, params)
            t2 = time.perf_counter()
            cluster_ms.append((t1 - t0) * 1e3)
            token_ms.append((t2 - t1) * 1e3)
            counts.append(cl.k_clusters)
    mean_k = float(np.mean(counts))
    print(f"images={len(corpus)} repeats={args.repeats} theta={theta}")
    print(f"clustering: {np.mean(cluster_ms):.3f} ms/image")
    print(f"token formation: {np.mean(token_ms):.3f} ms/image")
    print(f"mean tokens/image: {mean_k:.1f}")
    print(f"analytic KV-cache (7B-class decoder): "
          f"{kv_cache_bytes(round(mean_k), LLAMA_7B) / 2**20:.1f} MiB/image")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="divt", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"divt {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("tokenize", help="cluster patch sets and form visual tokens")
    p.add_argument("input", help=".divt file or directory of them")
    p.add_argument("--theta", type=float, default=0.65)
    p.add_argument("--params", default=None, help="DIVP checkpoint (random init otherwise)")
    p.add_argument("--seed", type=int, default=0, help="seed for random parameter init")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--attention", action="store_true", help="also dump attention CSVs")
    p.set_defaults(func=cmd_tokenize)

    p = sub.add_parser("sweep", help="token-count statistics across thresholds")
    p.add_argument("input", help=".divt file or directory of them")
    p.add_argument("--thetas", required=True, help="comma-separated thresholds")
    p.add_argument("--csv", required=True, help="output CSV path (JSON written next to it)")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("analyze", help="layer-wise mean-similarity profile")
    p.add_argument("input", help=".divl file or directory of them")
    p.add_argument("--csv", required=True, help="output CSV path")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("gradcheck", help="analytic vs finite-difference gradients")
    p.add_argument("--n", type=int, default=12)
    p.add_argument("--d", type=int, default=6)
    p.add_argument("--d-att", type=int, default=8)
    p.add_argument("--d-out", type=int, default=5)
    p.add_argument("--theta", type=float, default=0.6)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--eps", type=float, default=1e-5)
    p.add_argument("--rtol", type=float, default=1e-4)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("render", help="render a cluster JSON as a PPM image")
    p.add_argument("cluster_json")
    p.add_argument("--ppm", required=True, help="output PPM path")
    p.add_argument("--scale", type=int, default=16, help="pixels per patch side")
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("bench", help="wall-clock of clustering and token formation")
    p.add_argument("input", help=".divt file or directory of them")
    p.add_argument("--theta", type=float, default=0.65)
    p.add_argument("--params", default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--repeats", type=int, default=3)
    p.set_defaults(func=cmd_bench)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except (FormatError, FileNotFoundError, IsADirectoryError, NotADirectoryError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT_ERROR
    except (ParameterError, ShapeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PARAMETER_ERROR


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
