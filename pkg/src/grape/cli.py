"""``grape`` command line: property checks, benchmarks, spectra, attention demo.

Exit codes: 0 success, 1 a property or contract failed, 2 usage error.
"""
from __future__ import annotations

import argparse
import contextlib
import csv
import io
import json
import os
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import __version__, _backend, checks, tensor_io
from .additive import UnipotentLift
from .attention import AttentionConfig, HeadEncoder, StreamingCache, attention_batch, step_streaming
from .multiplicative import MultiSubspaceMap, ThinCompression, noncommuting_spectrum
from .path_integral import ProbeStore, bias_triangle
from .rank2 import PlaneGenerator
from .spectral import PathFactorSeq, path_product_report, rank2_spectrum, unipotent_report

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2
ENCODER_NAMES = ("none", "rope", "alibi", "gated", "shift", "fox", "path", "joint")

EPILOG = """\
CSV columns
  check:     name,passed,residual,tolerance,seconds,detail
  bench:     d,method,ns_per_op,speedup,iqr_ns,tokens
  spectrum:  operator_kind,quantity,index,real,imag
  attn-demo: t,head,j,logit      (--dump-bias adds t,j,bias for path heads)
JSON output always carries "schema": 1.
Environment: GRAPE_THREADS caps BLAS and per-head threads;
GRAPE_PURE_PYTHON selects the numpy kernels.
"""


class UsageError(Exception):
    pass


@dataclass
class RunConfig:
    """Everything a run depends on; the seed fixes every random input."""

    subcommand: str
    seed: int = 0
    d: int = 32
    H: int = 4
    L: int = 16
    encoder: object = "rope"
    out: Optional[str] = None
    format: str = "json"
    filter: Optional[str] = None
    options: dict = field(default_factory=dict)

    @classmethod
    def from_args(cls, args: argparse.Namespace) -> "RunConfig":
        doc = {}
        if getattr(args, "config", None):
            text = args.config
            try:
                doc = json.loads(Path(text).read_text()) if not text.lstrip().startswith("{") else json.loads(text)
            except (OSError, json.JSONDecodeError) as exc:
                raise UsageError(f"cannot read --config: {exc}") from exc
            if not isinstance(doc, dict):
                raise UsageError("--config must hold a JSON object")
        cfg = cls(args.command)
        for key in ("seed", "d", "H", "L", "encoder", "format", "filter"):
            if key in doc:
                setattr(cfg, key, doc[key])
        cfg.options = {k: v for k, v in doc.items() if k not in asdict(cfg)}
        for key in ("seed", "d", "H", "L", "encoder", "out", "format", "filter"):
            val = getattr(args, key, None)
            if val is not None:
                setattr(cfg, key, val)
        cfg.seed = int(cfg.seed) & (2 ** 64 - 1)
        cfg.d, cfg.H, cfg.L = int(cfg.d), int(cfg.H), int(cfg.L)
        if cfg.format not in ("json", "csv"):
            raise UsageError("--format must be json or csv")
        return cfg


def _emit(cfg: RunConfig, text: str) -> None:
    if cfg.out:
        Path(cfg.out).write_text(text)
    else:
        sys.stdout.write(text)


def _dump_json(doc) -> str:
    return json.dumps(doc, indent=2, sort_keys=True, allow_nan=True) + "\n"


def _csv(header: Sequence[str], rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


@contextlib.contextmanager
def _thread_cap():
    raw = os.environ.get("GRAPE_THREADS")
    if not raw:
        yield 1
        return
    try:
        n = max(1, int(raw))
    except ValueError as exc:
        raise UsageError(f"GRAPE_THREADS must be an integer, got {raw!r}") from exc
    from threadpoolctl import threadpool_limits
    with threadpool_limits(limits=n):
        yield n


# ---------------------------------------------------------------- encoders

def head_encoder(spec, d: int, h: int, H: int, rng: np.random.Generator) -> HeadEncoder:
    """Build one head's encoder from a short name or a JSON object."""
    if isinstance(spec, dict):
        kind = spec.get("kind", "none")
        ms = MultiSubspaceMap.from_json(spec["ms"]) if "ms" in spec else None
        lift = UnipotentLift.from_json(spec["lift"]) if "lift" in spec else None
        try:
            return HeadEncoder(kind, ms=ms, lift=lift, alpha=float(spec.get("alpha", 1.0)))
        except ValueError as exc:
            raise UsageError(f"bad encoder spec: {exc}") from exc
    if spec not in ENCODER_NAMES:
        raise UsageError(f"unknown encoder {spec!r}; choose from {', '.join(ENCODER_NAMES)}")
    scale = 1.0 / np.sqrt(d)
    if spec == "rope":
        return HeadEncoder("multiplicative", ms=MultiSubspaceMap.rope(d, head_id=h))
    if spec == "alibi":
        return HeadEncoder("additive", lift=UnipotentLift("alibi", d, beta=2.0 ** (-8.0 * (h + 1) / H)))
    if spec in ("gated", "joint"):
        lift = UnipotentLift("gated", d, omega=0.25, v=rng.normal(size=d) * scale, u=rng.normal(size=d) * scale)
        if spec == "gated":
            return HeadEncoder("additive", lift=lift)
        return HeadEncoder("joint", ms=MultiSubspaceMap.rope(d, head_id=h), lift=lift)
    if spec == "shift":
        return HeadEncoder("additive", lift=UnipotentLift("shift_vector", d, omega=0.25,
                                                          u_shift=rng.normal(size=d) * scale))
    if spec == "fox":
        return HeadEncoder("fox")
    if spec == "path":
        return HeadEncoder("path", alpha=1.0)
    return HeadEncoder("none")


def build_config(cfg: RunConfig, rng: np.random.Generator) -> AttentionConfig:
    spec = cfg.encoder
    if isinstance(spec, str) and "," in spec:
        spec = spec.split(",")
    specs = spec if isinstance(spec, list) else [spec] * cfg.H
    if len(specs) != cfg.H:
        raise UsageError(f"need {cfg.H} encoder specs, got {len(specs)}")
    encoders = [head_encoder(s, cfg.d, h, cfg.H, rng) for h, s in enumerate(specs)]
    try:
        return AttentionConfig(cfg.H, cfg.d, L_max=max(cfg.L, 1), encoders=encoders,
                               qk_norm=bool(cfg.options.get("qk_norm", False)))
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


# ---------------------------------------------------------------- commands

def cmd_check(cfg: RunConfig, fault: Optional[str] = None, scale: float = 1.0) -> int:
    selected = checks.select(cfg.filter)
    if not selected:
        raise UsageError(f"--filter {cfg.filter!r} matches no property; known: {', '.join(checks.names())}")
    with checks.inject_fault(fault):
        results = checks.run(cfg.seed, cfg.filter, scale=scale)
    failed = [r for r in results if not r.passed]
    if cfg.out or cfg.format == "csv":
        if cfg.format == "csv":
            text = _csv(["name", "passed", "residual", "tolerance", "seconds", "detail"],
                        [[r.name, int(r.passed), repr(r.residual), r.tolerance, f"{r.seconds:.4f}", r.detail]
                         for r in results])
        else:
            text = _dump_json({"schema": 1, "seed": cfg.seed, "passed": not failed,
                               "properties": [r.to_json() for r in results]})
        if cfg.out:
            Path(cfg.out).write_text(text)
            for r in results:
                print(r.line())
        else:
            sys.stdout.write(text)
    else:
        for r in results:
            print(r.line())
    passed, total = checks.summarize(results)
    print(f"{passed}/{total} properties passed" + (f"; failing: {', '.join(r.name for r in failed)}" if failed else ""),
          file=sys.stderr)
    return EXIT_FAIL if failed else EXIT_OK


def cmd_bench(cfg: RunConfig, dims: Sequence[int], iterations: int, warmup: int, tokens: int) -> int:
    from .bench import run_bench
    if iterations < 30 or warmup < 5:
        raise UsageError("timing needs at least 30 iterations after 5 warmups")
    rep = run_bench(dims, iterations=iterations, warmup=warmup, seed=cfg.seed, tokens=tokens)
    _emit(cfg, rep.to_csv() if cfg.format == "csv" else _dump_json(rep.to_json()))
    ok = True
    for key, (passed, value) in rep.contract().items():
        ok &= passed
        print(f"{'PASS' if passed else 'FAIL'}  bench-{key} = {value:.3f}", file=sys.stderr)
    print(f"bench total {rep.seconds:.1f} s", file=sys.stderr)
    return EXIT_OK if ok else EXIT_FAIL


def cmd_spectrum(cfg: RunConfig, kind: str, s: float, n: float) -> int:
    rng = np.random.default_rng(cfg.seed)
    d = cfg.d
    if kind == "rank2":
        a, b = rng.normal(size=(2, d))
        rep = rank2_spectrum(PlaneGenerator(a, b, 1.0), n)
    elif kind == "unipotent":
        rep = unipotent_report(UnipotentLift("alibi", d, beta=1.0), s)
    elif kind == "path":
        T = max(1, cfg.L)
        w = rng.normal(size=(T, d))
        w /= np.linalg.norm(w, axis=1, keepdims=True)
        rep = path_product_report(PathFactorSeq(rng.uniform(0.0, 2.0, size=T), w))
    else:
        r = max(2, min(d, 2 * (d // 4)))
        E = np.linalg.qr(rng.normal(size=(d, r)))[0]
        M = rng.normal(size=(r, r))
        tc = ThinCompression(E, M - M.T)
        eig = noncommuting_spectrum(tc, n)
        from .spectral import SpectrumReport
        rep = SpectrumReport("thin_compression", eig, np.ones(d), 1.0, {"r": r, "n": n})
    _emit(cfg, rep.to_csv() if cfg.format == "csv" else _dump_json(rep.to_json()))
    if kind == "unipotent":
        print(f"sigma+ * sigma- = {rep.notes['sigma_product']:.15f}", file=sys.stderr)
    return EXIT_OK


def _demo_inputs(cfg: RunConfig, rng, inputs: Optional[str]):
    L, H, d = cfg.L, cfg.H, cfg.d
    names = ("q", "k", "v", "forget", "probes")
    if inputs:
        root = Path(inputs)
        try:
            arrays = {n: tensor_io.load(root / f"{n}.grap") for n in names if (root / f"{n}.grap").exists()}
        except (OSError, ValueError) as exc:
            raise UsageError(f"cannot read inputs: {exc}") from exc
        missing = [n for n in ("q", "k", "v") if n not in arrays]
        if missing:
            raise UsageError(f"inputs directory lacks {', '.join(m + '.grap' for m in missing)}")
        L = arrays["q"].shape[0]
        arrays.setdefault("forget", rng.uniform(0.5, 1.0, size=(L, H)))
        arrays.setdefault("probes", rng.normal(size=(L, H, d)))
        return L, [np.asarray(arrays[n], dtype=np.float64) for n in names]
    Q, K, V = rng.normal(size=(3, L, H, d))
    return L, [Q, K, V, rng.uniform(0.5, 1.0, size=(L, H)), rng.normal(size=(L, H, d))]


def cmd_attn_demo(cfg: RunConfig, inputs: Optional[str], save_inputs: Optional[str],
                  dump_bias: Optional[str], workers: int) -> int:
    rng = np.random.default_rng(cfg.seed)
    L, (Q, K, V, F, P) = _demo_inputs(cfg, rng, inputs)
    cfg.L = L
    acfg = build_config(cfg, rng)
    try:
        logits, Y = attention_batch(acfg, Q, K, V, forget=F, probes=P, max_workers=workers)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    if save_inputs:
        root = Path(save_inputs)
        root.mkdir(parents=True, exist_ok=True)
        for name, arr in zip(("q", "k", "v", "forget", "probes"), (Q, K, V, F, P)):
            tensor_io.save(root / f"{name}.grap", arr, {"seed": cfg.seed})
    cache = StreamingCache(acfg)
    worst_row = worst_y = 0.0
    for t in range(L):
        row, y = step_streaming(cache, acfg, Q[t], K[t], V[t], t, F[t], P[t])
        worst_row = max(worst_row, float(np.max(np.abs(row - logits[t, : t + 1]))))
        worst_y = max(worst_y, float(np.max(np.abs(y - Y[t]))))
    ok = worst_row <= 1e-12 and worst_y <= 1e-12
    print(f"stream==batch: {'PASS' if ok else 'FAIL'} (max row residual {worst_row:.3e}, output {worst_y:.3e})")
    causal = np.tril(np.ones((L, L), dtype=bool))
    summary = []
    for h in range(acfg.H):
        vals = logits[:, :, h][causal]
        summary.append({"head": h, "encoder": acfg.encoders[h].kind, "min": float(vals.min()),
                        "max": float(vals.max()), "mean": float(vals.mean())})
    if cfg.format == "csv":
        rows = [[t, h, j, repr(float(logits[t, j, h]))] for h in range(acfg.H) for t in range(L) for j in range(t + 1)]
        _emit(cfg, _csv(["t", "head", "j", "logit"], rows))
    else:
        _emit(cfg, _dump_json({"schema": 1, "seed": cfg.seed, "L": L, "H": acfg.H, "d": acfg.d,
                               "stream_equals_batch": ok, "max_row_residual": worst_row, "heads": summary}))
    if dump_bias:
        rows = []
        for h, enc in enumerate(acfg.encoders):
            if enc.kind != "path":
                continue
            store = ProbeStore(acfg.d, enc.alpha, enc.link, capacity=L)
            store.extend(P[:, h])
            rows.extend([h, t, j, repr(b)] for t, j, b in bias_triangle(store))
        Path(dump_bias).write_text(_csv(["head", "t", "j", "bias"], rows))
    return EXIT_OK if ok else EXIT_FAIL


# ---------------------------------------------------------------- parser

def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", metavar="PATH", help="JSON run config (path or inline object)")
    p.add_argument("--seed", type=int, metavar="N", help="64-bit seed (default 0)")
    p.add_argument("--out", metavar="PATH", help="write the report here instead of stdout")
    p.add_argument("--format", choices=("json", "csv"), help="report format (default json)")


def _dims(text: str) -> list[int]:
    try:
        dims = [int(x) for x in text.split(",") if x]
    except ValueError as exc:
        raise argparse.ArgumentTypeError("dims must be comma-separated integers") from exc
    if not dims or min(dims) < 2:
        raise argparse.ArgumentTypeError("dims must be integers >= 2")
    return dims


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="grape", description=__doc__.splitlines()[0],
                                     epilog=EPILOG, formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--version", action="version", version=f"grape {__version__} ({_backend.name} kernels)")
    sub = parser.add_subparsers(dest="command", metavar="{check,bench,spectrum,attn-demo}")
    sub.required = True

    p = sub.add_parser("check", help="run the property suite", epilog=EPILOG,
                       formatter_class=argparse.RawDescriptionHelpFormatter)
    _common(p)
    p.add_argument("--filter", metavar="GLOB", help="glob (relative-law*) or substring of property names")
    p.add_argument("--scale", type=float, default=1.0, help="multiply case counts")
    p.add_argument("--list", action="store_true", help="list property names and exit")
    p.add_argument("--inject-fault", choices=("f2",), help=argparse.SUPPRESS)

    p = sub.add_parser("bench", help="time O(d) kernels against dense application", epilog=EPILOG,
                       formatter_class=argparse.RawDescriptionHelpFormatter)
    _common(p)
    p.add_argument("--dims", type=_dims, default=[64, 128, 256, 512, 1024], metavar="D,D,...")
    p.add_argument("--iterations", type=int, default=30)
    p.add_argument("--warmup", type=int, default=5)
    p.add_argument("--tokens", type=int, default=256, help="tokens per timed batch")

    p = sub.add_parser("spectrum", help="spectral report for one operator", epilog=EPILOG,
                       formatter_class=argparse.RawDescriptionHelpFormatter)
    _common(p)
    p.add_argument("kind", choices=("rank2", "unipotent", "path", "thin"))
    p.add_argument("-d", type=int, dest="d", help="dimension (default 32)")
    p.add_argument("-L", type=int, dest="L", help="factor count for 'path'")
    p.add_argument("--s", type=float, default=1.0, help="unipotent parameter s")
    p.add_argument("--n", type=float, default=1.0, help="position n")

    p = sub.add_parser("attn-demo", help="stream a synthetic sequence and compare with the batch pass",
                       epilog=EPILOG, formatter_class=argparse.RawDescriptionHelpFormatter)
    _common(p)
    p.add_argument("--encoder", help=f"one of {', '.join(ENCODER_NAMES)}, or a comma list per head")
    p.add_argument("-d", type=int, dest="d")
    p.add_argument("-H", type=int, dest="H")
    p.add_argument("-L", type=int, dest="L")
    p.add_argument("--inputs", metavar="DIR", help="read q/k/v[/forget/probes].grap from DIR")
    p.add_argument("--save-inputs", metavar="DIR", help="write the inputs used as .grap blobs")
    p.add_argument("--dump-bias", metavar="PATH", help="CSV of (head, t, j, b) for path heads")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = RunConfig.from_args(args)
        with _thread_cap() as threads:
            if args.command == "check":
                if args.list:
                    print("\n".join(checks.names()))
                    return EXIT_OK
                return cmd_check(cfg, args.inject_fault, args.scale)
            if args.command == "bench":
                return cmd_bench(cfg, args.dims, args.iterations, args.warmup, args.tokens)
            if args.command == "spectrum":
                return cmd_spectrum(cfg, args.kind, args.s, args.n)
            return cmd_attn_demo(cfg, args.inputs, args.save_inputs, args.dump_bias, threads)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"grape: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
