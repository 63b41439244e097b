"""Command-line entry point: ``phisparse <command> [options]``.

Exit codes: 0 success, 1 verification failure, 2 usage or format error.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import os
import sys
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import __version__
from .arch import ArchConfig, ConfigError, load_config
from .binmat import (
    BitMatrix,
    FormatError,
    TileSpec,
    load_bitmatrix,
    load_ternary,
    load_weights,
    store_bitmatrix,
    store_ternary,
    store_weights,
)
from .calibration import CalibrationConfig, calibrate, load_patterns, store_patterns
from .compute import build_pwp_table, dense_matmul, phi_matmul
from .decompose import (
    CorruptionError,
    decompose,
    load_index,
    metrics,
    paft_regularizer,
    reconstruct,
    store_index,
)
from .simulator import SCHEMA, plateau_start, sim_layer, sweep

log = logging.getLogger("phisparse")

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


@dataclass
class RunManifest:
    command: str
    inputs: dict = field(default_factory=dict)
    seed: int | None = None
    config: dict = field(default_factory=dict)
    version: str = __version__
    timestamp: str = ""

    def __post_init__(self):
        if not self.timestamp:
            # SOURCE_DATE_EPOCH pins the stamp for reproducible outputs
            epoch = os.environ.get("SOURCE_DATE_EPOCH")
            t = time.gmtime(int(epoch)) if epoch else time.gmtime()
            self.timestamp = time.strftime("%Y-%m-%dT%H:%M:%SZ", t)

    def add_input(self, name: str, path) -> None:
        self.inputs[name] = {"path": str(path), "sha256": file_hash(path)}

    def to_dict(self) -> dict:
        return asdict(self)


def file_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _write_sidecar(out: Path, manifest: RunManifest) -> None:
    out.with_name(out.name + ".manifest.json").write_text(
        json.dumps(manifest.to_dict(), indent=2, sort_keys=True) + "\n")


def _emit(text: str, out: str | None) -> None:
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


def _load_arch(args) -> ArchConfig:
    cfg = load_config(args.config) if args.config else ArchConfig()
    overrides = {}
    if getattr(args, "k", None):
        overrides["k"] = args.k
    if getattr(args, "q", None):
        overrides["q"] = args.q
    if getattr(args, "no_prefetch", False):
        overrides["prefetch"] = False
    return replace(cfg, **overrides) if overrides else cfg


def _load_weights_any(path):
    """PHIW integer weights, or a float .npy array for the tolerance mode."""
    if str(path).endswith(".npy"):
        return np.load(path)
    return load_weights(path)


def _csv(rows: list[dict]) -> str:
    if not rows:
        return ""
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    return buf.getvalue()


# --- commands ----------------------------------------------------------------

def cmd_generate(args) -> int:
    rng = np.random.default_rng(args.seed)
    out = Path(args.out)
    manifest = RunManifest("generate", seed=args.seed,
                           config={"kind": args.kind, "rows": args.rows, "cols": args.cols,
                                   "density": args.density, "low": args.low, "high": args.high})
    if args.kind == "acts":
        if not 0.0 <= args.density <= 1.0:
            raise UsageError("--density must be in [0, 1]")
        store_bitmatrix(BitMatrix.random(args.rows, args.cols, args.density, rng), out)
    else:
        store_weights(rng.integers(args.low, args.high, size=(args.rows, args.cols), dtype=np.int32),
                      out)
    _write_sidecar(out, manifest)
    return EXIT_OK


def cmd_calibrate(args) -> int:
    acts = load_bitmatrix(args.acts)
    cfg = CalibrationConfig(q=args.q or 128, seed=args.seed, sample_fraction=args.sample_fraction,
                            max_iters=args.max_iters, init=args.init)
    spec = TileSpec(args.k or 16)
    sets = calibrate(acts, spec, cfg)
    out = Path(args.out)
    store_patterns(sets, out)
    manifest = RunManifest("calibrate", seed=args.seed, config=asdict(cfg) | {"k": spec.k})
    manifest.add_input("acts", args.acts)
    _write_sidecar(out, manifest)
    for j, s in enumerate(sets):
        flag = "  (short: fewer distinct rows than q)" if s.short else ""
        print(f"partition {j:3d}: {s.q:4d} patterns, cost {s.cost}{flag}")
    if any(s.short for s in sets):
        print("warning: some partitions have fewer than q patterns", file=sys.stderr)
    return EXIT_OK


def cmd_decompose(args) -> int:
    acts = load_bitmatrix(args.acts)
    sets = load_patterns(args.patterns)
    spec = TileSpec(sets[0].k)
    l1, l2 = decompose(acts, sets, spec)
    prefix = Path(args.out)
    store_index(l1, max(s.q for s in sets), prefix.with_suffix(".phii"))
    store_ternary(l2, prefix.with_suffix(".phit"))
    manifest = RunManifest("decompose", config={"k": spec.k})
    manifest.add_input("acts", args.acts)
    manifest.add_input("patterns", args.patterns)
    report = {"manifest": manifest.to_dict(),
              "metrics": metrics(acts, l1, sets, l2, tile_rows=spec.m).as_dict()}
    print(json.dumps(report, indent=2, sort_keys=True))
    return EXIT_OK


def cmd_verify(args) -> int:
    acts = load_bitmatrix(args.acts)
    sets = load_patterns(args.patterns)
    spec = TileSpec(sets[0].k)
    if bool(args.index) != bool(args.l2):
        raise UsageError("--index and --l2 must be given together")
    if args.index:
        l1, _ = load_index(args.index)
        l2 = load_ternary(args.l2)
    else:
        l1, l2 = decompose(acts, sets, spec)
    if l2.shape != acts.shape:
        raise UsageError(f"level 2 shape {l2.shape} does not match activations {acts.shape}")
    result = {"lossless": False, "matmul": None}
    try:
        back = reconstruct(l1, sets, l2)
    except CorruptionError as exc:
        result["error"] = str(exc)
        result["first_mismatch"] = list(exc.coords)
    else:
        if back == acts:
            result["lossless"] = True
        else:
            diff = np.argwhere(back.to_dense() != acts.to_dense())[0]
            result["first_mismatch"] = [int(x) for x in diff]
    if args.weights and result["lossless"]:
        w = _load_weights_any(args.weights)
        if w.shape[0] != acts.cols:
            raise UsageError(f"weights have K={w.shape[0]}, activations K={acts.cols}")
        got = phi_matmul(l1, l2, build_pwp_table(sets, w), w, spec)
        ref = dense_matmul(acts, w)
        if np.issubdtype(np.asarray(w).dtype, np.integer):
            ok = np.array_equal(got, ref)
        else:
            ok = np.allclose(got, ref, rtol=1e-4, atol=1e-4 * max(1.0, float(np.abs(ref).max())))
        result["matmul"] = bool(ok)
        if not ok:
            bad = np.argwhere(~np.isclose(got, ref, rtol=1e-4))[0]
            result["first_mismatch"] = [int(x) for x in bad]
    passed = result["lossless"] and result["matmul"] is not False
    result["status"] = "pass" if passed else "fail"
    print(json.dumps(result, sort_keys=True))
    return EXIT_OK if passed else EXIT_FAIL


def cmd_simulate(args) -> int:
    cfg = _load_arch(args)
    if len(args.acts) != len(args.patterns):
        raise UsageError("give one --patterns file per --acts file")
    manifest = RunManifest("simulate", seed=args.seed, config=cfg.to_dict())
    layers, reports, rows = [], [], []
    n_list = _int_list(args.paft_r) if args.paft_r else None
    if n_list is not None and len(n_list) != len(args.acts):
        raise UsageError("--paft-r needs one N per layer")
    for i, (acts_path, pat_path) in enumerate(zip(args.acts, args.patterns)):
        acts = load_bitmatrix(acts_path)
        sets = load_patterns(pat_path)
        if sets[0].k != cfg.k:
            cfg = replace(cfg, k=sets[0].k)
        manifest.add_input(f"acts[{i}]", acts_path)
        manifest.add_input(f"patterns[{i}]", pat_path)
        if args.weights:
            w = load_weights(args.weights[i] if i < len(args.weights) else args.weights[-1])
            manifest.add_input(f"weights[{i}]", args.weights[i] if i < len(args.weights)
                               else args.weights[-1])
        else:
            w = args.n
        report = sim_layer(acts, w, sets, cfg)
        reports.append(report)
        layers.append((acts, sets))
        rows.append(_report_row(i, report))
    paft = None
    if n_list is not None:
        paft = paft_regularizer([(a, n) for (a, _), n in zip(layers, n_list)],
                                [s for _, s in layers], TileSpec(cfg.k, cfg.m, cfg.n))
        print(f"PAFT R = {paft}", file=sys.stderr)
    if args.format == "csv":
        _emit(_csv(rows), args.out)
    else:
        doc = {"schema": SCHEMA, "manifest": manifest.to_dict(),
               "layers": [r.to_dict() for r in reports], "paft_r": paft}
        _emit(json.dumps(doc, indent=2, sort_keys=True) + "\n", args.out)
    return EXIT_OK


def _report_row(layer: int, r) -> dict:
    return {
        "layer": layer,
        "M": r.shape[0], "K": r.shape[1], "N": r.shape[2],
        "bit_density": r.metrics["bit_density"],
        "l2_density": r.metrics["l2_density"],
        "speedup_over_bit": r.metrics["speedup_over_bit"],
        "speedup_over_dense": r.metrics["speedup_over_dense"],
        "cycles_total": r.cycles["total"],
        "cycles_dense": r.baselines["dense"]["cycles"],
        "cycles_bit_sparse": r.baselines["bit_sparse"]["cycles"],
        "dram_bytes": r.dram_bytes["total"],
        "pwp_bytes": r.dram_bytes["pwp"],
        "energy_pj": r.energy_pj["total"],
    }


def _int_list(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise UsageError(f"expected comma-separated integers, got {text!r}") from None


def _parse_grid(specs: list[str]) -> dict:
    grid = {"k": [], "q": [], "buffer": []}
    for spec in specs or []:
        axis, _, values = spec.partition("=")
        axis = axis.strip()
        if axis not in grid or not values:
            raise UsageError(f"bad grid spec {spec!r}; use k=..., q=... or buffer=...")
        try:
            grid[axis] += [float(v) if axis == "buffer" else int(v) for v in values.split(",")]
        except ValueError:
            raise UsageError(f"bad values in grid spec {spec!r}") from None
    if not any(grid.values()):
        raise UsageError("empty sweep grid")
    return grid


def cmd_sweep(args) -> int:
    grid = _parse_grid(args.grid)
    cfg = _load_arch(args)
    manifest = RunManifest("sweep", seed=args.seed, config=cfg.to_dict() | {"grid": grid})
    if args.acts:
        calib = load_bitmatrix(args.acts)
        manifest.add_input("acts", args.acts)
        if args.eval_acts:
            evaluate = load_bitmatrix(args.eval_acts)
            manifest.add_input("eval_acts", args.eval_acts)
        else:
            evaluate = calib
    else:
        if args.density is None:
            raise UsageError("give --acts or a generator --density")
        calib = BitMatrix.random(args.rows, args.cols, args.density, np.random.default_rng(args.seed))
        evaluate = BitMatrix.random(args.rows, args.cols, args.density,
                                    np.random.default_rng(args.seed + 1))
    cal = CalibrationConfig(q=cfg.q, seed=args.seed, sample_fraction=args.sample_fraction)
    results = sweep(calib, evaluate, args.n, cfg, ks=grid["k"], qs=grid["q"],
                    buffer_scales=grid["buffer"], cal=cal)
    rows = [r.row() for r in results]
    summary = {}
    k_rows = [r for r in rows if r["axis"] == "k"]
    if k_rows:
        summary["best_k"] = min(k_rows, key=lambda r: r["l2_density"])["value"]
    buf_rows = [r for r in rows if r["axis"] == "buffer"]
    if buf_rows:
        idx = plateau_start([r["dram_bytes"] for r in buf_rows])
        summary["buffer_plateau_scale"] = None if idx is None else buf_rows[idx]["value"]
    if args.format == "csv":
        _emit(_csv(rows), args.out)
        for key, value in summary.items():
            print(f"{key} = {value}", file=sys.stderr)
    else:
        doc = {"schema": SCHEMA, "manifest": manifest.to_dict(), "rows": rows, "summary": summary}
        _emit(json.dumps(doc, indent=2, sort_keys=True) + "\n", args.out)
    return EXIT_OK


# --- argument parsing --------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="phisparse", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("generate", help="seeded random activations or weights")
    g.add_argument("--kind", choices=("acts", "weights"), default="acts")
    g.add_argument("--rows", type=int, required=True)
    g.add_argument("--cols", type=int, required=True)
    g.add_argument("--density", type=float, default=0.1)
    g.add_argument("--low", type=int, default=-128, help="weights: inclusive lower bound")
    g.add_argument("--high", type=int, default=128, help="weights: exclusive upper bound")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_generate)

    c = sub.add_parser("calibrate", help="learn per-partition patterns (PHIP)")
    c.add_argument("--acts", required=True)
    c.add_argument("--k", type=int, default=16)
    c.add_argument("--q", type=int, default=128)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--sample-fraction", type=float, default=0.1)
    c.add_argument("--max-iters", type=int, default=25)
    c.add_argument("--init", choices=("greedy", "random", "kmeans++"), default="greedy")
    c.add_argument("--out", required=True)
    c.set_defaults(func=cmd_calibrate)

    d = sub.add_parser("decompose", help="write level-1 IDs (.phii) and level-2 (.phit)")
    d.add_argument("--acts", required=True)
    d.add_argument("--patterns", required=True)
    d.add_argument("--out", required=True, help="output prefix")
    d.set_defaults(func=cmd_decompose)

    v = sub.add_parser("verify", help="check losslessness and matmul equality")
    v.add_argument("--acts", required=True)
    v.add_argument("--patterns", required=True)
    v.add_argument("--weights", help="PHIW file, or .npy for float weights")
    v.add_argument("--index", help="stored level-1 file to check instead of recomputing")
    v.add_argument("--l2", help="stored level-2 file to check instead of recomputing")
    v.set_defaults(func=cmd_verify)

    s = sub.add_parser("simulate", help="run the accelerator model on one or more layers")
    s.add_argument("--acts", action="append", required=True)
    s.add_argument("--patterns", action="append", required=True)
    s.add_argument("--weights", action="append")
    s.add_argument("--n", type=int, default=32, help="output width when no weights are given")
    s.add_argument("--config")
    s.add_argument("--k", type=int)
    s.add_argument("--q", type=int)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--no-prefetch", action="store_true")
    s.add_argument("--paft-r", metavar="N1,N2,...", help="print the PAFT regularizer")
    s.add_argument("--format", choices=("json", "csv"), default="json")
    s.add_argument("--out")
    s.set_defaults(func=cmd_simulate)

    w = sub.add_parser("sweep", help="design-space sweep over k, q and buffer scale")
    w.add_argument("--grid", action="append", metavar="AXIS=V1,V2,...")
    w.add_argument("--acts")
    w.add_argument("--eval-acts")
    w.add_argument("--density", type=float)
    w.add_argument("--rows", type=int, default=2048)
    w.add_argument("--cols", type=int, default=256)
    w.add_argument("--n", type=int, default=64)
    w.add_argument("--config")
    w.add_argument("--k", type=int)
    w.add_argument("--q", type=int)
    w.add_argument("--seed", type=int, default=0)
    w.add_argument("--sample-fraction", type=float, default=1.0)
    w.add_argument("--no-prefetch", action="store_true")
    w.add_argument("--format", choices=("json", "csv"), default="csv")
    w.add_argument("--out")
    w.set_defaults(func=cmd_sweep)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, FormatError, ConfigError, FileNotFoundError, IsADirectoryError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ValueError as exc:
        # shape mismatches and bad parameters are usage errors too
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
