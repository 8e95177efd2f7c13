"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 bad data or configuration,
3 numerical failure (non-convergence, divergence, merge discrepancy).
"""
from __future__ import annotations

import argparse
import json
import math
import sys
from pathlib import Path

import numpy as np

from . import io, linalg, tasks
from .adapt import METHODS, split_adapter_tensors
from .errors import ConfigError, MergeDiscrepancy, NumericalError, SvfitError
from .model import ToyBlockStack, dense_stack, stack_forward

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
ENERGY_FRACTIONS = (0.01, 0.10, 0.50, 1.00)
MERGE_TOLERANCE = 1e-9
MERGE_PROBES = 16


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _float_list(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def _rank(text: str):
    if text == "full":
        return text
    try:
        return int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"rank must be an integer or 'full', got {text!r}")


def _ensure_free(paths, force: bool) -> None:
    if force:
        return
    for p in paths:
        if Path(p).exists():
            raise ConfigError(f"{p} already exists (use --force to overwrite)")


def _load_matrix(path) -> np.ndarray:
    kind = io.sniff(path)
    if kind == "matrix":
        return io.read_matrix(path)
    if kind == "pgm":
        return io.read_pgm(path).pixels
    raise ConfigError(f"{path} is a checkpoint; svd-analyze needs a matrix or PGM file")


def energy_table(sigma: np.ndarray) -> list[dict]:
    d = sigma.size
    rows = []
    for frac in ENERGY_FRACTIONS:
        r = min(d, max(1, math.ceil(frac * d - 1e-9)))
        nuclear, frob = linalg.energy_ratio(sigma, r)
        rows.append({"fraction": frac, "rank": r, "nuclear": nuclear, "frobenius": frob})
    return rows


def cmd_svd_analyze(args) -> int:
    w = _load_matrix(args.matrix)
    f = linalg.svd(w)
    top = f.sigma[:args.top] if args.top else f.sigma
    report = {
        "shape": list(w.shape),
        "sweeps": f.sweeps,
        "singular_values": [float(s) for s in top],
        "energy": energy_table(f.sigma),
    }
    if args.json:
        print(json.dumps(report, indent=2))
        return EXIT_OK
    print(f"matrix {w.shape[0]}x{w.shape[1]}, {f.sweeps} Jacobi sweeps")
    print(f"top {len(top)} singular values:")
    for i, s in enumerate(top, 1):
        print(f"  {i:5d}  {s:.12g}")
    print("  rank  fraction   nuclear     frobenius")
    for row in report["energy"]:
        print(f"  {row['rank']:5d}  {row['fraction']:7.2%}  {row['nuclear']:.6f}  "
              f"{row['frobenius']:.6f}")
    return EXIT_OK


def cmd_reconstruct(args) -> int:
    img = io.read_pgm(args.image)
    limit = min(img.width, img.height)
    bad = [r for r in args.ranks if not 1 <= r <= limit]
    if bad or not args.ranks:
        raise ConfigError(f"ranks must lie in [1, {limit}], got {args.ranks}")
    out = Path(args.out_dir)
    stem = Path(args.image).stem
    targets = [out / f"{stem}_{args.order}_{r}.pgm" for r in args.ranks]
    _ensure_free(targets + [out / "report.json"], args.force)
    out.mkdir(parents=True, exist_ok=True)
    f = linalg.svd(img.pixels)
    rows = []
    for r, target in zip(args.ranks, targets):
        rec = tasks.reconstruct_image(img, r, args.order, factors=f)
        io.write_pgm(target, rec.image)
        rows.append({"rank": r, "file": target.name,
                     "psnr": rec.psnr if math.isfinite(rec.psnr) else None,
                     "mse": rec.mse, "nuclear_ratio": rec.nuclear_ratio,
                     "frobenius_ratio": rec.frobenius_ratio})
        print(f"{args.order} r={r:4d}  psnr={rec.psnr:8.3f} dB  "
              f"frobenius={rec.frobenius_ratio:.6f}  -> {target}")
    report = {"image": str(args.image), "width": img.width, "height": img.height,
              "order": args.order, "ranks": rows}
    (out / "report.json").write_text(json.dumps(report, indent=2) + "\n")
    return EXIT_OK


def _config_with_overrides(args) -> tasks.RunConfig:
    cfg = tasks.RunConfig.load(args.config)
    changes = {}
    for name, key in (("method", "method"), ("rank", "rank"), ("lr", "lr_base"),
                      ("seed", "seed"), ("out_dir", "out_dir")):
        value = getattr(args, name, None)
        if value is not None:
            changes[key] = value
    return cfg.replace(**changes) if changes else cfg


def cmd_train(args) -> int:
    cfg = _config_with_overrides(args)
    res = tasks.run_training(cfg, overwrite=args.force)
    print(f"final step={res.final.step} train_loss={res.final.train_loss:.6e} "
          f"eval_metric={res.final.eval_metric:.6f} params={res.trainable_params} "
          f"metrics={res.metrics_path} checkpoint={res.checkpoint_path}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = _config_with_overrides(args)
    if args.values:
        values = args.values
    elif args.axis == "lr_multiplier":
        values = cfg.lr_multiplier_sweep
    else:
        raise ConfigError("--values is required for the rank axis")
    if args.axis == "rank":
        if any(v != int(v) for v in values):
            raise ConfigError("rank values must be integers")
        values = [int(v) for v in values]
    rows = tasks.sweep(cfg, args.axis, values, overwrite=args.force, dry_run=args.dry_run)
    print(",".join(tasks.SWEEP_HEADER))
    for row in rows:
        print(",".join("" if row[k] is None else str(row[k]) for k in tasks.SWEEP_HEADER))
    return EXIT_OK


def merge_checkpoint(tensors: dict[str, np.ndarray], seed: int = 0
                     ) -> tuple[dict[str, np.ndarray], float]:
    """Fold every adapter into its dense matrix.

    Returns the dense tensor set (adapter prefixes become plain names, other
    tensors pass through) and the largest absolute forward discrepancy seen
    on seeded probes, per layer and, for block stacks, end to end.
    """
    layers, rest = split_adapter_tensors(tensors)
    if not layers:
        raise ConfigError("checkpoint contains no adapter tensors")
    with np.errstate(all="ignore"):
        dense = {prefix: layer.merge() for prefix, layer in layers.items()}
    rng = np.random.default_rng(seed)
    worst = 0.0

    def gap(a, b):
        with np.errstate(all="ignore"):
            d = float(np.abs(a - b).max())
        # NaN would slip past max(); treat it as unbounded
        return d if math.isfinite(d) else math.inf

    for prefix, layer in layers.items():
        x = rng.standard_normal((layer.d2, MERGE_PROBES))
        with np.errstate(all="ignore"):
            worst = max(worst, gap(layer.forward(x), dense[prefix] @ x))
    if "head" in rest and all(p.startswith("blocks.") for p in layers):
        stack = ToyBlockStack.from_tensors(tensors)
        reference = dense_stack(dense, rest["head"])
        x = rng.standard_normal((MERGE_PROBES, 4, stack.d_model))
        got, _ = stack_forward(stack, x)
        want, _ = stack_forward(reference, x)
        worst = max(worst, gap(got, want))
    dense.update(rest)
    return dense, worst


def cmd_merge(args) -> int:
    _ensure_free([args.out], args.force)
    tensors = io.read_checkpoint(args.checkpoint)
    dense, worst = merge_checkpoint(tensors, args.seed)
    print(f"max abs forward discrepancy over {MERGE_PROBES} probes: {worst:.3e}")
    if worst > MERGE_TOLERANCE:
        raise MergeDiscrepancy(f"discrepancy {worst:.3e} exceeds {MERGE_TOLERANCE:g}")
    io.write_checkpoint(args.out, dense)
    print(f"wrote {len(dense)} dense tensors to {args.out}")
    return EXIT_OK


def cmd_param_count(args) -> int:
    cfg = _config_with_overrides(args)
    counts = tasks.count_adapter_params(cfg)
    total = sum(counts.values())
    if args.json:
        print(json.dumps({"method": cfg.method, "rank": cfg.resolved_rank(),
                          "layers": counts, "total": total}, indent=2))
        return EXIT_OK
    for name, n in counts.items():
        print(f"{name:24s} {n}")
    print(f"total {total} ({total / 1e6:.3f}M)")
    return EXIT_OK


def cmd_gen_pretrained(args) -> int:
    _ensure_free([args.out], args.force)
    n_blocks, d_model = args.dims
    if n_blocks < 1 or d_model < 1:
        raise ConfigError("--dims needs positive N_BLOCKS,D_MODEL")
    weights = tasks.pretrain_stack(args.seed, n_blocks, d_model, classes=args.classes,
                                   steps=args.steps, mlp=args.mlp)
    io.write_checkpoint(args.out, weights)
    print(f"wrote {len(weights)} tensors ({n_blocks} blocks, d_model={d_model}) to {args.out}")
    return EXIT_OK


def _dims(text: str) -> tuple[int, int]:
    values = _int_list(text)
    if len(values) != 2:
        raise argparse.ArgumentTypeError("--dims expects N_BLOCKS,D_MODEL")
    return values[0], values[1]


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="svfit", description="SVFit singular-value adaptation toolkit.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("svd-analyze", help="singular values and energy ratios of a matrix")
    p.add_argument("matrix", help="SVFM matrix file or binary PGM")
    p.add_argument("--top", type=int, default=10, help="how many singular values to list")
    p.add_argument("--json", action="store_true", help="emit machine-readable JSON")
    p.set_defaults(func=cmd_svd_analyze)

    p = sub.add_parser("reconstruct", help="truncated-SVD reconstructions of a PGM image")
    p.add_argument("image")
    p.add_argument("--ranks", type=_int_list, default=[8, 16, 32, 64, 128, 256])
    p.add_argument("--order", choices=("top", "bottom"), default="top")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_reconstruct)

    def run_options(p):
        p.add_argument("--config", required=True, help="RunConfig JSON file")
        p.add_argument("--method", choices=METHODS)
        p.add_argument("--rank", type=_rank)
        p.add_argument("--lr", type=float, help="override lr_base")
        p.add_argument("--seed", type=int)
        p.add_argument("--out-dir")
        p.add_argument("--force", action="store_true")

    p = sub.add_parser("train", help="run one training configuration")
    run_options(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sweep", help="repeat a run along the rank or lr-multiplier axis")
    run_options(p)
    p.add_argument("--axis", choices=tasks.SWEEP_AXES, required=True)
    p.add_argument("--values", type=_float_list)
    p.add_argument("--dry-run", action="store_true", help="parameter counts only")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("merge", help="fold adapters of a checkpoint into dense matrices")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0, help="seed for the probe inputs")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_merge)

    p = sub.add_parser("param-count", help="trainable adapter parameters of a config")
    p.add_argument("--config", required=True)
    p.add_argument("--method", choices=METHODS)
    p.add_argument("--rank", type=_rank)
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_param_count)

    p = sub.add_parser("gen-pretrained", help="pre-train a toy stack and save its weights")
    p.add_argument("--dims", type=_dims, required=True, help="N_BLOCKS,D_MODEL")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--classes", type=int, default=8)
    p.add_argument("--steps", type=int, default=300)
    p.add_argument("--mlp", action="store_true")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_gen_pretrained)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except NumericalError as exc:
        print(f"svfit: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (SvfitError, OSError, ValueError) as exc:
        print(f"svfit: error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
