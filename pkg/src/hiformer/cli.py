"""Command-line entry point.

Subcommands: ``gen``, ``train``, ``eval``, ``cost``, ``bench``,
``dump-attention`` and ``svd``. Every run writes ``config.json`` (a
sorted echo of all flags) into its output directory. Primary outputs are
byte-identical for identical flags; wall-clock figures go to stdout and
to ``run_meta.json`` only.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric
error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from . import cost as costmod
from . import numerics as nx
from .errors import ConfigError, DataError, HiformerError
from .interaction import LAYER_TYPES, LayerConfig, build_layer
from .metrics import auc, logloss
from .model import RankingModel, TrainConfig, build_model, fit
from .preprocessing import FeatureSchema, read_csv, write_csv
from .synthdata import generate_splits, make_spec

SPLITS = ("train", "valid", "test")
log = logging.getLogger("hiformer")


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def _layer_flags(p: argparse.ArgumentParser, training: bool = True) -> None:
    g = p.add_argument_group("layer")
    g.add_argument("--layer", choices=LAYER_TYPES, default="hetero")
    g.add_argument("--layers", type=int, default=1, help="number of interaction layers")
    g.add_argument("--d", type=int, default=None, help="embedding width (default: schema, or 32)")
    g.add_argument("--heads", type=int, default=4)
    g.add_argument("--dk", type=int, default=8)
    g.add_argument("--dv", type=int, default=16)
    g.add_argument("--dff", type=int, default=None, help="FFN width (default 4d)")
    g.add_argument("--rk", type=int, default=64)
    g.add_argument("--rv", type=int, default=64)
    g.add_argument("--prune-last", action="store_true")
    g.add_argument("--dense-composite", action="store_true",
                   help="store full composite matrices instead of low-rank factors")
    if training:
        t = p.add_argument_group("training")
        t.add_argument("--epochs", type=int, default=1)
        t.add_argument("--lr", type=float, default=3e-3)
        t.add_argument("--batch", type=int, default=256)


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--out", type=Path, required=True, help="output directory")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--force", action="store_true", help="overwrite existing outputs")
    p.add_argument("--format", choices=("csv", "json"), default="csv")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hiformer", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic dataset")
    _common(p)
    p.add_argument("--n", type=int, default=240_000, help="total rows, split 10:1:1")
    p.add_argument("--pairs", type=int, default=6, help="planted interaction pairs")
    p.add_argument("--categorical", type=int, default=8)
    p.add_argument("--vocab", type=int, default=100)
    p.add_argument("--dense", type=int, default=4)
    p.add_argument("--signal", type=float, default=1.0)
    p.add_argument("--d", type=int, default=32, help="model width recorded in schema.json")

    p = sub.add_parser("train", help="train a ranking model")
    _common(p)
    p.add_argument("--data", type=Path, required=True, help="directory with train.csv and valid.csv")
    p.add_argument("--schema", type=Path, default=None, help="schema.json (default: <data>/schema.json)")
    _layer_flags(p)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    _common(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True, help="a CSV file or a directory holding test.csv")

    p = sub.add_parser("cost", help="analytical FLOPs and parameter counts")
    _common(p)
    p.add_argument("--schema", type=Path, default=None, help="take L and t from a schema")
    p.add_argument("--length", type=int, default=36, help="embedding list length L")
    p.add_argument("--tasks", type=int, default=1)
    _layer_flags(p, training=False)

    p = sub.add_parser("bench", help="forward wall-clock benchmark")
    _common(p)
    p.add_argument("--lengths", type=int, nargs="+", default=[16, 32, 64, 128])
    p.add_argument("--batch", type=int, default=64)
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--tasks", type=int, default=1)
    _layer_flags(p, training=False)

    p = sub.add_parser("dump-attention", help="batch-averaged attention grids")
    _common(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--n", type=int, default=1024, help="rows averaged over")

    p = sub.add_parser("svd", help="singular values of a composite projection")
    _common(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--which", choices=("q", "k", "v"), default="v")
    p.add_argument("--head", type=int, default=0)
    p.add_argument("--layer-index", type=int, default=0)
    return parser


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------


def _prepare_out(args, names) -> Path:
    out: Path = args.out
    out.mkdir(parents=True, exist_ok=True)
    clash = [n for n in names if (out / n).exists()]
    if clash and not args.force:
        raise ConfigError(f"{out}: refusing to overwrite {', '.join(clash)} (use --force)")
    echo = {k: (str(v) if isinstance(v, Path) else v) for k, v in sorted(vars(args).items())}
    echo["version"] = __version__
    _write(out / "config.json", json.dumps(echo, sort_keys=True, indent=2) + "\n")
    return out


def _write(path: Path, text: str) -> None:
    path.write_text(text, encoding="utf-8")


def _meta(out: Path, **fields) -> None:
    fields["finished_at"] = time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime())
    _write(out / "run_meta.json", json.dumps(fields, sort_keys=True, indent=2) + "\n")


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _layer_cfg(args, d: int, length: int, tasks: int) -> LayerConfig:
    return LayerConfig(d=d, heads=args.heads, d_k=args.dk, d_v=args.dv, d_f=args.dff, length=length,
                       tasks=tasks, r_k=args.rk, r_v=args.rv, prune_last=args.prune_last,
                       composite="dense" if args.dense_composite else "lowrank")


def _load_split(data: Path, split: str):
    path = data / f"{split}.csv" if data.is_dir() else data
    return read_csv(path, split)


def _records(rows, fmt: str) -> str:
    if fmt == "json":
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in rows)
    return costmod.rows_to_csv(rows)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_gen(args) -> int:
    if args.n < 12:
        raise ConfigError("--n must be at least 12 (10:1:1 split)")
    spec = make_spec(args.seed, args.categorical, args.vocab, args.dense, num_pairs=args.pairs,
                     signal=args.signal)
    files = [f"{s}.csv" for s in SPLITS] + ["spec.json", "schema.json", "checksums.sha256"]
    out = _prepare_out(args, files)
    n_valid = n_test = args.n // 12
    splits = generate_splits(spec, args.n - n_valid - n_test, n_valid, n_test)
    for name, data in splits.items():
        write_csv(out / f"{name}.csv", data)
    spec.save(out / "spec.json")
    spec.schema(model_dim=args.d).save(out / "schema.json")
    sums = "".join(f"{_sha256(out / f)}  {f}\n" for f in files[:-1])
    _write(out / "checksums.sha256", sums)
    print(json.dumps({s: len(d) for s, d in splits.items()}, sort_keys=True))
    return 0


def cmd_train(args) -> int:
    schema_path = args.schema or args.data / "schema.json"
    if not schema_path.exists():
        raise DataError(f"schema not found: {schema_path}")
    schema = FeatureSchema.load(schema_path)
    if args.d is not None:
        schema = replace(schema, model_dim=args.d)
    out = _prepare_out(args, ["checkpoint.bin", "metrics.jsonl"])
    train, valid = _load_split(args.data, "train"), _load_split(args.data, "valid")
    train.validate(schema)
    valid.validate(schema)
    cfg = TrainConfig(lr=args.lr, batch_size=args.batch, epochs=args.epochs, seed=args.seed,
                      layer=args.layer, num_layers=args.layers)
    lc = _layer_cfg(args, schema.model_dim, schema.length, schema.task_count)
    model = build_model(schema, cfg, lc)
    walls = []

    def report(rec):
        walls.append(rec["wall_ms"])
        print(json.dumps(rec, sort_keys=True), flush=True)

    result = fit(model, train, valid, cfg, checkpoint_path=out / "checkpoint.bin", on_epoch=report)
    _write(out / "metrics.jsonl", "".join(json.dumps(r, sort_keys=True) + "\n" for r in result.history))
    _meta(out, wall_ms=walls, best_epoch=result.best_epoch)
    return 0


def cmd_eval(args) -> int:
    out = _prepare_out(args, ["eval.json"])
    model = RankingModel.load(args.checkpoint)
    data = _load_split(args.data, "test")
    data.validate(model.schema)
    p = model.predict(data)[:, 0]
    res = {"auc": auc(p, data.labels), "logloss": logloss(p, data.labels), "rows": len(data)}
    _write(out / "eval.json", json.dumps(res, sort_keys=True) + "\n")
    print(json.dumps(res, sort_keys=True))
    return 0


def cmd_cost(args) -> int:
    length, tasks, d = args.length, args.tasks, args.d or 32
    if args.schema is not None:
        schema = FeatureSchema.load(args.schema)
        length, tasks = schema.length, schema.task_count
        d = args.d or schema.model_dim
    name = f"cost.{args.format}"
    out = _prepare_out(args, [name])
    lc = _layer_cfg(args, d, length, tasks)
    reports = []
    for conv in ("mac", "exact"):
        reports += [costmod.layer_flops("homo", lc, False, conv), costmod.layer_flops("hetero", lc, False, conv),
                    costmod.flops_dense_hiformer(lc, conv), costmod.flops_lowrank_hiformer(lc, conv),
                    costmod.flops_pruned_last_layer(lc, conv)]
    text = costmod.reports_to_json(reports) if args.format == "json" else costmod.reports_to_csv(reports)
    _write(out / name, text)
    sys.stdout.write(text)
    return 0


def cmd_bench(args) -> int:
    name = f"bench.{args.format}"
    out = _prepare_out(args, [name])
    d = args.d or 32
    rows = []
    for L in args.lengths:
        lc = _layer_cfg(args, d, L, args.tasks).clamp_ranks()
        rng = np.random.default_rng(args.seed)
        dense = build_layer("hiformer", replace(lc, composite="dense"), rng)
        lowrank = build_layer("hiformer", replace(lc, composite="lowrank"), rng)
        cases = {"dense": (dense, False), "lowrank": (lowrank, False), "lowrank-pruned": (lowrank, True)}
        rows += costmod.bench_forward(cases, [args.batch], args.repeats, baseline="dense", seed=args.seed)
    for kind in ("dense", "lowrank", "lowrank-pruned"):
        sel = [r for r in rows if r["name"] == kind]
        if len(sel) > 1:
            slope = costmod.loglog_slope([r["length"] for r in sel], [r["min_ms"] for r in sel])
            print(f"{kind}: log-log slope of min wall time {slope:.3f}")
    # timings are not reproducible, so the table itself is the run metadata
    _write(out / name, _records(rows, args.format))
    _meta(out)
    sys.stdout.write(_records(rows, args.format))
    return 0


def attention_grids(model: RankingModel, data) -> list[np.ndarray]:
    """Batch-averaged ``(H, L, L)`` attention of each layer (unpruned)."""
    if len(data) == 0:
        raise DataError("attention dump needs a non-empty batch")
    grids = []
    with nx.no_grad():
        E = model.encode(data)
        for layer in model.layers:
            grids.append(layer.attention(E).mean(axis=0))
            E = layer.forward(E)
    return grids


def off_diagonal_mass(grid: np.ndarray) -> float:
    """``1 - mean diagonal`` over heads of a row-stochastic ``(H, L, L)`` grid."""
    diag = np.diagonal(grid, axis1=-2, axis2=-1)
    return float(1.0 - diag.mean())


def task_row_off_diagonal_mass(grid: np.ndarray, tasks: int = 1) -> float:
    """Off-diagonal mass of the last ``tasks`` query rows only.

    In a single-layer model only the task rows reach the output tower, so
    these are the only rows whose attention is shaped by training.
    """
    L = grid.shape[-1]
    rows = np.arange(L - tasks, L)
    return float(1.0 - grid[:, rows, rows].mean())


def cmd_dump_attention(args) -> int:
    model = RankingModel.load(args.checkpoint)
    data = _load_split(args.data, "test")
    if args.n < 1:
        raise DataError("--n must select at least one row")
    data = data[np.arange(min(args.n, len(data)))]
    data.validate(model.schema)
    grids = attention_grids(model, data)
    names = [f"attention_layer{k}_head{h}.csv" for k, g in enumerate(grids) for h in range(g.shape[0])]
    out = _prepare_out(args, names + ["attention_summary.json"])
    L = model.cfg.length
    header = "row," + ",".join(f"col{j}" for j in range(L)) + ",row_sum\n"
    for k, g in enumerate(grids):
        for h in range(g.shape[0]):
            lines = [f"{i}," + ",".join(repr(float(x)) for x in g[h, i]) + f",{float(g[h, i].sum())!r}"
                     for i in range(L)]
            _write(out / f"attention_layer{k}_head{h}.csv", header + "\n".join(lines) + "\n")
    summary = {"rows": len(data), "kind": model.kind,
               "off_diagonal_mass": [off_diagonal_mass(g) for g in grids],
               "task_row_off_diagonal_mass": [task_row_off_diagonal_mass(g, model.cfg.tasks) for g in grids]}
    _write(out / "attention_summary.json", json.dumps(summary, sort_keys=True) + "\n")
    print(json.dumps(summary, sort_keys=True))
    return 0


def cmd_svd(args) -> int:
    model = RankingModel.load(args.checkpoint)
    if model.kind != "hiformer":
        raise ConfigError("svd needs a hiformer checkpoint")
    if not 0 <= args.layer_index < len(model.layers):
        raise ConfigError(f"--layer-index out of range (model has {len(model.layers)} layers)")
    if not 0 <= args.head < model.cfg.heads:
        raise ConfigError(f"--head out of range (model has {model.cfg.heads} heads)")
    out = _prepare_out(args, ["singular_values.csv"])
    matrix = model.layers[args.layer_index].implied_matrix(args.which, args.head)
    text = costmod.singular_value_report(matrix)
    _write(out / "singular_values.csv", text)
    sys.stdout.write(text)
    return 0


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "eval": cmd_eval, "cost": cmd_cost, "bench": cmd_bench,
            "dump-attention": cmd_dump_attention, "svd": cmd_svd}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse reports unknown flags with status 2, matching ConfigError
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except HiformerError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
