"""Batch entry points: ``build-graph``, ``train``, ``evaluate``, ``sweep``.

Exit codes: 0 success, 2 config/input error, 3 IO error, 4 numerical divergence.
Two helpers, ``make-toy`` and ``subsample``, write pair files and a config for
smoke runs.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import hypergraph as hgmod
from .config import SWEEP_KEYS, ConfigError, RunConfig, load_config
from .dataset import (
    DatasetError,
    Split,
    dataset_stats,
    load_dataset,
    load_interaction_pairs,
    split_train_test,
    write_interaction_pairs,
    write_stats_csv,
)
from .evaluation import MetricsReport, evaluate, write_metrics_csv
from .model import CheckpointError, forward, load_checkpoint, save_checkpoint
from .sparse import binarize, from_arrays
from .synthetic import planted_dataset
from .training import TrainingDiverged, build_operators, train

log = logging.getLogger("hed")

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_DIVERGED = 0, 2, 3, 4


class UsageError(ValueError):
    pass


# --- pipeline pieces --------------------------------------------------------


def prepare_data(cfg: RunConfig):
    cfg.check_inputs()
    U, I, B = cfg.counts
    if cfg.raw["user_bundle_test"]:
        ds = load_dataset(cfg.path("user_bundle"), cfg.path("user_item"), cfg.path("bundle_item"),
                          U, I, B)
        test = load_interaction_pairs(cfg.path("user_bundle_test"), U, B)
        train_m = ds.a_ub
        overlap = np.intersect1d(train_m.row_indices * B + train_m.col_indices,
                                 test.row_indices * B + test.col_indices)
        if len(overlap):
            raise DatasetError(f"{len(overlap)} user-bundle pairs appear in both train and test files")
        split = Split(train_m, test, None, method="given-files")
        rows = np.concatenate([train_m.row_indices, test.row_indices])
        cols = np.concatenate([train_m.col_indices, test.col_indices])
        ds = type(ds)(U, I, B, binarize(from_arrays(rows, cols, 1.0, U, B)), ds.a_ui, ds.a_bi)
    else:
        ds = load_dataset(cfg.path("user_bundle"), cfg.path("user_item"), cfg.path("bundle_item"),
                          U, I, B)
        split = split_train_test(ds.a_ub, cfg.train_fraction, cfg.seed)
    return ds, split


def _graph_key(cfg: RunConfig, split: Split, ds) -> str:
    h = hashlib.sha256()
    for m in (split.train, ds.a_ui, ds.a_bi):
        h.update(np.asarray(m.shape, dtype="<i8").tobytes())
        h.update(m.row_offsets.astype("<i8").tobytes())
        h.update(m.col_indices.astype("<i8").tobytes())
    h.update(f"n={cfg.hypergraph.n_threshold};ii={cfg.hypergraph.ii_mode}".encode())
    return h.hexdigest()[:16]


def cache_path(cfg: RunConfig, split: Split, ds) -> Path:
    return cfg.out / "cache" / f"hypergraph-{_graph_key(cfg, split, ds)}.bin"


def get_hypergraph(cfg: RunConfig, split: Split, ds, *, force_write: bool = False):
    path = cache_path(cfg, split, ds)
    if cfg.use_cache and path.is_file() and not force_write:
        hg, _ = hgmod.load_cache(path)
        log.info("loaded hypergraph cache %s", path)
        return hg, path
    t0 = time.perf_counter()
    hg = hgmod.assemble(split.train, ds.a_ui, ds.a_bi, cfg.hypergraph)
    log.info("built hypergraph %s nnz=%d in %.1fs", hg.h.shape, hg.h.nnz, time.perf_counter() - t0)
    if cfg.use_cache or force_write:
        hgmod.save_cache(hg, path, cfg.hypergraph)
    return hg, path


def run_metadata(cfg: RunConfig, split: Split) -> dict[str, object]:
    return {
        "config_hash": cfg.config_hash(),
        "dataset": cfg.raw["dataset"],
        "seed": cfg.seed,
        "ablate": cfg.raw["ablate"],
        "split": split.method,
        "train_fraction": cfg.raw["train_fraction"] if split.method != "given-files" else "n/a",
        "masking": "train-interactions",
        "averaging": "uniform-per-user",
        "tie_break": "ascending-bundle-id",
        "loss": "uib-softplus",
    }


def write_history(history, path: Path, k: int) -> None:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "loss", f"recall@{k}", f"ndcg@{k}"])
        for row in history.epochs:
            w.writerow([
                row["epoch"], repr(row["loss"]),
                repr(row["recall"]) if "recall" in row else "",
                repr(row["ndcg"]) if "ndcg" in row else "",
            ])


def train_pipeline(cfg: RunConfig) -> MetricsReport:
    ds, split = prepare_data(cfg)
    B = cfg.counts[2]
    if max(cfg.ks) > B:
        raise ConfigError(f"largest k ({max(cfg.ks)}) exceeds the number of bundles ({B})")
    hg, _ = get_hypergraph(cfg, split, ds)
    out = cfg.out
    out.mkdir(parents=True, exist_ok=True)
    tcfg = cfg.train

    def progress(row):
        log.info("epoch %d loss %.6f %s", row["epoch"], row["loss"],
                 "" if "recall" not in row else f"recall {row['recall']:.4f} ndcg {row['ndcg']:.4f}")

    params, history, ops = train(split, hg, tcfg, cfg.flags, on_epoch=progress)
    save_checkpoint(params, out / "model.ckpt")
    write_history(history, out / "history.csv", tcfg.eval_k)
    cfg.dump(out / "config.txt")
    fu, fb, _ = forward(params, ops)
    report = evaluate(fu, fb, split.train, split.test, cfg.ks)
    write_metrics_csv(report, out / "metrics.csv", run_metadata(cfg, split))
    return report


def evaluate_pipeline(cfg: RunConfig, checkpoint: Path) -> MetricsReport:
    params = load_checkpoint(checkpoint)
    U, I, B = cfg.counts
    if params.sizes != (U, I, B):
        raise ConfigError(f"checkpoint sizes {params.sizes} do not match config {(U, I, B)}")
    if params.dim != cfg.train.dim:
        raise ConfigError(f"checkpoint dimension {params.dim} != embedding_size {cfg.train.dim}")
    if max(cfg.ks) > B:
        raise ConfigError(f"largest k ({max(cfg.ks)}) exceeds the number of bundles ({B})")
    ds, split = prepare_data(cfg)
    hg, _ = get_hypergraph(cfg, split, ds)
    ops = build_operators(hg, split.train, cfg.flags)
    fu, fb, _ = forward(params, ops)
    report = evaluate(fu, fb, split.train, split.test, cfg.ks)
    cfg.out.mkdir(parents=True, exist_ok=True)
    write_metrics_csv(report, cfg.out / "metrics.csv", run_metadata(cfg, split))
    return report


# --- commands ---------------------------------------------------------------


def cmd_build_graph(cfg: RunConfig) -> int:
    ds, split = prepare_data(cfg)
    hg, path = get_hypergraph(cfg, split, ds, force_write=True)
    write_stats_csv(dataset_stats(ds), cfg.out / "stats.csv")
    print(f"hypergraph {hg.h.shape[0]}x{hg.h.shape[1]} nnz={hg.h.nnz} -> {path}")
    return EXIT_OK


def cmd_train(cfg: RunConfig) -> int:
    report = train_pipeline(cfg)
    print(report.format_table())
    return EXIT_OK


def cmd_evaluate(cfg: RunConfig, checkpoint: Path) -> int:
    report = evaluate_pipeline(cfg, checkpoint)
    print(report.format_table())
    return EXIT_OK


def cmd_sweep(cfg: RunConfig, parameter: str, values: list[str]) -> int:
    if parameter not in SWEEP_KEYS:
        raise ConfigError(f"unknown sweep parameter {parameter!r}; choose from {sorted(SWEEP_KEYS)}")
    if not values:
        raise ConfigError("sweep needs at least one value")
    key = SWEEP_KEYS[parameter]
    root = cfg.out / f"sweep-{parameter}"
    runs = []
    for value in values:
        sub = cfg.with_overrides({key: value, "out": str((root / f"{parameter}={value}").resolve())})
        log.info("sweep %s=%s", parameter, value)
        runs.append((value, train_pipeline(sub)))
    root.mkdir(parents=True, exist_ok=True)
    with (root / "sweep.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["value", "k", "recall", "ndcg"])
        for value, rep in runs:
            for k, r, n in rep.rows():
                w.writerow([value, k, repr(r), repr(n)])
    print(f"{len(runs)} runs -> {root / 'sweep.csv'}")
    return EXIT_OK


TOY_CONFIG = """\
# planted-structure toy dataset
dataset = toy
user_bundle = user_bundle.txt
user_item = user_item.txt
bundle_item = bundle_item.txt
n_users = {U}
n_items = {I}
n_bundles = {B}
embedding_size = 16
n = 1
epochs = 20
batch_size = 128
hypergraph_convolution_dropout = 0.2
ks = 5,10,20
eval_k = 10
seed = {seed}
out = runs
"""


def cmd_make_toy(out: Path, users: int, items: int, bundles: int, groups: int, seed: int) -> int:
    ds = planted_dataset(users, items, bundles, groups, seed, p_in=0.3, p_out=0.02)
    out.mkdir(parents=True, exist_ok=True)
    write_interaction_pairs(ds.a_ub, out / "user_bundle.txt")
    write_interaction_pairs(ds.a_ui, out / "user_item.txt")
    write_interaction_pairs(ds.a_bi, out / "bundle_item.txt")
    (out / "toy.conf").write_text(TOY_CONFIG.format(U=users, I=items, B=bundles, seed=seed))
    print(f"wrote toy dataset and config to {out}")
    return EXIT_OK


def cmd_subsample(cfg: RunConfig, fraction: float, out: Path, seed: int) -> int:
    """Keep a random fraction of users plus the bundles and items they reach; re-index densely."""
    if not 0 < fraction <= 1:
        raise ConfigError("fraction must be in (0, 1]")
    ds, _ = prepare_data(cfg.with_overrides({"user_bundle_test": "", "train_fraction": "1"}))
    rng = np.random.default_rng(seed)
    U, I, B = cfg.counts
    users = np.sort(rng.choice(U, size=max(1, int(round(fraction * U))), replace=False))
    keep_u = np.zeros(U, bool)
    keep_u[users] = True
    ub = keep_u[ds.a_ub.row_indices]
    bundles = np.unique(ds.a_ub.col_indices[ub])
    keep_b = np.zeros(B, bool)
    keep_b[bundles] = True
    ui = keep_u[ds.a_ui.row_indices]
    bi = keep_b[ds.a_bi.row_indices]
    items = np.unique(np.concatenate([ds.a_ui.col_indices[ui], ds.a_bi.col_indices[bi]]))
    u_new = np.full(U, -1)
    u_new[users] = np.arange(len(users))
    b_new = np.full(B, -1)
    b_new[bundles] = np.arange(len(bundles))
    i_new = np.full(I, -1)
    i_new[items] = np.arange(len(items))
    nu, ni, nb = len(users), len(items), len(bundles)
    out.mkdir(parents=True, exist_ok=True)
    write_interaction_pairs(
        from_arrays(u_new[ds.a_ub.row_indices[ub]], b_new[ds.a_ub.col_indices[ub]], 1.0, nu, nb),
        out / "user_bundle.txt")
    write_interaction_pairs(
        from_arrays(u_new[ds.a_ui.row_indices[ui]], i_new[ds.a_ui.col_indices[ui]], 1.0, nu, ni),
        out / "user_item.txt")
    write_interaction_pairs(
        from_arrays(b_new[ds.a_bi.row_indices[bi]], i_new[ds.a_bi.col_indices[bi]], 1.0, nb, ni),
        out / "bundle_item.txt")
    raw = dict(cfg.raw)
    raw.update(
        dataset=f"{raw['dataset']}-sub{fraction:g}", user_bundle="user_bundle.txt",
        user_item="user_item.txt", bundle_item="bundle_item.txt", user_bundle_test="",
        n_users=str(nu), n_items=str(ni), n_bundles=str(nb), out="runs",
    )
    (out / "dataset.conf").write_text("".join(f"{k} = {v}\n" for k, v in raw.items()))
    print(f"subsample: {nu} users, {ni} items, {nb} bundles -> {out}")
    return EXIT_OK


# --- argument handling ------------------------------------------------------


def _add_common(p: argparse.ArgumentParser, config_required=True) -> None:
    p.add_argument("--config", required=config_required, help="key=value config file")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--ablate", choices=["hed", "hed-c", "hed-cu", "hed-cb", "hed-cbu"])
    p.add_argument("--out", help="output directory")
    p.add_argument("--beta", help="override beta (fractions like 1/100 allowed)")
    p.add_argument("--alpha", help="override alpha")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override any config key; repeatable")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hed", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)
    _add_common(sub.add_parser("build-graph", help="build and cache the complete hypergraph"))
    _add_common(sub.add_parser("train", help="train a model and write checkpoint + history"))
    p = sub.add_parser("evaluate", help="evaluate a checkpoint")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p = sub.add_parser("sweep", help="one training run per parameter value")
    _add_common(p)
    p.add_argument("--param", required=True, help=f"one of {', '.join(SWEEP_KEYS)}")
    p.add_argument("--values", required=True, help="comma-separated values, e.g. 1,1/5,1/10")
    p = sub.add_parser("make-toy", help="write a planted toy dataset and config")
    p.add_argument("--out", required=True)
    p.add_argument("--users", type=int, default=60)
    p.add_argument("--items", type=int, default=80)
    p.add_argument("--bundles", type=int, default=50)
    p.add_argument("--groups", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p = sub.add_parser("subsample", help="write a user subsample of a dataset")
    p.add_argument("--config", required=True)
    p.add_argument("--fraction", type=float, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    return parser


def _overrides(args) -> dict[str, str]:
    over: dict[str, str] = {}
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        over[key.strip()] = value.strip()
    if args.seed is not None:
        over["seed"] = str(args.seed)
    if args.ablate:
        over["ablate"] = args.ablate
    if args.out:
        over["out"] = str(Path(args.out).resolve())
    if args.beta is not None:
        over["beta"] = args.beta
    if args.alpha is not None:
        over["alpha"] = args.alpha
    return over


def _dispatch(args) -> int:
    if args.command == "make-toy":
        return cmd_make_toy(Path(args.out), args.users, args.items, args.bundles, args.groups,
                            args.seed)
    if args.command == "subsample":
        return cmd_subsample(load_config(args.config), args.fraction, Path(args.out), args.seed)
    cfg = load_config(args.config).with_overrides(_overrides(args))
    if args.command == "build-graph":
        return cmd_build_graph(cfg)
    if args.command == "train":
        return cmd_train(cfg)
    if args.command == "evaluate":
        return cmd_evaluate(cfg, Path(args.checkpoint))
    if args.command == "sweep":
        values = [v.strip() for v in args.values.split(",") if v.strip()]
        return cmd_sweep(cfg, args.param, values)
    raise UsageError(f"unknown command {args.command}")


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(asctime)s %(levelname)s %(message)s",
    )
    try:
        return _dispatch(args)
    except (ConfigError, DatasetError, CheckpointError, hgmod.CacheError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingDiverged as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
