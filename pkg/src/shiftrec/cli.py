"""Command-line entry point: prepare, train, eval, ablate, sweep, analyze, synth.

Every subcommand validates its config, owns its output directory through a
lock file, and stamps each output file with the config hash and seed, so
runs are idempotent and attributable.  Exit code 0 on success; any failure
prints a diagnostic and returns nonzero.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import time
from contextlib import contextmanager
from pathlib import Path

import numpy as np

from . import corpus
from .config import ConfigError, RunConfig, load_config
from .evaluation import (
    pair_distance_analysis,
    rank_metrics,
    shift_heatmap,
    subgroup_by_shift,
)
from .model import ShiftModel
from .training import fit

LOCK_NAME = ".shiftrec.lock"


class CliError(RuntimeError):
    pass


@contextmanager
def output_dir(path) -> Path:
    """Exclusive ownership of an output directory for the run's duration."""
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    lock = out / LOCK_NAME
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise CliError(f"output directory {out} is locked by another run "
                       f"(remove {lock} if that run is dead)")
    try:
        os.close(fd)
        yield out
    finally:
        lock.unlink(missing_ok=True)


def _provenance(cfg: RunConfig, seed: int) -> dict:
    return {"config_hash": cfg.digest(), "seed": seed}


def write_json(path: Path, payload: dict, provenance: dict) -> None:
    body = {"provenance": provenance}
    body.update(payload)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(body, fh, sort_keys=True, indent=2)
        fh.write("\n")


def write_csv(path: Path, header: list, rows: list, provenance: dict) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(f"# config_hash={provenance['config_hash']} seed={provenance['seed']}\n")
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


def _fmt(x) -> str:
    if isinstance(x, float):
        return repr(x)
    return str(x)


# ---------------------------------------------------------------------------
# shared loading helpers


def _load_store_at(cfg: RunConfig, store_path, n_levels: int):
    dataset, _ = corpus.load_store(store_path)
    if n_levels != dataset.n_levels:
        dataset.train = corpus.rebucket(dataset.train, n_levels)
        dataset.validation = corpus.rebucket(dataset.validation, n_levels)
        dataset.test = corpus.rebucket(dataset.test, n_levels)
        dataset.n_levels = n_levels
    return dataset


def _train_once(cfg: RunConfig, dataset, seed: int, threads: int,
                no_pmsid: bool = False, no_pmsim: bool = False, no_pmi: bool = False):
    encoder_cfg = cfg.encoder_config()
    head_cfg = cfg.head_config(no_pmi=no_pmi)
    train_cfg = cfg.train_config(seed=seed, no_pmsid=no_pmsid, no_pmsim=no_pmsim)
    if head_cfg.n_levels == 1 and train_cfg.gamma_dec > 0:
        raise CliError("a single-branch head cannot use the decomposition loss; "
                       "set gamma_dec = 0 or shift_levels >= 3")
    model = ShiftModel.build(encoder_cfg, head_cfg, dataset.catalog.n_items, train_cfg.seed)

    def eval_fn(m, samples):
        return rank_metrics(m, samples, (10,), threads=threads).recall[10]

    return fit(model, dataset.train, dataset.validation, train_cfg, eval_fn=eval_fn), train_cfg


def _write_train_outputs(out: Path, result, cfg: RunConfig, seed: int) -> None:
    prov = _provenance(cfg, seed)
    result.model.save(out / "checkpoint.npz", provenance=prov)
    rows = [
        [e.epoch, _fmt(e.loss_rec), _fmt(e.loss_dec), _fmt(e.loss_mat),
         _fmt(e.val_recall10), e.skipped_match, _fmt(round(e.seconds, 3))]
        for e in result.log
    ]
    write_csv(out / "train_log.csv",
              ["epoch", "loss_rec", "loss_dec", "loss_mat", "val_recall10",
               "skipped_match", "seconds"],
              rows, prov)


# ---------------------------------------------------------------------------
# subcommands


def cmd_prepare(args) -> int:
    cfg = load_config(args.config)
    data = cfg["data"]
    model = cfg["model"]
    seed = args.seed if args.seed is not None else cfg["train"]["seed"]
    if not data["path"]:
        raise CliError("config [data] path is required for prepare")
    if model["shift_levels"] < 3:
        raise CliError("prepare needs shift_levels >= 3 to bucket shift degrees")
    with output_dir(args.out_dir) as out:
        interactions = corpus.load_interactions(data["path"], data["format"])
        dataset = corpus.build_dataset(
            interactions, data["min_count"], model["o"], model["shift_levels"],
            label_dropout_rho=data["label_dropout"],
            label_dropout_seed=data["label_dropout_seed"],
        )
        prov = _provenance(cfg, seed)
        corpus.save_store(dataset, out / "store.npz", provenance=prov)
        write_json(out / "report.json", dataset.report(), prov)
        print(f"prepared {len(dataset.train)} train / {len(dataset.validation)} val / "
              f"{len(dataset.test)} test samples -> {out}")
    return 0


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    seed = args.seed if args.seed is not None else cfg["train"]["seed"]
    with output_dir(args.out_dir) as out:
        dataset = _load_store_at(cfg, args.store, cfg["model"]["shift_levels"])
        result, _ = _train_once(cfg, dataset, seed, args.threads,
                                no_pmsid=args.no_pmsid, no_pmsim=args.no_pmsim,
                                no_pmi=args.no_pmi)
        _write_train_outputs(out, result, cfg, seed)
        print(f"best epoch {result.best_epoch} val recall@10 {result.best_recall10:.4f} "
              f"({result.epochs_run} epochs) -> {out}")
    return 0


def cmd_eval(args) -> int:
    cfg = load_config(args.config)
    seed = args.seed if args.seed is not None else cfg["train"]["seed"]
    checkpoint = Path(args.checkpoint)
    if not checkpoint.exists():
        raise CliError(f"checkpoint not found: {checkpoint}")
    with output_dir(args.out_dir) as out:
        model, _ = ShiftModel.load(checkpoint)
        dataset = _load_store_at(cfg, args.store, model.head_config.n_levels)
        metrics = rank_metrics(model, dataset.test, cfg.k_list(), threads=args.threads)
        write_json(out / "metrics.json", metrics.as_dict(), _provenance(cfg, seed))
        print(json.dumps(metrics.as_dict(), sort_keys=True))
    return 0


ABLATION_VARIANTS = (
    ("full", {}),
    ("wo_pmsid_pmsim", {"no_pmsid": True, "no_pmsim": True}),
    ("wo_pmsim", {"no_pmsim": True}),
    ("wo_pmsid", {"no_pmsid": True}),
    ("wo_pmi", {"no_pmi": True}),
)


def cmd_ablate(args) -> int:
    cfg = load_config(args.config)
    seed = args.seed if args.seed is not None else cfg["train"]["seed"]
    ks = cfg.k_list()
    with output_dir(args.out_dir) as out:
        dataset = _load_store_at(cfg, args.store, cfg["model"]["shift_levels"])
        rows = []
        for name, flags in ABLATION_VARIANTS:
            result, _ = _train_once(cfg, dataset, seed, args.threads, **flags)
            metrics = rank_metrics(result.model, dataset.test, ks, threads=args.threads)
            rows.append([name]
                        + [_fmt(metrics.recall[k]) for k in ks]
                        + [_fmt(metrics.ndcg[k]) for k in ks])
            print(f"{name}: recall@{ks[0]} = {metrics.recall[ks[0]]:.4f}")
        header = ["variant"] + [f"recall@{k}" for k in ks] + [f"ndcg@{k}" for k in ks]
        write_csv(out / "ablation.csv", header, rows, _provenance(cfg, seed))
    return 0


SWEEP_PARAMS = ("rho", "shift_levels", "gamma_dec", "gamma_mat")


def cmd_sweep(args) -> int:
    cfg = load_config(args.config)
    seed = args.seed if args.seed is not None else cfg["train"]["seed"]
    values = [float(v) if args.param != "shift_levels" else int(v)
              for v in args.values.split(",")]
    ks = cfg.k_list()
    with output_dir(args.out_dir) as out:
        rows = []
        for value in values:
            started = time.perf_counter()
            try:
                local = RunConfig(values={s: dict(kv) for s, kv in cfg.values.items()})
                if args.param == "rho":
                    local.values["data"]["label_dropout"] = value
                    data = local["data"]
                    if not data["path"]:
                        raise CliError("config [data] path is required for a rho sweep")
                    interactions = corpus.load_interactions(data["path"], data["format"])
                    dataset = corpus.build_dataset(
                        interactions, data["min_count"], local["model"]["o"],
                        local["model"]["shift_levels"],
                        label_dropout_rho=value,
                        label_dropout_seed=data["label_dropout_seed"],
                    )
                elif args.param == "shift_levels":
                    local.values["model"]["shift_levels"] = value
                    dataset = _load_store_at(local, args.store, value)
                else:
                    local.values["train"][args.param] = value
                    dataset = _load_store_at(local, args.store, local["model"]["shift_levels"])
                result, _ = _train_once(local, dataset, seed, args.threads)
                trained = time.perf_counter()
                metrics = rank_metrics(result.model, dataset.test, ks, threads=args.threads)
                evaluated = time.perf_counter()
                rows.append([args.param, _fmt(value)]
                            + [_fmt(metrics.recall[k]) for k in ks]
                            + [_fmt(metrics.ndcg[k]) for k in ks]
                            + [_fmt(round(trained - started, 3)),
                               _fmt(round(evaluated - trained, 3)), ""])
                print(f"{args.param}={value}: recall@{ks[0]} = {metrics.recall[ks[0]]:.4f}")
            except Exception as exc:
                rows.append([args.param, _fmt(value)]
                            + ["" for _ in ks] + ["" for _ in ks]
                            + [_fmt(round(time.perf_counter() - started, 3)), "",
                               f"{type(exc).__name__}: {exc}"])
                print(f"{args.param}={value}: failed ({exc})", file=sys.stderr)
        header = (["parameter", "value"]
                  + [f"recall@{k}" for k in ks] + [f"ndcg@{k}" for k in ks]
                  + ["train_seconds", "eval_seconds", "error"])
        write_csv(out / "sweep.csv", header, rows, _provenance(cfg, seed))
    return 0


def cmd_analyze(args) -> int:
    cfg = load_config(args.config)
    seed = args.seed if args.seed is not None else cfg["train"]["seed"]
    checkpoint = Path(args.checkpoint)
    if not checkpoint.exists():
        raise CliError(f"checkpoint not found: {checkpoint}")
    with output_dir(args.out_dir) as out:
        model, _ = ShiftModel.load(checkpoint)
        n_levels = model.head_config.n_levels
        dataset = _load_store_at(cfg, args.store, n_levels)
        prov = _provenance(cfg, seed)
        ks = cfg.k_list()

        matrix, counts = shift_heatmap(model, dataset.test, n_levels)
        write_csv(out / "heatmap.csv",
                  ["level"] + [f"f{v}" for v in range(1, n_levels + 1)] + ["samples"],
                  [[lvl + 1] + [_fmt(x) for x in matrix[lvl]] + [int(counts[lvl])]
                   for lvl in range(n_levels)],
                  prov)

        groups = subgroup_by_shift(model, dataset.test, n_levels, ks, threads=args.threads)
        write_csv(out / "subgroup.csv",
                  ["level", "samples"] + [f"recall@{k}" for k in ks] + [f"ndcg@{k}" for k in ks],
                  [[lvl, m.sample_count]
                   + [_fmt(m.recall[k]) for k in ks] + [_fmt(m.ndcg[k]) for k in ks]
                   for lvl, m in sorted(groups.items())],
                  prov)

        rng = np.random.default_rng(seed)
        same, different = pair_distance_analysis(model, dataset.train, rng)
        write_csv(out / "distances.csv",
                  ["distance", "pair_kind"],
                  [[_fmt(d), "same_level"] for d in same]
                  + [[_fmt(d), "different_level"] for d in different],
                  prov)
        print(f"analysis written to {out} "
              f"(heatmap, subgroup, {len(same)}+{len(different)} pair distances)")
    return 0


def cmd_synth(args) -> int:
    from .synthetic import generate, write_dataset

    cfg = load_config(args.config) if args.config else None
    if cfg is None:
        from .config import default_config
        cfg = default_config()
    seed = args.seed if args.seed is not None else cfg["synth"]["seed"]
    synth_cfg = cfg.synth_config(seed=seed)
    with output_dir(args.out_dir) as out:
        interactions, annotations, stats = generate(synth_cfg)
        prov = _provenance(cfg, seed)
        paths = write_dataset(interactions, annotations, out, cfg["synth"]["format"],
                              provenance=prov)
        write_json(out / "synth_stats.json", stats, prov)
        print(f"generated {len(interactions)} interactions, "
              f"{stats['pairs']} annotated pairs -> {paths['interactions']}")
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="shiftrec",
        description="Shift-aware sequential recommendation experiments",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config_required=True, needs_store=False, needs_checkpoint=False):
        p.add_argument("--config", required=config_required,
                       help="run config file (INI with [data]/[model]/[train]/[eval]/[synth])")
        p.add_argument("--out-dir", required=True, help="output directory owned by this run")
        p.add_argument("--seed", type=int, default=None,
                       help="override the config seed for this run")
        p.add_argument("--threads", type=int, default=1,
                       help="worker threads for evaluation passes")
        if needs_store:
            p.add_argument("--store", required=True,
                           help="prepared sample store (.npz from the prepare step)")
        if needs_checkpoint:
            p.add_argument("--checkpoint", required=True,
                           help="model checkpoint (.npz from the train step)")

    p = sub.add_parser("prepare", help="ingest raw interactions into a binary sample store")
    common(p)
    p.set_defaults(fn=cmd_prepare)

    p = sub.add_parser("train", help="train a model from a prepared store")
    common(p, needs_store=True)
    p.add_argument("--no-pmsid", action="store_true",
                   help="ablation: drop the shift-level decomposition loss")
    p.add_argument("--no-pmsim", action="store_true",
                   help="ablation: drop the shift-matched contrastive loss")
    p.add_argument("--no-pmi", action="store_true",
                   help="ablation: score with mean-pooled branches instead of the learned mixture")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="full-ranking metrics for a checkpoint on the test split")
    common(p, needs_store=True, needs_checkpoint=True)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("ablate", help="train and evaluate the full model plus four ablations")
    common(p, needs_store=True)
    p.set_defaults(fn=cmd_ablate)

    p = sub.add_parser("sweep", help="train/evaluate across a one-parameter grid")
    common(p, needs_store=True)
    p.add_argument("--param", required=True, choices=SWEEP_PARAMS,
                   help="which knob the grid varies")
    p.add_argument("--values", required=True,
                   help="comma-separated grid values, e.g. 0,0.3,0.5")
    p.set_defaults(fn=cmd_sweep)

    p = sub.add_parser("analyze", help="shift heatmap, per-level metrics, and pair distances")
    common(p, needs_store=True, needs_checkpoint=True)
    p.set_defaults(fn=cmd_analyze)

    p = sub.add_parser("synth", help="generate a synthetic dataset with planted shift structure")
    common(p, config_required=False)
    p.set_defaults(fn=cmd_synth)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (CliError, ConfigError, corpus.CorpusError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
