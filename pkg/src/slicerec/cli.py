"""Command-line entry point.

Commands: prepare (raw triplets -> prepared dataset), train, evaluate,
gradcheck, ablate (variant registry and config grids). Exit codes: 0 ok,
1 contract/config error, 2 numerical abort. All run outputs land in a
directory named by the resolved config hash and seed.
"""
from __future__ import annotations

import argparse
import csv
import json
import os
import sys

from . import autodiff as ad
from . import config as config_mod
from . import dataset, evaluation, gradcheck, graphs, model, tpp, training
from .errors import ConfigError, ContractError, NumericalAbort
from .rng import stream

# variant name -> config overrides (the ablation/alternative registry)
VARIANTS = {
    "full": {},
    "wo_graph": {"graph_mode": "none"},
    "wo_slice_rnn": {"slice_rnn": False},
    "wo_concat_id": {"concat_id": False},
    "wo_aux": {"beta": 0.0},
    "global_graph": {"graph_mode": "global"},
    "last_graph": {"graph_mode": "last_only"},
    "user_slices": {"side_mode": "user_only"},
    "item_slices": {"side_mode": "item_only"},
    "concat_fusion": {"fusion_mode": "concat"},
    "last_layer_fusion": {"fusion_mode": "last_layer"},
    "mean_pool_fusion": {"fusion_mode": "mean_pool"},
    "single_gru": {"fusion_mode": "gru_shared"},
}


def _load_world(cfg: config_mod.RunConfig):
    if not cfg.data_dir:
        raise ConfigError("data_dir is not set; run `prepare` first and point data_dir at it")
    log = dataset.load(cfg.data_dir)
    return log, graphs.build_slice_graphs(log)


def _init_params(log, cfg: config_mod.RunConfig):
    mcfg = cfg.model_config()
    params = model.init_model_params(log.num_users, log.num_items, mcfg, stream(cfg.seed, "init"))
    params.update(tpp.init_tpp_params(cfg.embed_dim, stream(cfg.seed, "tpp")))
    return mcfg, params


def cmd_prepare(args) -> int:
    log = dataset.ingest(args.input, min_interactions=args.min_interactions)
    dataset.assign_slices(log, args.slices)
    dataset.save(log, args.out)
    print(f"prepared {len(log)} interactions: {log.num_users} users, "
          f"{log.num_items} items, {log.slice_count} slices -> {args.out}")
    return 0


def _train_once(cfg: config_mod.RunConfig, run_dir=None, quiet=False):
    log, gs = _load_world(cfg)
    mcfg, params = _init_params(log, cfg)
    if run_dir is not None:
        os.makedirs(run_dir, exist_ok=True)
        cfg.write_resolved(os.path.join(run_dir, "config.resolved"))
        with open(os.path.join(run_dir, "train_log.jsonl"), "w", encoding="utf-8") as fh:
            summary = training.train(log, gs, params, mcfg, cfg.train_config(),
                                     out_dir=run_dir, log_fh=fh)
    else:
        summary = training.train(log, gs, params, mcfg, cfg.train_config())
    if not quiet:
        last = summary["records"][-1]
        print(f"trained {summary['epochs_run']} epochs, best val NDCG@10 "
              f"{summary['best_val_ndcg10']:.4f} at epoch {summary['best_epoch']} "
              f"(last train loss {last['train_loss']:.4f}, tpp clamps {summary['tpp_clamps']})")
    return log, gs, mcfg, params, summary


def cmd_train(args) -> int:
    cfg = config_mod.load(args.config, overrides=config_mod.parse_overrides(args.set or []))
    run_dir = cfg.run_dir()
    _, _, _, _, summary = _train_once(cfg, run_dir=run_dir)
    payload = {
        "best_epoch": summary["best_epoch"],
        "best_val_ndcg10": summary["best_val_ndcg10"],
        "epochs_run": summary["epochs_run"],
        "tpp_clamps": summary["tpp_clamps"],
        "config_hash": cfg.config_hash(),
    }
    with open(os.path.join(run_dir, "summary.json"), "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(f"run directory: {run_dir}")
    return 0


def cmd_evaluate(args) -> int:
    cfg = config_mod.load(args.config, overrides=config_mod.parse_overrides(args.set or []))
    run_dir = args.checkpoint or cfg.run_dir()
    log, gs = _load_world(cfg)
    mcfg, params = _init_params(log, cfg)
    ckpt = os.path.join(run_dir, "params.bin")
    ad.load_params(ckpt, params)
    split = dataset.split(log)
    report = evaluation.evaluate(log, split, gs, params, mcfg, target=args.target,
                                 seed=cfg.seed, k=cfg.eval_k,
                                 negatives_per_case=cfg.eval_negatives)
    payload = report.as_dict()
    payload["target"] = args.target
    payload["config_hash"] = cfg.config_hash()
    payload["checkpoint"] = ckpt
    out_path = os.path.join(run_dir, f"eval.{args.target}.json")
    with open(out_path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(f"{args.target}: HR@{report.k}={report.hr_at_k:.4f} "
          f"NDCG@{report.k}={report.ndcg_at_k:.4f} MRR={report.mrr:.4f} "
          f"({report.num_cases} cases) -> {out_path}")
    return 0


def cmd_gradcheck(args) -> int:
    if args.config:
        cfg = config_mod.load(args.config)
        d, L, beta, seed = cfg.embed_dim, cfg.num_layers, cfg.beta, cfg.seed
    else:
        d, L, beta, seed = 4, 2, 0.01, 0
    results = gradcheck.run_gradcheck(d=d, L=L, beta=beta, seed=seed, tol=args.tol)
    failed = False
    for r in results:
        print(f"{r.group:18s} {r.status:8s} max_rel_err={r.max_rel_err:.3e} "
              f"entries={r.num_entries}")
        failed = failed or r.status == "fail"
    if failed:
        raise NumericalAbort("gradient check failed; see per-group report above")
    return 0


def _variant_rows(args):
    rows = []
    if args.variants:
        for name in args.variants.split(","):
            name = name.strip()
            if name not in VARIANTS:
                raise ConfigError(
                    f"unknown variant {name!r}; registry: {', '.join(sorted(VARIANTS))}")
            rows.append((name, dict(VARIANTS[name])))
    for grid in args.grid or []:
        if "=" not in grid:
            raise ConfigError(f"grid spec {grid!r} is not key=v1,v2,...")
        key, raw = grid.split("=", 1)
        for value in raw.split(","):
            overrides = config_mod.parse_overrides([f"{key}={value}"])
            rows.append((f"{key.strip()}={value.strip()}", overrides))
    if not rows:
        raise ConfigError("nothing to run: pass --variants and/or --grid")
    return rows


def cmd_ablate(args) -> int:
    base_overrides = config_mod.parse_overrides(args.set or [])
    rows = _variant_rows(args)
    results = []
    for name, overrides in rows:
        cfg = config_mod.load(args.config, overrides={**base_overrides, **overrides})
        log, gs, mcfg, params, summary = _train_once(cfg, quiet=True)
        split = dataset.split(log)
        report = evaluation.evaluate(log, split, gs, params, mcfg, target="test",
                                     seed=cfg.seed, k=cfg.eval_k,
                                     negatives_per_case=cfg.eval_negatives)
        results.append({
            "variant": name,
            "hr_at_k": report.hr_at_k,
            "ndcg_at_k": report.ndcg_at_k,
            "mrr": report.mrr,
            "best_epoch": summary["best_epoch"],
            "epochs_run": summary["epochs_run"],
        })
        print(f"{name:22s} HR@{report.k}={report.hr_at_k:.4f} "
              f"NDCG@{report.k}={report.ndcg_at_k:.4f} MRR={report.mrr:.4f}")

    out_base = args.out or "ablation"
    with open(out_base + ".json", "w", encoding="utf-8") as fh:
        json.dump(results, fh, indent=2, sort_keys=True)
        fh.write("\n")
    with open(out_base + ".csv", "w", encoding="utf-8", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(results[0].keys()))
        writer.writeheader()
        writer.writerows(results)
    print(f"wrote {out_base}.csv and {out_base}.json")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="slicerec")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", help="ingest raw triplets into a prepared dataset")
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--slices", type=int, required=True)
    p.add_argument("--min-interactions", type=int, default=5)
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("train", help="train a model from a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="evaluate a checkpoint on valid or test")
    p.add_argument("--config", required=True)
    p.add_argument("--checkpoint", help="run directory (default: derived from config)")
    p.add_argument("--target", choices=("valid", "test"), default="test")
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("gradcheck", help="finite-difference check on the micro instance")
    p.add_argument("--config")
    p.add_argument("--tol", type=float, default=1e-4)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("ablate", help="train/evaluate variants and config grids")
    p.add_argument("--config", required=True)
    p.add_argument("--variants", help=f"comma list from: {', '.join(sorted(VARIANTS))}")
    p.add_argument("--grid", action="append", metavar="KEY=V1,V2,...")
    p.add_argument("--out", help="output basename for the comparison table")
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ContractError, ConfigError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except NumericalAbort as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return 2


def entrypoint() -> None:
    sys.exit(main())
