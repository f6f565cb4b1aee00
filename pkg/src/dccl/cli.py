"""Command-line entry point: ``dccl <subcommand> ...``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

from . import datahub as dh
from . import orchestrator as O
from .config import RunConfig, coerce, dump_config, load_config

log = logging.getLogger("dccl")


def _add_config_flags(p: argparse.ArgumentParser):
    p.add_argument("--config", help="flat key = value config file")
    g = p.add_argument_group("config overrides")
    for f in fields(RunConfig):
        g.add_argument("--" + f.name.replace("_", "-"), dest=f"cfg_{f.name}", default=None, help=f.metadata["doc"])


def _config_from(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    over = {f.name: coerce(f.name, getattr(args, f"cfg_{f.name}")) for f in fields(RunConfig)
            if getattr(args, f"cfg_{f.name}", None) is not None}
    return cfg.replace(**over)


def cmd_ingest(args) -> int:
    lg, profiles = dh.parse_movielens(args.movielens)
    report: dict = {}
    if args.min_interactions > 1:
        lg = dh.filter_min_interactions(lg, args.min_interactions, report)
    dh.write_dataset(args.out, lg, profiles, {"source": "movielens", "min_interactions": args.min_interactions,
                                              "filter": report})
    print(json.dumps(lg.summary()))
    return 0


def cmd_synth(args) -> int:
    spec = dh.SynthSpec(clusters=args.clusters, users=args.users, items=args.items, alpha=args.alpha,
                        noise=args.noise, drift=args.drift, tail_niche=args.tail_niche, seed=args.seed)
    lg, profiles = dh.synth_generate(spec)
    dh.write_dataset(args.out, lg, profiles, {"source": "synthetic", "spec": spec.__dict__})
    print(json.dumps(lg.summary()))
    return 0


def cmd_run(args, rounds: int | None = None) -> int:
    cfg = _config_from(args)
    if rounds is not None:
        cfg = cfg.replace(rounds=rounds)
    reports = O.run_lifecycle(cfg)
    last = reports[-1]
    print(json.dumps({"out_dir": cfg.out_dir, "rounds": len(reports) - 1,
                      "final": {k: {"hit_rate@10": v["hit_rate"]["10"], "macro_auc": v["macro_auc"]}
                                for k, v in last.evals.items()}}, indent=1))
    return 0


def cmd_experiment(args) -> int:
    cfg = _config_from(args)
    print(json.dumps(O.run_experiment(args.recipe, cfg), indent=1))
    return 0


def cmd_eval(args) -> int:
    root = Path(args.run)
    cfg = load_config(root / "config.txt").replace(out_dir=str(root))
    data = O.prepare(cfg)
    t = args.round
    if t is None:
        t = max(int(p.stem.rsplit("_r", 1)[1]) for p in (root / "checkpoints").glob("backbone_r*.ckpt"))
    from . import recmodel as rm
    backbone = rm.load_checkpoint(root / "checkpoints" / f"backbone_r{t}.ckpt")
    rep = O.evaluate_model(f"cloud-r{t}", data, backbone, chunk=cfg.eval_chunk, ndcg_form=cfg.ndcg)
    reports = [rep]
    table = root / f"recycle_round_{t}.csv"
    basis_file = root / "checkpoints" / f"basis_r{t - 1}.ckpt"
    if t >= 1 and table.exists() and basis_file.exists():
        lc = O.Lifecycle(cfg, data)
        codes, _ = lc._codes_after(t)
        basis, _ = O._split_cloud(rm.load_checkpoint(basis_file))
        prev = rm.load_checkpoint(root / "checkpoints" / f"backbone_r{t - 1}.ckpt")
        reports.append(O.evaluate_model(f"personalized-r{t}", data, prev, codes, basis, cfg.patch_gate,
                                        cfg.eval_chunk, cfg.ndcg))
    from . import evalmetrics as em
    out = Path(args.out) if args.out else root
    out.mkdir(parents=True, exist_ok=True)
    em.write_metrics_csv(out / "eval_metrics.csv", reports)
    em.write_summary_json(out / "eval_summary.json", reports, {"round": t})
    for r in reports:
        print(json.dumps(r.summary()))
    return 0


def cmd_export(args) -> int:
    path = O.export_metapatch_table(args.run, args.out, round_idx=args.round)
    print(path)
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="dccl", description="Device-cloud collaborative recommendation lab")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="cmd", required=True)

    p = sub.add_parser("ingest", help="parse MovieLens-1M into the normalized dataset format")
    p.add_argument("movielens", help="directory with ratings.dat, users.dat, movies.dat")
    p.add_argument("--out", required=True)
    p.add_argument("--min-interactions", type=int, default=20)

    p = sub.add_parser("synth", help="generate a synthetic long-tail dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--users", type=int, default=2000)
    p.add_argument("--items", type=int, default=5000)
    p.add_argument("--clusters", type=int, default=20)
    p.add_argument("--alpha", type=float, default=1.2)
    p.add_argument("--noise", type=float, default=0.1)
    p.add_argument("--drift", type=float, default=0.0)
    p.add_argument("--tail-niche", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)

    for name, hlp in (("pretrain", "pretrain backbone and basis only"), ("run", "run or resume a lifecycle")):
        p = sub.add_parser(name, help=hlp)
        _add_config_flags(p)

    p = sub.add_parser("experiment", help="run an experiment recipe")
    p.add_argument("recipe", choices=O.RECIPES)
    _add_config_flags(p)

    p = sub.add_parser("eval", help="evaluate a run's checkpoints")
    p.add_argument("--run", required=True)
    p.add_argument("--round", type=int)
    p.add_argument("--out")

    p = sub.add_parser("export-patches", help="export per-device codes with dominant category")
    p.add_argument("--run", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--round", type=int)

    p = sub.add_parser("show-config", help="print the documented default config")
    _add_config_flags(p)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        if args.cmd == "ingest":
            return cmd_ingest(args)
        if args.cmd == "synth":
            return cmd_synth(args)
        if args.cmd == "pretrain":
            return cmd_run(args, rounds=0)
        if args.cmd == "run":
            return cmd_run(args)
        if args.cmd == "experiment":
            return cmd_experiment(args)
        if args.cmd == "eval":
            return cmd_eval(args)
        if args.cmd == "export-patches":
            return cmd_export(args)
        if args.cmd == "show-config":
            sys.stdout.write(dump_config(_config_from(args)))
            return 0
    except O.StageFailed as e:
        log.error("%s", e)
        return e.exit_code
    except (FileNotFoundError, ValueError) as e:
        log.error("%s", e)
        return 2
    return 1


if __name__ == "__main__":
    sys.exit(main())
