"""``fedkgc`` command line: gen, train, eval, gradcheck.

Exit codes: 0 success, 1 config error, 2 data/IO error, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import re
import sys
import time

from . import __version__
from .config import ConfigError, ExperimentConfig, dump_json, load_experiment, load_gen
from .datagen import GenerationError, generate, overlap_report
from .encoder import CheckpointError, EncoderConfig, load_weights, save_weights
from .evaluation import combine_reports, evaluate, report_json
from .federation import (ClientHandle, ClientTrainingError, run_data_aggregation, run_federated,
                         run_isolated, weights_for_client)
from .gradcheck import run_gradcheck
from .kg import KGFormatError, load_kg

log = logging.getLogger("fedkgc")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_RUNTIME = 0, 1, 2, 3
MODE_ALIASES = {"federated": "federated", "data_agg": "data_aggregation",
                "data_aggregation": "data_aggregation", "isolated": "isolated"}


class DataError(Exception):
    pass


def _threads(args) -> int:
    if args.threads is not None:
        return max(1, args.threads)
    env = os.environ.get("FEDKGC_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise ConfigError(f"FEDKGC_THREADS must be an integer, got {env!r}") from None
    return 1


def _natural_key(name: str):
    return [int(p) if p.isdigit() else p for p in re.split(r"(\d+)", name)]


def client_dirs(data_dir: str, names=()) -> list[str]:
    if not os.path.isdir(data_dir):
        raise DataError(f"data directory not found: {data_dir}")
    if not names:
        names = sorted((n for n in os.listdir(data_dir)
                        if os.path.isfile(os.path.join(data_dir, n, "entities.tsv"))), key=_natural_key)
    if not names:
        raise DataError(f"no client directories under {data_dir}")
    return [os.path.join(data_dir, n) for n in names]


def _write(path: str, text: str) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


# -- gen ----------------------------------------------------------------------------

def cmd_gen(args) -> int:
    cfg = load_gen(args.config)
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    dirs = generate(cfg, args.out)
    report = overlap_report(dirs) if len(dirs) > 1 else {"clients": [os.path.basename(d) for d in dirs], "pairs": []}
    _write(os.path.join(args.out, "overlap_report.json"), dump_json(report))
    for d in dirs:
        g = load_kg(d)
        print(f"{g.client_name}: {g.num_entities} entities, {g.num_relations} relations, "
              f"{len(g.train)}/{len(g.valid)}/{len(g.test)} train/valid/test")
    return EXIT_OK


# -- train --------------------------------------------------------------------------

def _resolve_data(cfg: ExperimentConfig, data_arg: str | None, out: str) -> str:
    if data_arg:
        return data_arg
    if cfg.data.path:
        return cfg.data.path
    gen = cfg.data.gen_config()
    if gen is None:
        raise ConfigError("no data: pass --data, set data.path, or give a data.gen section")
    path = os.path.join(out, "data")
    generate(gen, path)
    return path


def cmd_train(args) -> int:
    cfg = load_experiment(args.config)
    if args.mode:
        cfg = cfg.replace(fed=dataclasses.replace(cfg.fed, mode=MODE_ALIASES[args.mode]))
    if args.seed is not None:
        cfg = cfg.replace(fed=dataclasses.replace(cfg.fed, seed=args.seed),
                          train=dataclasses.replace(cfg.train, seed=args.seed))
    threads = _threads(args)
    os.makedirs(args.out, exist_ok=True)
    data_dir = _resolve_data(cfg, args.data, args.out)
    dirs = client_dirs(data_dir, cfg.data.clients)
    graphs = [load_kg(d) for d in dirs]
    names = [g.client_name for g in graphs]
    if cfg.fed.mode == "federated" and cfg.fed.clients_per_round > len(graphs):
        raise ConfigError(f"clients_per_round={cfg.fed.clients_per_round} exceeds {len(graphs)} clients")
    resolved = cfg.to_dict()
    resolved["data"]["path"] = os.path.abspath(data_dir)
    resolved["data"]["clients"] = names
    _write(os.path.join(args.out, "config.json"), dump_json(resolved))

    metrics = open(os.path.join(args.out, "metrics.jsonl"), "w", encoding="utf-8", newline="\n")

    def on_step(round_idx, client, step, loss):
        metrics.write(json.dumps({"round": round_idx, "client": client, "step": step, "loss": loss}) + "\n")

    enc, tr, fed = cfg.encoder, cfg.train, cfg.fed
    rounds = []
    try:
        if fed.mode == "federated":
            clients = [ClientHandle(i, g, enc) for i, g in enumerate(graphs)]
            res = run_federated(clients, fed, tr, enc, threads=threads, on_step=on_step)
            save_weights(res.global_weights, os.path.join(args.out, "global.ckpt"))
            for i, w in sorted(res.local_weights.items()):
                save_weights(w, os.path.join(args.out, f"client_{i}.ckpt"))
            rounds = [r.to_json() for r in res.history]
        elif fed.mode == "data_aggregation":
            w, history = run_data_aggregation(graphs, fed, tr, enc, on_step=on_step)
            save_weights(w, os.path.join(args.out, "global.ckpt"))
            rounds = [r.to_json() for r in history]
        else:
            for i, g in enumerate(graphs):
                w, history = run_isolated(g, i, fed, tr, enc, on_step=on_step)
                save_weights(w, os.path.join(args.out, f"client_{i}.ckpt"))
                rounds += [dict(r.to_json(), client=i) for r in history]
    finally:
        metrics.close()
    _write(os.path.join(args.out, "rounds.jsonl"), "".join(json.dumps(r, sort_keys=True) + "\n" for r in rounds))
    _write(os.path.join(args.out, "run.json"),
           dump_json({"version": __version__, "mode": fed.mode, "clients": names,
                      "timestamp": time.strftime("%Y-%m-%dT%H:%M:%S%z")}))
    print(f"{fed.mode}: {len(rounds)} round records written to {args.out}")
    return EXIT_OK


# -- eval ---------------------------------------------------------------------------

def _load_ckpt(path: str, enc: EncoderConfig):
    if not os.path.isfile(path):
        raise DataError(f"missing checkpoint {path}")
    try:
        return load_weights(path, enc)
    except CheckpointError as exc:
        raise DataError(str(exc)) from None


def cmd_eval(args) -> int:
    cfg_path = os.path.join(args.run, "config.json")
    if not os.path.isfile(cfg_path):
        raise DataError(f"missing {cfg_path}")
    cfg = load_experiment(cfg_path)
    threads = _threads(args)
    data_dir = args.data or cfg.data.path
    if not data_dir:
        raise ConfigError("no data directory: pass --data")
    graphs = [load_kg(d) for d in client_dirs(data_dir, cfg.data.clients)]
    enc, fed = cfg.encoder, cfg.fed
    reports, dump = [], [] if args.dump_ranks else None
    glob = None
    if fed.mode in ("federated", "data_aggregation"):
        glob = _load_ckpt(os.path.join(args.run, "global.ckpt"), enc)
    for i, g in enumerate(graphs):
        if fed.mode == "federated":
            local_path = os.path.join(args.run, f"client_{i}.ckpt")
            local = _load_ckpt(local_path, enc) if os.path.isfile(local_path) else None
            if fed.eval_weights == "local" and local is None:
                raise DataError(f"missing checkpoint {local_path}")
            w = weights_for_client(glob, local, fed.scope, fed.eval_weights)
        elif fed.mode == "data_aggregation":
            w = glob
        else:
            w = _load_ckpt(os.path.join(args.run, f"client_{i}.ckpt"), enc)
        per_query = [] if dump is not None else None
        rep = evaluate(w, g, args.split, cfg.eval, enc, threads=threads, dump=per_query)
        reports.append(rep)
        if dump is not None:
            dump += [dict(r.to_json(), client=g.client_name) for r in per_query]
    _write(os.path.join(args.run, "metrics_report.json"), report_json(reports))
    if dump is not None:
        _write(os.path.join(args.run, "ranks.jsonl"),
               "".join(json.dumps(r, sort_keys=True) + "\n" for r in dump))
    print(format_table(reports))
    return EXIT_OK


def format_table(reports) -> str:
    rows = [f"{'client':<12} {'H@1':>7} {'H@10':>7} {'MRR':>7} {'queries':>8} {'skipped':>8}"]
    for r in list(reports) + [combine_reports(reports)]:
        j = r.to_json()
        rows.append(f"{r.client:<12} {j['hits1']:>7.1f} {j['hits10']:>7.1f} {j['mrr']:>7.1f} "
                    f"{j['query_count']:>8d} {j['skipped_count']:>8d}")
    return "\n".join(rows)


# -- gradcheck ------------------------------------------------------------------------

def cmd_gradcheck(args) -> int:
    tol = args.tol if args.tol is not None else (1e-5 if args.eps >= 1e-4 else 1e-4)
    results = run_gradcheck(seeds=range(args.seeds), eps=args.eps, rel_tol=tol, corrupt=args.corrupt_gradient)
    worst = max(results, key=lambda r: r.max_rel_error)
    failed = [r for r in results if not r.passed]
    print(f"seeds={len(results)} eps={args.eps:g} max relative error {worst.max_rel_error:.3e} (tolerance {tol:g})")
    if failed:
        r = failed[0]
        print(f"FAIL seed {r.seed}: parameter {r.worst_param!r} index {list(r.worst_index)} "
              f"relative error {r.max_rel_error:.3e}", file=sys.stderr)
        return EXIT_CONFIG
    print("PASS")
    return EXIT_OK


# -- entry point ------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fedkgc", description="Federated multilingual KG completion simulator.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", metavar="COMMAND", required=True)

    g = sub.add_parser("gen", help="generate synthetic client KGs")
    g.add_argument("--config", help="GenConfig JSON file (defaults if omitted)")
    g.add_argument("--out", required=True, help="output directory for client dirs")
    g.add_argument("--seed", type=int, help="override the generator seed")
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="run federated, data-aggregation or isolated training")
    t.add_argument("--config", help="experiment JSON file (defaults if omitted)")
    t.add_argument("--data", help="directory holding one subdirectory per client")
    t.add_argument("--out", required=True, help="run directory to write")
    t.add_argument("--mode", choices=["federated", "data_agg", "isolated"], help="override fed.mode")
    t.add_argument("--seed", type=int, help="override fed.seed and train.seed")
    t.add_argument("--threads", type=int, help="worker threads (env FEDKGC_THREADS)")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a run directory")
    e.add_argument("--run", required=True, help="run directory written by train")
    e.add_argument("--data", help="data directory (defaults to the one recorded in the run)")
    e.add_argument("--split", default="test", choices=["train", "valid", "test"], help="split to rank")
    e.add_argument("--dump-ranks", action="store_true", help="write per-query ranks to ranks.jsonl")
    e.add_argument("--threads", type=int, help="worker threads (env FEDKGC_THREADS)")
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("gradcheck", help="finite-difference check of the loss gradients")
    c.add_argument("--seeds", type=int, default=10, help="number of random problems")
    c.add_argument("--eps", type=float, default=1e-4, help="central-difference step")
    c.add_argument("--tol", type=float, help="relative tolerance (1e-5, or 1e-4 when eps < 1e-4)")
    c.add_argument("--corrupt-gradient", action="store_true", help="test hook: perturb one analytic partial")
    c.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, GenerationError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, KGFormatError, CheckpointError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ClientTrainingError as exc:
        print(f"training failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as exc:  # noqa: BLE001
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
