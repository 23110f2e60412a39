"""Command-line surface: infer, train, oracle-check, report.

Every run writes a self-describing directory: manifest.json (resolved
config, input digest, version, timestamps; written before sampling
starts and finalized after), metrics.jsonl (one JSON object per rank
for infer, per epoch for train), trees.nwk (max-weight particle) and
summary.json. Metrics lines never contain wall-clock fields and all
values are reduced in a fixed order, so reruns with the same seed are
byte-identical regardless of --threads; timings live in summary.json.

report turns a run's metrics.jsonl into metrics.csv and renders the
matching figures (rank profile for infer; ELBO and ESS traces for
train) as PNG files in the same directory.

Exit codes: 0 success, 2 bad flags, 3 input errors, 4 numerical
failure, each with a one-line stderr diagnostic.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import math
import os
import sys
import time
from datetime import datetime, timezone

import numpy as np

from . import __version__
from . import rng as rngmod
from .evomodel import build_gtr, build_jc69, load_params, save_params
from .ncsmc import run_ncsmc
from .oracle import GridSpec, exact_Z_grid
from .seqio import SeqIOError, read_alignment
from .smc import ProposalParams, default_params, run_csmc
from .trees import to_newick
from .vi import TrainConfig, train


class _CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        print("error: %s" % message, file=sys.stderr)
        raise SystemExit(2)


def _json_default(o):
    if isinstance(o, np.integer):
        return int(o)
    if isinstance(o, np.floating):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, tuple):
        return list(o)
    raise TypeError("not serializable: %r" % (o,))


def _dump(obj) -> str:
    return json.dumps(obj, sort_keys=True, default=_json_default,
                      separators=(", ", ": "))


def _now() -> str:
    return datetime.now(timezone.utc).isoformat()


def _digest(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        h.update(fh.read())
    return h.hexdigest()


def _resolve_threads(args) -> int:
    if args.threads is not None:
        n = args.threads
    else:
        raw = os.environ.get("PHYLO_THREADS", "1")
        try:
            n = int(raw)
        except ValueError:
            raise _CliError(2, "PHYLO_THREADS must be an integer, got %r" % raw)
    if n < 1:
        raise _CliError(2, "thread count must be at least 1")
    return n


def _load_input(path: str):
    if not os.path.exists(path):
        raise _CliError(3, "input file not found: %s" % path)
    try:
        return read_alignment(path)
    except SeqIOError as exc:
        raise _CliError(3, "could not parse %s: %s" % (path, exc))


def _check_flags(args):
    if not (math.isfinite(args.lambda_bl) and args.lambda_bl > 0):
        raise _CliError(2, "--lambda-bl must be positive and finite")
    if args.particles < 1:
        raise _CliError(2, "--particles must be at least 1")
    if getattr(args, "subsamples", 1) < 1:
        raise _CliError(2, "--subsamples must be at least 1")


def _build_model(args):
    if args.model == "jc69":
        return build_jc69()
    if getattr(args, "params_file", None):
        if not os.path.exists(args.params_file):
            raise _CliError(3, "params file not found: %s" % args.params_file)
        return load_params(args.params_file)
    return build_gtr(np.zeros(10))


def _write_manifest(out_dir: str, command: str, config: dict, digest: str,
                    start: str, end=None):
    manifest = {
        "command": command,
        "config": config,
        "input_digest": digest,
        "seed": config["seed"],
        "version": __version__,
        "start_time": start,
        "end_time": end,
    }
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        fh.write(_dump(manifest) + "\n")
    return start


def _write_jsonl(path: str, records):
    with open(path, "w") as fh:
        for rec in records:
            fh.write(_dump(rec) + "\n")


def _write_json(path: str, obj):
    with open(path, "w") as fh:
        fh.write(_dump(obj) + "\n")


def _parse_grid(text: str) -> GridSpec:
    values, probs = [], []
    try:
        for part in text.split(","):
            v, p = part.split(":")
            values.append(float(v))
            probs.append(float(p))
        return GridSpec(values=tuple(values), probs=tuple(probs))
    except (ValueError, TypeError) as exc:
        raise _CliError(2, "bad --grid %r: %s" % (text, exc))


# ---------------------------------------------------------------------------
# infer

def cmd_infer(args) -> int:
    threads = _resolve_threads(args)
    _check_flags(args)
    aln = _load_input(args.input)
    model = _build_model(args)
    os.makedirs(args.out, exist_ok=True)
    config = {
        "input": args.input, "method": args.method, "particles": args.particles,
        "subsamples": args.subsamples, "model": args.model, "seed": args.seed,
        "out": args.out, "lambda_bl": args.lambda_bl, "threads": threads,
    }
    start = _write_manifest(args.out, "infer", config, _digest(args.input),
                            _now())
    params = default_params(lambda_bl=args.lambda_bl)
    tic = time.perf_counter()
    try:
        if args.method == "csmc":
            system, log_z = run_csmc(aln, model, params, args.particles,
                                     args.seed, threads=threads)
        else:
            system, log_z = run_ncsmc(aln, model, params, args.particles,
                                      args.subsamples, args.seed,
                                      threads=threads)
    except (ValueError, FloatingPointError) as exc:
        print("numerical failure: %s" % exc, file=sys.stderr)
        return 4
    wall = time.perf_counter() - tic
    if not math.isfinite(log_z):
        print("numerical failure: non-finite log marginal estimate",
              file=sys.stderr)
        return 4

    records = []
    n = aln.n_taxa
    for r in range(1, n):
        rec = {"rank": r,
               "log_avg_weight": float(system.per_rank_log_avg[r - 1]),
               "ess": float(system.ess_by_rank[r - 1])}
        if args.method == "ncsmc":
            f = n - r + 1
            rec["L"] = f * (f - 1) // 2
            rec["M"] = args.subsamples
            rec["max_log_potential"] = float(
                system.max_log_potential_by_rank[r - 1])
        records.append(rec)
    _write_jsonl(os.path.join(args.out, "metrics.jsonl"), records)

    best = system.particles[system.best_index]
    with open(os.path.join(args.out, "trees.nwk"), "w") as fh:
        fh.write(to_newick(best.trees[0], aln.taxa) + "\n")
    _write_json(os.path.join(args.out, "summary.json"), {
        "log_Zhat": float(log_z),
        "ess_by_rank": [float(e) for e in system.ess_by_rank],
        "wall_seconds": wall,
    })
    _write_manifest(args.out, "infer", config, _digest(args.input), start,
                    end=_now())
    print("log_Zhat %.6f  (%d ranks, K=%d)" % (log_z, n - 1, args.particles))
    return 0


# ---------------------------------------------------------------------------
# train

def cmd_train(args) -> int:
    threads = _resolve_threads(args)
    _check_flags(args)
    aln = _load_input(args.input)
    if args.learn_model and args.model != "gtr":
        print("error: --learn-model requires --model gtr", file=sys.stderr)
        return 2
    estimator = {"drop": "drop_discrete", "gumbel": "gumbel_softmax"}[args.estimator]
    theta_init = None
    if args.model == "gtr" and getattr(args, "params_file", None):
        theta_init = tuple(load_params(args.params_file).theta)
    try:
        config = TrainConfig(
            objective=args.objective, estimator=estimator, K=args.particles,
            M=args.subsamples, epochs=args.epochs, learning_rate=args.lr,
            batch_fraction=args.batch_frac,
            gumbel_temperature=args.gs_temp, seed=args.seed,
            lambda_bl=args.lambda_bl, learn_model=args.learn_model,
            model_kind=args.model, theta_init=theta_init, threads=threads)
    except ValueError as exc:
        print("error: %s" % exc, file=sys.stderr)
        return 2
    os.makedirs(args.out, exist_ok=True)
    flags = {
        "input": args.input, "objective": args.objective,
        "particles": args.particles, "subsamples": args.subsamples,
        "model": args.model, "seed": args.seed, "out": args.out,
        "lambda_bl": args.lambda_bl, "epochs": args.epochs, "lr": args.lr,
        "batch_frac": args.batch_frac, "estimator": args.estimator,
        "gs_temp": args.gs_temp, "learn_model": args.learn_model,
        "snapshot_every": args.snapshot_every, "threads": threads,
    }
    start = _write_manifest(args.out, "train", flags, _digest(args.input),
                            _now())
    tic = time.perf_counter()
    try:
        result = train(aln, config)
    except (ValueError, FloatingPointError) as exc:
        print("numerical failure: %s" % exc, file=sys.stderr)
        return 4
    wall = time.perf_counter() - tic
    if not math.isfinite(result.final_log_zhat):
        print("numerical failure: non-finite final estimate", file=sys.stderr)
        return 4

    records = []
    for rec in result.trace.records:
        out = {k: v for k, v in rec.items() if k != "wall_seconds"}
        records.append(out)
    _write_jsonl(os.path.join(args.out, "metrics.jsonl"), records)
    with open(os.path.join(args.out, "trees.nwk"), "w") as fh:
        fh.write(to_newick(result.best_tree, aln.taxa) + "\n")
    save_params(result.model, os.path.join(args.out, "params.json"))
    if args.snapshot_every > 0:
        for rec in result.trace.records:
            if rec["epoch"] % args.snapshot_every == 0:
                _write_json(
                    os.path.join(args.out, "params_epoch%d.json" % rec["epoch"]),
                    {"theta": list(rec["theta_snapshot"]),
                     "psi": list(rec["psi_snapshot"])})
    _write_json(os.path.join(args.out, "summary.json"), {
        "log_Zhat": float(result.final_log_zhat),
        "ess_by_rank": [float(e) for e in result.final_system.ess_by_rank],
        "wall_seconds": wall,
        "psi": list(np.atleast_1d(np.asarray(result.params.psi, dtype=np.float64))),
        "lambda_bl": result.params.lambda_bl,
    })
    _write_manifest(args.out, "train", flags, _digest(args.input), start,
                    end=_now())
    last = result.trace.records[-1]
    print("final ELBO estimate %.6f after %d epochs; log_Zhat %.6f"
          % (last["elbo_estimate"], args.epochs, result.final_log_zhat))
    return 0


# ---------------------------------------------------------------------------
# oracle check

def cmd_oracle(args) -> int:
    _check_flags(args)
    if args.reps < 2:
        raise _CliError(2, "--reps must be at least 2")
    aln = _load_input(args.input)
    grid = _parse_grid(args.grid)
    if args.model == "jc69":
        model = build_jc69()
    else:
        model = build_gtr(np.zeros(10))
    params = ProposalParams(psi=math.log(args.lambda_bl),
                            lambda_bl=args.lambda_bl, grid=grid)
    try:
        exact = exact_Z_grid(aln, model, grid, args.lambda_bl)
    except ValueError as exc:
        print("guard violation: %s" % exc, file=sys.stderr)
        return 3

    def z_for(run_one, label, K, extra=""):
        ratios = np.empty(args.reps)
        for rep in range(args.reps):
            _, log_z = run_one(rngmod.derive_seed(args.seed, 3, rep))
            ratios[rep] = math.exp(log_z - exact)
        mean = float(np.mean(ratios))
        stderr = float(np.std(ratios, ddof=1)) / math.sqrt(args.reps)
        z = (mean - 1.0) / stderr if stderr > 0 else 0.0
        print("%s: exact log Z %.10f  mean Zhat/Z %.6f  stderr %.6f  z %+.3f"
              % (label, exact, mean, stderr, z))
        return z

    z_csmc = z_for(lambda s: run_csmc(aln, model, params, args.particles, s),
                   "csmc", args.particles)
    z_ncsmc = z_for(lambda s: run_ncsmc(aln, model, params,
                                        args.ncsmc_particles, args.subsamples, s),
                    "ncsmc", args.ncsmc_particles)
    ok = abs(z_csmc) < 3.0 and abs(z_ncsmc) < 3.0
    print("unbiasedness %s" % ("PASS" if ok else "FAIL"))
    return 0 if ok else 1


# ---------------------------------------------------------------------------
# report

def _flatten(rec: dict) -> dict:
    out = {}
    for k, v in rec.items():
        if isinstance(v, (list, tuple)):
            for i, x in enumerate(v):
                out["%s_%d" % (k, i)] = x
        else:
            out[k] = v
    return out


def cmd_report(args) -> int:
    run_dir = args.run
    metrics_path = os.path.join(run_dir, "metrics.jsonl")
    manifest_path = os.path.join(run_dir, "manifest.json")
    if not os.path.exists(metrics_path) or not os.path.exists(manifest_path):
        print("not a run directory (missing manifest.json or metrics.jsonl): %s"
              % run_dir, file=sys.stderr)
        return 3
    with open(manifest_path) as fh:
        manifest = json.load(fh)
    records = []
    with open(metrics_path) as fh:
        for line in fh:
            line = line.strip()
            if line:
                records.append(json.loads(line))
    if not records:
        print("metrics.jsonl is empty: %s" % metrics_path, file=sys.stderr)
        return 3

    import csv
    flat = [_flatten(r) for r in records]
    cols = []
    for row in flat:
        for k in row:
            if k not in cols:
                cols.append(k)
    csv_path = os.path.join(run_dir, "metrics.csv")
    with open(csv_path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=cols)
        writer.writeheader()
        writer.writerows(flat)

    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    figures = []
    if manifest["command"] == "infer":
        ranks = [r["rank"] for r in records]
        fig, axes = plt.subplots(2, 1, figsize=(7, 6), sharex=True)
        axes[0].plot(ranks, [r["log_avg_weight"] for r in records],
                     marker="o")
        axes[0].set_ylabel("log avg weight")
        axes[1].plot(ranks, [r["ess"] for r in records], marker="o",
                     color="tab:orange")
        axes[1].set_ylabel("ESS")
        axes[1].set_xlabel("rank")
        fig.suptitle("per-rank sweep profile")
        path = os.path.join(run_dir, "rank_profile.png")
        fig.savefig(path, dpi=120)
        plt.close(fig)
        figures.append(path)
    else:
        epochs = [r["epoch"] for r in records]
        elbo = np.array([r["elbo_estimate"] for r in records])
        window = min(5, len(elbo))
        moving = np.array([elbo[max(0, i - window + 1):i + 1].mean()
                           for i in range(len(elbo))])
        fig, ax = plt.subplots(figsize=(7, 4))
        ax.plot(epochs, elbo, alpha=0.4, label="per-epoch")
        ax.plot(epochs, moving, label="%d-epoch moving avg" % window)
        ax.set_xlabel("epoch")
        ax.set_ylabel("ELBO estimate")
        ax.legend()
        fig.tight_layout()
        path = os.path.join(run_dir, "elbo_trace.png")
        fig.savefig(path, dpi=120)
        plt.close(fig)
        figures.append(path)

        fig, ax = plt.subplots(figsize=(7, 4))
        ax.plot(epochs, [r["ess_min"] for r in records], label="ESS min")
        ax.plot(epochs, [r["ess_mean"] for r in records], label="ESS mean")
        ax.set_xlabel("epoch")
        ax.set_ylabel("ESS")
        ax.legend()
        fig.tight_layout()
        path = os.path.join(run_dir, "ess_trace.png")
        fig.savefig(path, dpi=120)
        plt.close(fig)
        figures.append(path)

    print("wrote %s and %d figure(s)" % (csv_path, len(figures)))
    return 0


# ---------------------------------------------------------------------------
# parser

def _add_common(p):
    p.add_argument("--input", required=True, help="FASTA or PHYLIP alignment")
    p.add_argument("--model", choices=["jc69", "gtr"], default="jc69")
    p.add_argument("--params-file", default=None,
                   help="model params JSON for --model gtr")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--lambda-bl", type=float, default=10.0,
                   help="exponential branch-length prior rate")
    p.add_argument("--threads", type=int, default=None,
                   help="worker pool size (default: PHYLO_THREADS or 1)")


def build_parser() -> _Parser:
    parser = _Parser(prog="phylosmc",
                     description="SMC phylogenetic inference and training")
    sub = parser.add_subparsers(dest="cmd", required=True,
                                parser_class=_Parser)

    p = sub.add_parser("infer", help="one sampling sweep")
    _add_common(p)
    p.add_argument("--method", choices=["csmc", "ncsmc"], default="csmc")
    p.add_argument("--particles", type=int, required=True)
    p.add_argument("--subsamples", type=int, default=1,
                   help="branch draws per pair (ncsmc)")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("train", help="variational training")
    _add_common(p)
    p.add_argument("--objective", choices=["vcsmc", "vncsmc"],
                   default="vcsmc")
    p.add_argument("--particles", type=int, required=True)
    p.add_argument("--subsamples", type=int, default=1)
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--batch-frac", type=float, default=1.0)
    p.add_argument("--estimator", choices=["drop", "gumbel"],
                   default="drop")
    p.add_argument("--gs-temp", type=float, default=0.5)
    p.add_argument("--learn-model", action="store_true")
    p.add_argument("--snapshot-every", type=int, default=0,
                   help="write params snapshots every N epochs")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("oracle-check", help="unbiasedness check vs exact sum")
    p.add_argument("--input", required=True)
    p.add_argument("--model", choices=["jc69", "gtr"], default="jc69")
    p.add_argument("--grid", required=True,
                   help="branch grid 'v1:p1,v2:p2,...'")
    p.add_argument("--reps", type=int, default=10000)
    p.add_argument("--particles", type=int, default=16)
    p.add_argument("--ncsmc-particles", type=int, default=8)
    p.add_argument("--subsamples", type=int, default=2)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--lambda-bl", type=float, default=10.0)
    p.set_defaults(func=cmd_oracle)

    p = sub.add_parser("report", help="CSV and figures from a run directory")
    p.add_argument("--run", required=True, help="run output directory")
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except _CliError as exc:
        print("error: %s" % exc, file=sys.stderr)
        return exc.code
    except OSError as exc:
        print("error: %s" % exc, file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
