"""Command-line front door.

    u2a gen-data --out world/
    u2a train --data world/ --out world/model.json
    u2a train-reward --data world/ --out world/reward.json
    u2a unlearn-baseline --data world/ --model world/model.json --reward world/reward.json --out world/baseline.json
    u2a u2a --data world/ --model world/model.json --reward world/reward.json --out world/run.json
    u2a analyze --data world/ --model world/model.json --reward world/reward.json --out world/analysis/
    u2a eval --data world/ --model world/run.json --reward world/reward.json

Every command appends a line to ``manifest.jsonl`` next to its output.
Exit codes: 2 usage or config, 3 missing or malformed artifact, 4 numerical failure.
"""

import argparse
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import analysis, metrics
from .bilevel import Bilevel
from .config import load_config
from .errors import FormatError, U2AError
from .forget import InnerProblem
from .io import (
    dumps17,
    read_json,
    read_jsonl,
    read_sequences,
    write_csv,
    write_json,
)
from .policy import policy_from_json, policy_to_json, train_mle, validate_seq
from .reward import context_distribution, pairs_from_rows, reward_from_json, reward_to_json, train_reward
from .selector import FORMAT as RUN_FORMAT
from .selector import TRACE_HEADER, run_u2a
from .world import SyntheticWorldSpec, generate, write_world

log = logging.getLogger("u2a")

METRICS_FORMAT = "u2a-metrics-v1"
ANALYSIS_FORMAT = "u2a-analysis-v1"


# artifact loading


def load_world(data_dir):
    d = Path(data_dir)
    meta = read_json(d / "world.json")
    vocab = meta.get("vocab") if isinstance(meta, dict) else None
    if not isinstance(vocab, int) or vocab < 2:
        raise FormatError(f"{d / 'world.json'}: missing or bad 'vocab'")
    return vocab, meta


def load_split(data_dir, name, vocab):
    path = Path(data_dir) / f"{name}.jsonl"
    seqs = read_sequences(path)
    for i, s in enumerate(seqs):
        try:
            validate_seq(s, vocab)
        except ValueError as exc:
            raise FormatError(f"{path}: line {i + 1}: {exc}") from None
    return seqs


def load_theta(path, vocab=None):
    """Policy parameters from a policy artifact or from a run artifact's final theta."""
    doc = read_json(path)
    if isinstance(doc, dict) and doc.get("format") == RUN_FORMAT:
        try:
            doc = {"format": "u2a-policy-v1", "vocab": len(doc["theta_final"][0]), "theta": doc["theta_final"]}
        except (KeyError, IndexError, TypeError):
            raise FormatError(f"{path}: run artifact lacks theta_final") from None
    theta = policy_from_json(doc)
    if vocab is not None and theta.shape[1] != vocab:
        raise FormatError(f"{path}: model vocab {theta.shape[1]} does not match data vocab {vocab}")
    return theta


def load_reward(path, vocab):
    w = reward_from_json(read_json(path))
    if w.shape[1] != vocab:
        raise FormatError(f"{path}: reward vocab {w.shape[1]} does not match data vocab {vocab}")
    return w


def _stamp(doc, cfg):
    doc = dict(doc)
    doc["config_hash"] = cfg.hash()
    return doc


def _append_manifest(out_path, command, cfg, elapsed_ms):
    path = Path(out_path)
    manifest = (path if path.suffix == "" else path.parent) / "manifest.jsonl"
    manifest.parent.mkdir(parents=True, exist_ok=True)
    line = {"command": command, "config_hash": cfg.hash(), "seed": cfg.seed, "elapsed_ms": elapsed_ms}
    with open(manifest, "a", encoding="utf-8") as fh:
        fh.write(dumps17(line) + "\n")


# commands


def cmd_gen_data(args, cfg):
    spec_kw = {k: getattr(args, k) for k in _WORLD_FLAGS if getattr(args, k) is not None}
    if args.bad_tokens is not None:
        spec_kw["bad_tokens"] = tuple(args.bad_tokens)
    spec = SyntheticWorldSpec(seed=cfg.seed, **spec_kw)
    world = generate(spec)
    write_world(world, args.out)
    return args.out


def cmd_train(args, cfg):
    vocab, _ = load_world(args.data)
    train = load_split(args.data, "train", vocab)
    theta = train_mle(train, vocab, cfg.train_steps, cfg.train_lr)
    write_json(args.out, _stamp(policy_to_json(theta), cfg))
    return args.out


def cmd_train_reward(args, cfg):
    vocab, _ = load_world(args.data)
    pairs = pairs_from_rows(read_jsonl(Path(args.data) / "prefs.jsonl"), vocab)
    w = train_reward(pairs, vocab, cfg.reward_steps, cfg.reward_lr, cfg.reward_l2)
    write_json(args.out, _stamp(reward_to_json(w), cfg))
    return args.out


def _bilevel(args, cfg):
    vocab, _ = load_world(args.data)
    theta = load_theta(args.model, vocab)
    w = load_reward(args.reward, vocab)
    negatives = load_split(args.data, "negatives", vocab)
    retain = load_split(args.data, "retain", vocab)
    rho = context_distribution(retain, vocab)
    inner = InnerProblem(negatives, theta, cfg.loss(retain), cfg.inner())
    u = cfg.u2a()
    return Bilevel(inner, w, rho, u.outer, u.cg), u


def unlearn_uniform(bl):
    """Uniform weights over every candidate, inner problem solved directly."""
    omega = np.full(bl.n, 1.0 / bl.n)
    return omega, bl.inner.solve(omega)


def cmd_unlearn_baseline(args, cfg):
    bl, _ = _bilevel(args, cfg)
    omega, sol = unlearn_uniform(bl)
    doc = policy_to_json(sol.theta)
    doc["weights"] = omega.tolist()
    doc["J"] = bl.J(sol.theta)
    doc["inner_steps"] = sol.steps
    doc["grad_norm"] = sol.grad_norm
    write_json(args.out, _stamp(doc, cfg))
    return args.out


def cmd_u2a(args, cfg):
    bl, ucfg = _bilevel(args, cfg)
    run = run_u2a(bl, ucfg)
    write_json(args.out, _stamp(run.to_json(cfg.to_dict()), cfg))
    trace = args.trace or str(Path(args.out).with_suffix("")) + "_trace.csv"
    write_csv(trace, TRACE_HEADER, run.trace_rows())
    return args.out


def cmd_analyze(args, cfg):
    vocab, _ = load_world(args.data)
    theta = load_theta(args.model, vocab)
    w = load_reward(args.reward, vocab)
    negatives = load_split(args.data, "negatives", vocab)
    retain = load_split(args.data, "retain", vocab)
    rho = context_distribution(retain, vocab)
    loss = cfg.loss(retain)
    inner = cfg.inner()
    out = Path(args.out)
    records = analysis.impact_report(negatives, cfg.impact_omega, theta, w, rho, loss, inner)
    analysis.write_impact_csv(out / "impact.csv", records)
    ex = analysis.group_impact_experiment(
        negatives, theta, w, rho, cfg.groups, cfg.group_size, cfg.group_omega, loss, inner, cfg.seed
    )
    analysis.write_groups_csv(out / "groups.csv", ex.records)
    summary = dict(ex.summary)
    summary["spearman"] = None if np.isnan(ex.spearman) else ex.spearman
    write_json(out / "analysis.json", _stamp({"format": ANALYSIS_FORMAT, **summary}, cfg))
    return str(out)


def evaluate(theta, w, negatives, holdout, retain, k_percent):
    rho = context_distribution(retain, theta.shape[1])
    return {
        "mia_auc": metrics.mia_auc(theta, negatives, holdout, k_percent),
        "ppl": metrics.perplexity(theta, retain),
        "reward_value": metrics.reward_value(theta, w, rho),
    }


def cmd_eval(args, cfg):
    vocab, _ = load_world(args.data)
    theta = load_theta(args.model, vocab)
    w = load_reward(args.reward, vocab)
    res = evaluate(
        theta,
        w,
        load_split(args.data, "negatives", vocab),
        load_split(args.data, "holdout", vocab),
        load_split(args.data, "retain", vocab),
        cfg.k_percent,
    )
    print(dumps17(res))
    if args.out:
        write_json(args.out, _stamp({"format": METRICS_FORMAT, **res}, cfg))
    return args.out or args.model


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "train-reward": cmd_train_reward,
    "unlearn-baseline": cmd_unlearn_baseline,
    "u2a": cmd_u2a,
    "analyze": cmd_analyze,
    "eval": cmd_eval,
}

_WORLD_FLAGS = ("vocab", "n_bad", "min_len", "max_len", "n_train", "n_negatives", "n_retain", "n_holdout",
                "n_prefs", "bias", "pref_accuracy")

# flag -> (config key, type, help)
_CONFIG_FLAGS = {
    "--lambda": ("lambda", float, "regularization strength lam of the inner problem (default 1.0)"),
    "--beta": ("beta", float, "sparsity coefficient on sum sqrt(w) (default 0.5)"),
    "--delta": ("delta", float, "early-stop threshold on the per-iteration decrease of g (default 0.01)"),
    "--max-iters": ("T", int, "maximum greedy iterations T (default 100)"),
    "--inner-steps": ("inner_steps", int, "inner gradient-descent step cap (default 5000)"),
    "--inner-lr": ("inner_lr", float,
                   "inner learning rate (default 0.1; LLM-scale fine-tuning uses about 4e-6, "
                   "far too small for the bigram policy)"),
    "--inner-tol": ("inner_tol", float, "inner stationarity tolerance on ||grad f|| (default 1e-8)"),
    "--outer-lr": ("outer_lr", float, "outer projected-gradient learning rate (default 3e-2)"),
    "--outer-steps": ("outer_steps", int, "outer steps per support (default 300)"),
    "--cg-tol": ("cg_tol", float, "relative CG residual tolerance (default 1e-8)"),
    "--cg-max-iters": ("cg_max_iters", int, "CG iteration cap (default 200)"),
    "--forget-loss": ("forget_loss", str, "forget loss: ga, graddiff or npo (default ga)"),
    "--npo-beta": ("npo_beta", float, "NPO temperature (default 0.1)"),
    "--retain-weight": ("retain_weight", float, "retain term weight for graddiff (default 1.0)"),
    "--gain-sign": ("gain_sign", str, "greedy pick: 'min' (steepest decrease of g) or 'max' (default min)"),
    "--k-percent": ("k_percent", float, "k of the Min-k%% Prob score (default 20)"),
    "--seed": ("seed", int, "master seed (default 0)"),
}


def build_parser():
    p = argparse.ArgumentParser(prog="u2a", description="Weighted unlearning for alignment on a bigram policy.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file; flags given on the command line win")
    for flag, (_, typ, hlp) in _CONFIG_FLAGS.items():
        common.add_argument(flag, type=typ, default=None, help=hlp)

    def needs(sp, *names):
        for n in names:
            sp.add_argument(f"--{n}", required=True)

    g = sub.add_parser("gen-data", parents=[common], help="write a synthetic world")
    g.add_argument("--out", required=True, help="output directory")
    for name in _WORLD_FLAGS:
        typ = float if name in ("bias", "pref_accuracy") else int
        g.add_argument("--" + name.replace("_", "-"), dest=name, type=typ, default=None)
    g.add_argument("--bad-tokens", type=int, nargs="+", default=None)

    for name, hlp in (("train", "fit the bigram policy"), ("train-reward", "fit the pairwise reward table")):
        sp = sub.add_parser(name, parents=[common], help=hlp)
        needs(sp, "data", "out")

    for name, hlp in (
        ("unlearn-baseline", "uniform-weight unlearning over all negatives"),
        ("u2a", "greedy weighted unlearning-set selection"),
        ("analyze", "per-sample and group impact of unlearning on J"),
    ):
        sp = sub.add_parser(name, parents=[common], help=hlp)
        needs(sp, "data", "model", "reward", "out")
        if name == "u2a":
            sp.add_argument("--trace", help="trace CSV path (default <out>_trace.csv)")

    e = sub.add_parser("eval", parents=[common], help="print mia_auc, ppl and reward_value as JSON")
    needs(e, "data", "model", "reward")
    e.add_argument("--out", help="also write the metrics JSON here")
    return p


def config_from_args(args):
    overrides = {key: getattr(args, flag[2:].replace("-", "_")) for flag, (key, _, _) in _CONFIG_FLAGS.items()}
    return load_config(args.config, overrides)


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        cfg = config_from_args(args)
        t0 = time.perf_counter()
        out = COMMANDS[args.command](args, cfg)
        elapsed = (time.perf_counter() - t0) * 1e3
        if out:
            _append_manifest(out, args.command, cfg, elapsed)
    except U2AError as exc:
        print(f"u2a {args.command}: {exc}", file=sys.stderr)
        return exc.exit_code
    except (ArithmeticError, FloatingPointError) as exc:
        print(f"u2a {args.command}: numerical failure: {exc}", file=sys.stderr)
        return 4
    except OSError as exc:
        print(f"u2a {args.command}: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
