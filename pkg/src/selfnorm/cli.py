"""Command-line entry point: ``selfnorm <command> ...``."""

from __future__ import annotations

import argparse
import json
import math
import sys

import numpy as np

from . import analysis as an
from . import environments as envs
from . import harness as hs
from .gram import GramState
from .predictors import vaw_pinv_batch


def _emit(text, out):
    if out:
        with open(out, "w") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def cmd_simulate(args):
    cfg = hs.ExperimentConfig.load(args.config)
    res = hs.monte_carlo(cfg, workers=args.workers)
    _emit(res.to_csv(), args.out or cfg.output)
    if cfg.trace and res.traces:
        with open((args.out or cfg.output or "traces") + ".traces.jsonl", "w") as fh:
            fh.write("\n".join(res.traces) + "\n")
    if res.fit:
        print(json.dumps({"fit": res.fit}), file=sys.stderr)
    return 0


def cmd_lowerbound(args):
    T_list = args.T
    if args.which == "d2":
        records, info = hs.lowerbound_d2(T_list, args.reps, args.seed, d=args.d, eps_level=args.eps)
    elif args.which == "onedim":
        records, info = hs.lowerbound_onedim(T_list, args.reps, args.seed)
    else:
        records, info = hs.lowerbound_tightness(T_list, args.reps, args.seed, C=args.C), None
    _emit(hs.records_to_csv(records), args.out)
    summary = {"aggregates": {str(k): v for k, v in hs.aggregate(records).items()}}
    if info is not None:
        summary["info"] = {str(k): v for k, v in info.items()}
    if len(set(T_list)) >= 4:
        means = [summary["aggregates"][str(T)]["mean"] for T in T_list]
        summary["fit"] = hs.scaling_fit(T_list, means)
    print(json.dumps(summary, default=float), file=sys.stderr)
    return 0


# ------------------------------------------------------------ verify suites

def suite_identities(rng, seed):
    out = []
    for d in (1, 2, 3):
        for gname, G in (("0", None), ("I", np.eye(d))):
            worst = 0.0
            for _ in range(200):
                T = int(rng.integers(1, 40))
                tr = an.RunTrace(rng.standard_normal((T, d)) * 10.0 ** rng.uniform(-3, 3),
                                 rng.standard_normal(T), rng.uniform(-1, 1, T))
                worst = max(worst, *an.identity_residuals(tr, G))
            out.append(an.verdict("identities", {"d": d, "Gamma": gname}, worst, 1e-8, worst <= 1e-8, seed))
    return out


def suite_moments(rng, seed, n_trees=20, T=12):
    out = []
    for k in range(n_trees):
        tree = envs.DyadicTree.random(T, 1, rng)
        m = an.exp_moment(tree, 0.25)
        R = envs.tree_selfnorm_values(tree)
        out.append(an.verdict("exp_moment", {"tree": k, "T": T}, m, an.moment_bound(T, 0.25),
                              m <= an.moment_bound(T, 0.25), seed))
        out.append(an.verdict("mean_selfnorm", {"tree": k, "T": T}, R.mean(), an.mean_selfnorm_bound(T),
                              R.mean() <= an.mean_selfnorm_bound(T), seed))
        frac = float(np.mean(R > an.markov_threshold(T, 0.1)))
        out.append(an.verdict("markov_tail", {"tree": k, "T": T, "delta": 0.1}, frac, 0.1, frac <= 0.1, seed))
    return out


def suite_supermg(rng, seed, runs=2000, T=100, d=2):
    X = rng.standard_normal((runs, T, d))
    Y = rng.standard_normal((runs, T))
    preds, _ = vaw_pinv_batch(X, Y)
    logM = an.supermartingale_log_path(1.0, preds, Y)
    MT = np.exp(logM[:, -1])
    se = MT.std(ddof=1) / math.sqrt(runs)
    cross = float(np.mean(logM.max(axis=1) >= math.log(20)))
    cse = math.sqrt(0.05 * 0.95 / runs)
    return [an.verdict("supermg_mean", {"runs": runs, "T": T}, MT.mean(), 1 + 3 * se, MT.mean() <= 1 + 3 * se, seed),
            an.verdict("supermg_crossing", {"runs": runs, "T": T, "level": 20}, cross, 0.05 + 3 * cse,
                       cross <= 0.05 + 3 * cse, seed)]


def suite_badseq(rng, seed, reps=100):
    out = []
    worst = 0
    for _ in range(reps):
        n, d = int(rng.integers(1, 15)), int(rng.integers(1, 4))
        X = rng.standard_normal((n, d))
        for r in (1.0, 0.5, 0.25):
            g, e = an.bad_subseq_greedy(X, r), an.bad_subseq_exact(X, r)
            worst = max(worst, g.length - e.length)
    out.append(an.verdict("greedy_le_exact", {"reps": reps}, worst, 0, worst <= 0, seed))
    for d in (1, 2):
        for r in (0.5, 0.25):
            rate, se, thr = an.iid_bad_bound_check(18, d, r, 0.1, 100, rng)
            out.append(an.verdict("iid_bad", {"n": 18, "d": d, "r": r, "delta": 0.1}, rate, 0.1 + 3 * se,
                                  rate <= 0.1 + 3 * se, seed))
    return out


def suite_elliptical(rng, seed, reps=100):
    out = []
    for k in range(reps):
        n, d = int(rng.integers(1, 19)), int(rng.integers(1, 4))
        lhs, rhs, ok = an.elliptical_comb_bound_check(rng.standard_normal((n, d)))
        if not ok or k == reps - 1:
            out.append(an.verdict("elliptical_comb", {"n": n, "d": d, "case": k}, lhs, rhs, ok, seed))
    return out


def suite_smooth(rng, seed, runs=100, T=1024, d=2, C=4.0, sigma=1.0, delta=0.05):
    spec = envs.SmoothEnvSpec.uniform(envs.default_smooth_support(16, d), C, "max_leverage")
    rngs = [np.random.default_rng(int(s)) for s in rng.integers(0, 2 ** 63, runs)]
    idx = envs.smooth_batch(spec, T, rngs)
    X = spec.points[idx]
    Y = sigma * rng.standard_normal((runs, T))
    preds, _ = vaw_pinv_batch(X, Y)
    viol, worst_res = 0, 0.0
    for k in range(runs):
        tr = an.RunTrace(X[k], preds[k], Y[k])
        lhs, rhs, ok, res = an.selfnorm_smooth_check(tr, sigma, delta, C, d)
        viol += not ok
        worst_res = max(worst_res, abs(res) / max(1.0, lhs))
    rate = viol / runs
    se = math.sqrt(delta * (1 - delta) / runs)
    return [an.verdict("smooth_selfnorm", {"runs": runs, "T": T, "C_cov": C, "kappa": an.DEFAULT_KAPPA},
                       rate, delta + 3 * se, rate <= delta + 3 * se, seed),
            an.verdict("smooth_decomposition", {"runs": runs}, worst_res, 1e-8, worst_res <= 1e-8, seed)]


SUITES = {"identities": suite_identities, "thm1": suite_moments, "supermg": suite_supermg,
          "badseq": suite_badseq, "elliptical": suite_elliptical, "smooth": suite_smooth}


def cmd_verify(args):
    rng = np.random.default_rng(args.seed)
    verdicts = SUITES[args.suite](rng, args.seed)
    for v in verdicts:
        print(json.dumps(v, default=float))
    return 0 if all(v["ok"] for v in verdicts) else 1


def cmd_optimize_tree(args):
    rng = np.random.default_rng(args.seed)
    tree, val = hs.optimize_tree(args.T, args.d, args.restarts, rng)
    obj = json.loads(tree.to_json())
    obj.update({"value": val, "kind": "lower bound from heuristic search", "seed": args.seed})
    _emit(json.dumps(obj) + "\n", args.out)
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="selfnorm", description="Self-normalized process simulations and checks.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="run predictor x environment from a JSON config, emit CSV")
    s.add_argument("--config", required=True)
    s.add_argument("--out")
    s.add_argument("--workers", type=int)
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("lowerbound", help="adversarial constructions, emit CSV")
    s.add_argument("--which", choices=["d2", "onedim", "tightness"], required=True)
    s.add_argument("--T", type=int, nargs="+", required=True)
    s.add_argument("--d", type=int, default=2)
    s.add_argument("--eps", type=float, default=0.5)
    s.add_argument("--C", type=float, default=5.0)
    s.add_argument("--reps", type=int, default=100)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out")
    s.set_defaults(func=cmd_lowerbound)

    s = sub.add_parser("verify", help="run a verification suite, emit JSON verdicts")
    s.add_argument("--suite", choices=sorted(SUITES), required=True)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_verify)

    s = sub.add_parser("optimize-tree", help="search for a high-value bounded dyadic tree")
    s.add_argument("--T", type=int, required=True)
    s.add_argument("--d", type=int, default=1)
    s.add_argument("--restarts", type=int, default=50)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out")
    s.set_defaults(func=cmd_optimize_tree)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
