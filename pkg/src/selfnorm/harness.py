"""Game loop, Monte Carlo runner, tree search, scaling fits and CSV output."""

from __future__ import annotations

import csv
import io
import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from . import environments as envs
from .analysis import RunTrace, regret_from_trace
from .gram import DEFAULT_TOL, GramState, pinv
from .predictors import VawPinv, ZeroPredictor, make_predictor, vaw_pinv_batch

CSV_FIELDS = ["experiment", "T", "d", "rep", "seed", "R_T", "regret", "ell_sum", "loss_alg", "loss_best"]


# --------------------------------------------------------------------- seeds

def run_seed(master, t_index, rep):
    """Integer seed for replication ``rep`` of horizon ``t_index``.

    Derived by a counter-based split of the master seed, so a run's stream
    does not depend on how many replications are requested.
    """
    ss = np.random.SeedSequence(master, spawn_key=(t_index, rep))
    hi, lo = ss.generate_state(2, dtype=np.uint32)
    return (int(hi) << 32) | int(lo)


def run_rng(master, t_index, rep):
    return np.random.default_rng(run_seed(master, t_index, rep))


def worker_count():
    env = os.environ.get("SELFNORM_WORKERS")
    if env:
        return max(1, int(env))
    try:
        return len(os.sched_getaffinity(0))
    except AttributeError:
        return os.cpu_count() or 1


# ------------------------------------------------------------------ game loop

def play_game(predictor, environment, T, rng):
    """Play ``T`` rounds and return the :class:`RunTrace`.

    Per round: the environment reveals ``x``, the predictor commits
    ``yhat = predict(x)``, the environment reveals ``y`` (possibly reacting
    to ``yhat``), and only then ``update(x, y)`` is called.
    """
    pdim = getattr(predictor, "dim", None)
    if pdim is not None and pdim != environment.dim:
        raise ValueError(f"predictor dimension {pdim} != environment dimension {environment.dim}")
    d = environment.dim
    X = np.empty((T, d))
    yhat = np.empty(T)
    y = np.empty(T)
    for t in range(T):
        x = environment.reveal_covariate(rng)
        if x.shape != (d,) or not np.all(np.isfinite(x)):
            raise ValueError(f"environment emitted an invalid covariate at round {t}: {x}")
        p = float(predictor.predict(x))
        if not math.isfinite(p):
            raise ValueError(f"predictor emitted a non-finite forecast at round {t}")
        label = environment.reveal_label(p, rng)
        if not math.isfinite(label):
            raise ValueError(f"environment emitted a non-finite label at round {t}")
        predictor.update(x, label)
        X[t], yhat[t], y[t] = x, p, label
    return RunTrace(X, yhat, y)


class GaussianLabels:
    def __init__(self, sigma=1.0):
        self.sigma = sigma

    def label(self, x, yhat, rng):
        return self.sigma * rng.standard_normal()


def _label_rule(spec):
    spec = dict(spec or {"name": "rademacher"})
    name = spec.pop("name")
    if name == "rademacher":
        return envs.RademacherLabels()
    if name == "adversarial":
        return envs.AgainstPrediction()
    if name == "gaussian":
        return GaussianLabels(**spec)
    raise ValueError(f"unknown label rule {name!r}")


def make_environment(spec, d, T, rng):
    """Build a :class:`GameEnv` from a config dict.

    Covariate sources: ``gaussian``, ``smooth`` (finite support with a
    rule), ``script`` (scale scripts, d = 1) and ``tightness`` (d = 1).
    """
    spec = dict(spec)
    name = spec.pop("name")
    labels = _label_rule(spec.pop("labels", None))
    if name == "gaussian":
        src = lambda hist, g: g.standard_normal(d)
    elif name == "smooth":
        points = spec.get("points") or envs.default_smooth_support(spec.get("n_points", 16), d).tolist()
        base = spec.get("base") or [1.0 / len(points)] * len(points)
        sm = envs.SmoothEnvSpec(points, base, spec.get("C_cov", 1.0), spec.get("rule", "base"))
        src = lambda hist, g: envs.smooth_sample(sm, hist[:], g)
    elif name == "script":
        xs = envs.scale_script(spec.get("script", "constant"), T, rng, spec.get("scale", 1.0))
        src = envs.sequence_source(xs)
    elif name == "tightness":
        xs = envs.tightness_env_path(spec.get("C", 5.0), T, rng, spec.get("n_max"))
        src = envs.sequence_source(xs)
    else:
        raise ValueError(f"unknown environment {name!r}")
    return envs.GameEnv(src, labels, d)


# ------------------------------------------------------------ records & stats

@dataclass
class Summary:
    """Count, mean and centred sum of squares; merges exactly in any order
    up to rounding."""

    n: int = 0
    mean: float = 0.0
    m2: float = 0.0

    @classmethod
    def of(cls, values):
        v = np.asarray(values, dtype=float)
        if v.size == 0:
            return cls()
        m = math.fsum(v) / v.size
        return cls(int(v.size), m, math.fsum((v - m) ** 2))

    def merge(self, other):
        if self.n == 0:
            return Summary(other.n, other.mean, other.m2)
        if other.n == 0:
            return Summary(self.n, self.mean, self.m2)
        n = self.n + other.n
        delta = other.mean - self.mean
        mean = self.mean + delta * other.n / n
        m2 = self.m2 + other.m2 + delta * delta * self.n * other.n / n
        return Summary(n, mean, m2)

    @property
    def var(self):
        return self.m2 / (self.n - 1) if self.n > 1 else 0.0

    @property
    def se(self):
        return math.sqrt(self.var / self.n) if self.n > 0 else float("nan")


@dataclass
class ExperimentResult:
    records: list
    aggregates: dict = field(default_factory=dict)
    fit: dict = None
    traces: list = None

    def to_csv(self):
        return records_to_csv(self.records)


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.17g}"
    return str(v)


def records_to_csv(records):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_FIELDS)
    for r in records:
        w.writerow([_fmt(r[k]) for k in CSV_FIELDS])
    return buf.getvalue()


def read_csv(text):
    rows = list(csv.DictReader(io.StringIO(text)))
    for r in rows:
        for k in ("T", "d", "rep", "seed"):
            r[k] = int(r[k])
        for k in ("R_T", "regret", "ell_sum", "loss_alg", "loss_best"):
            r[k] = float(r[k])
    return rows


def aggregate(records, key="R_T"):
    """Per-T summaries: mean, standard error and quartiles of ``key``."""
    out = {}
    for T in sorted({r["T"] for r in records}):
        v = np.array([r[key] for r in records if r["T"] == T])
        s = Summary.of(v)
        q = np.quantile(v, [0.05, 0.25, 0.5, 0.75, 0.95])
        out[T] = {"n": s.n, "mean": s.mean, "se": s.se,
                  "quantiles": dict(zip(("q05", "q25", "q50", "q75", "q95"), q.tolist()))}
    return out


def record(experiment, T, d, rep, seed, trace, ell_sum=None):
    reg, _ = regret_from_trace(trace)
    loss_alg = float(np.sum(trace.losses))
    return {"experiment": experiment, "T": T, "d": d, "rep": rep, "seed": seed,
            "R_T": trace.R_T, "regret": reg,
            "ell_sum": trace.ell_sum if ell_sum is None else ell_sum,
            "loss_alg": loss_alg, "loss_best": loss_alg - reg}


# --------------------------------------------------------------- Monte Carlo

@dataclass
class ExperimentConfig:
    experiment: str = "game"
    predictor: dict = field(default_factory=lambda: {"name": "vaw_pinv"})
    environment: dict = field(default_factory=lambda: {"name": "gaussian"})
    T: list = field(default_factory=lambda: [100])
    d: int = 1
    replications: int = 10
    seed: int = 0
    output: str = None
    thresholds: dict = field(default_factory=dict)
    trace: bool = False

    @classmethod
    def from_dict(cls, obj):
        obj = dict(obj)
        if isinstance(obj.get("T"), int):
            obj["T"] = [obj["T"]]
        unknown = set(obj) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**obj)

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def _one_run(cfg, ti, T, rep):
    seed = run_seed(cfg.seed, ti, rep)
    rng = np.random.default_rng(seed)
    env_rng, game_rng = rng.spawn(2)
    env = make_environment(cfg.environment, cfg.d, T, env_rng)
    pred = make_predictor(cfg.predictor, cfg.d, T)
    trace = play_game(pred, env, T, game_rng)
    rec = record(cfg.experiment, T, cfg.d, rep, seed, trace)
    return rec, (trace.to_json() if cfg.trace else None)


def _run_chunk(args):
    cfg, jobs = args
    out = []
    for ti, T, rep in jobs:
        try:
            out.append(_one_run(cfg, ti, T, rep))
        except Exception as exc:
            raise RuntimeError(f"run T={T} rep={rep} seed={run_seed(cfg.seed, ti, rep)} failed: {exc}") from exc
    return out


def monte_carlo(cfg, workers=None):
    """Run every (T, replication) pair of ``cfg`` and aggregate the records.

    Runs are independent and seeded by :func:`run_seed`, so the output does
    not depend on the worker count.
    """
    if isinstance(cfg, dict):
        cfg = ExperimentConfig.from_dict(cfg)
    jobs = [(ti, T, rep) for ti, T in enumerate(cfg.T) for rep in range(cfg.replications)]
    workers = worker_count() if workers is None else workers
    if workers <= 1 or len(jobs) == 1:
        results = _run_chunk((cfg, jobs))
    else:
        chunks = [jobs[i::workers] for i in range(workers)]
        with ProcessPoolExecutor(workers) as ex:
            parts = list(ex.map(_run_chunk, [(cfg, c) for c in chunks if c]))
        results = [r for p in parts for r in p]
        order = {(ti, rep): k for k, (ti, _, rep) in enumerate(jobs)}
        results.sort(key=lambda rt: order[(cfg.T.index(rt[0]["T"]), rt[0]["rep"])])
    records = [r for r, _ in results]
    res = ExperimentResult(records, aggregate(records))
    if cfg.trace:
        res.traces = [t for _, t in results]
    if len(cfg.T) >= 4:
        means = [res.aggregates[T]["mean"] for T in cfg.T]
        if all(m > 0 for m in means):
            res.fit = scaling_fit(cfg.T, means)
    return res


# ------------------------------------------------------ lower-bound batches

def _sign_matrix(master, t_index, reps, T):
    seeds = [run_seed(master, t_index, k) for k in range(reps)]
    eps = np.stack([np.where(np.random.default_rng(s).random(T) < 0.5, -1, 1) for s in seeds])
    return seeds, eps.astype(np.int8)


def lowerbound_d2(T_list, reps, seed=0, d=2, eps_level=0.5):
    """Records for the adaptive construction plus per-T increment errors."""
    r = math.sqrt((1 - eps_level ** 2) / eps_level ** 2)
    records, inc_err, lam_gap = [], {}, {}
    for ti, T in enumerate(T_list):
        seeds, eps = _sign_matrix(seed, ti, reps, T)
        out = envs.adversary_d2_batch(T, eps, dim=d, r=r)
        inc_err[T] = float(out["inc_err"].max())
        lam_gap[T] = float((out["R_T"] - out["lam_norm"]).min())
        for k in range(reps):
            R = float(out["R_T"][k])
            records.append({"experiment": "lowerbound_d2", "T": T, "d": d, "rep": k, "seed": seeds[k],
                            "R_T": R, "regret": R, "ell_sum": float(out["ell_sum"][k]),
                            "loss_alg": float(T), "loss_best": float(T) - R})
    return records, {"inc_err": inc_err, "min_R_minus_lam_norm": lam_gap}


def lowerbound_onedim(T_list, reps, seed=0):
    """Records for the 1-D block construction; zero forecaster, so regret = R_T."""
    records, info = [], {}
    for ti, T in enumerate(T_list):
        seeds = [run_seed(seed, ti, k) for k in range(reps)]
        R = np.empty(reps)
        stop = np.empty(reps, dtype=np.int64)
        chunk = 500
        for lo in range(0, reps, chunk):
            hi = min(lo + chunk, reps)
            eps = np.stack([np.where(np.random.default_rng(s).random(T) < 0.5, -1, 1)
                            for s in seeds[lo:hi]]).astype(np.int8)
            R[lo:hi], stop[lo:hi] = envs.onedim_batch(T, eps)
        n, K, M = envs.onedim_params(T)
        info[T] = {"n": n, "K": K, "M": M, "stopped": int((stop >= 0).sum()),
                   "min_R_stopped": float(R[stop >= 0].min()) if (stop >= 0).any() else None}
        for k in range(reps):
            records.append({"experiment": "lowerbound_onedim", "T": T, "d": 1, "rep": k, "seed": seeds[k],
                            "R_T": float(R[k]), "regret": float(R[k]), "ell_sum": float("nan"),
                            "loss_alg": float("nan"), "loss_best": float("nan")})
    return records, info


def lowerbound_tightness(T_list, reps, seed=0, C=5.0, n_max=None):
    """Records for the escalation environment with Rademacher labels and zero forecasts.

    ``ell_sum`` is the 1-regularized elliptical sum.
    """
    records = []
    for ti, T in enumerate(T_list):
        for k in range(reps):
            s = run_seed(seed, ti, k)
            cov_rng, lab_rng = np.random.default_rng(s).spawn(2)
            xs = envs.tightness_env_path(C, T, cov_rng, n_max)
            ys = np.where(lab_rng.random(T) < 0.5, -1.0, 1.0)
            sq = xs * xs
            R = float((xs @ ys) ** 2 / sq.sum()) if sq.sum() > 0 else 0.0
            records.append({"experiment": "lowerbound_tightness", "T": T, "d": 1, "rep": k, "seed": s,
                            "R_T": R, "regret": R, "ell_sum": envs.regularized_ell(xs),
                            "loss_alg": float(T), "loss_best": float(T) - R})
    return records


# --------------------------------------------------------- tree optimization

def tree_value(tree):
    """Exact ``E[R_T]`` over all sign paths."""
    return float(np.mean(envs.tree_selfnorm_values(tree)))


def _project_ball(v):
    nrm = np.linalg.norm(v, axis=-1, keepdims=True)
    return np.where(nrm > 1.0, v / np.maximum(nrm, 1e-300), v)


def _rvals(S, V, tol=DEFAULT_TOL):
    if S.shape[-1] == 1:
        v = V[..., 0, 0]
        return np.where(v > 0, S[..., 0] ** 2 / np.where(v > 0, v, 1.0), 0.0)
    return np.einsum("...i,...ij,...j->...", S, pinv(V, tol), S)


def optimize_tree(T, d, restarts=50, rng=None, steps=(0.5, 0.1, 0.02), sweeps=3, warm_start=True):
    """Coordinate ascent for ``E[R_T]`` over trees with node norms at most 1.

    Each restart starts from random nodes in the unit ball (the first one,
    for d >= 2, from the bounded adaptive construction); every node in
    turn tries the moves ``±s e_j`` for each step ``s`` and coordinate
    ``j``, projected back to the ball, and keeps the best.  Only the paths
    through the node are re-evaluated.  Returns ``(tree, value)`` where the
    value is the exact mean over all ``2^T`` paths: a lower bound on the
    worst-case dyadic value, not an estimate of it.
    """
    if T > 14:
        raise ValueError("tree search is limited to T <= 14")
    rng = np.random.default_rng() if rng is None else rng
    n_nodes = 2 ** T - 1
    moves = np.concatenate([s * np.vstack([np.eye(d), -np.eye(d)]) for s in steps])
    depth_of = np.floor(np.log2(np.arange(1, n_nodes + 1))).astype(int) + 1
    best_tree, best_val = None, -np.inf
    for k in range(restarts):
        if k == 0 and warm_start and d >= 2:
            nodes = envs.adversary_d2_tree(T, dim=d).bounded().nodes.copy()
        else:
            g = rng.standard_normal((n_nodes, d))
            g /= np.linalg.norm(g, axis=1, keepdims=True)
            nodes = g * rng.random((n_nodes, 1)) ** (1.0 / d)
        tree = envs.DyadicTree(nodes, T)
        eps, X = tree.enumerate_paths()
        eps = eps.astype(float)
        S = np.einsum("pt,ptd->pd", eps, X)
        V = np.einsum("pti,ptj->pij", X, X)
        R = _rvals(S, V)
        for _ in range(sweeps):
            improved = False
            for i in range(1, n_nodes + 1):
                k_dep = depth_of[i - 1]
                width = 2 ** (T - k_dep + 1)
                lo = (i - 2 ** (k_dep - 1)) * width
                sl = slice(lo, lo + width)
                v = nodes[i - 1]
                cand = _project_ball(v + moves)
                e = eps[sl, k_dep - 1]
                Sc = S[None, sl] + e[None, :, None] * (cand - v)[:, None, :]
                Vc = (V[None, sl] - np.outer(v, v)
                      + (cand[:, :, None] * cand[:, None, :])[:, None])
                Rc = _rvals(Sc, Vc)
                gain = Rc.sum(axis=1) - R[sl].sum()
                j = int(np.argmax(gain))
                if gain[j] > 1e-12:
                    nodes[i - 1] = cand[j]
                    S[sl], V[sl], R[sl] = Sc[j], Vc[j], Rc[j]
                    improved = True
            if not improved:
                break
        tree = envs.DyadicTree(nodes, T)
        val = tree_value(tree)
        if val > best_val:
            best_tree, best_val = tree, val
    return best_tree, best_val


# --------------------------------------------------------------- scaling fits

def scaling_fit(T_values, means, mode="power", level=0.95, min_ratio=4.0):
    """Least-squares fit of the mean statistic against the horizon.

    ``mode="power"`` regresses ``log(mean)`` on ``log T`` (slope = growth
    exponent); ``mode="log"`` regresses ``mean`` on ``log T``.  Needs at
    least four distinct horizons with ``max T / min T >= min_ratio``.
    Returns a dict with slope, intercept, a two-sided confidence interval
    for the slope and R^2.
    """
    T = np.asarray(T_values, dtype=float)
    y = np.asarray(means, dtype=float)
    if len(np.unique(T)) < 4:
        raise ValueError("need at least 4 distinct horizons")
    if T.max() / T.min() < min_ratio:
        raise ValueError(f"horizons must span a factor of at least {min_ratio}")
    x = np.log(T)
    if mode == "power":
        if np.any(y <= 0):
            raise ValueError("power fits need positive means")
        y = np.log(y)
    elif mode != "log":
        raise ValueError(f"unknown mode {mode!r}")
    fit = stats.linregress(x, y)
    tq = stats.t.ppf(0.5 + level / 2, len(x) - 2)
    half = tq * fit.stderr
    return {"slope": float(fit.slope), "intercept": float(fit.intercept),
            "ci": (float(fit.slope - half), float(fit.slope + half)), "r2": float(fit.rvalue ** 2)}


# --------------------------------------------------- smooth VAW experiment

def smooth_vaw_ell(spec, T, reps, seed=0, t_index=0):
    """Elliptical sums of VAW on a smooth environment, all replications at once.

    Covariate streams use the same per-run seeds as :func:`monte_carlo`.
    """
    rngs = [run_rng(seed, t_index, k).spawn(2)[0] for k in range(reps)]
    idx = envs.smooth_batch(spec, T, rngs)
    X = spec.points[idx]
    _, lev = vaw_pinv_batch(X, np.zeros(idx.shape))
    return lev.sum(axis=1)
