"""Verification statistics: regret identities, exponential moments,
supermartingale paths and r-bad subsequence combinatorics."""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .gram import DEFAULT_TOL, GramState, pinv, selfnorm_value
from .environments import MAX_ENUM_DEPTH, path_selfnorm

MAX_EXACT_LEN = 22
REPLAY_SLACK = 1e-10


@dataclass
class RunTrace:
    """Covariates ``X`` (T, d), forecasts ``yhat`` (T,) and labels ``y`` (T,)."""

    X: np.ndarray
    yhat: np.ndarray
    y: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=float)
        if self.X.ndim == 1:
            self.X = self.X[:, None]
        self.yhat = np.asarray(self.yhat, dtype=float).reshape(-1)
        self.y = np.asarray(self.y, dtype=float).reshape(-1)
        if not (len(self.X) == len(self.yhat) == len(self.y)):
            raise ValueError("X, yhat and y must have the same length")

    @classmethod
    def from_rounds(cls, rounds):
        xs, yh, ys = zip(*rounds)
        return cls(np.array(xs, dtype=float).reshape(len(rounds), -1), yh, ys)

    @property
    def T(self):
        return len(self.y)

    @property
    def dim(self):
        return self.X.shape[1]

    @property
    def S(self):
        return self.X.T @ self.y

    @property
    def V(self):
        return self.X.T @ self.X

    @property
    def R_T(self):
        return float(selfnorm_value(self.S, self.V))

    @property
    def losses(self):
        return (self.yhat - self.y) ** 2

    @property
    def ell_sum(self):
        g = GramState(self.dim)
        for x in self.X:
            g.push(x)
        return g.ell_sum

    def to_json(self):
        return json.dumps({"X": self.X.tolist(), "yhat": self.yhat.tolist(),
                           "y": self.y.tolist(), "meta": self.meta})

    @classmethod
    def from_json(cls, text):
        obj = json.loads(text)
        return cls(obj["X"], obj["yhat"], obj["y"], obj.get("meta", {}))


def best_fixed_loss(X, y, Gamma=None):
    """``inf_theta sum (<theta, x_t> - y_t)^2 + theta^T Gamma theta``.

    Solved as a least-squares problem on the data (augmented with
    ``Gamma^{1/2}`` rows when Gamma is given), not through ``S`` and ``V``.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    if Gamma is not None and np.any(Gamma):
        w, Q = np.linalg.eigh(np.asarray(Gamma, dtype=float))
        root = (Q * np.sqrt(np.clip(w, 0, None))) @ Q.T
        A = np.vstack([X, root])
        b = np.concatenate([y, np.zeros(X.shape[1])])
        theta = np.linalg.lstsq(A, b, rcond=None)[0]
        return float(np.sum((X @ theta - y) ** 2) + theta @ Gamma @ theta), theta
    if not np.any(X):
        return float(y @ y), np.zeros(X.shape[1])
    theta = np.linalg.lstsq(X, y, rcond=None)[0]
    return float(np.sum((X @ theta - y) ** 2)), theta


def selfnorm_gamma(trace, Gamma=None):
    """``|S_T|^2`` in ``(V_T + Gamma)^{-1}``, or ``V_T^+`` when Gamma is absent."""
    if Gamma is None or not np.any(Gamma):
        return trace.R_T
    return float(trace.S @ np.linalg.solve(trace.V + Gamma, trace.S))


def regret_from_trace(trace, Gamma=None):
    """Return ``(regret, selfnorm_check)``.

    ``regret = sum (yhat - y)^2 - inf_theta {...}`` and
    ``selfnorm_check = sum y^2 - inf_theta {...}``; the latter should equal
    :func:`selfnorm_gamma`.
    """
    if trace.T == 0:
        raise ValueError("empty trace")
    inf, _ = best_fixed_loss(trace.X, trace.y, Gamma)
    return float(np.sum(trace.losses) - inf), float(trace.y @ trace.y - inf)


def identity_residuals(trace, Gamma=None):
    """Residuals of the completion-of-squares identity and the regret decomposition.

    Both are relative to ``max(|R|, 1)`` where ``R`` is the self-normalized value.
    """
    reg, check = regret_from_trace(trace, Gamma)
    R = selfnorm_gamma(trace, Gamma)
    scale = max(abs(R), 1.0)
    drift = float(np.sum(2 * trace.yhat * trace.y - trace.yhat ** 2))
    return abs(check - R) / scale, abs(R - reg - drift) / scale


# -------------------------------------------------------- exponential moments

def exp_moment(tree, c, mode="exact", rng=None, n_samples=10000):
    """``E[exp(c R_T)]`` over the signs of a dyadic tree.

    Exact mode averages over all ``2^T`` paths and returns the value;
    mc mode returns ``(mean, standard error)``.  A ``c`` outside (0, 1/4]
    is evaluated anyway with a :class:`RuntimeWarning`.
    """
    if not 0 < c <= 0.25:
        warnings.warn(f"c = {c} lies outside (0, 1/4]; the moment bound does not apply",
                      RuntimeWarning, stacklevel=2)
    if mode == "exact":
        if tree.depth > MAX_ENUM_DEPTH:
            raise ValueError("exact mode needs depth <= 20")
        eps, X = tree.enumerate_paths()
        return float(np.mean(np.exp(c * path_selfnorm(X, eps))))
    if mode == "mc":
        eps = np.where(rng.random((n_samples, tree.depth)) < 0.5, -1, 1)
        X = np.stack([tree.path(e) for e in eps])
        v = np.exp(c * path_selfnorm(X, eps))
        return float(v.mean()), float(v.std(ddof=1) / math.sqrt(n_samples))
    raise ValueError(f"unknown mode {mode!r}")


def moment_bound(T, c):
    """``T exp(c / (1 - 2c))``."""
    return T * math.exp(c / (1 - 2 * c))


def mean_selfnorm_bound(T, c=0.25):
    """``log(T) / c + 1 / (1 - 2c)``."""
    return math.log(T) / c + 1.0 / (1 - 2 * c)


def markov_threshold(T, delta, c=0.25):
    """Level ``(log(T e^{c/(1-2c)}) + log(1/delta)) / c`` exceeded with prob. <= delta."""
    return (math.log(moment_bound(T, c)) + math.log(1 / delta)) / c


# ------------------------------------------------------------ supermartingale

def supermartingale_log_path(sigma, yhat, y):
    """``log M_t`` for ``M_t = exp(sum_{i<=t} (2 yhat_i y_i - yhat_i^2) / (2 sigma^2))``.

    Works on stacked arrays; the time axis is the last one.
    """
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    yhat = np.asarray(yhat, dtype=float)
    y = np.asarray(y, dtype=float)
    return np.cumsum(2 * yhat * y - yhat ** 2, axis=-1) / (2 * sigma ** 2)


def supermartingale_track(sigma, trace):
    return np.exp(supermartingale_log_path(sigma, trace.yhat, trace.y))


# ------------------------------------------------------------ r-bad sequences

@dataclass
class BadSubseqResult:
    r: float
    length: int
    witness: list


def _seq(x_seq):
    X = np.asarray(x_seq, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    return X


def prefix_leverages(X, tol=DEFAULT_TOL):
    """``x_t^T V_t^+ x_t`` with ``V_t`` the Gram matrix of ``x_1..x_t``."""
    g = GramState(X.shape[1], tol=tol)
    out = np.empty(len(X))
    for t, x in enumerate(X):
        out[t] = g.leverage(x)
        g.push(x)
    return out


def is_r_bad(X, r, slack=REPLAY_SLACK):
    X = _seq(X)
    return bool(len(X) == 0 or np.all(prefix_leverages(X) >= r - slack))


def bad_subseq_greedy(x_seq, r):
    """Indices whose leverage within the full sequence is at least ``r``.

    Those indices always form an r-bad subsequence; the witness is
    replayed to confirm it.
    """
    if not 0 < r <= 1:
        raise ValueError("r must lie in (0, 1]")
    X = _seq(x_seq)
    lev = prefix_leverages(X)
    idx = [int(i) for i in np.nonzero(lev >= r - REPLAY_SLACK)[0]]
    if not is_r_bad(X[idx], r):
        raise AssertionError("greedy witness failed replay")
    return BadSubseqResult(r, len(idx), idx)


class _Leverager:
    """Leverage of many candidates against one Gram matrix.

    ``z^T (G + z z^T)^+ z`` is 1 when z leaves range(G) and ``h / (1 + h)``
    with ``h = z^T G^+ z`` otherwise; borderline range cases use a direct
    pseudoinverse.
    """

    def __init__(self, X, tol=DEFAULT_TOL):
        self.X = X
        self.tol = tol
        self.sq = np.einsum("ni,ni->n", X, X)

    def __call__(self, G, idx):
        Z = self.X[idx]
        sq = self.sq[idx]
        w, Q = np.linalg.eigh(G)
        if w[-1] <= 0:
            return np.where(sq > 0, 1.0, 0.0)
        keep = w > self.tol * w[-1]
        Qk = Q[:, keep]
        C = Z @ Qk
        inside = np.einsum("ni,ni->n", C, C)
        out_sq = np.clip(sq - inside, 0.0, None)
        h = np.einsum("ni,ni->n", C * (1.0 / w[keep]), C)
        lev = np.where(sq > 0, h / (1.0 + h), 0.0)
        safe = np.where(sq > 0, sq, 1.0)
        ratio = out_sq / safe
        lev = np.where((ratio > 1e-6) & (sq > 0), 1.0, lev)
        grey = np.nonzero((ratio > 1e-13) & (ratio <= 1e-6) & (sq > 0))[0]
        for k in grey:
            z = Z[k]
            lev[k] = float(z @ pinv(G + np.outer(z, z), self.tol) @ z)
        return lev


def bad_subseq_exact(x_seq, r):
    """Longest r-bad subsequence by depth-first search.

    Adding vectors to a Gram matrix can only lower later leverages, so any
    continuation that is valid after a chosen prefix is also r-bad on its
    own.  The search therefore bounds a branch by the exact answer for the
    remaining suffix, computed from the back (suffix lengths are solved in
    order n-1, n-2, ..., 0, each search reusing the later ones).
    """
    if not 0 < r <= 1:
        raise ValueError("r must lie in (0, 1]")
    X = _seq(x_seq)
    n, d = X.shape
    if n > MAX_EXACT_LEN:
        raise ValueError(f"exact search is limited to length {MAX_EXACT_LEN}")
    if n == 0:
        return BadSubseqResult(r, 0, [])
    lev = _Leverager(X)
    thr = r - REPLAY_SLACK
    best_suffix = np.zeros(n + 1, dtype=np.int64)
    witness_suffix = [[] for _ in range(n + 1)]
    zero = np.zeros((d, d))
    nonzero = lev.sq > 0

    for start in range(n - 1, -1, -1):
        best = best_suffix[start + 1]
        best_w = witness_suffix[start + 1]
        if nonzero[start] and 1 + best_suffix[start + 1] > best:
            # the search must pick `start` first to beat the incumbent
            stack = [(np.outer(X[start], X[start]), start, [start])]
            while stack:
                G, last, chosen = stack.pop()
                if len(chosen) > best:
                    best, best_w = len(chosen), chosen
                if last + 1 >= n or len(chosen) + best_suffix[last + 1] <= best:
                    continue
                cand = np.arange(last + 1, n)
                ok = cand[lev(G, cand) >= thr]
                for j in ok[::-1]:
                    if len(chosen) + best_suffix[j] <= best:
                        continue
                    stack.append((G + np.outer(X[j], X[j]), j, chosen + [int(j)]))
        best_suffix[start] = best
        witness_suffix[start] = best_w
    w = [int(i) for i in witness_suffix[0]]
    if not is_r_bad(X[w], r):
        raise AssertionError("exact witness failed replay")
    return BadSubseqResult(r, int(best_suffix[0]), w)


def elliptical_comb_bound_check(x_seq):
    """``(ell_sum, 1 + sum_{i=1}^{ceil(log2 n)} 2^-i N(2^-i; x), ok)``."""
    X = _seq(x_seq)
    n = len(X)
    if n == 0:
        return 0.0, 1.0, True
    lhs = float(np.sum(np.clip(prefix_leverages(X), 0.0, 1.0)))
    levels = int(math.ceil(math.log2(n))) if n > 1 else 0
    rhs = 1.0 + sum(2.0 ** -i * bad_subseq_exact(X, 2.0 ** -i).length for i in range(1, levels + 1))
    return lhs, rhs, lhs <= rhs + 1e-8


def iid_bad_threshold(n, d, r, delta):
    return 3 * math.sqrt(n * d / r) + 6 * math.log(1 / delta)


def iid_bad_bound_check(n, d, r, delta, reps, rng, base=None):
    """Fraction of i.i.d. samples whose exact ``N(r; z)`` exceeds the bound.

    ``base(rng, n, d)`` draws the sample; the default is standard Gaussian.
    Returns ``(rate, standard error, threshold)``.
    """
    if n > MAX_EXACT_LEN:
        raise ValueError(f"n must be <= {MAX_EXACT_LEN}")
    if base is None:
        base = lambda g, n_, d_: g.standard_normal((n_, d_))
    thr = iid_bad_threshold(n, d, r, delta)
    hits = np.array([bad_subseq_exact(base(rng, n, d), r).length > thr for _ in range(reps)])
    rate = float(hits.mean())
    return rate, math.sqrt(max(rate * (1 - rate), 1.0 / reps) / reps), thr


# --------------------------------------------------------- smooth concentration

DEFAULT_KAPPA = 30.0


def smooth_rhs(T, sigma, delta, C_cov, d, kappa=DEFAULT_KAPPA):
    return kappa * sigma ** 2 * (math.sqrt(d * C_cov * T * math.log(2 * T / delta)) + math.log(2 / delta))


def selfnorm_smooth_check(trace, sigma, delta, C_cov, d, kappa=DEFAULT_KAPPA):
    """``(lhs, rhs, ok, residual)`` for a trace carrying VAW forecasts.

    ``residual = lhs - regret - sum(2 yhat y - yhat^2)`` vanishes for any
    forecasts; it is returned as a consistency check.
    """
    lhs = trace.R_T
    rhs = smooth_rhs(trace.T, sigma, delta, C_cov, d, kappa)
    reg, _ = regret_from_trace(trace)
    drift = float(np.sum(2 * trace.yhat * trace.y - trace.yhat ** 2))
    return lhs, rhs, lhs <= rhs, lhs - reg - drift


def calibrate_kappa(lhs_values, T, sigma, delta, C_cov, d):
    """Smallest kappa whose violation rate on ``lhs_values`` is at most ``delta``.

    Intended for a held-out set of runs; the result is then frozen and
    used on fresh seeds.
    """
    unit = smooth_rhs(T, sigma, delta, C_cov, d, kappa=1.0)
    q = np.quantile(np.asarray(lhs_values, dtype=float), 1 - delta, method="higher")
    return float(q / unit)


def smooth_ell_bound(T, d, C_cov, delta=0.05):
    """High-probability envelope for the elliptical sum in a smooth environment.

    ``3 sqrt(d C T log(2T/delta)) + 6 log(4 log2(T K) / delta) + 1`` with
    ``K = ceil(C log(2T/delta))``.
    """
    K = math.ceil(C_cov * math.log(2 * T / delta))
    return (3 * math.sqrt(d * C_cov * T * math.log(2 * T / delta))
            + 6 * math.log(4 * math.log2(T * K) / delta) + 1)


def verdict(check_id, params, lhs, rhs, ok, seed=None):
    """One JSON-serializable verdict record."""
    return {"check_id": check_id, "params": params, "lhs": float(lhs), "rhs": float(rhs),
            "ok": bool(ok), "seed": seed}


def meta_decomposition_check(meta, trace):
    """``(regret, bound, sub_regrets)`` for a finished meta-algorithm run.

    ``bound = T beta + 2 max_k Reg_k + 2 T^2 / M`` where ``Reg_k`` is the
    measured regret of each executed subroutine on its own time segment.
    """
    starts = [s for s, _ in meta.restarts]
    edges = starts + [trace.T]
    subs = []
    for lo, hi in zip(edges[:-1], edges[1:]):
        seg = RunTrace(trace.X[lo:hi], trace.yhat[lo:hi], trace.y[lo:hi])
        subs.append(regret_from_trace(seg)[0])
    reg, _ = regret_from_trace(trace)
    worst = max(subs, default=0.0)
    bound = trace.T * meta.beta + 2 * max(worst, 0.0) + 2 * trace.T ** 2 / meta.M
    return reg, bound, subs
