"""Data-generating processes: dyadic trees, adversarial constructions and
smooth environments on finite supports."""

from __future__ import annotations

import json
import math

import numpy as np

from .gram import DEFAULT_TOL, GramState, pinv, selfnorm_value, sm_inverse_update

MAX_ENUM_DEPTH = 20


# ---------------------------------------------------------------- dyadic trees

def node_index(signs):
    """Heap index of the node reached after ``signs`` (a ±1 prefix).

    The root is node 1; under sign -1 node ``i`` moves to ``2i``, under +1
    to ``2i + 1``.
    """
    i = 1
    for s in signs:
        i = 2 * i + (1 if s > 0 else 0)
    return i


class DyadicTree:
    """Covariates indexed by sign prefixes, stored flat in heap order.

    ``nodes[i - 1]`` holds the covariate at heap index ``i``.
    """

    def __init__(self, nodes, depth, dim=None):
        nodes = np.asarray(nodes, dtype=float)
        if nodes.ndim == 1:
            nodes = nodes[:, None]
        if depth < 1:
            raise ValueError("depth must be >= 1")
        if nodes.shape[0] != 2 ** depth - 1:
            raise ValueError(f"a depth-{depth} tree has {2 ** depth - 1} nodes, got {nodes.shape[0]}")
        if dim is not None and nodes.shape[1] != dim:
            raise ValueError("node dimension does not match dim")
        if not np.all(np.isfinite(nodes)):
            raise ValueError("tree nodes must be finite")
        self.nodes = nodes
        self.depth = int(depth)
        self.dim = nodes.shape[1]

    @classmethod
    def constant(cls, value, depth):
        value = np.atleast_1d(np.asarray(value, dtype=float))
        return cls(np.tile(value, (2 ** depth - 1, 1)), depth)

    @classmethod
    def random(cls, depth, dim, rng):
        return cls(rng.standard_normal((2 ** depth - 1, dim)), depth)

    def max_norm(self):
        return float(np.max(np.linalg.norm(self.nodes, axis=1)))

    def bounded(self):
        """Copy rescaled by the largest node norm, so every node has norm <= 1."""
        m = self.max_norm()
        return DyadicTree(self.nodes / m if m > 0 else self.nodes.copy(), self.depth)

    def node(self, i):
        return self.nodes[i - 1]

    def sample_path(self, rng):
        """Draw signs and return ``(X, eps)`` with shapes (T, d) and (T,)."""
        eps = np.where(rng.random(self.depth) < 0.5, -1, 1)
        return self.path(eps), eps

    def path(self, eps):
        eps = np.asarray(eps)
        idx = np.empty(self.depth, dtype=np.int64)
        i = 1
        for t in range(self.depth):
            idx[t] = i
            i = 2 * i + (eps[t] > 0)
        return self.nodes[idx - 1]

    def enumerate_paths(self):
        """All ``2^T`` sign sequences and their covariate paths.

        Returns ``(eps, X)`` with shapes (2^T, T) and (2^T, T, d); each path
        carries probability ``2^-T``.  Path ``p`` reads its signs from the
        bits of ``p``, most significant first, with a set bit meaning +1.
        """
        T = self.depth
        if T > MAX_ENUM_DEPTH:
            raise ValueError(f"exhaustive enumeration is limited to depth {MAX_ENUM_DEPTH}")
        p = np.arange(2 ** T, dtype=np.int64)
        shifts = np.arange(T - 1, -1, -1)
        bits = (p[:, None] >> shifts) & 1
        eps = (2 * bits - 1).astype(np.int8)
        steps = np.arange(1, T + 1)
        idx = (1 << (steps - 1)) + (p[:, None] >> (T - steps + 1))
        return eps, self.nodes[idx - 1]

    def to_json(self):
        return json.dumps({"depth": self.depth, "dim": self.dim,
                           "nodes": self.nodes.reshape(-1).tolist(), "indexing": "heap"})

    @classmethod
    def from_json(cls, text):
        obj = json.loads(text)
        if obj.get("indexing", "heap") != "heap":
            raise ValueError("only heap indexing is supported")
        nodes = np.asarray(obj["nodes"], dtype=float).reshape(-1, obj["dim"])
        return cls(nodes, obj["depth"], obj["dim"])


def tree_sample_path(tree, rng):
    return tree.sample_path(rng)


def tree_enumerate_paths(tree):
    return tree.enumerate_paths()


def path_selfnorm(X, eps, tol=DEFAULT_TOL):
    """Final ``R_T`` for stacked paths X (n, T, d) with signs eps (n, T)."""
    X = np.asarray(X, dtype=float)
    eps = np.asarray(eps, dtype=float)
    S = np.einsum("nt,ntd->nd", eps, X)
    V = np.einsum("nti,ntj->nij", X, X)
    return selfnorm_value(S, V, tol)


def tree_selfnorm_values(tree, tol=DEFAULT_TOL):
    """``R_T`` on every path of ``tree`` (enumeration order)."""
    eps, X = tree.enumerate_paths()
    return path_selfnorm(X, eps, tol)


# ------------------------------------------------ adaptive d >= 2 construction

def _orth_unit(w, rule="first_basis", rng=None):
    """Unit vectors orthogonal to the rows of ``w`` (shape (n, d), d >= 2)."""
    n, d = w.shape
    if rule == "random":
        e = rng.standard_normal((n, d))
    else:
        e = np.zeros((n, d))
        e[:, 0] = 1.0
        # e_1 is parallel to w when w has no mass off the first coordinate
        ww = np.einsum("ni,ni->n", w, w)
        par = (ww > 0) & (ww - w[:, 0] ** 2 <= 1e-24 * ww)
        e[par, 0] = 0.0
        e[par, 1] = 1.0
    ww = np.einsum("ni,ni->n", w, w)
    safe = np.where(ww > 0, ww, 1.0)
    coef = np.where(ww > 0, np.einsum("ni,ni->n", e, w) / safe, 0.0)
    e = e - coef[:, None] * w
    return e / np.linalg.norm(e, axis=1, keepdims=True)


class AdversaryD2:
    """The constant-energy adaptive construction in dimension d >= 2.

    Each covariate is ``r * Lam^{1/2} e`` where ``Lam = V + lam I`` and the
    unit vector ``e`` is orthogonal to ``Lam^{-1/2} S``.  Along one path
    ``Lam`` becomes exponentially ill-conditioned, so the state is kept in a
    moving frame in which ``Lam`` is the identity.  Since ``S^T V^+ S`` and
    ``S^T Lam^{-1} S`` are invariant under invertible coordinate changes,
    every reported quantity is exact; the covariates in the original
    coordinates are ``B @ x_frame``.

    Frame state: ``S`` and ``V`` (covariates mapped into the frame), ``G``
    (the regularizer ``lam I`` mapped into the frame, so ``V + G = I``) and
    ``B`` (frame to original coordinates).
    """

    def __init__(self, dim=2, r=math.sqrt(3.0), lam=1.0, rule="first_basis",
                 rng=None, track_original=True):
        if dim < 2:
            raise ValueError("the construction requires d >= 2")
        if not r > 0 or not lam > 0:
            raise ValueError("r and lam must be positive")
        if rule not in ("first_basis", "random"):
            raise ValueError(f"unknown rule {rule!r}")
        if rule == "random" and rng is None:
            raise ValueError("the random rule needs an rng")
        self.dim, self.r, self.lam, self.rule, self.rng = dim, float(r), float(lam), rule, rng
        self.t = 0
        self.S = np.zeros(dim)
        self.V = np.zeros((dim, dim))
        self.G = np.eye(dim)
        self.gram = GramState(dim)
        self.track_original = track_original
        self.B = math.sqrt(lam) * np.eye(dim)
        self.S_orig = np.zeros(dim)
        self.increments = []
        self._pending = None

    @classmethod
    def from_eps(cls, eps_level, **kw):
        """Construction targeting ``(1 - eps^2) T``: ``r^2 = (1 - eps^2) / eps^2``."""
        return cls(r=math.sqrt((1 - eps_level ** 2) / eps_level ** 2), **kw)

    def lam_matrix(self):
        """``V + lam I`` in original coordinates (only meaningful for short runs)."""
        return self.B @ self.B.T

    def next_covariate(self):
        """Return the next covariate in original coordinates."""
        e = _orth_unit(self.S[None, :], self.rule, self.rng)[0]
        self._pending = self.r * e
        if not self.track_original:
            return None
        return self.B @ self._pending

    def step(self, sign):
        """Absorb sign ``±1`` for the pending covariate and re-whiten."""
        if self._pending is None:
            self.next_covariate()
        x = self._pending
        self._pending = None
        r2 = self.r ** 2
        # both sign branches under the Sherman-Morrison inverse of I + x x^T
        Linv = sm_inverse_update(np.eye(self.dim), x)
        before = float(self.S @ self.S)
        after = [float((self.S + s * x) @ Linv @ (self.S + s * x)) for s in (1.0, -1.0)]
        self.increments.append(0.5 * (after[0] + after[1]) - before)
        if self.track_original:
            self.S_orig = self.S_orig + sign * (self.B @ x)
        self.S = self.S + sign * x
        self.V = self.V + np.outer(x, x)
        self.gram.push(x, sign)
        # A = (I + x x^T)^{-1/2} maps the frame back to Lam = I
        u = x / self.r
        c = 1.0 - 1.0 / math.sqrt(1.0 + r2)
        A = np.eye(self.dim) - c * np.outer(u, u)
        self.S = A @ self.S
        self.V = A @ self.V @ A
        self.G = A @ self.G @ A
        self.gram.transform(A)
        if self.track_original:
            self.B = self.B @ (np.eye(self.dim) + (math.sqrt(1.0 + r2) - 1.0) * np.outer(u, u))
        self.t += 1
        return self

    def lam_norm(self):
        """``S^T (V + lam I)^{-1} S``, which is ``|S|^2`` in the frame."""
        return float(self.S @ self.S)

    def selfnorm(self):
        return self.gram.selfnorm()

    def frame_error(self):
        """Distance of ``V + G`` from the identity (should be ~0)."""
        return float(np.max(np.abs(self.V + self.G - np.eye(self.dim))))


def adversary_d2_next(state):
    return state.next_covariate()


def adversary_d2_batch(T, eps, dim=2, r=math.sqrt(3.0), tol=DEFAULT_TOL):
    """Run the construction on stacked sign sequences ``eps`` of shape (R, T).

    Returns a dict of arrays of length R: ``R_T`` (``S^T V^+ S``),
    ``lam_norm`` (``S^T (V + lam I)^{-1} S``), ``ell_sum``, and the largest
    deviation of the two-branch increment from ``r^2 / (1 + r^2)``.
    The regularizer does not enter these values, which depend on the frame
    only.
    """
    eps = np.asarray(eps, dtype=float)
    R = eps.shape[0]
    if eps.shape[1] < T:
        raise ValueError("not enough signs")
    if dim < 2:
        raise ValueError("the construction requires d >= 2")
    r2 = r * r
    c = 1.0 - 1.0 / math.sqrt(1.0 + r2)
    target = r2 / (1.0 + r2)
    S = np.zeros((R, dim))
    V = np.zeros((R, dim, dim))
    ell = np.zeros(R)
    inc_err = np.zeros(R)
    for t in range(T):
        u = _orth_unit(S)
        x = r * u
        # two-branch average with (I + x x^T)^{-1} = I - x x^T / (1 + r^2)
        Sx = np.einsum("ni,ni->n", S, x)
        SS = np.einsum("ni,ni->n", S, S)
        branch = [SS + 2 * s * Sx + r2 - (Sx + s * r2) ** 2 / (1 + r2) for s in (1.0, -1.0)]
        inc = 0.5 * (branch[0] + branch[1]) - SS
        inc_err = np.maximum(inc_err, np.abs(inc - target))
        S = S + eps[:, t, None] * x
        V = V + x[:, :, None] * x[:, None, :]
        if dim == 2:
            lev = _lev2(V, x, tol)
        else:
            Px = np.einsum("nij,nj->ni", pinv(V, tol), x)
            lev = np.einsum("ni,ni->n", Px, x)
        ell += np.clip(lev, 0.0, 1.0)
        A = np.eye(dim) - c * u[:, :, None] * u[:, None, :]
        S = np.einsum("nij,nj->ni", A, S)
        V = A @ V @ A
    return {"R_T": selfnorm_value(S, V, tol), "lam_norm": np.einsum("ni,ni->n", S, S),
            "ell_sum": ell, "inc_err": inc_err}


def _lev2(V, x, tol):
    # x^T V^+ x for stacked 2x2 PSD V via the pinv of the whole stack
    P = pinv(V, tol)
    return np.einsum("ni,nij,nj->n", x, P, x)


def adversary_d2_tree(T, dim=2, r=math.sqrt(3.0), lam=1.0):
    """The construction unrolled as an explicit depth-T tree (original coordinates)."""
    nodes = np.zeros((2 ** T - 1, dim))

    def fill(state, i, depth):
        nodes[i - 1] = state.next_covariate()
        if depth == T:
            return
        for sign, child in ((-1.0, 2 * i), (1.0, 2 * i + 1)):
            nxt = _clone_adv(state)
            nxt.step(sign)
            fill(nxt, child, depth + 1)

    fill(AdversaryD2(dim, r, lam), 1, 1)
    return DyadicTree(nodes, T)


def _clone_adv(a):
    b = AdversaryD2.__new__(AdversaryD2)
    b.__dict__.update(a.__dict__)
    for k in ("S", "V", "G", "B", "S_orig"):
        setattr(b, k, getattr(a, k).copy())
    b.gram = a.gram.copy()
    b.increments = list(a.increments)
    return b


# ------------------------------------------------------ one-dimensional blocks

def onedim_params(T, log_base=2.0):
    """Block length n, number of full blocks K and growth factor M."""
    if T < 10:
        raise ValueError("the construction needs T >= 10")
    n = max(1, int(math.floor(0.5 * math.log(T) / math.log(log_base) + 1e-12)))
    return n, T // n, 2.0 * T / n


def _block_layout(T, n):
    nb = -(-T // n)
    lengths = np.full(nb, n)
    lengths[-1] = T - n * (nb - 1)
    return nb, lengths


def onedim_lowerbound_path(T, rng=None, eps=None, log_base=2.0):
    """One path of the block construction, tracked with per-block rescaling.

    Block ``j`` holds the constant covariate ``M^j`` while it is active; the
    first full block of all-plus signs deactivates every later block.
    Stored covariates are divided by ``M`` at each block boundary so they
    stay of order one.  Returns a dict with the (rescaled) covariates, the
    signs, ``R_T``, the stopping block ``i`` (``None`` if no full block
    stopped) and the parameters.
    """
    n, K, M = onedim_params(T, log_base)
    if eps is None:
        eps = np.where(rng.random(T) < 0.5, -1, 1)
    eps = np.asarray(eps)
    g = GramState(1)
    xs = np.zeros(T)
    stop = None
    active = True
    level = 1.0
    for j in range(-(-T // n)):
        lo, hi = j * n, min((j + 1) * n, T)
        if j > 0 and active:
            g.rescale(1.0 / M)
        x = level if active else 0.0
        for t in range(lo, hi):
            xs[t] = x
            g.push([x], eps[t])
        if active and hi - lo == n and j < K and np.all(eps[lo:hi] == 1):
            active = False
            stop = j
    return {"x": xs, "eps": eps, "R_T": g.selfnorm(), "stop": stop, "n": n, "K": K, "M": M}


def onedim_batch(T, eps, log_base=2.0):
    """Closed-form ``R_T`` of the block construction for stacked signs.

    Returns ``(R_T, stop)``; ``stop`` is the 0-based stopping block or -1.
    """
    n, K, M = onedim_params(T, log_base)
    eps = np.asarray(eps)
    R = eps.shape[0]
    nb, lengths = _block_layout(T, n)
    pad = np.zeros((R, nb * n), dtype=np.int32)
    pad[:, :T] = eps
    blocks = pad.reshape(R, nb, n)
    sums = blocks.sum(axis=2).astype(float)
    allplus = np.all(blocks[:, :K, :] == 1, axis=2)
    stopped = allplus.any(axis=1)
    stop = np.where(stopped, allplus.argmax(axis=1), -1)
    last = np.where(stopped, stop, nb - 1)
    j = np.arange(nb)
    out = np.empty(R)
    logM = math.log(M)
    for k in range(R):
        J = last[k]
        w = np.exp((j[:J + 1] - J) * logM)
        s = float(w @ sums[k, :J + 1])
        v = float((w * w) @ lengths[:J + 1])
        out[k] = s * s / v
    return out, stop


# ---------------------------------------------------------- labels and scripts

class RademacherLabels:
    """Labels ``y_t = ±1`` from a fair coin, independent of everything else."""

    def label(self, x, yhat, rng):
        return 1.0 if rng.random() < 0.5 else -1.0


class GameEnv:
    """Pairs a covariate source with a label rule for the game loop.

    ``covariates`` is a callable ``(history, rng) -> x``; ``labels`` has a
    ``label(x, yhat, rng)`` method.
    """

    def __init__(self, covariates, labels, dim):
        self.covariates = covariates
        self.labels = labels
        self.dim = dim
        self.history = []

    def reveal_covariate(self, rng):
        x = np.atleast_1d(np.asarray(self.covariates(self.history, rng), dtype=float))
        self.history.append(x)
        return x

    def reveal_label(self, yhat, rng):
        return float(self.labels.label(self.history[-1], yhat, rng))


def rademacher_label_env(covariate_source, dim):
    return GameEnv(covariate_source, RademacherLabels(), dim)


class AgainstPrediction:
    """Worst-case ±1 label: the sign opposite to the committed forecast.

    Ties (forecast exactly 0) are broken by a fair coin.
    """

    def label(self, x, yhat, rng):
        if yhat > 0:
            return -1.0
        if yhat < 0:
            return 1.0
        return 1.0 if rng.random() < 0.5 else -1.0


def sequence_source(xs):
    """Covariate source replaying a fixed array (rows are covariates)."""
    xs = np.asarray(xs, dtype=float)
    if xs.ndim == 1:
        xs = xs[:, None]

    def source(history, rng):
        return xs[len(history)]

    return source


def scale_script(name, T, rng, scale=1.0):
    """Covariate scripts for the scale-adaptivity experiments (d = 1).

    ``constant``: magnitudes uniform in [1, 2).  ``jumps``: the same, then
    multiplied by 1e9 over the middle third and by 1e-9 over the last
    third.  ``geometric``: ``1.01^t``.  Signs are random; every entry is
    multiplied by ``scale``.
    """
    mag = 1.0 + rng.random(T)
    sgn = np.where(rng.random(T) < 0.5, -1.0, 1.0)
    if name == "constant":
        x = mag
    elif name == "jumps":
        x = mag.copy()
        x[T // 3: 2 * T // 3] *= 1e9
        x[2 * T // 3:] *= 1e-9
    elif name == "geometric":
        x = 1.01 ** np.arange(T)
    else:
        raise ValueError(f"unknown script {name!r}")
    return sgn * x * scale


# ----------------------------------------------------------- smooth processes

class SmoothEnvSpec:
    """A finite-support smooth environment.

    ``points`` (N, d) and ``base`` (N,) define the base measure; the
    conditional law of every covariate must have mass at most
    ``C_cov * base`` on each point.  ``rule`` is one of

    * ``"base"``: draw from the base measure;
    * ``"max_leverage"``: fill the caps ``C_cov * base`` greedily in order of
      decreasing leverage of each point against the covariates so far, so
      the environment pushes mass toward the least explored directions.
    """

    RULES = ("base", "max_leverage")

    def __init__(self, points, base, C_cov=1.0, rule="base", tol=DEFAULT_TOL):
        points = np.asarray(points, dtype=float)
        if points.ndim == 1:
            points = points[:, None]
        base = np.asarray(base, dtype=float)
        if base.shape != (points.shape[0],):
            raise ValueError("one base mass per support point is required")
        if np.any(base < 0) or abs(base.sum() - 1.0) > 1e-12:
            raise ValueError("base masses must be nonnegative and sum to 1")
        if not C_cov >= 1:
            raise ValueError("C_cov must be >= 1")
        if rule not in self.RULES:
            raise ValueError(f"unknown rule {rule!r}")
        self.points, self.base, self.C_cov, self.rule, self.tol = points, base, float(C_cov), rule, tol
        self.dim = points.shape[1]

    @classmethod
    def uniform(cls, points, C_cov=1.0, rule="base"):
        n = len(points)
        return cls(points, np.full(n, 1.0 / n), C_cov, rule)

    def to_json(self):
        return json.dumps({"points": self.points.tolist(), "base": self.base.tolist(),
                           "C_cov": self.C_cov, "rule": self.rule})

    @classmethod
    def from_json(cls, text):
        obj = json.loads(text)
        return cls(obj["points"], obj["base"], obj.get("C_cov", 1.0), obj.get("rule", "base"))

    def leverages(self, V):
        """``z^T (V + z z^T)^+ z`` for every support point z."""
        Z = self.points
        Vs = V[None] + Z[:, :, None] * Z[:, None, :]
        return np.einsum("ni,nij,nj->n", Z, pinv(Vs, self.tol), Z)

    def masses(self, history):
        """Conditional masses on the support given past covariates (list or array)."""
        if self.rule == "base" or self.C_cov == 1.0:
            p = self.base.copy()
        else:
            H = np.asarray(history, dtype=float).reshape(-1, self.dim)
            p = self._greedy(self.leverages(H.T @ H))
        self.check(p)
        return p

    def _greedy(self, scores):
        caps = self.C_cov * self.base
        order = np.lexsort((np.arange(len(scores)), -scores))
        p = np.zeros_like(caps)
        left = 1.0
        for i in order:
            p[i] = min(caps[i], left)
            left -= p[i]
            if left <= 0:
                break
        return p / p.sum()

    def check(self, p):
        bad = np.nonzero(p > self.C_cov * self.base * (1 + 1e-12) + 1e-15)[0]
        if bad.size:
            i = bad[0]
            raise ValueError(f"conditional mass {p[i]:.6g} at support point {self.points[i].tolist()} "
                             f"exceeds C_cov * base = {self.C_cov * self.base[i]:.6g}")
        if abs(p.sum() - 1.0) > 1e-9:
            raise ValueError("conditional masses do not sum to 1")


def _draw(p, u):
    c = np.cumsum(p)
    return min(int(np.searchsorted(c, u * c[-1], side="right")), len(p) - 1)


def smooth_sample(spec, history, rng):
    """Draw one covariate from the conditional law and append it to ``history``."""
    i = _draw(spec.masses(history), rng.random())
    x = spec.points[i].copy()
    history.append(x)
    return x


def coupling_grid_size(C_cov, T, delta):
    return int(math.ceil(C_cov * math.log(2 * T / delta)))


def rejection_coupling(spec, T, delta, rng):
    """Embed a smooth sequence in a grid of i.i.d. base-measure draws.

    Row ``t`` of the grid holds ``K = ceil(C_cov log(2T/delta))`` draws
    ``z_{t,j}`` from the base measure; ``z_{t,j}`` is accepted with
    probability ``p_t(z) / (C_cov mu(z))`` and ``x_t`` is the first accepted
    draw.  A row with no acceptance keeps sampling beyond the grid so that
    ``x_t`` still has the right law; such rows get ``chosen_index = -1``.

    Returns ``(x_seq, z_grid, chosen_index, success)`` where ``z_grid``
    holds support indices of shape (T, K).
    """
    K = coupling_grid_size(spec.C_cov, T, delta)
    z_grid = np.empty((T, K), dtype=np.int64)
    chosen = np.full(T, -1, dtype=np.int64)
    xs = np.empty((T, spec.dim))
    history = []
    cum = np.cumsum(spec.base)
    for t in range(T):
        p = spec.masses(history)
        ratio = np.divide(p, spec.C_cov * spec.base, out=np.zeros_like(p), where=spec.base > 0)
        if np.any(ratio > 1 + 1e-12):
            raise ValueError("acceptance probability above 1: the rule is not C_cov-smooth")
        z = np.minimum(np.searchsorted(cum, rng.random(K) * cum[-1], side="right"), len(p) - 1)
        acc = rng.random(K) < ratio[z]
        z_grid[t] = z
        if acc.any():
            j = int(acc.argmax())
            chosen[t] = j
            i = z[j]
        else:
            while True:
                i = min(int(np.searchsorted(cum, rng.random() * cum[-1], side="right")), len(p) - 1)
                if rng.random() < ratio[i]:
                    break
        xs[t] = spec.points[i]
        history.append(xs[t])
    return xs, z_grid, chosen, bool(np.all(chosen >= 0))


def smooth_batch(spec, T, rngs):
    """Covariate index sequences (R, T) for one generator per replication.

    Equivalent to calling :func:`smooth_sample` ``T`` times with each
    generator, but the leverage-driven rule is evaluated for all
    replications together.
    """
    R = len(rngs)
    U = np.stack([g.random(T) for g in rngs])
    idx = np.empty((R, T), dtype=np.int64)
    if spec.rule == "base" or spec.C_cov == 1.0:
        cum = np.cumsum(spec.base)
        idx[:] = np.minimum(np.searchsorted(cum, U * cum[-1], side="right"), len(cum) - 1)
        return idx
    Z = spec.points
    N, d = Z.shape
    V = np.zeros((R, d, d))
    ZZ = Z[:, :, None] * Z[:, None, :]
    caps = spec.C_cov * spec.base
    for t in range(T):
        Vs = V[:, None] + ZZ[None]
        lev = np.einsum("ni,rnij,nj->rn", Z, pinv(Vs, spec.tol), Z)
        p = _greedy_batch(lev, caps)
        c = np.cumsum(p, axis=1)
        i = (c < (U[:, t] * c[:, -1])[:, None]).sum(axis=1)
        i = np.minimum(i, N - 1)
        idx[:, t] = i
        V = V + ZZ[i]
    return idx


def _greedy_batch(scores, caps):
    R, N = scores.shape
    # stable descending order by score, ties by index (same as the scalar rule)
    order = np.lexsort((np.broadcast_to(np.arange(N), (R, N)), -scores), axis=1)
    cap_sorted = caps[order]
    before = np.cumsum(cap_sorted, axis=1) - cap_sorted
    take = np.clip(np.minimum(cap_sorted, 1.0 - before), 0.0, None)
    p = np.zeros((R, N))
    np.put_along_axis(p, order, take, axis=1)
    return p / p.sum(axis=1, keepdims=True)


def default_smooth_support(n_points=16, dim=2):
    """Spread-out support: directions on a half circle with radii ``2^(i mod 4)``."""
    i = np.arange(n_points)
    if dim == 1:
        return (2.0 ** (i % 4) * np.where(i % 2, -1.0, 1.0))[:, None]
    ang = np.pi * i / n_points
    pts = np.zeros((n_points, dim))
    pts[:, 0] = np.cos(ang)
    pts[:, 1] = np.sin(ang)
    return pts * (2.0 ** (i % 4))[:, None]


# ------------------------------------------------------------------ tightness

def tightness_params(C, T, n_max=None):
    """Number of levels ``n`` and escalation probability ``p``.

    ``n = min(floor((C-1) T / 4) + 1, n_max)``; the default ``n_max`` is
    ``floor(sqrt((C-1) T))``, which balances the two terms of the lower
    bound, capped at 480 so that ``4^n`` stays finite.
    """
    if not C > 1:
        raise ValueError("C must exceed 1")
    if n_max is None:
        n_max = max(1, int(math.floor(math.sqrt((C - 1) * T))))
    n_max = min(int(n_max), 480)
    n = max(1, min(int(math.floor((C - 1) * T / 4)) + 1, n_max))
    return n, min((C - 1) / n, 1.0)


def tightness_base_measure(C, n, p):
    """Support ``[0, 2, 4, ..., 2^n]`` and masses ``(1 - n p / C, p / C, ...)``."""
    pts = np.concatenate([[0.0], 2.0 ** np.arange(1, n + 1)])
    mu = np.concatenate([[1.0 - n * p / C], np.full(n, p / C)])
    return pts, mu


def tightness_env_path(C, T, rng, n_max=None):
    """Geometric escalation: with probability ``p`` emit ``2^k`` and raise k.

    After ``n`` escalations only zeros follow.
    """
    n, p = tightness_params(C, T, n_max)
    hits = rng.random(T) < p
    level = np.cumsum(hits)
    emit = hits & (level <= n)
    return np.where(emit, 2.0 ** np.minimum(level, n), 0.0)


def regularized_ell(xs, lam=1.0):
    """``sum_t x_t^2 / (lam + sum_{i<=t} x_i^2)`` for a 1-D sequence."""
    xs = np.asarray(xs, dtype=float)
    sq = xs * xs
    return float(np.sum(sq / (lam + np.cumsum(sq))))


def tightness_expected_sum(C, T, n_max=None):
    """Exact expectation of the regularized sum (binomial oracle)."""
    from scipy.stats import binom

    n, p = tightness_params(C, T, n_max)
    k = np.arange(1, n + 1)
    # the k-th escalation contributes 4^k / (1 + sum_{j<=k} 4^j) = 3 4^k / (4^(k+1) - 1)
    ratio = 3.0 / (4.0 - 4.0 ** (-k.astype(float)))
    return float(np.sum(ratio * binom.sf(k - 1, T, p)))


class AlignedLabels:
    """``y_t = sign(x_t)`` (first coordinate): the least-squares fit is as
    good as possible while the learner must still discover it.  Zero
    covariates get a fair coin."""

    def label(self, x, yhat, rng):
        s = float(np.sign(x[0]))
        return s if s != 0 else (1.0 if rng.random() < 0.5 else -1.0)
