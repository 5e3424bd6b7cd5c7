"""Incremental Gram-matrix bookkeeping for self-normalized sums.

A :class:`GramState` tracks ``S = sum y_i x_i``, ``V = sum x_i x_i^T`` and a
cached Moore-Penrose pseudoinverse of ``V``.  The cache is maintained with
closed-form rank-one updates when they are numerically safe and falls back
to a fresh eigendecomposition otherwise.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

DEFAULT_TOL = 1e-10
MAX_DIM = 64

# Closed-form update thresholds on |u|^2 / |x|^2, where u is the component of
# x outside range(V).  Between the two the update falls back to eigh.
_IN_RANGE_REL = 1e-18
_OUT_OF_RANGE_REL = 1e-4
# Above this trace(V) * trace(V^+) condition estimate the cache is rebuilt
# from eigh after every push.
_COND_LIMIT = 1e6
# Closed-form results whose Penrose residual exceeds this are recomputed.
_PENROSE_REL = 1e-11


class RescaleNeeded(OverflowError):
    """Raised when a push would overflow V; rescale the history first."""


def _check_finite(a, what):
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{what} contains NaN or Inf")


def pinv(M, tol=DEFAULT_TOL):
    """Pseudoinverse of a symmetric PSD matrix (or a stack of them).

    Eigenvalues at or below ``tol * lambda_max`` are discarded.
    """
    M = np.asarray(M, dtype=float)
    _check_finite(M, "matrix")
    if M.shape[-1] != M.shape[-2]:
        raise ValueError(f"matrix must be square, got shape {M.shape}")
    asym = np.max(np.abs(M - np.swapaxes(M, -1, -2)), initial=0.0)
    scale = np.max(np.abs(M), initial=0.0)
    if asym > tol * max(scale, 1e-300) and asym > 0:
        raise ValueError(f"matrix is not symmetric (max asymmetry {asym:.3e})")
    w, Q = np.linalg.eigh(0.5 * (M + np.swapaxes(M, -1, -2)))
    lam_max = w[..., -1:]
    keep = w > tol * lam_max
    inv_w = np.where(keep, 1.0 / np.where(keep, w, 1.0), 0.0)
    return (Q * inv_w[..., None, :]) @ np.swapaxes(Q, -1, -2)


def psd_rank(M, tol=DEFAULT_TOL):
    w = np.linalg.eigvalsh(M)
    return int(np.sum(w > tol * w[-1])) if w[-1] > 0 else 0


def sm_inverse_update(Minv, x):
    """Return ``(M + x x^T)^{-1}`` given ``Minv = M^{-1}`` (Sherman-Morrison)."""
    Minv = np.asarray(Minv, dtype=float)
    x = np.asarray(x, dtype=float).reshape(-1)
    _check_finite(Minv, "Minv")
    _check_finite(x, "x")
    if not np.allclose(Minv, Minv.T, rtol=1e-10, atol=0.0):
        raise ValueError("Minv is not symmetric")
    try:
        np.linalg.cholesky(Minv)
    except np.linalg.LinAlgError:
        raise ValueError("Minv is not positive definite") from None
    Mx = Minv @ x
    return Minv - np.outer(Mx, Mx) / (1.0 + x @ Mx)


@dataclass
class GramState:
    """Running ``S``, ``V``, cached ``V^+`` and the elliptical potential sum.

    Mutating methods work in place and return ``self``; use :meth:`copy`
    when the previous state must survive.
    """

    dim: int
    tol: float = DEFAULT_TOL
    t: int = 0
    S: np.ndarray = field(default=None, repr=False)
    V: np.ndarray = field(default=None, repr=False)
    P: np.ndarray = field(default=None, repr=False)
    rank: int = 0
    ell_sum: float = 0.0
    n_fallback: int = 0

    def __post_init__(self):
        if not 1 <= self.dim <= MAX_DIM:
            raise ValueError(f"dim must lie in [1, {MAX_DIM}], got {self.dim}")
        if not self.tol > 0:
            raise ValueError("tol must be positive")
        d = self.dim
        if self.S is None:
            self.S = np.zeros(d)
        if self.V is None:
            self.V = np.zeros((d, d))
        if self.P is None:
            self.P = np.zeros((d, d))

    def copy(self):
        return copy.deepcopy(self)

    def _as_vector(self, x):
        x = np.asarray(x, dtype=float).reshape(-1)
        if x.shape != (self.dim,):
            raise ValueError(f"expected a vector of length {self.dim}, got {x.shape}")
        _check_finite(x, "x")
        return x

    def _classify(self, x):
        """Return ("zero" | "in" | "out" | "ambiguous", u, Px)."""
        xx = x @ x
        if xx == 0.0:
            return "zero", None, None
        Px = self.P @ x
        if self.rank == 0:
            return "out", x, Px
        u = x - self.V @ Px
        ratio = (u @ u) / xx
        if ratio <= _IN_RANGE_REL:
            return "in", u, Px
        if ratio > _OUT_OF_RANGE_REL and u @ u > self.tol * np.trace(self.V):
            return "out", u, Px
        return "ambiguous", u, Px

    def _updated(self, x):
        """Return ``((V + x x^T)^+, rank, used_fallback)`` for a checked x."""
        kind, u, Px = self._classify(x)
        if kind == "zero":
            return self.P, self.rank, False
        V_new = self.V + np.outer(x, x)
        P_new = None
        if kind == "in":
            P_new = self.P - np.outer(Px, Px) / (1.0 + x @ Px)
            rank = self.rank
        elif kind == "out":
            w = u / (u @ u)
            beta = 1.0 + x @ Px
            P_new = self.P - np.outer(Px, w) - np.outer(w, Px) + beta * np.outer(w, w)
            rank = self.rank + 1
        if P_new is not None and np.trace(V_new) * np.trace(P_new) > _COND_LIMIT:
            P_new = None
        if P_new is not None:
            # Penrose condition P V P = P as a cheap accuracy check
            resid = np.linalg.norm(P_new @ V_new @ P_new - P_new)
            if resid > _PENROSE_REL * np.linalg.norm(P_new):
                P_new = None
        if P_new is None:
            return pinv(V_new, self.tol), psd_rank(V_new, self.tol), True
        return 0.5 * (P_new + P_new.T), rank, False

    def pinv_with(self, x):
        """``(V + x x^T)^+`` without modifying the state."""
        return self._updated(self._as_vector(x))[0].copy()

    def push(self, x, y=0.0):
        """Absorb one observation ``(x, y)``; returns self."""
        x = self._as_vector(x)
        y = float(y)
        if not np.isfinite(y):
            raise ValueError("y is not finite")
        with np.errstate(over="ignore", invalid="ignore"):
            V_new = self.V + np.outer(x, x)
        if not np.all(np.isfinite(V_new)):
            raise RescaleNeeded("V overflowed; call rescale() on the history first")
        self.t += 1
        if not np.any(x):
            return self
        P_new, rank, fallback = self._updated(x)
        self.n_fallback += fallback
        inc = float(x @ P_new @ x)
        self.S = self.S + y * x
        self.V = V_new
        self.P = P_new
        self.rank = rank
        self.ell_sum += min(max(inc, 0.0), 1.0)
        return self

    def leverage(self, x):
        """``x^T (V + x x^T)^+ x``, a number in [0, 1]."""
        x = self._as_vector(x)
        if not np.any(x):
            return 0.0
        lev = float(x @ self._updated(x)[0] @ x)
        return min(max(lev, 0.0), 1.0)

    def selfnorm(self, verify=False):
        """``S^T V^+ S`` from the cached pseudoinverse.

        With ``verify=True`` the value is recomputed from a fresh
        eigendecomposition and a mismatch raises ``AssertionError``.
        """
        if self.t == 0:
            return 0.0
        r = float(self.S @ self.P @ self.S)
        if verify:
            fresh = float(self.S @ pinv(self.V, self.tol) @ self.S)
            if abs(fresh - r) > 1e-8 * max(1.0, abs(fresh)):
                raise AssertionError(f"cached selfnorm {r!r} != recomputed {fresh!r}")
        return max(r, 0.0)

    def rescale(self, alpha):
        """Replace every past covariate ``x_i`` by ``alpha * x_i``."""
        alpha = float(alpha)
        if not (np.isfinite(alpha) and alpha > 0):
            raise ValueError(f"alpha must be finite and positive, got {alpha}")
        self.S = alpha * self.S
        self.V = alpha ** 2 * self.V
        self.P = self.P / alpha ** 2
        return self

    def transform(self, A):
        """Replace every past covariate ``x_i`` by ``A @ x_i`` (A invertible).

        ``S^T V^+ S`` is unchanged; this is the matrix form of :meth:`rescale`.
        """
        A = np.asarray(A, dtype=float)
        if A.shape != (self.dim, self.dim):
            raise ValueError(f"A must be {self.dim}x{self.dim}")
        _check_finite(A, "A")
        Ainv = np.linalg.inv(A)
        self.S = A @ self.S
        V = A @ self.V @ A.T
        self.V = 0.5 * (V + V.T)
        P = Ainv.T @ self.P @ Ainv
        self.P = 0.5 * (P + P.T)
        return self

    def pinv_error(self):
        """Relative Frobenius distance between the cache and a fresh pinv."""
        fresh = pinv(self.V, self.tol)
        scale = np.linalg.norm(fresh)
        diff = np.linalg.norm(self.P - fresh)
        return float(diff / scale) if scale > 0 else float(diff)


def gram_push(state, x, y=0.0):
    return state.push(x, y)


def rescale_history(state, alpha):
    return state.rescale(alpha)


def selfnorm_value(S, V, tol=DEFAULT_TOL):
    """``S^T V^+ S`` for one pair or for stacked pairs (batch leading axes)."""
    S = np.asarray(S, dtype=float)
    V = np.asarray(V, dtype=float)
    if V.shape[-1] == 1:
        v = V[..., 0, 0]
        s = S[..., 0]
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(v > 0, s * s / np.where(v > 0, v, 1.0), 0.0)
    P = pinv(V, tol)
    return np.einsum("...i,...ij,...j->...", S, P, S)
