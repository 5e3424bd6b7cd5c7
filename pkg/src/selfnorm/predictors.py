"""Online forecasters for square-loss linear regression.

Every predictor follows the same two-call round protocol::

    yhat = pred.predict(x)   # commits before y exists
    pred.update(x, y)

``predict`` never receives the outcome; ``update`` must be called with the
covariate that was just predicted on.
"""

from __future__ import annotations

import math
from fractions import Fraction

import numpy as np

from .gram import DEFAULT_TOL, GramState, pinv


class ProtocolError(RuntimeError):
    """Raised when predict/update calls are out of order."""


class _RoundMixin:
    _pending = None

    def _begin(self, x):
        if self._pending is not None:
            raise ProtocolError("predict() called twice without update()")
        self._pending = x

    def _end(self, x):
        if self._pending is None:
            raise ProtocolError("update() called before predict()")
        if not np.array_equal(self._pending, x):
            raise ProtocolError("update() covariate differs from the predicted one")
        self._pending = None


def _vec(x, dim):
    x = np.asarray(x, dtype=float).reshape(-1)
    if x.shape != (dim,):
        raise ValueError(f"expected a covariate of length {dim}, got {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ValueError("covariate is not finite")
    return x


class ZeroPredictor(_RoundMixin):
    """Always predicts 0."""

    name = "zero"

    def __init__(self, dim=1):
        self.dim = dim

    def predict(self, x):
        self._begin(_vec(x, self.dim))
        return 0.0

    def update(self, x, y):
        self._end(_vec(x, self.dim))


class VawPinv(_RoundMixin):
    """Unregularized Vovk-Azoury-Warmuth forecaster.

    Predicts ``x^T (V_{t-1} + x x^T)^+ S_{t-1}``, i.e. the minimum-norm
    minimizer of ``<theta, x>^2 + sum_{i<t} (<theta, x_i> - y_i)^2``.
    The forecast is unchanged when all covariates are multiplied by a
    common nonzero constant.
    """

    name = "vaw_pinv"

    def __init__(self, dim=1, tol=DEFAULT_TOL):
        self.dim = dim
        self.gram = GramState(dim, tol=tol)

    def theta(self, x):
        return self.gram.pinv_with(x) @ self.gram.S

    def predict(self, x):
        x = _vec(x, self.dim)
        self._begin(x)
        return float(x @ self.theta(x))

    def update(self, x, y):
        x = _vec(x, self.dim)
        self._end(x)
        self.gram.push(x, y)


class VawReg(_RoundMixin):
    """Ridge-regularized VAW forecaster with clipped output.

    ``theta = (lam I + sum_{i<t} x_i x_i^T + x x^T)^{-1} S_{t-1}`` and the
    forecast is ``<theta, x>`` clipped to ``[-clip, clip]``.
    """

    name = "vaw_reg"

    def __init__(self, dim=1, lam=1.0, clip=1.0):
        if not lam > 0:
            raise ValueError("lam must be positive")
        if not clip > 0:
            raise ValueError("clip must be positive")
        self.dim = dim
        self.lam = float(lam)
        self.clip = float(clip)
        # A solve on the accumulated matrix, not a Sherman-Morrison inverse:
        # the inverse update cancels catastrophically once lam << |x|^2.
        self.A = self.lam * np.eye(dim)
        self.S = np.zeros(dim)

    def raw(self, x):
        if self.dim == 1:
            return float(x[0] * self.S[0] / (self.A[0, 0] + x[0] * x[0]))
        return float(x @ np.linalg.solve(self.A + np.outer(x, x), self.S))

    def predict(self, x):
        x = _vec(x, self.dim)
        self._begin(x)
        return min(max(self.raw(x), -self.clip), self.clip)

    def update(self, x, y):
        x = _vec(x, self.dim)
        self._end(x)
        self.A += np.outer(x, x)
        self.S += float(y) * x


class Hedge:
    """Exponential weights over two experts with square loss.

    Expert 1 starts with prior weight ``eps`` and expert 0 with ``1 - eps``.
    Cumulative losses are stored shifted by their running minimum, which
    leaves the posterior unchanged and keeps the exponentials in range.
    """

    def __init__(self, eta=0.125, eps=0.5):
        if not 0 < eta <= 0.125:
            raise ValueError("eta must lie in (0, 1/8]")
        if not 0 < eps < 1:
            raise ValueError("eps must lie in (0, 1)")
        self.eta = float(eta)
        self.eps = float(eps)
        self.losses = np.zeros(2)
        self.log_prior = np.log([1.0 - self.eps, self.eps])

    def weights(self):
        z = self.log_prior - self.eta * self.losses
        z -= z.max()
        w = np.exp(z)
        return w / w.sum()

    def predict(self, pred0, pred1):
        w = self.weights()
        return float(w[0] * pred0 + w[1] * pred1)

    def update(self, pred0, pred1, y):
        self.losses += [(pred0 - y) ** 2, (pred1 - y) ** 2]
        self.losses -= self.losses.min()


def hedge_step(state, pred0, pred1, y):
    """One full round: returns the committed prediction and updates ``state``."""
    yhat = state.predict(pred0, pred1)
    state.update(pred0, pred1, y)
    return yhat, state


def floor_log(a, base):
    """Exact ``floor(log_base(a))`` for a > 0 and base > 1."""
    a, base = Fraction(a), Fraction(base)
    if a <= 0 or base <= 1:
        raise ValueError("need a > 0 and base > 1")
    k = math.floor(math.log(a) / math.log(base))
    while base ** (k + 1) <= a:
        k += 1
    while base ** k > a:
        k -= 1
    return k


class MetaPredictor(_RoundMixin):
    """Scale-doubling meta-algorithm for d = 1.

    Keeps a scale index ``k = floor(log_M max|x_s|)`` and restarts its
    subroutine on empty data whenever ``|x| >= M^(k+1)``.  The subroutine
    hedges the zero forecaster against a clipped :class:`VawReg` with
    ``lam = m^2 M^(2k) / T``, ``eta = 1 / (8 m^2)`` and prior ``beta / 16``
    on the VAW expert.  Defaults are ``M = T^2`` and ``beta = 1 / T``.
    """

    name = "meta"
    dim = 1

    def __init__(self, T, M=None, beta=None, m=1.0):
        if T < 1:
            raise ValueError("T must be >= 1")
        self.T = int(T)
        self.M = float(M) if M is not None else float(self.T) ** 2
        self.beta = float(beta) if beta is not None else 1.0 / self.T
        self.m = float(m)
        if not self.M > 1:
            raise ValueError("M must exceed 1")
        if not 0 < self.beta <= 1:
            raise ValueError("beta must lie in (0, 1]")
        self.k = None  # None encodes k = -infinity
        self._threshold = None
        self.hedge = None
        self.vaw = None
        self.t = 0
        self.restarts = []  # (round index, k)
        self._sub_pred = None

    def _restart(self, ax):
        self.k = floor_log(ax, self.M)
        self._threshold = Fraction(self.M) ** (self.k + 1)
        lam = float(self.m ** 2 * Fraction(self.M) ** (2 * self.k) / self.T)
        self.vaw = VawReg(1, lam=lam, clip=self.m)
        self.hedge = Hedge(eta=0.125 / self.m ** 2, eps=self.beta / 16)
        self.restarts.append((self.t, self.k))

    def predict(self, x):
        x = _vec(x, 1)
        self._begin(x)
        ax = abs(float(x[0]))
        if self.k is None:
            if ax > 0:
                self._restart(ax)
        elif ax >= self._threshold:
            self._restart(ax)
        if self.k is None:
            self._sub_pred = None
            return 0.0
        p1 = self.vaw.predict(x)
        self._sub_pred = p1
        return self.hedge.predict(0.0, p1)

    def update(self, x, y):
        x = _vec(x, 1)
        self._end(x)
        if self._sub_pred is not None:
            self.hedge.update(0.0, self._sub_pred, y)
            self.vaw.update(x, y)
        self.t += 1


def meta_step(state, x):
    """Prediction step of the meta-algorithm (``update`` must follow)."""
    return state.predict(x), state


def make_predictor(spec, dim, T=None):
    """Build a predictor from a config dict such as ``{"name": "vaw_pinv"}``."""
    spec = dict(spec)
    name = spec.pop("name")
    if name == "zero":
        return ZeroPredictor(dim)
    if name == "vaw_pinv":
        return VawPinv(dim, **spec)
    if name == "vaw_reg":
        return VawReg(dim, **spec)
    if name == "meta":
        if dim != 1:
            raise ValueError("the meta-algorithm is defined for d = 1 only")
        return MetaPredictor(spec.pop("T", T), **spec)
    raise ValueError(f"unknown predictor {name!r}")


def vaw_pinv_batch(X, Y, tol=DEFAULT_TOL):
    """Run VawPinv on a stack of sequences at once.

    ``X`` has shape (R, T, d) and ``Y`` shape (R, T).  Returns predictions
    and leverages ``x_t^T V_t^+ x_t``, both of shape (R, T).
    """
    X = np.asarray(X, dtype=float)
    Y = np.asarray(Y, dtype=float)
    R, T, d = X.shape
    S = np.zeros((R, d))
    V = np.zeros((R, d, d))
    preds = np.empty((R, T))
    levs = np.empty((R, T))
    for t in range(T):
        x = X[:, t, :]
        V = V + x[:, :, None] * x[:, None, :]
        if d == 1:
            v = V[:, 0, 0]
            safe = np.where(v > 0, v, 1.0)
            preds[:, t] = np.where(v > 0, x[:, 0] * S[:, 0] / safe, 0.0)
            levs[:, t] = np.where(v > 0, x[:, 0] ** 2 / safe, 0.0)
        else:
            P = pinv(V, tol)
            Px = np.einsum("rij,rj->ri", P, x)
            preds[:, t] = np.einsum("ri,ri->r", Px, S)
            levs[:, t] = np.einsum("ri,ri->r", Px, x)
        S = S + Y[:, t, None] * x
    return preds, np.clip(levs, 0.0, 1.0)
