"""Weighted, ridge-penalized logistic regression.

Binary models are fitted by IRLS (Newton's method on the penalized
log-likelihood). The solver is batched: ``irls_batch`` fits many small
independent problems at once, which is how the geographically weighted
engine uses it. Multinomial models are fitted by full-gradient ascent with
a backtracking line search.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit, log_expit, logsumexp, softmax

from .errors import DataError, DegenerateLabelsError, SingularityError

DEFAULT_L2 = 1e-4
# floor on the IRLS working weight p(1-p); keeps the Hessian invertible under
# quasi-separation without touching the gradient
_MIN_CURVATURE = 1e-10


@dataclass(frozen=True, eq=False)
class LogisticModel:
    """Fitted logistic model.

    Binary models have a length-p ``coefficients`` vector and a scalar
    ``intercept``; multinomial models have a ``(C, p)`` matrix and a
    length-C intercept, both summing to zero over classes.
    """

    coefficients: np.ndarray
    intercept: np.ndarray | float
    l2_lambda: float
    converged: bool
    n_effective: float
    n_iter: int = 0
    classes: tuple[int, ...] = (0, 1)

    @property
    def multinomial(self) -> bool:
        return np.ndim(self.coefficients) == 2

    @property
    def n_features(self) -> int:
        return int(np.shape(self.coefficients)[-1])

    def to_dict(self) -> dict:
        return {
            "kind": "multinomial" if self.multinomial else "binary",
            "coefficients": np.asarray(self.coefficients).tolist(),
            "intercept": np.asarray(self.intercept).tolist(),
            "l2_lambda": float(self.l2_lambda),
            "converged": bool(self.converged),
            "n_effective": float(self.n_effective),
            "n_iter": int(self.n_iter),
            "classes": list(self.classes),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LogisticModel":
        coef = np.asarray(d["coefficients"], dtype=float)
        icpt = np.asarray(d["intercept"], dtype=float)
        return cls(coef, icpt if icpt.ndim else float(icpt), float(d["l2_lambda"]),
                   bool(d["converged"]), float(d["n_effective"]), int(d.get("n_iter", 0)),
                   tuple(d.get("classes", (0, 1))))


def _check_inputs(X, y, w):
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X.reshape(-1, 1)
    n = X.shape[0]
    y = np.asarray(y).reshape(-1)
    w = np.ones(n) if w is None else np.asarray(w, dtype=float).reshape(-1)
    if y.shape[0] != n or w.shape[0] != n:
        raise DataError("X, y and w must have the same number of rows")
    if n < 2:
        raise DataError("need at least two rows")
    if np.any(w < 0) or not np.all(np.isfinite(w)):
        raise DataError("sample weights must be finite and non-negative")
    if np.count_nonzero(w > 0) < 2:
        raise DataError("need at least two rows with positive weight")
    if not np.all(np.isfinite(X)):
        raise DataError("X must be finite")
    return X, y, w


def binary_objective(beta, Xa, y, w, l2):
    """Penalized log-likelihood; ``beta[..., 0]`` is the unpenalized intercept."""
    eta = np.einsum("...nq,...q->...n", Xa, beta)
    ll = np.sum(w * (y * eta + log_expit(-eta)), axis=-1)
    return ll - 0.5 * l2 * np.sum(beta[..., 1:] ** 2, axis=-1)


def binary_gradient(beta, Xa, y, w, l2):
    eta = np.einsum("...nq,...q->...n", Xa, beta)
    g = np.einsum("...nq,...n->...q", Xa, w * (y - expit(eta)))
    g[..., 1:] -= l2 * beta[..., 1:]
    return g


def irls_batch(Xa, y, w, l2: float, max_iter: int = 100, tol: float = 1e-8,
               beta0=None, trace: list | None = None):
    """Fit ``m`` independent weighted binary logistic models.

    Parameters
    ----------
    Xa : (m, n, q) array
        Design matrices with the intercept column first.
    y, w : (m, n) arrays
        0/1 targets and non-negative sample weights. Zero-weight rows are
        ignored, so ragged problems can be padded.
    l2 : float
        Ridge penalty on every column except the first.

    Returns
    -------
    beta : (m, q) array
    converged : (m,) bool array
    n_iter : (m,) int array
    singular : (m,) bool array
        Problems whose Newton system could not be solved; their ``beta``
        is the last finite iterate.
    """
    Xa = np.asarray(Xa, dtype=float)
    y = np.asarray(y, dtype=float)
    w = np.asarray(w, dtype=float)
    m, n, q = Xa.shape
    beta = np.zeros((m, q)) if beta0 is None else np.array(beta0, dtype=float)
    penalty = np.full(q, float(l2))
    penalty[0] = 0.0
    converged = np.zeros(m, dtype=bool)
    singular = np.zeros(m, dtype=bool)
    n_iter = np.zeros(m, dtype=np.int64)
    obj = binary_objective(beta, Xa, y, w, l2)
    if trace is not None:
        trace.append(obj.copy())
    active = np.arange(m)
    for it in range(1, max_iter + 1):
        if active.size == 0:
            break
        Xs, ys, ws, bs = Xa[active], y[active], w[active], beta[active]
        eta = np.matmul(Xs, bs[..., None])[..., 0]
        mu = expit(eta)
        s = ws * np.maximum(mu * (1.0 - mu), _MIN_CURVATURE)
        H = np.matmul(np.swapaxes(Xs * s[..., None], 1, 2), Xs)
        H[:, np.arange(q), np.arange(q)] += penalty
        g = np.matmul((ws * (ys - mu))[:, None, :], Xs)[:, 0, :] - penalty * bs
        step, ok = _solve(H, g)
        singular[active[~ok]] = True
        n_iter[active] = it

        # step halving keeps the objective non-decreasing
        old = obj[active]
        t = np.ones(len(active))
        new_beta = bs + step
        new_obj = binary_objective(new_beta, Xs, ys, ws, l2)
        for _ in range(40):
            worse = ok & ~(new_obj >= old - 1e-12 * (1.0 + np.abs(old)))
            if not worse.any():
                break
            t[worse] *= 0.5
            new_beta[worse] = bs[worse] + t[worse, None] * step[worse]
            new_obj[worse] = binary_objective(new_beta[worse], Xs[worse], ys[worse],
                                              ws[worse], l2)
        new_beta[~ok] = bs[~ok]
        new_obj[~ok] = old[~ok]
        beta[active] = new_beta
        obj[active] = new_obj
        if trace is not None:
            trace.append(obj.copy())

        delta = np.max(np.abs(t[:, None] * step), axis=1)
        done = (delta < tol) | ~ok
        converged[active[done & ok]] = True
        active = active[~done]
    return beta, converged, n_iter, singular


def _solve(H, g):
    """Batched ``H^-1 g`` returning a per-problem success mask."""
    try:
        sol = np.linalg.solve(H, g[..., None])[..., 0]
        ok = np.all(np.isfinite(sol), axis=1)
        return np.where(ok[:, None], sol, 0.0), ok
    except np.linalg.LinAlgError:
        sol = np.zeros_like(g)
        ok = np.ones(len(g), dtype=bool)
        for a in range(len(g)):
            try:
                sol[a] = np.linalg.solve(H[a], g[a])
            except np.linalg.LinAlgError:
                ok[a] = False
        ok &= np.all(np.isfinite(sol), axis=1)
        return np.where(ok[:, None], sol, 0.0), ok


def add_intercept(X):
    X = np.asarray(X, dtype=float)
    return np.concatenate([np.ones(X.shape[:-1] + (1,)), X], axis=-1)


def fit_binary_logistic(X, y, w=None, l2_lambda: float = DEFAULT_L2,
                        max_iter: int = 100, tol: float = 1e-8) -> LogisticModel:
    """Weighted binary logistic regression by IRLS.

    Maximizes ``sum w*loglik - (l2_lambda/2)*||beta||^2`` with the intercept
    unpenalized.
    """
    X, y, w = _check_inputs(X, y, w)
    if l2_lambda < 0:
        raise DataError("l2_lambda must be non-negative")
    y = (y > 0).astype(float)
    pos = w > 0
    if y[pos].min() == y[pos].max():
        raise DegenerateLabelsError("only one label among positively weighted rows")
    Xa = add_intercept(X)
    if l2_lambda == 0 and np.linalg.matrix_rank(Xa[pos]) < Xa.shape[1]:
        raise SingularityError("design is rank deficient; use l2_lambda > 0")
    beta, conv, n_iter, sing = irls_batch(Xa[None], y[None], w[None],
                                          l2_lambda, max_iter, tol)
    if sing[0]:
        raise SingularityError("weighted normal equations are singular; use l2_lambda > 0")
    return LogisticModel(coefficients=beta[0, 1:].copy(), intercept=float(beta[0, 0]),
                         l2_lambda=float(l2_lambda), converged=bool(conv[0]),
                         n_effective=float(w.sum()), n_iter=int(n_iter[0]))


def multinomial_objective(theta, Xa, Y, w, l2):
    """Penalized multinomial log-likelihood; ``theta`` is (C, q)."""
    eta = Xa @ theta.T
    ll = np.sum(w * (np.sum(Y * eta, axis=1) - logsumexp(eta, axis=1)))
    return ll - 0.5 * l2 * np.sum(theta[:, 1:] ** 2)


def multinomial_gradient(theta, Xa, Y, w, l2):
    P = softmax(Xa @ theta.T, axis=1)
    G = ((Y - P) * w[:, None]).T @ Xa
    G[:, 1:] -= l2 * theta[:, 1:]
    return G


def fit_multinomial_logistic(X, y, w=None, l2_lambda: float = DEFAULT_L2,
                             n_classes: int | None = None, max_iter: int = 500,
                             tol: float = 1e-7) -> LogisticModel:
    """Weighted softmax regression by gradient ascent with backtracking.

    Steps start from a Barzilai-Borwein estimate and are halved until the
    Armijo condition holds. Parameters are centred over classes after each
    step (the likelihood is invariant to this, the penalty can only drop).
    """
    X, y, w = _check_inputs(X, y, w)
    y = y.astype(np.int64)
    C = int(y.max()) + 1 if n_classes is None else int(n_classes)
    present = np.unique(y[w > 0])
    if len(present) < C or C < 2:
        missing = sorted(set(range(C)) - set(present.tolist()))
        raise DegenerateLabelsError(f"classes {missing} absent among positively weighted rows")
    Xa = add_intercept(X)
    Y = np.zeros((len(y), C))
    Y[np.arange(len(y)), y] = 1.0
    theta = np.zeros((C, Xa.shape[1]))
    f = multinomial_objective(theta, Xa, Y, w, l2_lambda)
    g = multinomial_gradient(theta, Xa, Y, w, l2_lambda)
    # first step from a bound on the likelihood's curvature
    step = 1.0 / (0.5 * np.sum(w[:, None] * Xa ** 2) + l2_lambda)
    prev_theta = prev_g = None
    n_iter = 0
    while np.linalg.norm(g) >= tol and n_iter < max_iter:
        n_iter += 1
        if prev_theta is not None:
            s = (theta - prev_theta).ravel()
            d = (g - prev_g).ravel()
            sd = abs(float(s @ d))
            if sd > 0:
                step = float(s @ s) / sd
        gnorm2 = float(np.sum(g * g))
        for _ in range(60):
            cand = theta + step * g
            cand -= cand.mean(axis=0)
            f_new = multinomial_objective(cand, Xa, Y, w, l2_lambda)
            if f_new >= f + 1e-4 * step * gnorm2:
                break
            step *= 0.5
        else:
            # no ascent possible at working precision
            break
        prev_theta, prev_g = theta, g
        theta, f = cand, f_new
        g = multinomial_gradient(theta, Xa, Y, w, l2_lambda)
    converged = bool(np.linalg.norm(g) < tol)
    return LogisticModel(coefficients=theta[:, 1:].copy(), intercept=theta[:, 0].copy(),
                         l2_lambda=float(l2_lambda), converged=converged,
                         n_effective=float(w.sum()), n_iter=n_iter,
                         classes=tuple(range(C)))


def predict_proba(model: LogisticModel, X) -> np.ndarray:
    """Class probabilities, one row per sample; binary models give (1-p, p)."""
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X.reshape(1, -1) if model.n_features > 1 else X.reshape(-1, 1)
    if X.shape[1] != model.n_features:
        raise DataError(f"model has {model.n_features} features, X has {X.shape[1]}")
    if model.multinomial:
        return softmax(X @ np.asarray(model.coefficients).T + model.intercept, axis=1)
    p = expit(X @ model.coefficients + model.intercept)
    return np.column_stack([1.0 - p, p])
