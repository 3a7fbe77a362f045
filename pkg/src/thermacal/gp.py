"""Exact Gaussian process regression over 4-D (x, y, z, temperature) features.

The covariance is a squared-exponential kernel with a diagonal per-dimension
weight matrix plus i.i.d. observation noise. Fitting pre-factors the training
covariance with a Cholesky decomposition; no explicit matrix inverse is ever
formed on the prediction path. Hyperparameters are tuned by gradient descent
on the negative log marginal likelihood, parameterized in log space so
positivity needs no constraints.
"""

from __future__ import annotations

import math
import re
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.linalg import cho_solve, cholesky, solve_triangular

from .errors import CholeskyError, ContractError, DomainError

INPUT_DIM = 4

# Diagonal jitter escalation tried when plain factorization fails.
_JITTERS = (0.0, 1e-10, 1e-8, 1e-6)

_PIVOT_RE = re.compile(r"(\d+)-th leading minor")


def _check_features(X, name="X"):
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != INPUT_DIM:
        raise ContractError(f"{name} must have shape (n, {INPUT_DIM}), got {X.shape}")
    if not np.all(np.isfinite(X)):
        raise DomainError(f"{name} contains non-finite entries")
    return X


@dataclass(frozen=True)
class Hyperparams:
    """Kernel hyperparameters.

    w        per-dimension relevance weights (units 1 / input-unit^2)
    sigma_s  signal standard deviation, meters
    sigma_y  observation-noise standard deviation, meters
    """

    w: np.ndarray
    sigma_s: float
    sigma_y: float

    def __post_init__(self):
        w = np.asarray(self.w, dtype=np.float64)
        if w.shape != (INPUT_DIM,):
            raise ContractError(f"w must have {INPUT_DIM} entries, got shape {w.shape}")
        if not np.all(np.isfinite(w)) or np.any(w < 0):
            raise DomainError("weights must be finite and non-negative")
        for label, v in (("sigma_s", self.sigma_s), ("sigma_y", self.sigma_y)):
            if not (math.isfinite(v) and v > 0):
                raise DomainError(f"{label} must be finite and positive, got {v}")
        object.__setattr__(self, "w", w)
        object.__setattr__(self, "sigma_s", float(self.sigma_s))
        object.__setattr__(self, "sigma_y", float(self.sigma_y))


@dataclass(frozen=True)
class TrainingSet:
    """Training features (n, 4) and depth-delta targets (n,) in meters."""

    X: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        X = np.asarray(self.X, dtype=np.float64)
        y = np.asarray(self.y, dtype=np.float64).ravel()
        if X.ndim != 2 or X.shape[1] != INPUT_DIM:
            raise ContractError(f"X must have shape (n, {INPUT_DIM}), got {X.shape}")
        if X.shape[0] != y.shape[0]:
            raise ContractError(
                f"X has {X.shape[0]} rows but y has {y.shape[0]} entries"
            )
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)

    @property
    def n(self):
        return self.X.shape[0]

    def validate(self):
        """Raise unless the set is usable for fitting (n >= 1, finite)."""
        if self.n < 1:
            raise ContractError("training set is empty")
        if not np.all(np.isfinite(self.X)) or not np.all(np.isfinite(self.y)):
            raise DomainError("training set contains non-finite values")

    def has_duplicate_rows(self):
        """Exact duplicate feature rows make the covariance ill-conditioned as
        the noise level goes to zero."""
        return np.unique(self.X, axis=0).shape[0] < self.n


def log_params(hyper):
    """Pack a Hyperparams into the 6-vector (log w0..w3, log sigma_s^2, log sigma_y^2).

    Zero weights map to -inf, which downstream code treats as an excluded
    dimension.
    """
    vals = np.concatenate([hyper.w, [hyper.sigma_s**2, hyper.sigma_y**2]])
    with np.errstate(divide="ignore"):
        return np.log(vals)


def hyper_from_log(params):
    """Inverse of `log_params`."""
    p = np.asarray(params, dtype=np.float64)
    if p.shape != (6,):
        raise ContractError(f"log-parameter vector must have 6 entries, got {p.shape}")
    if np.any(np.isnan(p)):
        raise DomainError("log parameters contain NaN")
    v = np.exp(np.minimum(p, 700.0))  # overflow guard
    # Variances must stay strictly positive even if a search step underflows
    # them; weights may be exactly zero (-inf stays an excluded dimension).
    v[4:] = np.maximum(v[4:], 1e-300)
    return Hyperparams(w=v[:4], sigma_s=float(np.sqrt(v[4])), sigma_y=float(np.sqrt(v[5])))


def kernel_eval(xi, xj, same_index, hyper):
    """Covariance between two feature vectors.

    Returns sigma_s^2 * exp(-0.5 * sum_k w_k (xi_k - xj_k)^2), plus sigma_y^2
    when both arguments refer to the same training sample.
    """
    xi = np.asarray(xi, dtype=np.float64)
    xj = np.asarray(xj, dtype=np.float64)
    if xi.shape != (INPUT_DIM,) or xj.shape != (INPUT_DIM,):
        raise ContractError("kernel_eval expects two 4-vectors")
    if not (np.all(np.isfinite(xi)) and np.all(np.isfinite(xj))):
        raise DomainError("kernel_eval received non-finite input")
    d = xi - xj
    q = float(np.dot(d * d, hyper.w))
    val = hyper.sigma_s**2 * math.exp(-0.5 * q)
    if same_index:
        val += hyper.sigma_y**2
    return val


def gram_naive(X, hyper):
    """Training covariance by entry-wise double loop (reference implementation)."""
    X = _check_features(X)
    n = X.shape[0]
    if n < 1:
        raise ContractError("gram_naive needs at least one row")
    out = np.empty((n, n))
    for i in range(n):
        for j in range(n):
            out[i, j] = kernel_eval(X[i], X[j], i == j, hyper)
    return out


def cross_kernel_naive(A, B, hyper):
    """Cross-covariance by entry-wise double loop; no noise term.

    Quadratic python-level cost: the benchmark baseline and small-scale oracle.
    """
    A = _check_features(A, "A")
    B = _check_features(B, "B")
    out = np.empty((A.shape[0], B.shape[0]))
    for i in range(A.shape[0]):
        for j in range(B.shape[0]):
            out[i, j] = kernel_eval(A[i], B[j], False, hyper)
    return out


def cross_kernel_fast(A, B, hyper, out=None):
    """Cross-covariance via the expanded squared-norm identity; no noise term.

    Both inputs are scaled by sqrt(w) per column so one matrix product plus
    row/column squared norms yields every weighted squared distance at once.
    Cancellation can make those distances slightly negative, so they are
    clamped at zero before exponentiation. Matches the entry-wise evaluation
    to better than 1e-8 relative.
    """
    A = _check_features(A, "A")
    B = _check_features(B, "B")
    sw = np.sqrt(hyper.w)
    As = A * sw
    Bs = B * sw
    a2 = np.einsum("ij,ij->i", As, As)
    b2 = np.einsum("ij,ij->i", Bs, Bs)
    if out is None:
        out = np.empty((A.shape[0], B.shape[0]))
    elif out.shape != (A.shape[0], B.shape[0]):
        raise ContractError("out buffer has wrong shape")
    # G = -0.5 * clamp(a2 - 2 A.B^T + b2, 0); all passes in place.
    np.dot(As, Bs.T, out=out)
    out -= 0.5 * a2[:, None]
    out -= 0.5 * b2[None, :]
    np.minimum(out, 0.0, out=out)
    np.exp(out, out=out)
    out *= hyper.sigma_s**2
    return out


def gram(X, hyper):
    """Training covariance via the vectorized kernel, symmetrized, noise on the diagonal."""
    K = cross_kernel_fast(X, X, hyper)
    K = 0.5 * (K + K.T)
    np.fill_diagonal(K, hyper.sigma_s**2 + hyper.sigma_y**2)
    return K


def _chol_with_jitter(K):
    """Lower Cholesky factor of K, escalating diagonal jitter on failure."""
    n = K.shape[0]
    pivot = -1
    for jit in _JITTERS:
        Kj = K if jit == 0.0 else K + jit * np.eye(n)
        try:
            return cholesky(Kj, lower=True, check_finite=False), jit
        except np.linalg.LinAlgError as e:
            m = _PIVOT_RE.search(str(e))
            pivot = int(m.group(1)) if m else -1
    raise CholeskyError(
        f"covariance factorization failed at pivot {pivot} "
        f"even with diagonal jitter up to {_JITTERS[-1]:g}",
        pivot=pivot,
    )


@dataclass(frozen=True)
class FittedGP:
    """A trained model: features, hyperparameters, Cholesky factor, weights.

    Immutable after fitting and safe to share across threads.
    """

    X: np.ndarray
    hyper: Hyperparams
    L: np.ndarray
    alpha: np.ndarray
    mean_const: float = 0.0

    @property
    def n(self):
        return self.X.shape[0]

    def validate(self):
        n = self.n
        if self.L.shape != (n, n) or self.alpha.shape != (n,):
            raise ContractError("fitted model has inconsistent shapes")
        if np.any(np.diag(self.L) <= 0):
            raise ContractError("factor diagonal is not strictly positive")
        if n > 1 and np.any(np.triu(self.L, 1) != 0.0):
            raise ContractError("L is not lower-triangular")

    # -- serialization ------------------------------------------------------
    # Single binary file: magic "TGP1", then little-endian
    #   n (u64), w0..w3, sigma_s, sigma_y, mean_const (7 x f64),
    #   X (n x 4 f64, row-major), alpha (n f64),
    #   L packed lower triangle, rows in order (n(n+1)/2 f64).

    _MAGIC = b"TGP1"

    def save(self, path):
        n = self.n
        head = np.concatenate(
            [self.hyper.w, [self.hyper.sigma_s, self.hyper.sigma_y, self.mean_const]]
        )
        parts = [
            self._MAGIC,
            struct.pack("<Q", n),
            head.astype("<f8").tobytes(),
            np.ascontiguousarray(self.X, dtype="<f8").tobytes(),
            np.ascontiguousarray(self.alpha, dtype="<f8").tobytes(),
            np.ascontiguousarray(self.L[np.tril_indices(n)], dtype="<f8").tobytes(),
        ]
        Path(path).write_bytes(b"".join(parts))

    @classmethod
    def load(cls, path):
        try:
            raw = Path(path).read_bytes()
        except OSError as e:
            raise ContractError(f"cannot read model file {path}: {e}") from None
        if len(raw) < 12 or raw[:4] != cls._MAGIC:
            raise ContractError(f"{path}: not a fitted-model file (bad magic)")
        (n,) = struct.unpack_from("<Q", raw, 4)
        if n < 1:
            raise ContractError(f"{path}: model declares {n} training points")
        expected = 12 + 8 * (7 + 4 * n + n + n * (n + 1) // 2)
        if len(raw) != expected:
            raise ContractError(
                f"{path}: file has {len(raw)} bytes, expected {expected} for n={n}"
            )
        vals = np.frombuffer(raw, dtype="<f8", offset=12)
        w = vals[0:4].copy()
        sigma_s, sigma_y, mean_const = vals[4], vals[5], vals[6]
        off = 7
        X = vals[off : off + 4 * n].reshape(n, 4).copy()
        off += 4 * n
        alpha = vals[off : off + n].copy()
        off += n
        L = np.zeros((n, n))
        L[np.tril_indices(n)] = vals[off : off + n * (n + 1) // 2]
        gp = cls(
            X=X,
            hyper=Hyperparams(w=w, sigma_s=float(sigma_s), sigma_y=float(sigma_y)),
            L=L,
            alpha=alpha,
            mean_const=float(mean_const),
        )
        if np.any(np.diag(L) <= 0):
            raise ContractError(f"{path}: factor diagonal is not strictly positive")
        return gp


def fit(train, hyper, mean_const=0.0):
    """Pre-factor the training covariance and solve for prediction weights.

    alpha solves Sigma(X, X) alpha = y - mean_const via two triangular solves.
    On factorization failure, diagonal jitter (1e-10, 1e-8, 1e-6) is tried
    before raising CholeskyError with the offending pivot index.
    """
    train.validate()
    K = gram(train.X, hyper)
    L, _ = _chol_with_jitter(K)
    alpha = cho_solve((L, True), train.y - mean_const, check_finite=False)
    return FittedGP(
        X=train.X.copy(), hyper=hyper, L=L, alpha=alpha, mean_const=float(mean_const)
    )


def predict(gp, Xstar):
    """Posterior mean and per-query variance at the query features.

    Parameters
    ----------
    gp : FittedGP
    Xstar : (m, 4) array of query features.

    Returns
    -------
    mean : (m,) array, meters.
    variance : (m,) array, meters^2; the predictive diagonal only, clamped
        into [0, sigma_s^2 + sigma_y^2].
    """
    Xs = _check_features(Xstar, "Xstar")
    K = cross_kernel_fast(gp.X, Xs, gp.hyper)
    mean = gp.mean_const + K.T @ gp.alpha
    v = solve_triangular(gp.L, K, lower=True, check_finite=False)
    prior = gp.hyper.sigma_s**2 + gp.hyper.sigma_y**2
    var = prior - np.einsum("ij,ij->j", v, v)
    np.clip(var, 0.0, prior, out=var)
    return mean, var


def predict_mean(gp, Xstar):
    """Posterior mean only; skips the triangular solve used for the variance."""
    Xs = _check_features(Xstar, "Xstar")
    K = cross_kernel_fast(gp.X, Xs, gp.hyper)
    return gp.mean_const + K.T @ gp.alpha


def posterior_covariance(gp, Xstar, max_queries=2048):
    """Full m x m posterior covariance; debug aid for small query sets only.

    Dense maps must never come through here: the full covariance for a VGA
    frame would need hundreds of gigabytes.
    """
    Xs = _check_features(Xstar, "Xstar")
    if Xs.shape[0] > max_queries:
        raise ContractError(
            f"posterior_covariance is limited to {max_queries} queries, got {Xs.shape[0]}"
        )
    K = cross_kernel_fast(gp.X, Xs, gp.hyper)
    v = solve_triangular(gp.L, K, lower=True, check_finite=False)
    C = gram(Xs, gp.hyper) - v.T @ v
    return 0.5 * (C + C.T)


def nlml(train, hyper, mean_const=0.0):
    """Negative log marginal likelihood of the training targets."""
    train.validate()
    L, _ = _chol_with_jitter(gram(train.X, hyper))
    r = train.y - mean_const
    alpha = cho_solve((L, True), r, check_finite=False)
    return float(
        0.5 * np.dot(r, alpha)
        + np.log(np.diag(L)).sum()
        + 0.5 * train.n * math.log(2.0 * math.pi)
    )


def _nlml_value_and_grad(train, log_hyper, mean_const=0.0):
    """Value and analytic gradient of `nlml` w.r.t. the log-parameter vector."""
    hyper = hyper_from_log(log_hyper)
    X = train.X
    n = train.n
    ss2 = hyper.sigma_s**2
    sy2 = hyper.sigma_y**2
    E = cross_kernel_fast(X, X, hyper)  # signal part, sigma_s^2 * exp(-q/2)
    E = 0.5 * (E + E.T)
    np.fill_diagonal(E, ss2)
    K = E + sy2 * np.eye(n)
    L, _ = _chol_with_jitter(K)
    r = train.y - mean_const
    alpha = cho_solve((L, True), r, check_finite=False)
    value = float(
        0.5 * np.dot(r, alpha)
        + np.log(np.diag(L)).sum()
        + 0.5 * n * math.log(2.0 * math.pi)
    )
    # d nlml / d theta = 0.5 tr[(Sigma^-1 - alpha alpha^T) dSigma/dtheta]
    A = cho_solve((L, True), np.eye(n), check_finite=False)
    A -= np.outer(alpha, alpha)
    g = np.empty(6)
    for k in range(INPUT_DIM):
        dk = X[:, k, None] - X[None, :, k]
        dk *= dk
        g[k] = -0.25 * hyper.w[k] * np.einsum("ij,ij,ij->", A, E, dk)
    g[4] = 0.5 * np.einsum("ij,ij->", A, E)
    g[5] = 0.5 * sy2 * np.trace(A)
    return value, g


def nlml_grad(train, log_hyper, mean_const=0.0):
    """Analytic gradient of `nlml` with respect to the log parameters.

    `log_hyper` is the 6-vector (log w0..w3, log sigma_s^2, log sigma_y^2);
    see `log_params`. A -inf entry (zero weight) yields a zero gradient
    component: the dimension carries no information.
    """
    train.validate()
    _, g = _nlml_value_and_grad(train, log_hyper, mean_const)
    return g


@dataclass
class OptimizeResult:
    """Outcome of `optimize_hyper`."""

    hyper: Hyperparams
    nlml: float
    iterations: int
    converged: bool
    warning: str | None = None


def optimize_hyper(train, init, max_iters=500, tol=1e-5, mean_const=0.0):
    """Minimize the negative log marginal likelihood by gradient descent.

    Plain descent on the log parameters with Armijo backtracking, so accepted
    objective values are monotone non-increasing and the result never exceeds
    the starting value. Stops when the gradient norm drops below `tol` or
    after `max_iters` accepted steps. A factorization failure during a trial
    step rejects the step (the step size is halved); if no acceptable step
    can be found at all, the best parameters so far are returned with a
    warning set.
    """
    train.validate()
    theta = log_params(init)
    f, g = _nlml_value_and_grad(train, theta, mean_const)

    def value_at(th):
        try:
            return nlml(train, hyper_from_log(th), mean_const)
        except CholeskyError:
            return math.inf

    step = 1.0
    stepped = False
    converged = False
    warning = None
    iterations = 0
    for iterations in range(1, max_iters + 1):
        gnorm = float(np.linalg.norm(g))
        if gnorm < tol:
            converged = True
            iterations -= 1
            break
        s = step
        accepted = False
        for _ in range(40):
            cand = theta - s * g
            fc = value_at(cand)
            if fc <= f - 1e-4 * s * gnorm * gnorm:
                accepted = True
                break
            s *= 0.5
        if not accepted:
            warning = (
                "line search found no acceptable step; returning best parameters so far"
            )
            break
        theta, f = cand, fc
        stepped = True
        step = min(s * 2.0, 1e3)
        f, g = _nlml_value_and_grad(train, theta, mean_const)

    if not stepped:
        # Exact echo of the starting point (no exp/log round-trip).
        return OptimizeResult(init, f, iterations, converged, warning)
    return OptimizeResult(hyper_from_log(theta), f, iterations, converged, warning)
