"""Entropic optimal transport between finite sample batches.

The solver works on the dual potentials in the log domain: every update is a
log-sum-exp of ``log(weight) + (potential - C) / lam``, so ``C / lam`` ratios in
the 1e5 range never get exponentiated on their own.

The training loss is the primal transport cost ``<C, P>`` of the converged
plan (:func:`plan_cost`). The dual objective ``<a, f> + <b, g>`` is available
as :func:`dual_value`; the two differ by the entropic term.
"""

import math
from dataclasses import dataclass

import numba
import numpy as np

from .exceptions import NumericalFailure

DEFAULT_TOL = 1e-6
DEFAULT_MAX_ITERS = 500


@dataclass(frozen=True)
class CostMatrix:
    values: np.ndarray
    mix_weight: float = 0.0

    @property
    def shape(self):
        return self.values.shape


@dataclass(frozen=True)
class DualPotentials:
    f: np.ndarray
    g: np.ndarray
    lam: float
    iterations: int
    residual: float
    converged: bool


@dataclass(frozen=True)
class TransportPlan:
    weights: np.ndarray
    row_marginal: np.ndarray
    col_marginal: np.ndarray

    @property
    def mass(self):
        return float(self.weights.sum())


def _pairwise_diff(X, Y):
    return X[:, None, :] - Y[None, :, :]


def elementwise_cost(x, y, m=0.0):
    """Squared L2 plus ``m`` times L1 distance between two vectors."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError(f"cost needs two vectors of equal length, got {x.shape} and {y.shape}")
    diff = x - y
    cost = np.sum(diff * diff)
    if m:
        cost = cost + m * np.sum(np.abs(diff))
    return float(cost)


def cost_matrix(X, Y, m=0.0):
    """Pairwise :func:`elementwise_cost` between the rows of ``X`` and ``Y``."""
    X = np.asarray(X, dtype=float)
    Y = np.asarray(Y, dtype=float)
    if X.ndim != 2 or Y.ndim != 2 or X.shape[1] != Y.shape[1]:
        raise ValueError(f"cost matrix needs (n, d) and (m, d) inputs, got {X.shape} and {Y.shape}")
    diff = _pairwise_diff(X, Y)
    values = np.sum(diff * diff, axis=-1)
    if m:
        values = values + m * np.sum(np.abs(diff), axis=-1)
    return CostMatrix(values=values, mix_weight=float(m))


def uniform(n):
    return np.full(n, 1.0 / n) if n else np.zeros(0)


def _check_weights(w, n, name):
    w = uniform(n) if w is None else np.asarray(w, dtype=float)
    if w.shape != (n,):
        raise ValueError(f"{name} has shape {w.shape}, expected ({n},)")
    if n and (np.any(w < 0) or not np.isclose(w.sum(), 1.0, rtol=0, atol=1e-9)):
        raise ValueError(f"{name} must be a probability vector")
    return w


def _neg_lse(scaled, h, buf):
    # -logsumexp_j(h_j - scaled_ij) for every row i; buf has scaled's shape
    np.subtract(h, scaled, out=buf)
    amax = buf.max(axis=1)
    buf -= amax[:, None]
    np.exp(buf, out=buf)
    return -(np.log(buf.sum(axis=1)) + amax)


def _sweeps(scaled, log_a, log_b, lam, f, g, max_iters, tol):
    scaled_t = np.ascontiguousarray(scaled.T)
    a = np.exp(log_a)
    buf_f = np.empty_like(scaled)
    buf_g = np.empty_like(scaled_t)
    for it in range(1, max_iters + 1):
        f_new = lam * _neg_lse(scaled, log_b + g / lam, buf_f)
        if it > 1:
            # rows of the plan for (f, g) sum to a * exp((f - f_new) / lam);
            # columns are exact because g was fitted to f on the last sweep
            if np.max(np.abs(a * np.expm1((f - f_new) / lam))) <= tol:
                return it - 1, True, 0
        f[:] = f_new
        g[:] = lam * _neg_lse(scaled_t, log_a + f / lam, buf_g)
        if not (np.all(np.isfinite(f)) and np.all(np.isfinite(g))):
            return it, False, it
    return max_iters, False, 0


@numba.njit(cache=True, inline="always")
def _row_neg_lse(mat, i, h, n_cols):
    # -logsumexp_j(h_j - mat_ij)
    jmax = 0
    mx = h[0] - mat[i, 0]
    for j in range(1, n_cols):
        v = h[j] - mat[i, j]
        if v > mx:
            mx = v
            jmax = j
    # the max term contributes exp(0) = 1 exactly; terms below exp(-60)
    # are under half an ulp of the sum and are skipped
    rest = 0.0
    for j in range(n_cols):
        if j != jmax:
            v = h[j] - mat[i, j] - mx
            if v > -60.0:
                rest += math.exp(v)
    return -(math.log1p(rest) + mx)


@numba.njit(cache=True)
def _row_violation(a, f, f_new, inv):
    err = 0.0
    for i in range(a.shape[0]):
        e = abs(a[i] * math.expm1((f[i] - f_new[i]) * inv))
        if e > err:
            err = e
    return err


@numba.njit(cache=True)
def _sweeps_compiled(scaled, scaled_t, log_a, log_b, lam, f, g, max_iters, tol):
    # scalar-loop twin of _sweeps on the scaled potentials u = f / lam, v = g / lam
    n, m = scaled.shape
    a = np.exp(log_a)
    u = np.zeros(n)
    u_new = np.empty(n)
    hu = np.empty(n)
    hv = np.empty(m)
    for j in range(m):
        hv[j] = log_b[j] + g[j] / lam
    for i in range(n):
        u[i] = f[i] / lam
    # a_i |expm1(x)| <= tol  <=>  lo_i <= x <= hi_i, checked without expm1
    lo = np.empty(n)
    hi = np.empty(n)
    for i in range(n):
        lo[i] = math.log1p(-tol / a[i]) if tol < a[i] else -math.inf
        hi[i] = math.log1p(tol / a[i])
    iterations, converged, failed_at = max_iters, False, 0
    for it in range(1, max_iters + 1):
        inside = it > 1
        for i in range(n):
            ui = _row_neg_lse(scaled, i, hv, m)
            x = u[i] - ui
            if x < lo[i] or x > hi[i]:
                inside = False
            u_new[i] = ui
        if inside and _row_violation(a, u, u_new, 1.0) <= tol:
            iterations, converged = it - 1, True
            break
        total = 0.0
        for i in range(n):
            u[i] = u_new[i]
            hu[i] = log_a[i] + u_new[i]
            total += u_new[i]
        for j in range(m):
            vj = _row_neg_lse(scaled_t, j, hu, n)
            hv[j] = log_b[j] + vj
            g[j] = vj
            total += vj
        # a NaN or infinity anywhere poisons the running sum
        if not math.isfinite(total):
            iterations, failed_at = it, it
            break
    for i in range(n):
        f[i] = lam * u[i]
    for j in range(m):
        g[j] = lam * g[j]
    return iterations, converged, failed_at


def sinkhorn_potentials(C, a=None, b=None, lam=0.05, max_iters=DEFAULT_MAX_ITERS,
                        tol=DEFAULT_TOL, backend="compiled"):
    """Run log-domain Sinkhorn iterations and return the dual potentials.

    Starting from ``f = g = 0`` the updates alternate

    ``f_i <- -lam * logsumexp_k(log b_k + (g_k - C_ik) / lam)``
    ``g_j <- -lam * logsumexp_k(log a_k + (f_k - C_kj) / lam)``

    Iteration stops once the induced plan violates its marginals by at most
    ``tol`` (max-norm), or after ``max_iters`` full sweeps.

    Parameters
    ----------
    C : CostMatrix or array of shape (n, m)
    a, b : arrays of shape (n,) and (m,), optional
        Marginal weights; uniform when omitted.
    lam : float
        Entropic regularization strength, > 0.
    max_iters : int
    tol : float
    backend : {"compiled", "numpy"}
        The compiled scalar loop is faster at batch sizes; the vectorized
        numpy path is kept as a reference.

    Returns
    -------
    DualPotentials
        ``residual`` is the max marginal violation of the returned potentials.

    Raises
    ------
    NumericalFailure
        If a non-finite potential appears; ``iteration`` holds the sweep index.
    """
    values = C.values if isinstance(C, CostMatrix) else np.asarray(C, dtype=float)
    n, m = values.shape
    if not lam > 0:
        raise ValueError(f"lam must be positive, got {lam}")
    a = _check_weights(a, n, "a")
    b = _check_weights(b, m, "b")
    if n == 0 or m == 0:
        return DualPotentials(np.zeros(n), np.zeros(m), float(lam), 0, 0.0, True)
    if not np.all(np.isfinite(values)):
        raise NumericalFailure("cost matrix contains non-finite entries", iteration=0)

    with np.errstate(divide="ignore"):
        log_a = np.log(a)
        log_b = np.log(b)
    scaled = np.ascontiguousarray(values / lam)
    f = np.zeros(n)
    g = np.zeros(m)
    if backend == "numpy":
        iterations, converged, failed_at = _sweeps(scaled, log_a, log_b, float(lam), f, g,
                                                   int(max_iters), float(tol))
    else:
        iterations, converged, failed_at = _sweeps_compiled(
            scaled, np.ascontiguousarray(scaled.T), log_a, log_b, float(lam), f, g,
            int(max_iters), float(tol))
    if failed_at:
        raise NumericalFailure(f"non-finite Sinkhorn potential at iteration {failed_at}",
                               iteration=int(failed_at))
    residual = _marginal_residual(values, f, g, a, b, lam)
    return DualPotentials(f, g, float(lam), int(iterations), residual,
                          bool(converged) or residual <= tol)


def _log_plan(values, f, g, a, b, lam):
    with np.errstate(divide="ignore"):
        return (f[:, None] + g[None, :] - values) / lam + np.log(a)[:, None] + np.log(b)[None, :]


def _marginal_residual(values, f, g, a, b, lam):
    P = np.exp(_log_plan(values, f, g, a, b, lam))
    return float(max(np.max(np.abs(P.sum(axis=1) - a)), np.max(np.abs(P.sum(axis=0) - b))))


def transport_plan(pot, C, a=None, b=None):
    """Recover ``P_ij = exp((f_i + g_j - C_ij) / lam) * a_i * b_j``."""
    values = C.values if isinstance(C, CostMatrix) else np.asarray(C, dtype=float)
    n, m = values.shape
    if pot.f.shape != (n,) or pot.g.shape != (m,):
        raise ValueError(f"potentials of shape {pot.f.shape}/{pot.g.shape} do not match cost {values.shape}")
    a = _check_weights(a, n, "a")
    b = _check_weights(b, m, "b")
    if n == 0 or m == 0:
        return TransportPlan(np.zeros((n, m)), a, b)
    weights = np.exp(_log_plan(values, pot.f, pot.g, a, b, pot.lam))
    return TransportPlan(weights, a, b)


def plan_cost(P, C):
    """Frobenius inner product ``sum_ij C_ij P_ij``."""
    weights = P.weights if isinstance(P, TransportPlan) else np.asarray(P)
    values = C.values if isinstance(C, CostMatrix) else np.asarray(C)
    if weights.shape != values.shape:
        raise ValueError(f"plan shape {weights.shape} != cost shape {values.shape}")
    return float(np.sum(weights * values))


def dual_value(pot, a=None, b=None):
    """Dual objective ``<a, f> + <b, g>`` (diagnostic only)."""
    a = _check_weights(a, pot.f.shape[0], "a")
    b = _check_weights(b, pot.g.shape[0], "b")
    return float(a @ pot.f + b @ pot.g)


def sample_gradient(X, Y, P, m=0.0, scale=1.0):
    """Gradient of ``<C(X, Y), P>`` with respect to ``X`` at a fixed plan.

    Row ``i`` is ``scale * sum_j P_ij * (2 (x_i - y_j) + m * sign(x_i - y_j))``
    with ``sign(0) = 0``. Holding the converged plan fixed gives the exact
    gradient of the entropic objective (envelope rule).
    """
    X = np.asarray(X, dtype=float)
    Y = np.asarray(Y, dtype=float)
    weights = P.weights if isinstance(P, TransportPlan) else np.asarray(P, dtype=float)
    if weights.shape != (X.shape[0], Y.shape[0]) or X.shape[1] != Y.shape[1]:
        raise ValueError(f"plan {weights.shape} does not match samples {X.shape} and {Y.shape}")
    # sum_j P_ij (x_i - y_j) = x_i * rowsum_i - (P Y)_i
    grad = 2.0 * (X * weights.sum(axis=1, keepdims=True) - weights @ Y)
    if m:
        grad = grad + m * np.einsum("ij,ijk->ik", weights, np.sign(_pairwise_diff(X, Y)))
    return scale * grad


def entropic_ot(X, Y, lam, m=0.0, a=None, b=None, max_iters=DEFAULT_MAX_ITERS, tol=DEFAULT_TOL):
    """Solve entropic OT between two sample batches.

    Returns ``(value, plan, potentials, cost)``; ``value`` is the primal
    transport cost of the plan.
    """
    C = cost_matrix(X, Y, m)
    pot = sinkhorn_potentials(C, a, b, lam=lam, max_iters=max_iters, tol=tol)
    P = transport_plan(pot, C, a, b)
    return plan_cost(P, C), P, pot, C
