"""Estimators for the multivariate random-effects model.

Maximum likelihood and REML via alternating mean/heterogeneity updates,
constrained maximum likelihood with the mean vector (or one component)
held fixed, and the sign-invariant method-of-moments between-study
covariance with truncation.

The heterogeneity step optimizes a smooth unconstrained
reparameterization (log between-study SDs, atanh correlations) with
analytic gradients, so refits from a warm start cost a handful of
function evaluations.
"""

from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize

from .exceptions import (
    DataError,
    IncompleteDataError,
    NonConvergenceError,
    SingularInformationError,
)
from .model import (
    EPS_PSD,
    CovStructure,
    HetParams,
    _group_weights,
    _sym_inverse,
    between_cov,
    model_terms,
    sym_solve,
)

__all__ = [
    "FitResult",
    "CmlResult",
    "fit_ml",
    "fit_reml",
    "fit_eta_given_mu",
    "fit_marginal_null",
    "moment_between_cov",
    "het_from_cov",
]

TOL = 1e-8
MAX_OUTER = 500
MAX_INNER = 200

TAU_MIN = 1e-8
TAU_MAX = 1e3
# atanh-scale box for correlations; tanh(6) leaves |kappa| <= 0.9999877,
# beyond which the likelihood is flat to machine precision
ZETA_MAX = 6.0
# reported tau at or below this reads as a boundary zero: on the log scale
# the likelihood is flat below the optimizer's ftol long before the tau
# floor is reached, so boundary solutions stall around 1e-5 rather than
# descending to TAU_MIN; tau^2 <= 1e-8 is zero at any plausible data scale
TAU_SNAP = 1e-4

# secondary stop for alternating fits: objective stationary to this
# relative level counts as converged even if parameters still jitter
LL_STATIONARY = 1e-10

_LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass(frozen=True, eq=False)
class FitResult:
    """Outcome of an unconstrained (ML or REML) fit.

    loglik is the maximized objective: the log-likelihood for ML and the
    restricted log-likelihood for REML. loglik_trace records the
    objective after each outer iteration.
    """

    mu: np.ndarray
    het: HetParams
    sigma: np.ndarray
    information: np.ndarray
    loglik: float
    converged: bool
    iterations: int
    pseudoinverse_used: bool
    method: str
    loglik_trace: tuple


@dataclass(frozen=True, eq=False)
class CmlResult:
    """Outcome of a constrained fit with mean components held fixed.

    mu_c holds the estimated free mean components (empty when the whole
    mean vector was fixed).
    """

    het: HetParams
    mu_c: np.ndarray
    loglik: float
    converged: bool
    iterations: int


def _pairs(p):
    return [(j, k) for j in range(p) for k in range(j + 1, p)]


def _bounds(structure, p):
    nt = structure.n_tau(p)
    nk = structure.n_kappa(p)
    return [(np.log(TAU_MIN), np.log(TAU_MAX))] * nt + [(-ZETA_MAX, ZETA_MAX)] * nk


def _unpack(x, structure, p):
    """Free vector -> (tau length p, correlation matrix, raw Sigma)."""
    nt = structure.n_tau(p)
    tau = np.exp(x[:nt])
    tau_full = np.full(p, tau[0]) if structure.kind == "cs1" else tau
    if structure.kind == "unstructured":
        K = np.eye(p)
        for (j, k), z in zip(_pairs(p), x[nt:]):
            K[j, k] = K[k, j] = np.tanh(z)
    else:
        K = np.full((p, p), structure.kappa0)
        np.fill_diagonal(K, 1.0)
    sigma = K * np.outer(tau_full, tau_full)
    return tau_full, K, sigma


def _pack(het, structure):
    """Heterogeneity parameters -> free vector (clipped into bounds)."""
    p = het.p
    if structure.kind == "cs1":
        taus = np.array([float(np.mean(het.tau))])
    else:
        taus = het.tau
    x = [np.log(np.clip(taus, TAU_MIN, TAU_MAX))]
    if structure.kind == "unstructured":
        kmax = np.tanh(ZETA_MAX)
        K = het.kappa if het.kappa is not None else np.eye(p)
        x.append(np.arctanh(np.clip([K[j, k] for j, k in _pairs(p)], -kmax, kmax)))
    return np.concatenate(x) if len(x) > 1 else np.asarray(x[0])


def _het_from_free(x, structure, p, snap=True):
    tau_full, K, _ = _unpack(x, structure, p)
    if snap:
        tau_full = np.where(tau_full <= TAU_SNAP, 0.0, tau_full)
    kappa = K if structure.kind == "unstructured" else None
    return HetParams(tau=tau_full, kappa=kappa)


def _natural(x, structure, p):
    tau_full, K, _ = _unpack(x, structure, p)
    off = np.array([K[j, k] for j, k in _pairs(p)]) if p > 1 else np.empty(0)
    return np.concatenate([tau_full, off])


def _chain_grad(G, tau_full, K, structure, p):
    """Gradient in Sigma -> gradient in the free vector."""
    dl_dtau = 2.0 * (G * K * tau_full[None, :]).sum(axis=1)
    if structure.kind == "cs1":
        g_tau = np.array([float((dl_dtau * tau_full).sum())])
    else:
        g_tau = dl_dtau * tau_full
    if structure.kind != "unstructured":
        return g_tau
    g_kappa = np.array(
        [2.0 * G[j, k] * tau_full[j] * tau_full[k] * (1.0 - K[j, k] ** 2) for j, k in _pairs(p)]
    )
    return np.concatenate([g_tau, g_kappa])


def _neg_loglik_free(data, mu, structure):
    """Objective closure: -loglik and gradient in the free vector."""
    p = data.p

    def fun(x):
        tau_full, K, sigma = _unpack(x, structure, p)
        try:
            t = model_terms(data, mu, sigma)
        except DataError:
            return 1e13, np.zeros_like(x)
        g = _chain_grad(t.grad_sigma, tau_full, K, structure, p)
        return -t.loglik, -g

    return fun


def _neg_restricted_free(data, structure):
    """Restricted objective: profiles the mean internally.

    l_R(eta) = l(mu_hat(eta), eta) - 0.5 log|sum_i W_i(eta)|; the mean
    profile leaves no extra gradient term because the score in mu
    vanishes at mu_hat(eta).
    """
    p = data.p

    def fun(x):
        tau_full, K, sigma = _unpack(x, structure, p)
        try:
            groups = _group_weights(data, sigma)
        except DataError:
            return 1e13, np.zeros_like(x)
        A = np.zeros((p, p))
        b = np.zeros(p)
        for g, W, logdet, _ in groups:
            A[g.sel] += W.sum(axis=0)
            b[g.idx] += np.einsum("nij,nj->i", W, g.Y)
        try:
            Ainv, logdet_A, _ = _sym_inverse(A)
        except DataError:
            return 1e13, np.zeros_like(x)
        mu = Ainv @ b
        ll = 0.0
        G = np.zeros((p, p))
        for g, W, logdet, _ in groups:
            r = g.Y - mu[g.idx]
            Wr = np.einsum("nij,nj->ni", W, r)
            ll -= 0.5 * (logdet.sum() + np.einsum("ni,ni->", Wr, r) + g.Y.size * _LOG_2PI)
            M = Ainv[g.sel]
            G[g.sel] += 0.5 * (
                np.einsum("ni,nj->ij", Wr, Wr)
                - W.sum(axis=0)
                + np.einsum("nij,jk,nkl->il", W, M, W)
            )
        obj = ll - 0.5 * float(logdet_A)
        g = _chain_grad(G, tau_full, K, structure, p)
        return -obj, -g

    return fun


def _neg_profile_marginal_free(data, value, component, structure):
    """Objective with one mean component fixed and the rest profiled out.

    At every trial heterogeneity the free mean components are set by the
    generalized-least-squares update, so the score in those components
    vanishes and the gradient in the free vector needs no extra term.
    """
    p = data.p
    rest = [j for j in range(p) if j != component]
    rest_sel = np.ix_(rest, rest)

    def objective(x):
        tau_full, K, sigma = _unpack(x, structure, p)
        try:
            groups = _group_weights(data, sigma)
        except DataError:
            return 1e13, np.zeros_like(x)
        A = np.zeros((p, p))
        b = np.zeros(p)
        for g, W, _, _ in groups:
            A[g.sel] += W.sum(axis=0)
            b[g.idx] += np.einsum("nij,nj->i", W, g.Y)
        rhs = b[rest] - A[rest, component] * value
        try:
            mu_c = np.linalg.solve(A[rest_sel], rhs)
        except np.linalg.LinAlgError:
            mu_c, _ = sym_solve(A[rest_sel], rhs)
        if not np.all(np.isfinite(mu_c)):
            return 1e13, np.zeros_like(x)
        mu = np.empty(p)
        mu[component] = value
        mu[rest] = mu_c
        ll = 0.0
        G = np.zeros((p, p))
        for g, W, logdet, _ in groups:
            r = g.Y - mu[g.idx]
            Wr = np.einsum("nij,nj->ni", W, r)
            ll -= 0.5 * (logdet.sum() + np.einsum("ni,ni->", Wr, r) + g.Y.size * _LOG_2PI)
            G[g.sel] += 0.5 * (np.einsum("ni,nj->ij", Wr, Wr) - W.sum(axis=0))
        g_free = _chain_grad(G, tau_full, K, structure, p)
        return -ll, -g_free

    return objective


def _optimize_eta(fun, x0, bounds, max_inner):
    res = minimize(
        fun,
        x0,
        jac=True,
        method="L-BFGS-B",
        bounds=bounds,
        options={"maxiter": max_inner, "maxcor": 20, "ftol": 1e-13, "gtol": 1e-8},
    )
    ok = bool(res.success)
    if not ok and np.isfinite(res.fun):
        # accept boundary solutions: judge by the projected gradient step
        lo = np.array([b[0] for b in bounds])
        hi = np.array([b[1] for b in bounds])
        proj = np.clip(res.x - res.jac, lo, hi) - res.x
        ok = bool(np.max(np.abs(proj)) < 1e-5)
    return res.x, -float(res.fun), ok, int(res.nit)


def _scatter_info_moment(data, sigma):
    """Scattered information sum A and weighted moment b = sum W_i y_i."""
    p = data.p
    A = np.zeros((p, p))
    b = np.zeros(p)
    used = False
    for g, W, _, u in _group_weights(data, sigma):
        used |= u
        A[g.sel] += W.sum(axis=0)
        b[g.idx] += np.einsum("nij,nj->i", W, g.Y)
    return A, b, used


def _gls_mean(A, b):
    w = np.linalg.eigvalsh(A)
    if w[-1] <= 0.0:
        raise SingularInformationError("information matrix carries no mass")
    return sym_solve(A, b)


def _naive_mean(data):
    p = data.p
    total = np.zeros(p)
    count = np.zeros(p)
    for st in data.studies:
        idx = np.flatnonzero(st.observed)
        total[idx] += st.y[idx]
        count[idx] += 1.0
    return total / count


def _default_init(data, mu, structure):
    """Starting free vector: moment diagonal when computable, else tau=0.1."""
    p = data.p
    if data.complete:
        sigma_mom, _ = moment_between_cov(data, mu)
        tau0 = np.sqrt(np.maximum(np.diag(sigma_mom), 1e-4))
    else:
        tau0 = np.full(p, 0.1)
    het0 = HetParams(tau=tau0, kappa=np.eye(p) if structure.kind == "unstructured" else None)
    return _pack(het0, structure)


def _require_structure(structure):
    return structure if structure is not None else CovStructure.unstructured()


def _alternating_fit(data, structure, method, tol, max_outer, max_inner):
    structure = _require_structure(structure)
    if data.n_studies < 2:
        raise DataError("fitting requires at least two studies")
    p = data.p
    x = _default_init(data, _naive_mean(data), structure)
    bounds = _bounds(structure, p)
    restricted = _neg_restricted_free(data, structure) if method == "reml" else None
    mu = None
    trace = []
    pinv_used = False
    converged = False
    iterations = 0
    stalled = 0
    for iterations in range(1, max_outer + 1):
        _, _, sigma = _unpack(x, structure, p)
        A, b, used = _scatter_info_moment(data, sigma)
        mu_new, used_solve = _gls_mean(A, b)
        pinv_used |= used or used_solve
        objective = restricted if restricted is not None else _neg_loglik_free(
            data, mu_new, structure
        )
        x_new, ll, ok, _ = _optimize_eta(objective, x, bounds, max_inner)
        delta = np.inf
        settled = False
        if mu is not None:
            delta = max(
                np.max(np.abs(mu_new - mu)),
                np.max(np.abs(_natural(x_new, structure, p) - _natural(x, structure, p))),
            )
            # parameter jitter at the optimizer's floor cannot shrink the
            # objective further; a stationary objective is the fixed point
            settled = abs(ll - trace[-1]) <= LL_STATIONARY * (1.0 + abs(ll))
        trace.append(ll)
        mu, x = mu_new, x_new
        if delta < tol or settled:
            if ok:
                converged = True
                break
            stalled += 1
            if stalled >= 2:
                break
    result = _finalize(data, x, structure, method, tuple(trace), iterations, pinv_used, converged)
    if not converged:
        raise NonConvergenceError(
            f"{method.upper()} fit did not converge in {max_outer} outer iterations",
            last_result=result,
        )
    return result


def fit_ml(data, structure=None, *, tol=TOL, max_outer=MAX_OUTER, max_inner=MAX_INNER):
    """Maximum likelihood fit by alternating mean and heterogeneity updates.

    The mean step is generalized least squares at the current
    heterogeneity; the heterogeneity step maximizes the likelihood at the
    updated mean. Iterates until the largest parameter change falls
    below tol.

    Raises
    ------
    NonConvergenceError
        When the iteration budget is exhausted; carries the last iterate.
    SingularInformationError
        When the weight sum carries no information about the mean.
    """
    return _alternating_fit(data, structure, "ml", tol, max_outer, max_inner)


def fit_reml(data, structure=None, *, tol=TOL, max_outer=MAX_OUTER, max_inner=MAX_INNER):
    """REML fit: heterogeneity maximizes the restricted log-likelihood.

    The restricted objective internally profiles the mean, so the outer
    alternation settles within a couple of rounds; the reported mean is
    the generalized-least-squares mean at the REML heterogeneity.
    """
    return _alternating_fit(data, structure, "reml", tol, max_outer, max_inner)


def _finalize(data, x, structure, method, trace, iterations, pinv_used, converged):
    p = data.p
    het = _het_from_free(x, structure, p)
    sigma = between_cov(het, structure)
    A, b, used = _scatter_info_moment(data, sigma)
    mu, used_solve = _gls_mean(A, b)
    t = model_terms(data, mu, sigma)
    if method == "reml":
        loglik = -_neg_restricted_free(data, structure)(x)[0]
    else:
        loglik = t.loglik
    return FitResult(
        mu=mu,
        het=het,
        sigma=sigma,
        information=t.information,
        loglik=float(loglik),
        converged=converged,
        iterations=iterations,
        pseudoinverse_used=bool(pinv_used or used or used_solve or t.used_pinv),
        method=method,
        loglik_trace=trace,
    )


def fit_eta_given_mu(data, mu_null, structure=None, *, init=None, max_inner=MAX_INNER):
    """Constrained ML of the heterogeneity with the whole mean fixed.

    Parameters
    ----------
    init : HetParams, optional
        Warm start; defaults to the moment-based initialization.

    Raises
    ------
    NonConvergenceError
        Carries the last iterate in ``last_result``.
    """
    structure = _require_structure(structure)
    p = data.p
    mu = np.atleast_1d(np.asarray(mu_null, dtype=float))
    if mu.shape != (p,) or not np.all(np.isfinite(mu)):
        raise ValueError(f"null mean must be a finite vector of length {p}")
    x0 = _pack(init, structure) if init is not None else _default_init(data, mu, structure)
    fun = _neg_loglik_free(data, mu, structure)
    x, ll, ok, nit = _optimize_eta(fun, x0, _bounds(structure, p), max_inner)
    result = CmlResult(
        het=_het_from_free(x, structure, p),
        mu_c=np.empty(0),
        loglik=ll,
        converged=ok,
        iterations=nit,
    )
    if not ok:
        raise NonConvergenceError("constrained fit did not converge", last_result=result)
    return result


def fit_marginal_null(
    data,
    value,
    component,
    structure=None,
    *,
    init=None,
    tol=TOL,
    max_outer=MAX_OUTER,
    max_inner=MAX_INNER,
):
    """Constrained ML with one mean component fixed, the rest free.

    Alternates a generalized-least-squares update of the free mean
    components (given the fixed one) with the heterogeneity step. Any
    component may be the fixed one; for p=1 this reduces to
    fit_eta_given_mu.
    """
    structure = _require_structure(structure)
    p = data.p
    value = float(value)
    if not 0 <= component < p:
        raise ValueError(f"component index {component} out of range for p={p}")
    if p == 1:
        res = fit_eta_given_mu(
            data, np.array([value]), structure, init=init, max_inner=max_inner
        )
        return res
    rest = [j for j in range(p) if j != component]
    if init is not None:
        x = _pack(init, structure)
    else:
        mu0 = _naive_mean(data)
        mu0[component] = value
        x = _default_init(data, mu0, structure)
    bounds = _bounds(structure, p)
    objective = _neg_profile_marginal_free(data, value, component, structure)
    converged = False
    ll = -np.inf
    iterations = 0
    stalled = 0
    for iterations in range(1, max_outer + 1):
        # heterogeneity step; the free mean components are re-profiled by
        # the generalized-least-squares update at every trial point, so
        # the loop's fixed point is the joint constrained maximizer
        x_new, ll_new, ok, _ = _optimize_eta(objective, x, bounds, max_inner)
        delta = np.max(np.abs(_natural(x_new, structure, p) - _natural(x, structure, p)))
        # successive rounds re-solve one fixed objective, so a stationary
        # value means any residual parameter motion is optimizer jitter
        settled = iterations > 1 and abs(ll_new - ll) <= LL_STATIONARY * (1.0 + abs(ll_new))
        x, ll = x_new, ll_new
        if delta < tol or settled:
            if ok:
                converged = True
                break
            # parameters fixed but the optimizer keeps reporting failure:
            # more rounds of the identical problem cannot help
            stalled += 1
            if stalled >= 2:
                break
    # free mean components profiled at the final heterogeneity, so their
    # score vanishes exactly at the reported point
    _, _, sigma = _unpack(x, structure, p)
    A, b, _ = _scatter_info_moment(data, sigma)
    rhs = b[rest] - A[rest, component] * value
    mu_c, _ = _gls_mean(A[np.ix_(rest, rest)], rhs)
    result = CmlResult(
        het=_het_from_free(x, structure, p),
        mu_c=np.asarray(mu_c, dtype=float),
        loglik=ll,
        converged=converged,
        iterations=iterations,
    )
    if not converged:
        raise NonConvergenceError(
            f"constrained marginal fit did not converge in {max_outer} iterations",
            last_result=result,
        )
    return result


def moment_between_cov(data, mu):
    """Sign-invariant moment estimator of the between-study covariance.

    Computes (1/N) (sum of residual outer products - sum of S_i), zeroes
    any row/column whose diagonal entry is nonpositive, then
    eigenvalue-clips the remainder at zero. The truncated flag reports
    whether either step altered the matrix.

    Requires a complete dataset: the estimator is undefined under
    missing outcomes.

    Returns (sigma_mom, truncated).
    """
    if not data.complete:
        raise IncompleteDataError("moment between-study covariance needs complete data")
    p = data.p
    mu = np.atleast_1d(np.asarray(mu, dtype=float))
    if mu.shape != (p,) or not np.all(np.isfinite(mu)):
        raise ValueError(f"mean vector must be a finite vector of length {p}")
    Y = np.stack([st.y for st in data.studies])
    S = np.stack([st.S for st in data.studies])
    R = Y - mu
    raw = (np.einsum("ni,nj->ij", R, R) - S.sum(axis=0)) / data.n_studies
    raw = 0.5 * (raw + raw.T)
    M = raw.copy()
    bad = np.diag(raw) <= 0.0
    if bad.any():
        M[bad, :] = 0.0
        M[:, bad] = 0.0
    truncated = not np.array_equal(M, raw)
    w, Q = np.linalg.eigh(M)
    scale = max(1.0, float(np.max(np.abs(w))) if w.size else 1.0)
    if w[0] < -EPS_PSD * scale:
        truncated = True
    if w[0] < 0.0:
        M = (Q * np.maximum(w, 0.0)) @ Q.T
        M = 0.5 * (M + M.T)
    return M, bool(truncated)


def het_from_cov(sigma):
    """Decompose a PSD covariance into HetParams (SDs and correlations)."""
    sigma = np.asarray(sigma, dtype=float)
    tau = np.sqrt(np.maximum(np.diag(sigma), 0.0))
    p = tau.size
    K = np.eye(p)
    for j, k in _pairs(p):
        denom = tau[j] * tau[k]
        K[j, k] = K[k, j] = np.clip(sigma[j, k] / denom, -1.0, 1.0) if denom > 0 else 0.0
    return HetParams(tau=tau, kappa=K)
