"""Sign-flip permutation engine.

Score statistics for joint and marginal nulls, sign-assignment
generation, and the permutation tests themselves. Flipping reflects
each study's observed outcomes around a center: z_i = v_i (y_i - c) + c
with v_i = +1 or -1 per study; within-study covariances are unchanged.

The joint test flips around the tested mean itself. The marginal test
flips around a pseudo-null center that plugs constrained estimates in
for the nuisance components (a local Monte Carlo test), refits the
nuisance mean and heterogeneity on each permuted sample, and evaluates
the signed score of the original data at the refitted pseudo-null.
"""

from dataclasses import dataclass

import numpy as np

from .estimators import (
    CmlResult,
    fit_eta_given_mu,
    fit_marginal_null,
    moment_between_cov,
)
from .exceptions import (
    DataError,
    NonConvergenceError,
    UninformativeComponentError,
)
from .model import (
    CovStructure,
    _MaskGroup,
    _group_weights,
    _sym_inverse,
    between_cov,
    marginal_information,
    model_terms,
    quad_form_inv,
)

__all__ = [
    "DEFAULT_B",
    "DEFAULT_SEED",
    "PermutationPlan",
    "NullDistribution",
    "TestResult",
    "generate_signs",
    "score_statistic_cml",
    "score_statistic_moment",
    "marginal_score_statistic",
    "joint_permutation_test",
    "marginal_permutation_test",
]

DEFAULT_B = 2400
DEFAULT_SEED = 20240101
EXHAUSTIVE_CAP = 2 ** 20

# a refit failure rate above this aborts the whole test
MAX_FAILURE_FRACTION = 0.2

# Schur information below this signals an uninformative component
MIN_MARGINAL_INFO = 1e-12


@dataclass(frozen=True)
class PermutationPlan:
    """How to enumerate sign assignments.

    mode "exhaustive" visits all 2^N assignments (subject to the cap);
    mode "random" draws n_draws iid uniform assignments from the seed.
    """

    mode: str
    n_draws: int = None
    seed: int = None
    exhaustive_cap: int = EXHAUSTIVE_CAP

    def __post_init__(self):
        if self.mode not in ("exhaustive", "random"):
            raise ValueError(f"unknown permutation mode {self.mode!r}")
        if self.mode == "random":
            if self.n_draws is None or self.n_draws < 100:
                raise ValueError("random plans need at least 100 draws")
            if self.seed is None:
                raise ValueError("random plans need an explicit seed")

    @classmethod
    def exhaustive(cls, cap=EXHAUSTIVE_CAP):
        return cls(mode="exhaustive", exhaustive_cap=cap)

    @classmethod
    def random(cls, n_draws=DEFAULT_B, seed=DEFAULT_SEED):
        return cls(mode="random", n_draws=int(n_draws), seed=int(seed))

    def size_for(self, n_studies):
        if self.mode == "exhaustive":
            size = 2 ** n_studies
            if size > self.exhaustive_cap:
                raise ValueError(
                    f"exhaustive enumeration of 2^{n_studies} assignments exceeds the "
                    f"cap {self.exhaustive_cap}; use a random plan"
                )
            return size
        return self.n_draws


def _default_plan(plan):
    return plan if plan is not None else PermutationPlan.random()


def generate_signs(plan, n_studies):
    """Materialize the sign matrix, shape (B, N) with entries +-1.

    Exhaustive mode enumerates assignments in binary order: row b flips
    study i exactly when bit i of b is set, so row 0 is the identity.
    Random mode draws iid uniform signs from the plan's seed; repeated
    calls return the same matrix.
    """
    size = plan.size_for(n_studies)
    if plan.mode == "exhaustive":
        bits = (np.arange(size, dtype=np.int64)[:, None] >> np.arange(n_studies)) & 1
        return (1 - 2 * bits).astype(np.int8)
    rng = np.random.default_rng(plan.seed)
    return (2 * rng.integers(0, 2, size=(size, n_studies)) - 1).astype(np.int8)


@dataclass(frozen=True, eq=False)
class NullDistribution:
    """Permutation null distribution with its counting rules.

    In exhaustive mode the statistics cover all 2^N assignments (the
    observed statistic is the identity row's entry); in random mode they
    are the B drawn assignments, and the add-one rule accounts for the
    observed one.
    """

    statistics: np.ndarray
    mode: str
    seed: int = None
    includes_identity: bool = False

    def __post_init__(self):
        stats = np.asarray(self.statistics, dtype=float)
        if stats.ndim != 1 or stats.size == 0 or not np.all(np.isfinite(stats)):
            raise ValueError("null distribution must be a finite nonempty vector")
        stats = stats.copy()
        stats.flags.writeable = False
        object.__setattr__(self, "statistics", stats)

    @property
    def size(self):
        return self.statistics.size

    def p_value(self, t_obs):
        """Upper-tail p-value of an observed statistic; ties count in."""
        count = int(np.count_nonzero(self.statistics >= t_obs))
        if self.mode == "exhaustive":
            return count / self.size
        return (1 + count) / (self.size + 1)

    def accepted(self, t_obs, alpha):
        """True when the test at level alpha does not reject."""
        return self.p_value(t_obs) > alpha

    def threshold(self, alpha):
        """Largest statistic value still accepted at level alpha.

        Dual to p_value by construction: accepted(t, alpha) iff
        t <= threshold(alpha). Returns +inf when even a statistic above
        every permutation value is accepted, -inf when nothing is.
        """
        n = self.size
        if self.mode == "exhaustive":
            p_above_all = 0.0
        else:
            p_above_all = 1.0 / (n + 1)
        if p_above_all > alpha:
            return np.inf
        s = np.sort(self.statistics)
        counts = n - np.searchsorted(s, s, side="left")
        if self.mode == "exhaustive":
            p = counts / n
        else:
            p = (1.0 + counts) / (n + 1)
        ok = p > alpha
        return float(s[ok].max()) if ok.any() else -np.inf


@dataclass(frozen=True, eq=False)
class TestResult:
    """Result of a permutation test."""

    statistic: float
    p_value: float
    distribution: NullDistribution
    n_failed: int
    stat: str
    mu_null: np.ndarray
    component: int = None
    used_pinv: bool = False

    @property
    def n_permutations(self):
        return self.distribution.size


def _stat_from_sigma(data, mu, sigma):
    """Quadratic-form score statistic U' I^{-1} U at a given Sigma."""
    t = model_terms(data, mu, sigma)
    value, used = quad_form_inv(t.information, t.score)
    return value, used or t.used_pinv


def _flip_dataset(data, center, v):
    """Reflect flagged studies' observed outcomes around the center.

    Returns a dataset clone whose packed groups are flipped in one
    vectorized pass; reflection preserves all record invariants.
    """
    studies = list(data.studies)
    for i in np.flatnonzero(v < 0):
        st = studies[i]
        y = st.y.copy()
        idx = np.flatnonzero(st.observed)
        y[idx] = 2.0 * center[idx] - y[idx]
        studies[i] = st._with_outcomes(y)
    groups = []
    for g in data._groups:
        c = center[g.idx]
        vg = v[g.members].astype(float)[:, None]
        groups.append(
            _MaskGroup(idx=g.idx, sel=g.sel, members=g.members, Y=c + vg * (g.Y - c), S=g.S)
        )
    return data._clone_with(studies, groups=tuple(groups))


def _validate_mu(data, mu_null):
    mu = np.atleast_1d(np.asarray(mu_null, dtype=float))
    if mu.shape != (data.p,) or not np.all(np.isfinite(mu)):
        raise ValueError(f"null mean must be a finite vector of length {data.p}")
    return mu


def score_statistic_cml(data, mu_null, structure=None, *, init=None):
    """Efficient score statistic at a joint null.

    The heterogeneity is set to its constrained MLE under the null, then
    the statistic is the quadratic form of the score in the inverse
    information. Returns (value, CmlResult).
    """
    structure = structure if structure is not None else CovStructure.unstructured()
    mu = _validate_mu(data, mu_null)
    cml = fit_eta_given_mu(data, mu, structure, init=init)
    sigma = between_cov(cml.het, structure)
    value, _ = _stat_from_sigma(data, mu, sigma)
    return value, cml


def score_statistic_moment(data, mu_null):
    """Pseudo-efficient score statistic at a joint null.

    Plugs the sign-invariant moment estimator of the between-study
    covariance into the score quadratic form; no iterative fitting.
    Requires complete data.
    """
    mu = _validate_mu(data, mu_null)
    sigma, _ = moment_between_cov(data, mu)
    value, _ = _stat_from_sigma(data, mu, sigma)
    return value


def _marginal_root(data, mu_full, sigma, component):
    """Signed marginal score root of a dataset at a constrained fit.

    U = sum_i W_i (y_i - mu_full) on observed blocks (scattered),
    J = the Schur information of the tested component; returns the
    signed root U_c / sqrt(J), whose square is the marginal statistic.
    At the dataset's own constrained fit the nuisance components of U
    vanish, so U_c is the efficient score for the tested component.
    """
    p = data.p
    U = np.zeros(p)
    info = np.zeros((p, p))
    for g, W, _, _ in _group_weights(data, sigma):
        r = g.Y - mu_full[g.idx]
        Wr = np.einsum("nij,nj->ni", W, r)
        U[g.idx] += Wr.sum(axis=0)
        info[g.sel] += W.sum(axis=0)
    J, used = marginal_information(info, component)
    if J < MIN_MARGINAL_INFO:
        raise UninformativeComponentError(
            f"component {component} carries no marginal information (J={J:.3e})"
        )
    return float(U[component] / np.sqrt(J)), used


def _assemble_mu(p, component, value, mu_c):
    mu = np.empty(p)
    mu[component] = value
    rest = [j for j in range(p) if j != component]
    mu[rest] = mu_c
    return mu


def marginal_score_statistic(data, value, component, structure=None, *, init=None):
    """Marginal score statistic for one mean component.

    Nuisance mean components and heterogeneity are set to their
    constrained MLEs under the component null; the statistic is the
    squared component score over its Schur information.
    Returns (value, CmlResult).
    """
    structure = structure if structure is not None else CovStructure.unstructured()
    cml = fit_marginal_null(data, value, component, structure, init=init)
    sigma = between_cov(cml.het, structure)
    mu_full = _assemble_mu(data.p, component, float(value), cml.mu_c)
    root, _ = _marginal_root(data, mu_full, sigma, component)
    return root * root, cml


def _check_failures(n_failed, n_attempted):
    if n_attempted and n_failed > MAX_FAILURE_FRACTION * n_attempted:
        raise NonConvergenceError(
            f"{n_failed} of {n_attempted} permutation refits failed; "
            "result would not be trustworthy"
        )


def joint_permutation_test(data, mu_null, plan=None, stat="cml", structure=None):
    """Sign-flip permutation test of a joint null on the whole mean.

    For each sign assignment the outcomes are reflected around the null
    mean. With stat="cml" the heterogeneity is refit on each permuted
    sample (warm-started at the observed constrained fit) before the
    score statistic is evaluated; with stat="moment" the sign-invariant
    moment plug-in makes any refit unnecessary, so the whole
    distribution is computed in one vectorized pass.

    Sign assignments that flip nothing (or everything) reproduce the
    observed statistic exactly and are assigned it directly.
    """
    if stat not in ("cml", "moment"):
        raise ValueError(f"unknown joint statistic {stat!r}")
    structure = structure if structure is not None else CovStructure.unstructured()
    plan = _default_plan(plan)
    mu = _validate_mu(data, mu_null)
    signs = generate_signs(plan, data.n_studies)
    B = signs.shape[0]
    all_equal = np.abs(signs.sum(axis=1, dtype=np.int64)) == data.n_studies
    n_failed = 0
    used_pinv = False

    if stat == "moment":
        sigma, _ = moment_between_cov(data, mu)
        t = model_terms(data, mu, sigma)
        stats = _moment_null_statistics(data, mu, sigma, signs)
        t_obs, used = quad_form_inv(t.information, t.score)
        used_pinv = t.used_pinv or used
        stats[all_equal] = t_obs
    else:
        t_obs, cml_obs = score_statistic_cml(data, mu, structure)
        warm = cml_obs.het
        stats = np.empty(B)
        for b in range(B):
            if all_equal[b]:
                stats[b] = t_obs
                continue
            flipped = _flip_dataset(data, mu, signs[b])
            try:
                cml_b = fit_eta_given_mu(data=flipped, mu_null=mu, structure=structure, init=warm)
            except NonConvergenceError as exc:
                cml_b = exc.last_result
                n_failed += 1
            sigma_b = between_cov(cml_b.het, structure)
            stats[b], used = _stat_from_sigma(flipped, mu, sigma_b)
            used_pinv |= used
        _check_failures(n_failed, int(B - all_equal.sum()))

    dist = NullDistribution(
        statistics=stats,
        mode=plan.mode,
        seed=plan.seed,
        includes_identity=plan.mode == "exhaustive" or bool((signs == 1).all(axis=1).any()),
    )
    return TestResult(
        statistic=float(t_obs),
        p_value=dist.p_value(t_obs),
        distribution=dist,
        n_failed=n_failed,
        stat=stat,
        mu_null=mu,
        used_pinv=used_pinv,
    )


def _moment_null_statistics(data, mu, sigma, signs):
    """Vectorized permutation statistics for the moment plug-in.

    The moment covariance is sign-invariant, so every assignment shares
    one weight set: U_b = sum_i v_bi W_i r_i, T_b = U_b' I^{-1} U_b.
    """
    p = data.p
    N = data.n_studies
    Wr_full = np.zeros((N, p))
    info = np.zeros((p, p))
    for g, W, _, _ in _group_weights(data, sigma):
        r = g.Y - mu[g.idx]
        Wr = np.einsum("nij,nj->ni", W, r)
        Wr_full[np.ix_(g.members, g.idx)] = Wr
        info[g.sel] += W.sum(axis=0)
    U = signs.astype(float) @ Wr_full  # (B, p)
    Iinv, _, _ = _sym_inverse(info)
    return np.maximum(np.einsum("bi,ij,bj->b", U, Iinv, U), 0.0)


def _marginal_signed_distribution(data, value, component, structure, plan):
    """Observed and permuted signed marginal score roots.

    Each permuted root is the observed functional applied to the
    reflected sample: refit the nuisance mean and heterogeneity on the
    permuted data, then take its component score root at that refit.
    Returns (s_obs, roots, n_failed, used_pinv, includes_identity).
    Sign assignments that flip nothing reproduce the observed root
    exactly; assignments that flip everything reproduce its negation
    (the refit center is invariant under global reflection).
    """
    p = data.p
    cml_obs = fit_marginal_null(data, value, component, structure)
    sigma_obs = between_cov(cml_obs.het, structure)
    center = _assemble_mu(p, component, value, cml_obs.mu_c)
    s_obs, used_pinv = _marginal_root(data, center, sigma_obs, component)

    signs = generate_signs(plan, data.n_studies)
    B = signs.shape[0]
    row_sums = signs.sum(axis=1, dtype=np.int64)
    roots = np.empty(B)
    n_failed = 0
    warm = cml_obs.het
    for b in range(B):
        if row_sums[b] == data.n_studies:
            roots[b] = s_obs
            continue
        if row_sums[b] == -data.n_studies:
            roots[b] = -s_obs
            continue
        flipped = _flip_dataset(data, center, signs[b])
        try:
            cml_b = fit_marginal_null(flipped, value, component, structure, init=warm)
        except NonConvergenceError as exc:
            cml_b = exc.last_result
            n_failed += 1
        sigma_b = between_cov(cml_b.het, structure)
        mu_b = _assemble_mu(p, component, value, cml_b.mu_c)
        roots[b], used = _marginal_root(flipped, mu_b, sigma_b, component)
        used_pinv |= used
    _check_failures(n_failed, int(B - (np.abs(row_sums) == data.n_studies).sum()))
    includes_identity = plan.mode == "exhaustive" or bool((signs == 1).all(axis=1).any())
    return s_obs, roots, n_failed, used_pinv, includes_identity


def marginal_permutation_test(data, value, component, plan=None, structure=None):
    """Local Monte Carlo sign-flip test of one mean component.

    The flip center is the pseudo-null (tested value, constrained
    estimates of the other components). Each permuted sample gets its
    own refit of the nuisance mean and heterogeneity, and the permuted
    statistic is the component score of that sample at its own refit,
    mirroring how the observed statistic is built from the data.
    """
    structure = structure if structure is not None else CovStructure.unstructured()
    plan = _default_plan(plan)
    p = data.p
    value = float(value)
    if not 0 <= component < p:
        raise ValueError(f"component index {component} out of range for p={p}")
    s_obs, roots, n_failed, used_pinv, includes_identity = _marginal_signed_distribution(
        data, value, component, structure, plan
    )
    t_obs = s_obs * s_obs
    dist = NullDistribution(
        statistics=roots * roots,
        mode=plan.mode,
        seed=plan.seed,
        includes_identity=includes_identity,
    )
    mu_null = np.full(p, np.nan)
    mu_null[component] = value
    return TestResult(
        statistic=float(t_obs),
        p_value=dist.p_value(t_obs),
        distribution=dist,
        n_failed=n_failed,
        stat="marginal",
        mu_null=mu_null,
        component=component,
        used_pinv=used_pinv,
    )
