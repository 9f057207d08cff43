"""Unpenalized GEE and penalized GEE via the local quadratic approximation.

The penalized estimating equation

    S^P(beta) = sum_i D_i' V_i^{-1} (y_i - mu_i) - N * dP(beta) = 0

is solved by iterating

    1. zero and drop coefficients closer to 0 than ``zero_threshold``;
    2. replace dP by Sigma(beta_t) beta with Sigma_jj = P'(|b_jt|) / |b_jt|;
    3. beta_{t+1} = beta_t + (H + N Sigma)^{-1} (S(beta_t) - N Sigma beta_t),

with H = sum_i D_i' V_i^{-1} D_i (expected information) until
||beta_{t+1} - beta_t||_2 < c. Dropped coefficients stay at zero.
"""
import logging
import warnings
from dataclasses import dataclass, field, replace
from typing import List, Optional, Tuple

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve
from scipy.special import expit

from Panel_Data.longitudinal_data import pooled_variances
from Panel_Data.working_correlation import (CorrelationSpec, VarianceModel, build_correlation,
                                            estimate_alpha, estimate_dispersion, working_covariance)
from PGEE.errors import ConvergenceWarning, NumericalError, SpecificationError
from PGEE.penalty import PenaltySpec, lqa_diagonal, penalty_value

DEFAULT_ZERO_THRESHOLD = 1e-4
DEFAULT_CONVERGENCE_C = 1e-6
DEFAULT_MAX_ITERATIONS = 200
DEFAULT_RIDGE_JITTER = 1e-8
RIDGE_START_MIN = 1e-3
SCALING_TOLERANCE = 1e-6
MU_CLIP = 1e-12
LINKS = {"identity": "gaussian", "logit": "binomial"}


@dataclass(frozen=True)
class ModelSpec:
    """Link function, variance model and working correlation."""
    link: str = "identity"
    variance: VarianceModel = field(default_factory=VarianceModel)
    correlation: CorrelationSpec = field(default_factory=CorrelationSpec)

    def __post_init__(self):
        if self.link not in LINKS:
            raise SpecificationError(f"unknown link '{self.link}', expected identity or logit")
        if LINKS[self.link] != self.variance.family:
            raise SpecificationError(f"link '{self.link}' does not match family '{self.variance.family}'")

    @property
    def family(self):
        return self.variance.family

    @property
    def is_gaussian(self):
        return self.link == "identity"

    @classmethod
    def gaussian(cls, working="independence", alpha=0.0, fixed=False, dispersion=1.0):
        return cls("identity", VarianceModel("gaussian", dispersion), CorrelationSpec(working, alpha, fixed))

    @classmethod
    def binomial(cls, working="independence", alpha=0.0, fixed=False):
        return cls("logit", VarianceModel("binomial", 1.0), CorrelationSpec(working, alpha, fixed))

    @classmethod
    def for_family(cls, family, working="independence", alpha=0.0, fixed=False):
        if family == "gaussian":
            return cls.gaussian(working, alpha, fixed)
        if family == "binomial":
            return cls.binomial(working, alpha, fixed)
        raise SpecificationError(f"unknown family '{family}', expected gaussian or binomial")

    def to_config(self):
        config = {"family": self.family, "link": self.link, "dispersion": self.variance.dispersion}
        config.update(self.correlation.to_config())
        return config


@dataclass(frozen=True)
class SolverControl:
    """Iteration settings of the LQA and Fisher-scoring loops.

    ``init`` is 'ridge' (ridge warm start), 'zeros' (a single ridge scoring
    step from zero) or a starting coefficient vector.
    """
    zero_threshold: float = DEFAULT_ZERO_THRESHOLD
    convergence_c: float = DEFAULT_CONVERGENCE_C
    max_iterations: int = DEFAULT_MAX_ITERATIONS
    init: object = "ridge"
    ridge_jitter: float = DEFAULT_RIDGE_JITTER
    check_scaling: bool = True

    def __post_init__(self):
        if not (self.zero_threshold > 0 and self.convergence_c > 0 and self.ridge_jitter > 0):
            raise SpecificationError("zero_threshold, convergence_c and ridge_jitter must be positive")
        if self.max_iterations < 1:
            raise SpecificationError("max_iterations must be at least 1")
        if isinstance(self.init, str) and self.init not in ("ridge", "zeros"):
            raise SpecificationError(f"unknown init '{self.init}', expected ridge, zeros or a vector")

    def quiet(self):
        return replace(self, check_scaling=False)


@dataclass
class PgeeFit:
    beta_naive: np.ndarray
    beta_nonnaive: np.ndarray
    active_set: Tuple[int, ...]
    iterations: int
    converged: bool
    threshold_used: float
    penalty: PenaltySpec
    model: ModelSpec
    objective_trace: List[float] = field(default_factory=list)
    active_trace: List[int] = field(default_factory=list)
    alpha_hat: float = 0.0
    dispersion: Optional[float] = None

    @property
    def p(self):
        return len(self.beta_naive)

    def fitted_model(self):
        """Model spec with the working correlation parameter at its estimate."""
        return replace(self.model, correlation=self.model.correlation.with_alpha(self.alpha_hat))

    def to_dict(self, covariate_names=None, scaling=None):
        names = list(covariate_names) if covariate_names is not None else [f"x{j + 1}" for j in range(self.p)]
        doc = {
            "penalty": self.penalty.to_config(),
            "model": self.model.to_config(),
            "converged": self.converged,
            "iterations": self.iterations,
            "threshold_used": self.threshold_used,
            "alpha_hat": self.alpha_hat,
            "dispersion": self.dispersion,
            "active_set": [names[j] for j in self.active_set],
            "coefficients": {
                "covariate": names,
                "naive": self.beta_naive.tolist(),
                "nonnaive": self.beta_nonnaive.tolist(),
            },
        }
        if scaling is not None:
            doc["coefficients"]["original_scale"] = scaling.to_original(self.beta_nonnaive).tolist()
        return doc


def mean_and_derivatives(beta, X_i, link):
    """Returns (mu_i, D_i) with D_i = d mu_i / d beta."""
    X_i = np.asarray(X_i, dtype=float)
    eta = X_i @ np.asarray(beta, dtype=float)
    if link == "identity":
        return eta, X_i
    if link == "logit":
        mu = expit(eta)
        return mu, (mu * (1.0 - mu))[:, None] * X_i
    raise SpecificationError(f"unknown link '{link}'")


class GeeProblem:
    """Score and expected information of the GEE for one dataset.

    The working correlation parameter is re-estimated from Pearson residuals
    at each evaluation unless the model holds it fixed. ``max_cluster_size``
    bounds the exchangeable estimate; CV folds pass the full data's largest
    cluster so the held-out subject's W stays positive definite.
    """

    def __init__(self, data, model, max_cluster_size=None):
        self.data = data
        self.model = model
        self.N = data.N
        self.n = data.n
        self.p = data.p
        self.alpha = model.correlation.alpha
        sizes = data.cluster_sizes
        self.max_cluster_size = int(sizes.max()) if max_cluster_size is None and sizes.size else max_cluster_size
        self._corr_alpha = None
        self._corr_cache = {}

    def _correlation(self, T):
        if self._corr_alpha != self.alpha:
            self._corr_alpha = self.alpha
            self._corr_cache = {}
        if T not in self._corr_cache:
            self._corr_cache[T] = build_correlation(self.model.correlation.with_alpha(self.alpha), T)
        return self._corr_cache[T]

    def pearson_residuals(self, beta):
        mu, _ = mean_and_derivatives(beta, self.data.X, self.model.link)
        u = self.model.variance.variance(np.clip(mu, MU_CLIP, 1 - MU_CLIP) if self.model.link == "logit" else mu)
        r = (self.data.y - mu) / np.sqrt(u / self.model.variance.dispersion)
        return [r[self.data.rows_of(i)] for i in range(self.n)]

    def update_alpha(self, beta):
        corr = self.model.correlation
        if corr.is_fixed:
            return self.alpha
        blocks = self.pearson_residuals(beta)
        phi = estimate_dispersion(blocks, self.p) if self.N > self.p else 1.0
        self.alpha = estimate_alpha(blocks, corr.kind, phi, self.max_cluster_size)
        return self.alpha

    def score_information(self, beta):
        self.update_alpha(beta)
        d = self.data
        link = self.model.link
        mu, D = mean_and_derivatives(beta, d.X, link)
        u = self.model.variance.variance(np.clip(mu, MU_CLIP, 1 - MU_CLIP) if link == "logit" else mu)
        resid = d.y - mu
        if self.model.correlation.is_independence:
            if np.any(u <= 0):
                raise NumericalError("singular working covariance: nonpositive variance")
            S = D.T @ (resid / u)
            H = D.T @ (D / u[:, None])
            return S, H
        S = np.zeros(self.p)
        H = np.zeros((self.p, self.p))
        for i in range(self.n):
            rows = d.rows_of(i)
            V = working_covariance(u[rows], self._correlation(rows.stop - rows.start))
            try:
                factor = cho_factor(V)
            except LinAlgError as e:
                raise NumericalError(f"singular working covariance for subject {d.subjects[i]}") from e
            Di = D[rows]
            S += Di.T @ cho_solve(factor, resid[rows])
            H += Di.T @ cho_solve(factor, Di)
        return S, H


class GaussianMoments:
    """Normal-equation blocks of a gaussian model with a fixed working covariance.

    S(beta) = b - H beta exactly, so each subject contributes (H_i, b_i) once
    and leave-one-subject-out problems are formed by subtraction.
    """

    def __init__(self, H, b, N, n, alpha, H_blocks=None, b_blocks=None, sizes=None):
        self.H = H
        self.b = b
        self.N = int(N)
        self.n = int(n)
        self.p = b.shape[0]
        self.alpha = alpha
        self.H_blocks = H_blocks
        self.b_blocks = b_blocks
        self.sizes = sizes

    @classmethod
    def from_data(cls, data, model):
        phi = model.variance.dispersion
        corr = model.correlation
        H_blocks = np.empty((data.n, data.p, data.p))
        b_blocks = np.empty((data.n, data.p))
        factors = {}
        for i in range(data.n):
            y_i, X_i, T_i = data.block(i)
            if corr.is_independence:
                H_blocks[i] = X_i.T @ X_i / phi
                b_blocks[i] = X_i.T @ y_i / phi
                continue
            if T_i not in factors:
                factors[T_i] = cho_factor(phi * build_correlation(corr, T_i))
            H_blocks[i] = X_i.T @ cho_solve(factors[T_i], X_i)
            b_blocks[i] = X_i.T @ cho_solve(factors[T_i], y_i)
        sizes = data.cluster_sizes
        return cls(H_blocks.sum(axis=0), b_blocks.sum(axis=0), sizes.sum(), data.n, corr.alpha,
                   H_blocks, b_blocks, sizes)

    def without(self, i):
        """Problem of the data with subject ``i`` left out."""
        if self.H_blocks is None:
            raise NumericalError("per-subject blocks were not kept for this problem")
        return GaussianMoments(self.H - self.H_blocks[i], self.b - self.b_blocks[i],
                               self.N - self.sizes[i], self.n - 1, self.alpha)

    def update_alpha(self, beta):
        return self.alpha

    def score_information(self, beta):
        return self.b - self.H @ beta, self.H


def make_problem(data, model):
    if model.is_gaussian and model.correlation.is_fixed:
        return GaussianMoments.from_data(data, model)
    return GeeProblem(data, model)


def gee_score(beta, data, model):
    """Returns (S, K): the GEE score and K = (1/n) sum_i D_i' V_i^{-1} D_i."""
    S, H = GeeProblem(data, model).score_information(np.asarray(beta, dtype=float))
    return S, H / data.n


def solve_newton(M, rhs, jitter=DEFAULT_RIDGE_JITTER):
    """Solves the symmetric positive definite system M x = rhs.

    A failed or near-singular Cholesky factorization is retried once with
    ``jitter`` times the mean diagonal added to the diagonal.
    """
    try:
        c, lower = cho_factor(M, check_finite=False)
        pivots = np.diag(c) ** 2
        if np.all(np.isfinite(pivots)) and pivots.min() > 1e-14 * pivots.max():
            return cho_solve((c, lower), rhs, check_finite=False)
    except LinAlgError:
        pass
    scale = max(1.0, float(np.mean(np.abs(np.diag(M)))))
    logging.debug("Newton matrix near singular; adding jitter %.3g", jitter * scale)
    try:
        return cho_solve(cho_factor(M + jitter * scale * np.eye(M.shape[0]), check_finite=False), rhs)
    except LinAlgError as e:
        raise NumericalError("singular Newton matrix after jitter") from e


def quadratic_objective(S, H):
    """Q = (1/2n) S' K^{-1} S = S' H^+ S / 2, minimum-norm solve for singular H."""
    if S.size == 0:
        return 0.0
    x = np.linalg.lstsq(H, S, rcond=None)[0]
    return 0.5 * float(S @ x)


def pgls_objective(beta, data, penalty, model=None):
    """Penalized generalized least squares objective Q(beta) + N P(beta)."""
    model = ModelSpec.gaussian() if model is None else model
    if not model.is_gaussian:
        raise SpecificationError("PGLS objective defined for gaussian only")
    beta = np.asarray(beta, dtype=float)
    S, H = make_problem(data, model).score_information(beta)
    return quadratic_objective(S, H) + data.N * penalty_value(penalty, beta)


def _ridge_start(problem, lambda2, control, steps=None):
    beta = np.zeros(problem.p)
    steps = control.max_iterations if steps is None else steps
    ridge = 2.0 * problem.N * lambda2
    for _ in range(steps):
        S, H = problem.score_information(beta)
        step = solve_newton(H + ridge * np.eye(problem.p), S - ridge * beta, control.ridge_jitter)
        beta = beta + step
        if np.linalg.norm(step) < control.convergence_c:
            break
    return beta


def initial_beta(problem, penalty, control):
    init = control.init
    lambda2_init = max(penalty.lambda2, RIDGE_START_MIN)
    if isinstance(init, str):
        if init == "ridge":
            return _ridge_start(problem, lambda2_init, control)
        return _ridge_start(problem, lambda2_init, control, steps=1)
    beta0 = np.asarray(init, dtype=float).copy()
    if beta0.shape != (problem.p,):
        raise SpecificationError(f"init vector has length {beta0.size}, expected {problem.p}")
    return beta0


def run_lqa(problem, penalty, control, beta0, track_objective=False):
    """Steps 1-3 of the LQA iteration from ``beta0``.

    Returns:
        tuple: (beta, iterations, converged, objective_trace, active_trace)
    """
    beta = np.array(beta0, dtype=float)
    mask = np.zeros(problem.p, dtype=bool)
    # no penalty means plain Newton steps: nothing is dropped
    drops = not penalty.vanishes
    objective, active_trace = [], []
    converged = False
    it = 0
    for it in range(1, control.max_iterations + 1):
        if drops:
            mask |= np.abs(beta) < control.zero_threshold
            beta[mask] = 0.0
        active = ~mask
        active_trace.append(int(active.sum()))
        if not active.any():
            if track_objective:
                objective.append(quadratic_objective(*problem.score_information(beta)))
            converged = True
            break
        S, H = problem.score_information(beta)
        if track_objective:
            objective.append(quadratic_objective(S, H) + problem.N * penalty_value(penalty, beta))
        sigma = lqa_diagonal(penalty, beta, mask)[active]
        Na = problem.N * sigma
        M = H[np.ix_(active, active)] + np.diag(Na)
        step = solve_newton(M, S[active] - Na * beta[active], control.ridge_jitter)
        beta_new = beta.copy()
        beta_new[active] += step
        delta = np.linalg.norm(beta_new - beta)
        beta = beta_new
        if delta < control.convergence_c:
            converged = True
            break
    if drops:
        beta[np.abs(beta) < control.zero_threshold] = 0.0
    return beta, it, converged, objective, active_trace


def _dispersion_estimate(problem, beta):
    if isinstance(problem, GeeProblem) and problem.N > problem.p:
        return estimate_dispersion(problem.pearson_residuals(beta), problem.p)
    return None


def _warn_unscaled(data):
    deviation = np.abs(pooled_variances(data) - 1.0)
    if deviation.max() > SCALING_TOLERANCE:
        logging.warning("fit_pgee: covariates are not standardized (max |var - 1| = %.3g); "
                        "penalties will weigh columns unevenly", deviation.max())


def fit_pgee(data, model, penalty, control=None, problem=None, track_objective=None):
    """Fits the penalized GEE by the LQA algorithm.

    Args:
        data (LongitudinalDataset): Standardized data.
        model (ModelSpec): Link, variance and working correlation.
        penalty (PenaltySpec): Penalty family and tuning parameters.
        control (SolverControl, optional): Iteration settings.
        problem (GaussianMoments | GeeProblem, optional): Precomputed problem for
            ``data``; CV folds pass a downdated one.
        track_objective (bool, optional): Record Q^P per iteration; defaults to
            True for gaussian models.

    Returns:
        PgeeFit: Naive and non-naive coefficients with diagnostics.
    """
    control = SolverControl() if control is None else control
    if control.check_scaling and data is not None:
        _warn_unscaled(data)
    if problem is None:
        problem = make_problem(data, model)
    if track_objective is None:
        track_objective = model.is_gaussian
    beta0 = initial_beta(problem, penalty, control)
    beta, iterations, converged, trace, active_trace = run_lqa(problem, penalty, control, beta0, track_objective)
    if not converged:
        msg = f"PGEE ({penalty.family}) did not converge in {control.max_iterations} iterations"
        logging.warning(msg)
        warnings.warn(msg, ConvergenceWarning)
    alpha_hat = problem.update_alpha(beta)
    return PgeeFit(
        beta_naive=beta,
        beta_nonnaive=beta * (1.0 + penalty.lambda2),
        active_set=tuple(int(j) for j in np.flatnonzero(beta)),
        iterations=iterations,
        converged=converged,
        threshold_used=control.zero_threshold,
        penalty=penalty,
        model=model,
        objective_trace=trace,
        active_trace=active_trace,
        alpha_hat=float(alpha_hat),
        dispersion=_dispersion_estimate(problem, beta) if model.family == "gaussian" else None,
    )


def fit_gee(data, model, control=None):
    """Unpenalized GEE by Fisher scoring from zero."""
    control = SolverControl() if control is None else control
    if data.p >= data.N or np.linalg.matrix_rank(np.asarray(data.X)) < data.p:
        raise NumericalError("design singular: use a penalized fit")
    problem = GeeProblem(data, model)
    beta = np.zeros(data.p)
    converged = False
    it = 0
    for it in range(1, control.max_iterations + 1):
        S, H = problem.score_information(beta)
        try:
            step = cho_solve(cho_factor(H), S)
        except LinAlgError:
            logging.warning("fit_gee: information matrix became singular at iteration %d", it)
            break
        beta = beta + step
        if not np.all(np.isfinite(beta)):
            break
        if np.linalg.norm(step) < control.convergence_c:
            converged = True
            break
    if not converged:
        msg = f"GEE did not converge in {it} iterations"
        logging.warning(msg)
        warnings.warn(msg, ConvergenceWarning)
    none = PenaltySpec("none")
    return PgeeFit(
        beta_naive=beta,
        beta_nonnaive=beta.copy(),
        active_set=tuple(int(j) for j in np.flatnonzero(beta)),
        iterations=it,
        converged=converged,
        threshold_used=0.0,
        penalty=none,
        model=model,
        alpha_hat=float(problem.update_alpha(beta)) if np.all(np.isfinite(beta)) else problem.alpha,
        dispersion=_dispersion_estimate(problem, beta) if model.family == "gaussian" and np.all(np.isfinite(beta)) else None,
    )


def predict(beta, X, link):
    mu, _ = mean_and_derivatives(beta, X, link)
    return mu
