"""Tuning-parameter selection: leave-one-subject-out CV, QGCV, paths."""
import logging
from dataclasses import dataclass, field, replace
from typing import List, Optional, Tuple

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve

from Panel_Data.working_correlation import build_correlation, correlation_sum, working_covariance
from PGEE.errors import NumericalError, PgeeError, SpecificationError
from PGEE.parallel import run_parallel
from PGEE.penalty import DEFAULT_SCAD_A, PENALTY_FAMILIES, PenaltySpec, lqa_diagonal
from PGEE.solver import (GaussianMoments, GeeProblem, MU_CLIP, SolverControl, fit_pgee,
                         initial_beta, make_problem, predict, run_lqa)

DEFAULT_N_LAMBDA = 30
DEFAULT_LAMBDA_RATIO = 1e-3
DEFAULT_ALPHAS = tuple(k / 14 for k in range(15))
MIN_ALPHA_FOR_LAMBDA_MAX = 0.01
# the LQA reaches an exact zero only slowly at lambda_max itself
GRID_TOP_MARGIN = 1.1
DEFAULT_TOP_K = 10
RULES = ("min", "one_se")
QGCV_RANK_TOLERANCE = 1e-9


@dataclass(frozen=True)
class TuningGrid:
    """Descending lambda values crossed with alpha values in [0, 1]."""
    lambda_values: Tuple[float, ...]
    alpha_values: Tuple[float, ...] = DEFAULT_ALPHAS

    def __post_init__(self):
        lam = np.asarray(self.lambda_values, dtype=float)
        alp = np.asarray(self.alpha_values, dtype=float)
        if lam.size == 0 or alp.size == 0:
            raise SpecificationError("tuning grid needs at least one lambda and one alpha")
        if np.any(lam < 0) or np.any(np.diff(lam) >= 0):
            raise SpecificationError("lambda_values must be non-negative and strictly descending")
        if np.any(alp < 0) or np.any(alp > 1):
            raise SpecificationError("alpha_values must lie in [0, 1]")
        if alp.size > 1 and not (np.all(np.diff(alp) > 0) or np.all(np.diff(alp) < 0)):
            raise SpecificationError("alpha_values must be strictly monotone")
        object.__setattr__(self, "lambda_values", tuple(float(v) for v in lam))
        object.__setattr__(self, "alpha_values", tuple(float(v) for v in alp))

    @classmethod
    def default(cls, data, model, family, n_lambda=DEFAULT_N_LAMBDA, alphas=None,
                lambda_ratio=DEFAULT_LAMBDA_RATIO):
        alphas = DEFAULT_ALPHAS if alphas is None else tuple(alphas)
        lam_max = lambda_max(data, model, _alpha_star(family, alphas))
        return cls(tuple(log_lambda_sequence(lam_max, n_lambda, lambda_ratio)), alphas)

    def points(self, family):
        """(lambda, alpha) pairs evaluated for ``family``."""
        if family not in PENALTY_FAMILIES:
            raise SpecificationError(f"unknown penalty '{family}'")
        if family == "none":
            return [(0.0, 1.0)]
        if family in ("lasso", "scad"):
            alphas = (1.0,)
        elif family == "ridge":
            alphas = (0.0,)
        else:
            alphas = self.alpha_values
        return [(lam, alpha) for alpha in alphas for lam in self.lambda_values]


def _alpha_star(family, alphas):
    if family in ("lasso", "scad"):
        return 1.0
    if family == "ridge":
        return 0.0
    positive = [a for a in alphas if a > 0]
    return min(positive) if positive else 0.0


def log_lambda_sequence(lam_max, n_lambda=DEFAULT_N_LAMBDA, ratio=DEFAULT_LAMBDA_RATIO,
                        margin=GRID_TOP_MARGIN):
    """Log-spaced descending values from margin * lam_max down to ratio * lam_max."""
    if not lam_max > 0:
        raise NumericalError("lambda_max is zero: the score vanishes at beta = 0")
    if n_lambda == 1:
        return np.array([lam_max * margin])
    return np.exp(np.linspace(np.log(lam_max * margin), np.log(lam_max * ratio), n_lambda))


def lambda_max(data, model, alpha=1.0):
    """Smallest lambda zeroing every coefficient under the L1 part:
    max_j |S_j(0)| / (N * max(alpha, 0.01))."""
    S, _ = GeeProblem(data, model).score_information(np.zeros(data.p))
    return float(np.max(np.abs(S)) / (data.N * max(alpha, MIN_ALPHA_FOR_LAMBDA_MAX)))


@dataclass
class CvPoint:
    lambda_: float
    alpha: float
    pl_cv: float
    se_cv: float
    n_folds: int
    valid: bool
    message: str = ""
    losses: Optional[np.ndarray] = None
    qgcv: float = float("nan")


@dataclass
class CvSurface:
    """PL_CV over a grid with the minimum and the one-SE set."""
    family: str
    points: List[CvPoint]
    best: Optional[CvPoint] = None
    one_se_set: List[CvPoint] = field(default_factory=list)

    @classmethod
    def from_points(cls, family, points):
        points = sorted(points, key=lambda q: (q.alpha, -q.lambda_))
        valid = [q for q in points if q.valid]
        if not valid:
            return cls(family, points)
        # ties go to the larger lambda, then the larger alpha
        best = min(valid, key=lambda q: (q.pl_cv, -q.lambda_, -q.alpha))
        bound = best.pl_cv + best.se_cv
        one_se = [q for q in valid if q.pl_cv <= bound]
        return cls(family, points, best, one_se)

    @property
    def valid_points(self):
        return [q for q in self.points if q.valid]

    @property
    def has_qgcv(self):
        return any(np.isfinite(q.qgcv) for q in self.points)

    def to_rows(self):
        chosen = {}
        if self.best is not None:
            for rule in RULES:
                lam, alpha = select_tuning(self, rule)
                chosen.setdefault((lam, alpha), []).append(rule)
        if self.has_qgcv:
            chosen.setdefault(select_qgcv(self), []).append("qgcv")
        return [
            {
                "lambda": q.lambda_,
                "alpha": q.alpha,
                "pl_cv": q.pl_cv,
                "se_cv": q.se_cv,
                "qgcv": q.qgcv,
                "valid": q.valid,
                "chosen": ";".join(chosen.get((q.lambda_, q.alpha), [])),
            }
            for q in self.points
        ]


@dataclass
class PathResult:
    family: str
    alpha: float
    lambdas: np.ndarray
    coefficients: np.ndarray
    valid: np.ndarray
    covariate_names: Tuple[str, ...] = ()

    def top_k(self, k=DEFAULT_TOP_K):
        """Indices of the ``k`` covariates with the largest |coefficient| on the path."""
        size = np.nanmax(np.abs(self.coefficients), axis=1) if self.coefficients.size else np.zeros(0)
        order = np.argsort(-np.nan_to_num(size), kind="stable")
        return [int(j) for j in order[:k]]

    def to_rows(self):
        names = self.covariate_names or tuple(f"x{j + 1}" for j in range(self.coefficients.shape[0]))
        rows = []
        for c, lam in enumerate(self.lambdas):
            row = {"lambda": float(lam), "alpha": self.alpha, "valid": bool(self.valid[c])}
            row.update({name: float(self.coefficients[j, c]) for j, name in enumerate(names)})
            rows.append(row)
        return rows


def _fold_problems(data, model):
    """Training problem factory for every left-out subject."""
    if model.is_gaussian and model.correlation.is_fixed:
        moments = GaussianMoments.from_data(data, model)
        folds = [moments.without(i) for i in range(data.n)]
        return lambda i: folds[i]
    train = [data.without(i) for i in range(data.n)]
    T_max = int(data.cluster_sizes.max())
    return lambda i: GeeProblem(train[i], model, max_cluster_size=T_max)


def prediction_loss(y_i, X_i, beta, model, alpha_hat):
    """(y_i - yhat_i)' V_i^{-1} (y_i - yhat_i) / T_i."""
    mu = predict(beta, X_i, model.link)
    T = len(y_i)
    r = y_i - mu
    if model.link == "logit":
        mu = np.clip(mu, MU_CLIP, 1 - MU_CLIP)
    u = model.variance.variance(mu)
    if model.correlation.is_independence:
        return float(np.sum(r * r / u) / T)
    V = working_covariance(u, build_correlation(model.correlation.with_alpha(alpha_hat), T))
    try:
        return float(r @ cho_solve(cho_factor(V), r) / T)
    except LinAlgError as e:
        raise NumericalError("singular working covariance in CV loss") from e


def loso_cv(data, model, penalty_family, grid, control=None, threads=1, a=DEFAULT_SCAD_A, with_qgcv=False):
    """Leave-one-subject-out cross-validation over ``grid``.

    Each grid point is refit n times, once without each subject; the
    left-out subject's loss uses the non-naive coefficients and the
    training-fold working correlation estimate. With ``with_qgcv`` every
    point also gets the QGCV criterion of its full-data fit (NaN where the
    fit fails or the model is too complex for the correction).

    Returns:
        CvSurface: PL_CV and its standard error at every grid point.
    """
    if data.n < 2:
        raise SpecificationError("leave-one-subject-out CV needs at least 2 subjects")
    control = (SolverControl() if control is None else control).quiet()
    fold_problem = _fold_problems(data, model)
    shared = make_problem(data, model) if with_qgcv else None
    n = data.n

    def cross_validate(lam, alpha, spec):
        losses = np.empty(n)
        for i in range(n):
            try:
                fit = fit_pgee(None, model, spec, control, problem=fold_problem(i), track_objective=False)
            except PgeeError as e:
                return _invalid(lam, alpha, n, f"fold {i}: {e}")
            if not fit.converged:
                return _invalid(lam, alpha, n, f"fold {i} did not converge")
            y_i, X_i, _ = data.block(i)
            losses[i] = prediction_loss(y_i, X_i, fit.beta_nonnaive, model, fit.alpha_hat)
        se = float(np.std(losses, ddof=1) * np.sqrt(n))
        return CvPoint(lam, alpha, float(losses.sum()), se, n, True, losses=losses)

    def evaluate(point):
        lam, alpha = point
        spec = PenaltySpec.from_tuning(penalty_family, lam, alpha, a)
        result = cross_validate(lam, alpha, spec)
        if with_qgcv:
            result.qgcv = _full_data_qgcv(data, model, spec, control, shared)
        return result

    points = run_parallel(evaluate, grid.points(penalty_family), threads)
    return CvSurface.from_points(penalty_family, points)


def _full_data_qgcv(data, model, spec, control, shared):
    # GeeProblem carries the running alpha estimate, so only the moments are shared
    problem = shared if isinstance(shared, GaussianMoments) else None
    try:
        fit = fit_pgee(data, model, spec, control, problem=problem, track_objective=False)
        if not fit.converged:
            return float("nan")
        return qgcv(fit, data)
    except PgeeError as e:
        logging.info("QGCV at (lambda1=%.4g, lambda2=%.4g) unavailable: %s", spec.lambda1, spec.lambda2, e)
        return float("nan")


def _invalid(lam, alpha, n, message):
    logging.warning("CV grid point (lambda=%.4g, alpha=%.4g) invalid: %s", lam, alpha, message)
    return CvPoint(lam, alpha, float("nan"), float("nan"), n, False, message)


def select_tuning(surface, rule="min"):
    """(lambda, alpha) chosen by the 'min' or 'one_se' rule."""
    if rule not in RULES:
        raise SpecificationError(f"unknown rule '{rule}', expected min or one_se")
    if surface.best is None:
        raise NumericalError("CV surface has no valid grid point")
    if rule == "min":
        return surface.best.lambda_, surface.best.alpha
    pick = max(surface.one_se_set, key=lambda q: (q.lambda_, q.alpha))
    return pick.lambda_, pick.alpha


def select_qgcv(surface):
    """(lambda, alpha) minimizing QGCV; ties go to the larger lambda, then alpha."""
    scored = [q for q in surface.points if np.isfinite(q.qgcv)]
    if not scored:
        raise NumericalError("no grid point has a QGCV value")
    best = min(scored, key=lambda q: (q.qgcv, -q.lambda_, -q.alpha))
    return best.lambda_, best.alpha


def cv_then_fit(data, model, family, grid, rule="min", control=None, threads=1, a=DEFAULT_SCAD_A):
    """CV-tunes ``family`` on ``grid`` and refits on all subjects at the chosen point.

    Returns:
        tuple: (CvSurface, PenaltySpec, PgeeFit)
    """
    control = SolverControl() if control is None else control
    if family == "none":
        spec = PenaltySpec("none", a=a)
        return None, spec, fit_pgee(data, model, spec, control.quiet())
    surface = loso_cv(data, model, family, grid, control, threads, a)
    lam, alpha = select_tuning(surface, rule)
    spec = PenaltySpec.from_tuning(family, lam, alpha, a)
    return surface, spec, fit_pgee(data, model, spec, control.quiet())


def _information_at(fit, data):
    model = fit.fitted_model()
    frozen = replace(model, correlation=replace(model.correlation, fixed=True))
    return make_problem(data, frozen).score_information(fit.beta_naive)[1]


def effective_parameters(fit, data, penalty=None):
    """p(lambda, alpha) = trace[(H + N Sigma)^{-1} H] over the active coordinates."""
    penalty = fit.penalty if penalty is None else penalty
    active = np.array(fit.active_set, dtype=int)
    if active.size == 0:
        return 0.0
    H = _information_at(fit, data)[np.ix_(active, active)]
    mask = np.ones(fit.p, dtype=bool)
    mask[active] = False
    sigma = lqa_diagonal(penalty, fit.beta_naive, mask)[active]
    try:
        return float(np.trace(np.linalg.solve(H + data.N * np.diag(sigma), H)))
    except np.linalg.LinAlgError as e:
        raise NumericalError("singular H + N Sigma in effective parameter count") from e


def deviance_residuals(y, mu, link):
    if link == "identity":
        return y - mu
    mu = np.clip(mu, MU_CLIP, 1 - MU_CLIP)
    dev = -2.0 * (y * np.log(mu) + (1.0 - y) * np.log(1.0 - mu))
    return np.sign(y - mu) * np.sqrt(np.maximum(dev, 0.0))


def qgcv(fit, data, model=None):
    """Quasi-generalized cross-validation criterion Wdev / (n (1 - p_eff / N_df))."""
    model = fit.fitted_model() if model is None else model
    corr = model.correlation.with_alpha(fit.alpha_hat)
    p_eff = effective_parameters(fit, data)
    wdev, n_df = 0.0, 0.0
    for i in range(data.n):
        y_i, X_i, T_i = data.block(i)
        r = deviance_residuals(y_i, predict(fit.beta_nonnaive, X_i, model.link), model.link)
        R = build_correlation(corr, T_i)
        wdev += float(r @ np.linalg.solve(R, r))
        n_df += T_i ** 2 / correlation_sum(R)
    if p_eff >= n_df * (1.0 - QGCV_RANK_TOLERANCE):
        raise NumericalError("model too complex for QGCV correction")
    return wdev / (data.n * (1.0 - p_eff / n_df))


def penalization_path(data, model, penalty_family, alpha, lambda_seq=None, control=None,
                      a=DEFAULT_SCAD_A, n_lambda=DEFAULT_N_LAMBDA):
    """Non-naive coefficients along a descending lambda sequence at fixed alpha.

    Each fit starts from the previous (larger-lambda) solution; coordinates
    that were zero there start from the ridge warm start instead.
    """
    control = (SolverControl() if control is None else control).quiet()
    if penalty_family in ("lasso", "scad", "ridge"):
        alpha = _alpha_star(penalty_family, ())
    if lambda_seq is None:
        lambda_seq = log_lambda_sequence(lambda_max(data, model, alpha), n_lambda)
    lambdas = np.asarray(lambda_seq, dtype=float)
    if np.any(np.diff(lambdas) >= 0):
        raise SpecificationError("lambda_seq must be strictly descending")
    coefficients = np.full((data.p, lambdas.size), np.nan)
    valid = np.zeros(lambdas.size, dtype=bool)
    shared = make_problem(data, model)
    previous = None
    for c, lam in enumerate(lambdas):
        spec = PenaltySpec.from_tuning(penalty_family, lam, alpha, a)
        problem = shared if isinstance(shared, GaussianMoments) else GeeProblem(data, model)
        try:
            beta0 = initial_beta(problem, spec, control)
            if previous is not None:
                beta0 = np.where(previous != 0, previous, beta0)
            beta, _, converged, _, _ = run_lqa(problem, spec, control, beta0)
        except PgeeError as e:
            logging.warning("path point lambda=%.4g failed: %s", lam, e)
            continue
        if not converged:
            logging.warning("path point lambda=%.4g did not converge", lam)
        coefficients[:, c] = beta * (1.0 + spec.lambda2)
        valid[c] = converged
        previous = beta
    return PathResult(penalty_family, float(alpha), lambdas, coefficients, valid, data.covariate_names)
