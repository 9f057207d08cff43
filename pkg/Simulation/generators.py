"""Simulated longitudinal designs: cross-sectional and lagged-covariate processes."""
import logging
from dataclasses import asdict, dataclass
from typing import Optional, Tuple

import numpy as np
from scipy.linalg import LinAlgError, block_diag, cholesky
from scipy.special import expit

from Panel_Data.longitudinal_data import from_arrays
from PGEE.errors import SpecificationError
from PGEE.solver import ModelSpec, SolverControl, fit_gee

DEFAULT_CROSS_SECTIONAL_BETA = (-1.0, -1.0, 1.0, 1.0, 0.5, 0.0, 0.0, 0.0)
# raw within-block values; the (1, 2) and (2, 1) entries disagree
RAW_SIGMA1 = ((1.0, 0.2, 0.5), (0.3, 1.0, 0.4), (0.5, 0.4, 1.0))
SIGMA1_MODES = ("symmetrize", "upper", "lower")
LAGGED_P = 20
IMPLIED_BETA_TOLERANCE = 0.05

SCENARIOS = {
    1: {
        "gamma": (2.0,) * 3 + (1.0,) * 3 + (0.1,) * 3 + (0.0,) * 11,
        "rho": (0.5,) * LAGGED_P,
    },
    2: {
        "gamma": (1.0,) * 6 + (0.0,) * 14,
        "rho": (0.3,) * 3 + (0.6,) * 3 + (0.5,) * 14,
    },
}


def _check_covariance(S, what):
    S = np.asarray(S, dtype=float)
    if S.ndim != 2 or S.shape[0] != S.shape[1]:
        raise SpecificationError(f"{what} must be a square matrix")
    if not np.allclose(S, S.T):
        raise SpecificationError(f"{what} must be symmetric")
    try:
        return cholesky(S, lower=True)
    except LinAlgError as e:
        raise SpecificationError(f"{what} is not positive definite") from e


def cross_sectional_sigma(p=8):
    if p < 4:
        raise SpecificationError(f"the default Sigma needs at least 4 covariates, got {p}")
    S = np.eye(p)
    S[0, 1] = S[1, 0] = 0.6
    S[2, 3] = S[3, 2] = 0.3
    return S


def sigma1(mode="symmetrize"):
    """The 3 x 3 within-block covariate correlation made symmetric."""
    S = np.array(RAW_SIGMA1)
    if mode == "symmetrize":
        return (S + S.T) / 2
    if mode == "upper":
        return np.triu(S) + np.triu(S, 1).T
    if mode == "lower":
        return np.tril(S) + np.tril(S, -1).T
    raise SpecificationError(f"unknown sigma1_mode '{mode}', expected one of {', '.join(SIGMA1_MODES)}")


@dataclass(frozen=True)
class CrossSectionalConfig:
    """Y_it = X_it' beta + e_it with AR(1) errors and X_it ~ N_p(0, Sigma) i.i.d. over t."""
    n: int = 20
    T: int = 5
    beta: Tuple[float, ...] = DEFAULT_CROSS_SECTIONAL_BETA
    error_rho: float = 0.7
    sigma: Optional[Tuple[Tuple[float, ...], ...]] = None

    def __post_init__(self):
        object.__setattr__(self, "beta", tuple(float(b) for b in self.beta))
        if self.sigma is not None:
            object.__setattr__(self, "sigma", tuple(tuple(float(v) for v in row) for row in self.sigma))
        if self.n < 1 or self.T < 1:
            raise SpecificationError("n and T must be at least 1")
        if not -1.0 < self.error_rho < 1.0:
            raise SpecificationError(f"error_rho must lie in (-1, 1), got {self.error_rho}")
        if self.covariance.shape[0] != len(self.beta):
            raise SpecificationError("Sigma dimension does not match the length of beta")
        _check_covariance(self.covariance, "Sigma")

    @property
    def p(self):
        return len(self.beta)

    @property
    def covariance(self):
        return cross_sectional_sigma(len(self.beta)) if self.sigma is None else np.array(self.sigma)

    @property
    def true_beta(self):
        return np.array(self.beta)

    def with_n(self, n):
        return CrossSectionalConfig(n, self.T, self.beta, self.error_rho, self.sigma)

    def to_config(self):
        config = asdict(self)
        config["generator"] = "cross_sectional"
        return config


@dataclass(frozen=True)
class LaggedConfig:
    """Y_it = X_it' gamma1 + X_i,t-1' gamma2 + b_i + e_it with per-covariate
    AR(1) covariates X_j,it = rho_j X_j,i,t-1 + eps_j,it.

    Covariates are stationary with cross-sectional covariance
    Sigma = diag(Sigma1, Sigma1, Sigma1, I_11) at every t.
    """
    n: int = 20
    T: int = 5
    gamma1: Tuple[float, ...] = SCENARIOS[1]["gamma"]
    gamma2: Tuple[float, ...] = SCENARIOS[1]["gamma"]
    rho: Tuple[float, ...] = SCENARIOS[1]["rho"]
    sigma1_mode: str = "symmetrize"
    subject_effect_sd: float = 1.0
    error_sd: float = 1.0
    scenario: Optional[int] = 1

    def __post_init__(self):
        for name in ("gamma1", "gamma2", "rho"):
            object.__setattr__(self, name, tuple(float(v) for v in getattr(self, name)))
        if self.n < 1 or self.T < 1:
            raise SpecificationError("n and T must be at least 1")
        if not len(self.gamma1) == len(self.gamma2) == len(self.rho) == LAGGED_P:
            raise SpecificationError(f"gamma1, gamma2 and rho must each have length {LAGGED_P}")
        if any(not -1.0 < r < 1.0 for r in self.rho):
            raise SpecificationError("every rho_j must lie in (-1, 1)")
        if self.subject_effect_sd < 0 or self.error_sd < 0:
            raise SpecificationError("subject_effect_sd and error_sd must be non-negative")
        _check_covariance(self.covariance, "Sigma")

    @classmethod
    def preset(cls, scenario, n=20, T=5, sigma1_mode="symmetrize"):
        if scenario not in SCENARIOS:
            raise SpecificationError(f"unknown scenario {scenario}, expected 1 or 2")
        s = SCENARIOS[scenario]
        return cls(n, T, s["gamma"], s["gamma"], s["rho"], sigma1_mode, scenario=scenario)

    @property
    def p(self):
        return LAGGED_P

    @property
    def covariance(self):
        return block_diag(*([sigma1(self.sigma1_mode)] * 3), np.eye(LAGGED_P - 9))

    @property
    def true_beta(self):
        return implied_beta(self.gamma1, self.gamma2, self.rho)

    def innovation_covariance(self):
        """Sigma - R Sigma R with R = diag(rho): keeps Var(X_t) = Sigma over time."""
        S = self.covariance
        R = np.diag(self.rho)
        return S - R @ S @ R

    def with_n(self, n):
        return LaggedConfig(n, self.T, self.gamma1, self.gamma2, self.rho, self.sigma1_mode,
                            self.subject_effect_sd, self.error_sd, self.scenario)

    def to_config(self):
        config = asdict(self)
        config["generator"] = "lagged"
        return config


def _panel(y, X, n, T):
    subjects = np.repeat(np.arange(1, n + 1), T)
    times = np.tile(np.arange(1, T + 1), n)
    return from_arrays(subjects, times, y, X.reshape(n * T, -1))


def simulate_cross_sectional(cfg, seed=None):
    """Draws one dataset of ``cfg``; the same seed gives the same dataset."""
    rng = np.random.default_rng(seed)
    L = _check_covariance(cfg.covariance, "Sigma")
    X = rng.standard_normal((cfg.n, cfg.T, cfg.p)) @ L.T
    z = rng.standard_normal((cfg.n, cfg.T))
    e = np.empty((cfg.n, cfg.T))
    e[:, 0] = z[:, 0]
    scale = np.sqrt(1.0 - cfg.error_rho ** 2)
    for t in range(1, cfg.T):
        e[:, t] = cfg.error_rho * e[:, t - 1] + scale * z[:, t]
    y = X @ cfg.true_beta + e
    return _panel(y.ravel(), X, cfg.n, cfg.T)


def _lagged_predictor(cfg, rng):
    """Linear predictor and emitted covariates of the lagged process.

    X_i0 is a burn-in draw from N(0, Sigma); only t = 1..T are returned.
    """
    try:
        L_inn = cholesky(cfg.innovation_covariance(), lower=True)
    except LinAlgError as e:
        raise SpecificationError("implied innovation covariance Sigma - R Sigma R is not positive definite") from e
    L0 = cholesky(cfg.covariance, lower=True)
    rho = np.array(cfg.rho)
    X = np.empty((cfg.n, cfg.T + 1, cfg.p))
    X[:, 0] = rng.standard_normal((cfg.n, cfg.p)) @ L0.T
    for t in range(1, cfg.T + 1):
        X[:, t] = rho * X[:, t - 1] + rng.standard_normal((cfg.n, cfg.p)) @ L_inn.T
    b = cfg.subject_effect_sd * rng.standard_normal(cfg.n)
    eta = X[:, 1:] @ np.array(cfg.gamma1) + X[:, :-1] @ np.array(cfg.gamma2) + b[:, None]
    return eta, X[:, 1:]


def simulate_lagged(cfg, seed=None):
    rng = np.random.default_rng(seed)
    eta, X = _lagged_predictor(cfg, rng)
    y = eta + cfg.error_sd * rng.standard_normal(eta.shape)
    return _panel(y.ravel(), X, cfg.n, cfg.T)


def simulate_binomial(cfg, seed=None):
    """Bernoulli responses with logit(p_it) given by the lagged linear predictor."""
    rng = np.random.default_rng(seed)
    eta, X = _lagged_predictor(cfg, rng)
    y = (rng.random(eta.shape) < expit(eta)).astype(float)
    return _panel(y.ravel(), X, cfg.n, cfg.T)


def implied_beta(gamma1, gamma2, rho):
    """Elementwise cross-sectional coefficients beta_j = gamma1_j + rho_j gamma2_j."""
    gamma1, gamma2, rho = (np.asarray(v, dtype=float) for v in (gamma1, gamma2, rho))
    if not gamma1.shape == gamma2.shape == rho.shape:
        raise SpecificationError("gamma1, gamma2 and rho must have equal lengths")
    return gamma1 + rho * gamma2


def conditional_implied_beta(cfg):
    """gamma1 + Sigma^{-1} R Sigma gamma2, the coefficient of E(Y_it | X_it)."""
    S = cfg.covariance
    R = np.diag(cfg.rho)
    return np.array(cfg.gamma1) + np.linalg.solve(S, R @ S @ np.array(cfg.gamma2))


def monte_carlo_implied_beta(cfg, n_subjects=100_000, seed=None, tolerance=IMPLIED_BETA_TOLERANCE):
    """Pooled least-squares regression of Y_it on X_it over a large sample."""
    d = simulate_lagged(cfg.with_n(n_subjects), seed)
    beta = np.linalg.lstsq(np.asarray(d.X), np.asarray(d.y), rcond=None)[0]
    gap = np.abs(beta - cfg.true_beta)
    if gap.max() > tolerance:
        logging.warning("implied beta oracle disagrees with the elementwise formula "
                        "(max gap %.4f at covariate %d)", gap.max(), int(gap.argmax()) + 1)
    return beta


def oracle_binomial_beta(cfg, n_subjects=20_000, seed=None):
    """Marginal logit coefficients from an unpenalized GEE fit to a large sample.

    The subject effect and the lagged term attenuate the marginal logit
    slopes, so the elementwise implied coefficients overstate them.
    """
    d = simulate_binomial(cfg.with_n(n_subjects), seed)
    fit = fit_gee(d, ModelSpec.binomial(), SolverControl(check_scaling=False))
    logging.info("binomial oracle: max |elementwise - oracle| = %.4f",
                 float(np.max(np.abs(cfg.true_beta - fit.beta_naive))))
    return fit.beta_naive
