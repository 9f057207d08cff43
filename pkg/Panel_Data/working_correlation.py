import logging
from dataclasses import dataclass

import numpy as np
from scipy.linalg import toeplitz

from PGEE.errors import NumericalError, SpecificationError

CORRELATION_KINDS = ("independence", "exchangeable", "ar1")
FAMILIES = ("gaussian", "binomial")
ALPHA_CLAMP = 0.99
EXCHANGEABLE_PD_MARGIN = 1e-3


@dataclass(frozen=True)
class CorrelationSpec:
    """Working correlation W(alpha).

    ``alpha`` is unused for independence. Unless ``fixed`` is set the solver
    re-estimates alpha by moments at every iteration, starting from ``alpha``.
    """
    kind: str = "independence"
    alpha: float = 0.0
    fixed: bool = False

    def __post_init__(self):
        if self.kind not in CORRELATION_KINDS:
            raise SpecificationError(
                f"unknown working correlation '{self.kind}', expected one of {', '.join(CORRELATION_KINDS)}"
            )
        if self.kind != "independence" and not -1.0 < self.alpha < 1.0:
            raise SpecificationError(f"{self.kind} correlation needs -1 < alpha < 1, got {self.alpha}")

    @property
    def is_independence(self):
        return self.kind == "independence"

    @property
    def is_fixed(self):
        return self.is_independence or self.fixed

    def with_alpha(self, alpha):
        return CorrelationSpec(self.kind, float(alpha), self.fixed)

    def to_config(self):
        config = {"working": self.kind}
        if not self.is_independence:
            config["alpha"] = self.alpha
            config["fixed"] = self.fixed
        return config

    @classmethod
    def from_config(cls, config):
        return cls(config.get("working", "independence"), float(config.get("alpha", 0.0)),
                   bool(config.get("fixed", False)))


@dataclass(frozen=True)
class VarianceModel:
    """Variance function v(mu) of the marginal model with dispersion phi."""
    family: str = "gaussian"
    dispersion: float = 1.0

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise SpecificationError(f"unknown family '{self.family}', expected gaussian or binomial")
        if not self.dispersion > 0:
            raise SpecificationError(f"dispersion must be positive, got {self.dispersion}")

    def variance(self, mu):
        mu = np.asarray(mu, dtype=float)
        if self.family == "gaussian":
            return np.full(mu.shape, self.dispersion)
        return self.dispersion * mu * (1.0 - mu)


def build_correlation(spec, T):
    """Working correlation matrix of a cluster of size ``T``."""
    if T < 1:
        raise SpecificationError(f"cluster size must be >= 1, got {T}")
    if spec.kind == "independence" or T == 1:
        return np.eye(T)
    if spec.kind == "ar1":
        return toeplitz(spec.alpha ** np.arange(T))
    # exchangeable
    if spec.alpha <= -1.0 / (T - 1):
        raise SpecificationError(
            f"exchangeable alpha={spec.alpha} is not positive definite for cluster size {T} "
            f"(needs alpha > {-1.0 / (T - 1):.6g})"
        )
    W = np.full((T, T), spec.alpha)
    np.fill_diagonal(W, 1.0)
    return W


def working_covariance(u, W):
    """V = U^{1/2} W U^{1/2} for the diagonal variance vector ``u``."""
    u = np.asarray(u, dtype=float)
    W = np.asarray(W, dtype=float)
    if W.shape != (len(u), len(u)):
        raise SpecificationError(f"variance vector of length {len(u)} does not match W of shape {W.shape}")
    if np.any(u <= 0):
        raise NumericalError("working covariance needs strictly positive variances")
    s = np.sqrt(u)
    return s[:, None] * W * s[None, :]


def exchangeable_lower_bound(T_max):
    """Smallest exchangeable alpha kept by the estimator for clusters up to ``T_max``."""
    if T_max < 3:
        return -ALPHA_CLAMP
    return max(-ALPHA_CLAMP, -1.0 / (T_max - 1) + EXCHANGEABLE_PD_MARGIN)


def estimate_alpha(residuals, kind, dispersion=1.0, max_cluster_size=None):
    """Moment estimate of the working correlation parameter.

    Args:
        residuals (Sequence[np.ndarray]): Pearson residuals, one block per subject.
        kind (str): 'exchangeable' or 'ar1'.
        dispersion (float): Scale the cross-products are divided by.
        max_cluster_size (int, optional): Largest cluster the estimate will be
            used for; defaults to the largest residual block.

    Returns:
        float: alpha clamped to (-0.99, 0.99). An exchangeable estimate is
        also kept above -1/(T_max - 1) so W stays positive definite.
    """
    if kind not in ("exchangeable", "ar1"):
        raise SpecificationError(f"alpha is only estimated for exchangeable or ar1, got '{kind}'")
    blocks = [np.asarray(r, dtype=float) for r in residuals]
    if max_cluster_size is None:
        max_cluster_size = max((len(r) for r in blocks), default=1)
    total, count = 0.0, 0
    for r in blocks:
        T = len(r)
        if T < 2:
            continue
        if kind == "exchangeable":
            s = r.sum()
            total += 0.5 * (s * s - np.dot(r, r))
            count += T * (T - 1) // 2
        else:
            total += np.dot(r[:-1], r[1:])
            count += T - 1
    if count == 0:
        raise NumericalError("correlation not estimable: every subject has a single observation")
    alpha = total / count / dispersion
    lower = exchangeable_lower_bound(max_cluster_size) if kind == "exchangeable" else -ALPHA_CLAMP
    clamped = float(np.clip(alpha, lower, ALPHA_CLAMP))
    if clamped != alpha:
        logging.debug("%s alpha estimate %.4f clamped to %.2f", kind, alpha, clamped)
    return clamped


def estimate_dispersion(residuals, p):
    """Mean squared Pearson residual over N - p degrees of freedom."""
    blocks = [np.asarray(r, dtype=float) for r in residuals]
    N = sum(len(r) for r in blocks)
    if N <= p:
        raise NumericalError(f"dispersion not estimable with N={N} <= p={p}")
    return float(sum(np.dot(r, r) for r in blocks) / (N - p))


def correlation_sum(W):
    """|R| = sum of all entries of a working correlation matrix."""
    return float(np.sum(W))
