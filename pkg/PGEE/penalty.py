"""Penalty family: values, derivatives, LQA weights, reparametrization."""
from dataclasses import dataclass

import numpy as np

from PGEE.errors import SpecificationError

PENALTY_FAMILIES = ("none", "lasso", "ridge", "en", "scad", "scad_l2")
SCAD_FAMILIES = ("scad", "scad_l2")
DEFAULT_SCAD_A = 3.7


@dataclass(frozen=True)
class PenaltySpec:
    """P(beta) = lambda1 * P_L1(beta) + lambda2 * sum(beta_j^2).

    P_L1 is the L1 norm for lasso/en and the SCAD penalty for scad/scad_l2.
    """
    family: str = "none"
    lambda1: float = 0.0
    lambda2: float = 0.0
    a: float = DEFAULT_SCAD_A

    def __post_init__(self):
        if self.family not in PENALTY_FAMILIES:
            raise SpecificationError(
                f"unknown penalty '{self.family}', expected one of {', '.join(PENALTY_FAMILIES)}"
            )
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise SpecificationError("lambda1 and lambda2 must be non-negative")
        if self.family == "none" and (self.lambda1 or self.lambda2):
            raise SpecificationError("penalty 'none' takes no tuning parameters")
        if self.family in ("lasso", "scad") and self.lambda2 != 0:
            raise SpecificationError(f"{self.family} requires lambda2 = 0")
        if self.family == "ridge" and self.lambda1 != 0:
            raise SpecificationError("ridge requires lambda1 = 0")
        if self.family in SCAD_FAMILIES and not self.a > 2:
            raise SpecificationError(f"SCAD shape a must exceed 2, got {self.a}")

    @property
    def is_scad(self):
        return self.family in SCAD_FAMILIES

    @property
    def vanishes(self):
        return self.lambda1 == 0 and self.lambda2 == 0

    @classmethod
    def from_tuning(cls, family, lam, alpha, a=DEFAULT_SCAD_A):
        """Builds a spec from the (lambda, alpha) parametrization.

        lasso and scad use alpha = 1, ridge uses alpha = 0 and 'none' ignores
        both values.
        """
        if family == "none":
            return cls("none", a=a)
        if family in ("lasso", "scad"):
            alpha = 1.0
        elif family == "ridge":
            alpha = 0.0
        lambda1, lambda2 = reparametrize(lam, alpha)
        return cls(family, lambda1, lambda2, a)

    @classmethod
    def from_config(cls, config):
        """Reads ``{"penalty": ..., "lambda": ..., "alpha": ..., "a": ...}`` or
        the same with explicit ``lambda1`` / ``lambda2``."""
        family = config.get("penalty", "none")
        a = float(config.get("a", DEFAULT_SCAD_A))
        if "lambda" in config:
            if "lambda1" in config or "lambda2" in config:
                raise SpecificationError("give either lambda/alpha or lambda1/lambda2, not both")
            alpha = config.get("alpha")
            if alpha is None:
                alpha = 0.0 if family == "ridge" else 1.0
            return cls.from_tuning(family, float(config["lambda"]), float(alpha), a)
        return cls(family, float(config.get("lambda1", 0.0)), float(config.get("lambda2", 0.0)), a)

    def to_config(self):
        return {"penalty": self.family, "lambda1": self.lambda1, "lambda2": self.lambda2, "a": self.a}


def reparametrize(lam, alpha):
    """(lambda, alpha) -> (lambda1, lambda2) = (lambda * alpha, lambda * (1 - alpha))."""
    if lam < 0:
        raise SpecificationError(f"lambda must be non-negative, got {lam}")
    if not 0.0 <= alpha <= 1.0:
        raise SpecificationError(f"alpha must lie in [0, 1], got {alpha}")
    return lam * alpha, lam * (1.0 - alpha)


def scad_value(theta, lambda1, a):
    """Closed-form SCAD penalty of magnitudes ``theta``, slope lambda1 at 0."""
    theta = np.abs(np.asarray(theta, dtype=float))
    mid = (2 * a * lambda1 * theta - theta ** 2 - lambda1 ** 2) / (2 * (a - 1))
    return np.where(theta <= lambda1, lambda1 * theta,
                    np.where(theta <= a * lambda1, mid, lambda1 ** 2 * (a + 1) / 2))


def scad_derivative(theta, lambda1, a):
    theta = np.asarray(theta, dtype=float)
    return np.where(theta <= lambda1, lambda1, np.maximum(a * lambda1 - theta, 0.0) / (a - 1))


def penalty_value(spec, beta):
    beta = np.atleast_1d(np.asarray(beta, dtype=float))
    theta = np.abs(beta)
    value = 0.0
    if spec.family in ("lasso", "en"):
        value += spec.lambda1 * theta.sum()
    elif spec.is_scad and spec.lambda1 > 0:
        value += scad_value(theta, spec.lambda1, spec.a).sum()
    if spec.family in ("ridge", "en", "scad_l2"):
        value += spec.lambda2 * np.dot(beta, beta)
    return float(value)


def penalty_derivative(spec, theta):
    """dP/dtheta of the per-coefficient penalty at magnitude(s) ``theta`` >= 0."""
    t = np.asarray(theta, dtype=float)
    if np.any(t < 0):
        raise SpecificationError("penalty_derivative is defined for non-negative magnitudes")
    d = np.zeros(t.shape)
    if spec.family in ("lasso", "en"):
        d = d + spec.lambda1
    elif spec.is_scad and spec.lambda1 > 0:
        d = d + scad_derivative(t, spec.lambda1, spec.a)
    if spec.family in ("ridge", "en", "scad_l2"):
        d = d + 2.0 * spec.lambda2 * t
    return float(d) if d.ndim == 0 else d


def lqa_weights(spec, beta_t, zero_mask=None):
    """Local quadratic approximation of the penalty gradient at ``beta_t``.

    Sigma_jj = P'(|beta_jt|) / |beta_jt| on unmasked coordinates, 0 on masked
    ones; U = Sigma beta_t.

    Returns:
        tuple: (Sigma as a p x p diagonal matrix, U vector)
    """
    beta_t = np.asarray(beta_t, dtype=float)
    mask = np.zeros(beta_t.shape, dtype=bool) if zero_mask is None else np.asarray(zero_mask, dtype=bool)
    diag = lqa_diagonal(spec, beta_t, mask)
    return np.diag(diag), diag * beta_t


def lqa_diagonal(spec, beta_t, mask):
    diag = np.zeros(beta_t.shape)
    if spec.vanishes:
        return diag
    active = ~mask
    theta = np.abs(beta_t[active])
    if np.any(theta == 0):
        raise SpecificationError("LQA weights need nonzero unmasked coefficients; mask zeros first")
    diag[active] = penalty_derivative(spec, theta) / theta
    return diag


def scad_l2_convexity_bound(a=DEFAULT_SCAD_A):
    return 1.0 / (2.0 * (a - 1.0))


def convexity_check(spec):
    """True iff the full penalty is strictly convex."""
    if spec.family in ("en", "ridge"):
        return spec.lambda2 > 0
    if spec.family == "scad_l2":
        return spec.lambda2 > scad_l2_convexity_bound(spec.a)
    return False
