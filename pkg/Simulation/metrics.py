import logging

import numpy as np

from PGEE.errors import NumericalError, PgeeError, SpecificationError
from PGEE.parallel import run_parallel
from PGEE.solver import SolverControl, fit_pgee

MAX_BOOTSTRAP_FAILURE_RATE = 0.2


def model_error(beta_hat, beta_true, second_moment):
    """ME = (beta_hat - beta)' E(XX') (beta_hat - beta)."""
    d = np.asarray(beta_hat, dtype=float) - np.asarray(beta_true, dtype=float)
    M = np.asarray(second_moment, dtype=float)
    if d.ndim != 1 or M.shape != (d.size, d.size):
        raise SpecificationError(
            f"model_error: coefficient length {d.size} does not match second moment of shape {M.shape}"
        )
    return max(float(d @ M @ d), 0.0)


def selection_metrics(beta_hat, beta_true):
    """Ratios of correct and incorrect deletions.

    Returns:
        tuple: (cd_ratio, id_ratio); a ratio is None when no coefficient is
        truly zero (cd) or truly nonzero (id).
    """
    beta_hat = np.asarray(beta_hat, dtype=float)
    beta_true = np.asarray(beta_true, dtype=float)
    if beta_hat.shape != beta_true.shape:
        raise SpecificationError("beta_hat and beta_true must have the same length")
    zero_true = beta_true == 0
    zero_hat = beta_hat == 0
    cd = float(np.mean(zero_hat[zero_true])) if zero_true.any() else None
    id_ = float(np.mean(zero_hat[~zero_true])) if (~zero_true).any() else None
    return cd, id_


def bootstrap_se(data, model, penalty, B, seed=None, control=None, threads=1):
    """Cluster bootstrap standard errors of the non-naive coefficients.

    Subjects are resampled with replacement and the model is refit at the
    fixed penalty; all resampling indices are drawn up front so the result
    does not depend on ``threads``.

    Args:
        data (LongitudinalDataset): Standardized data.
        model (ModelSpec): Model of the original fit.
        penalty (PenaltySpec): Fixed tuning parameters.
        B (int): Number of bootstrap replicates, at least 2.
        seed: Anything accepted by ``numpy.random.default_rng``.

    Returns:
        np.ndarray: Per-coefficient standard deviation over the replicates.
    """
    if B < 2:
        raise SpecificationError(f"bootstrap needs B >= 2 replicates, got {B}")
    control = (SolverControl() if control is None else control).quiet()
    rng = np.random.default_rng(seed)
    draws = rng.integers(0, data.n, size=(B, data.n))

    def refit(b):
        try:
            fit = fit_pgee(data.resample(draws[b]), model, penalty, control, track_objective=False)
        except PgeeError as e:
            return None, str(e)
        if not fit.converged:
            return None, "did not converge"
        return fit.beta_nonnaive, ""

    results = run_parallel(refit, range(B), threads)
    failures = [(b, msg) for b, (beta, msg) in enumerate(results) if beta is None]
    if failures:
        logging.warning("bootstrap: %d of %d replicates failed (first: replicate %d, %s)",
                        len(failures), B, failures[0][0], failures[0][1])
    if len(failures) > MAX_BOOTSTRAP_FAILURE_RATE * B:
        raise NumericalError(
            f"bootstrap failed: {len(failures)} of {B} replicates did not converge "
            f"(limit {MAX_BOOTSTRAP_FAILURE_RATE:.0%}); replicates {[b for b, _ in failures[:10]]}"
        )
    betas = np.array([beta for beta, _ in results if beta is not None])
    return betas.std(axis=0, ddof=1)
