import os
import unittest
import warnings

import numpy as np

from Panel_Data.longitudinal_data import from_arrays
from PGEE.errors import ConvergenceWarning

LONG_TESTS = os.environ.get("PGEE_LONG_TESTS") == "1"
long_test = unittest.skipUnless(LONG_TESTS, "set PGEE_LONG_TESTS=1 to run Monte-Carlo acceptance runs")


def make_dataset(n=10, T=4, beta=(1.0, -2.0, 0.5), noise=1.0, seed=0, X=None):
    """Balanced gaussian panel y = X beta + noise, subjects 1..n, times 1..T."""
    rng = np.random.default_rng(seed)
    beta = np.asarray(beta, dtype=float)
    if X is None:
        X = rng.standard_normal((n * T, beta.size))
    y = X @ beta + noise * rng.standard_normal(n * T)
    return from_arrays(np.repeat(np.arange(1, n + 1), T), np.tile(np.arange(1, T + 1), n), y, X)


def anticorrelated_dataset(n_pairs=40, long_T=10, seed=0):
    """``n_pairs`` two-visit subjects with errors (e, -e) plus one subject with ``long_T`` visits."""
    rng = np.random.default_rng(seed)
    sizes = [2] * n_pairs + [long_T]
    e = rng.standard_normal(n_pairs)
    errors = np.concatenate([np.column_stack([e, -e]).ravel(), rng.standard_normal(long_T)])
    X = rng.standard_normal((sum(sizes), 2))
    subjects = np.repeat(np.arange(1, len(sizes) + 1), sizes)
    times = np.concatenate([np.arange(1, T + 1) for T in sizes])
    return from_arrays(subjects, times, X @ [1.0, -1.0] + errors, X)


def orthonormal_design(N, p, seed=0):
    """N x p design with X'X = N I."""
    Q, _ = np.linalg.qr(np.random.default_rng(seed).standard_normal((N, p)))
    return np.sqrt(N) * Q


class TestCase(unittest.TestCase):
    def setUp(self):
        warnings.simplefilter("ignore", ConvergenceWarning)

    def assertAllClose(self, actual, desired, atol=1e-10, rtol=0.0, msg=""):
        np.testing.assert_allclose(actual, desired, rtol=rtol, atol=atol, err_msg=msg)

    def assertArrayEqual(self, actual, desired, msg=""):
        np.testing.assert_array_equal(actual, desired, err_msg=msg)
