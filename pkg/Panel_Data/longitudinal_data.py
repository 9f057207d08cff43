import logging
import os
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from PGEE.errors import DataError

DEFAULT_SUBJECT_COL = "subject"
DEFAULT_TIME_COL = "time"
DEFAULT_RESPONSE_COL = "y"


def _read_only(a):
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class LongitudinalDataset:
    """Clustered observations stored as contiguous per-subject row blocks.

    Rows of ``X``, ``y`` and ``times`` are pooled over all N observations;
    subject ``i`` owns rows ``offsets[i]:offsets[i + 1]``.
    """
    subjects: Tuple[str, ...]
    times: np.ndarray
    y: np.ndarray
    X: np.ndarray
    offsets: np.ndarray
    covariate_names: Tuple[str, ...]

    @property
    def n(self):
        return len(self.subjects)

    @property
    def N(self):
        return self.X.shape[0]

    @property
    def p(self):
        return self.X.shape[1]

    @property
    def cluster_sizes(self):
        return np.diff(self.offsets)

    def block(self, i):
        return cluster_view(self, i)

    def rows_of(self, i):
        return slice(int(self.offsets[i]), int(self.offsets[i + 1]))

    def subset(self, indices, relabel=False):
        """Dataset made of the listed subjects, in the listed order.

        Args:
            indices (Sequence[int]): Subject indices; repeats are allowed.
            relabel (bool): Give every selected subject a unique id
                ``"<id>#<k>"``. Required when ``indices`` repeats a subject.

        Returns:
            LongitudinalDataset: The selected subjects.
        """
        indices = [int(i) for i in indices]
        for i in indices:
            if not 0 <= i < self.n:
                raise DataError(f"subject index {i} out of range for {self.n} subjects")
        rows = [np.arange(self.offsets[i], self.offsets[i + 1]) for i in indices]
        rows = np.concatenate(rows) if rows else np.zeros(0, dtype=int)
        sizes = np.array([self.offsets[i + 1] - self.offsets[i] for i in indices], dtype=int)
        offsets = np.concatenate(([0], np.cumsum(sizes)))
        if relabel:
            subjects = tuple(f"{self.subjects[i]}#{k}" for k, i in enumerate(indices))
        else:
            subjects = tuple(self.subjects[i] for i in indices)
        return LongitudinalDataset(
            subjects=subjects,
            times=_read_only(self.times[rows]),
            y=_read_only(self.y[rows]),
            X=_read_only(self.X[rows]),
            offsets=offsets,
            covariate_names=self.covariate_names,
        )

    def without(self, i):
        return self.subset([k for k in range(self.n) if k != i])

    def resample(self, indices):
        return self.subset(indices, relabel=True)

    def with_arrays(self, y=None, X=None):
        return LongitudinalDataset(
            subjects=self.subjects,
            times=self.times,
            y=_read_only(self.y if y is None else y),
            X=_read_only(self.X if X is None else X),
            offsets=self.offsets,
            covariate_names=self.covariate_names,
        )

    def to_frame(self, subject_col=DEFAULT_SUBJECT_COL, time_col=DEFAULT_TIME_COL,
                 response_col=DEFAULT_RESPONSE_COL):
        ids = np.repeat(np.array(self.subjects, dtype=object), self.cluster_sizes)
        frame = pd.DataFrame({subject_col: ids, time_col: self.times, response_col: self.y})
        for j, name in enumerate(self.covariate_names):
            frame[name] = self.X[:, j]
        return frame


@dataclass(frozen=True, eq=False)
class ScalingInfo:
    """Pooled location/scale of every covariate and of the response."""
    x_mean: np.ndarray
    x_sd: np.ndarray
    y_mean: float
    y_sd: float
    covariate_names: Tuple[str, ...]

    def to_original(self, beta_std):
        """Map coefficients fitted on standardized data back to the data scale."""
        return np.asarray(beta_std, dtype=float) * (self.y_sd / self.x_sd)

    def to_dict(self):
        return {
            "covariates": list(self.covariate_names),
            "x_mean": self.x_mean.tolist(),
            "x_sd": self.x_sd.tolist(),
            "y_mean": self.y_mean,
            "y_sd": self.y_sd,
        }


def from_arrays(subject_ids, times, y, X, covariate_names: Optional[Sequence[str]] = None):
    """Builds a dataset from pooled arrays.

    Rows are grouped by subject in first-appearance order and sorted by time
    within each subject.

    Args:
        subject_ids (Sequence): Subject identifier of every row.
        times (Sequence[float]): Time index of every row.
        y (Sequence[float]): Response of every row.
        X (array-like): N x p covariate matrix.
        covariate_names (Sequence[str], optional): Column names, default x1..xp.

    Returns:
        LongitudinalDataset: The validated dataset.
    """
    ids = np.asarray([str(s) for s in subject_ids], dtype=object)
    times = np.asarray(times, dtype=float)
    y = np.asarray(y, dtype=float)
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    N = len(ids)
    if X.ndim != 2 or X.shape[0] != N or y.shape != (N,) or times.shape != (N,):
        raise DataError("subject, time, response and covariate rows must have equal length")
    if N == 0:
        raise DataError("dataset has no observations")
    if X.shape[1] < 1:
        raise DataError("dataset needs at least one covariate column")
    if covariate_names is None:
        covariate_names = [f"x{j + 1}" for j in range(X.shape[1])]
    covariate_names = tuple(str(c) for c in covariate_names)
    if len(covariate_names) != X.shape[1]:
        raise DataError("covariate_names does not match the covariate count")
    if not np.all(np.isfinite(times)):
        raise DataError("missing or non-finite value in time column")
    if np.isnan(y).any():
        raise DataError(f"missing value in response at row {int(np.flatnonzero(np.isnan(y))[0])}")
    bad = np.argwhere(np.isnan(X))
    if len(bad):
        r, c = bad[0]
        raise DataError(f"missing value in column '{covariate_names[c]}' at row {int(r)}")
    if not (np.all(np.isfinite(y)) and np.all(np.isfinite(X))):
        raise DataError("non-finite value in response or covariates")

    order_of_subjects = pd.unique(ids)
    code = {s: k for k, s in enumerate(order_of_subjects)}
    codes = np.array([code[s] for s in ids])
    order = np.lexsort((times, codes))
    codes, times, y, X = codes[order], times[order], y[order], X[order]

    dup = (np.diff(codes) == 0) & (np.diff(times) == 0)
    if dup.any():
        k = int(np.flatnonzero(dup)[0])
        raise DataError(
            f"duplicate observation: subject={order_of_subjects[codes[k]]}, time={times[k]:g}"
        )

    sizes = np.bincount(codes, minlength=len(order_of_subjects))
    offsets = np.concatenate(([0], np.cumsum(sizes)))
    return LongitudinalDataset(
        subjects=tuple(str(s) for s in order_of_subjects),
        times=_read_only(times),
        y=_read_only(y),
        X=_read_only(X),
        offsets=offsets,
        covariate_names=covariate_names,
    )


def load_dataset(path, subject_col=DEFAULT_SUBJECT_COL, time_col=DEFAULT_TIME_COL,
                 response_col=DEFAULT_RESPONSE_COL, covariate_cols=None):
    """Loads a long-format CSV file (``subject,time,y,x1,...,xp``).

    Args:
        path (str): CSV file, UTF-8, '.' decimal separator.
        subject_col (str): Subject identifier column.
        time_col (str): Time column.
        response_col (str): Response column.
        covariate_cols (Sequence[str], optional): Covariate columns; default is
            every other column in file order.

    Returns:
        LongitudinalDataset: The loaded dataset.
    """
    if not os.path.isfile(path):
        raise DataError(f"input file not found: {path}")
    try:
        frame = pd.read_csv(path, dtype={subject_col: str}, encoding="utf-8")
    except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as e:
        raise DataError(f"could not parse '{path}': {e}") from e

    for col in (subject_col, time_col, response_col):
        if col not in frame.columns:
            raise DataError(f"column '{col}' not found in {path}")
    if covariate_cols is None:
        covariate_cols = [c for c in frame.columns if c not in (subject_col, time_col, response_col)]
    covariate_cols = list(covariate_cols)
    missing_cols = [c for c in covariate_cols if c not in frame.columns]
    if missing_cols:
        raise DataError(f"covariate column(s) not found: {', '.join(missing_cols)}")
    if not covariate_cols:
        raise DataError("no covariate columns identified")

    numeric_cols = [time_col, response_col] + covariate_cols
    for col in [subject_col] + numeric_cols:
        isna = frame[col].isna()
        if isna.any():
            raise DataError(f"missing value in column '{col}' at row {int(np.flatnonzero(isna)[0])}")
    for col in numeric_cols:
        converted = pd.to_numeric(frame[col], errors="coerce")
        if converted.isna().any():
            row = int(np.flatnonzero(converted.isna())[0])
            raise DataError(f"non-numeric cell in column '{col}' at row {row}: {frame[col].iloc[row]!r}")
        frame[col] = converted.astype(float)

    for col in covariate_cols:
        if frame[col].nunique() == 1:
            logging.warning("covariate column '%s' is constant; standardize() will reject it", col)

    d = from_arrays(
        frame[subject_col].to_numpy(),
        frame[time_col].to_numpy(),
        frame[response_col].to_numpy(),
        frame[covariate_cols].to_numpy(),
        covariate_cols,
    )
    logging.info("loaded %s: n=%d subjects, N=%d rows, p=%d covariates", path, d.n, d.N, d.p)
    return d


def standardize(d, scale_response=True):
    """Centers and scales every covariate (and the response) over all N rows.

    Uses the population convention (divisor N), so every output column has
    pooled mean 0 and pooled variance 1.

    Returns:
        tuple: (standardized LongitudinalDataset, ScalingInfo)
    """
    X = np.asarray(d.X)
    constant = [d.covariate_names[j] for j in range(d.p) if np.ptp(X[:, j]) == 0]
    if constant:
        raise DataError(f"constant covariate column(s) cannot be standardized: {', '.join(constant)}")
    x_mean = X.mean(axis=0)
    x_sd = X.std(axis=0)
    if scale_response:
        if np.ptp(d.y) == 0:
            raise DataError("response is constant and cannot be standardized")
        y_mean = float(d.y.mean())
        y_sd = float(d.y.std())
    else:
        y_mean, y_sd = 0.0, 1.0
    info = ScalingInfo(_read_only(x_mean), _read_only(x_sd), y_mean, y_sd, d.covariate_names)
    return d.with_arrays(y=(d.y - y_mean) / y_sd, X=(X - x_mean) / x_sd), info


def destandardize(d, info):
    return d.with_arrays(y=d.y * info.y_sd + info.y_mean, X=d.X * info.x_sd + info.x_mean)


def cluster_view(d, i):
    """Returns the read-only block (y_i, X_i, T_i) of subject ``i``."""
    if not isinstance(i, (int, np.integer)) or not 0 <= i < d.n:
        raise DataError(f"subject index {i} out of range for {d.n} subjects")
    rows = d.rows_of(i)
    return d.y[rows], d.X[rows], rows.stop - rows.start


def pooled_variances(d):
    return np.asarray(d.X).var(axis=0)
