"""Shared data structures: datasets, weight functions, random streams, results.

Everything downstream (resampling, level bounds, the test engine) works in
terms of the small vocabulary defined here:

* :class:`Dataset` — an immutable named-column matrix of doubles,
* :class:`WeightFunction` — a nonnegative per-row shift factor,
* :class:`RandomStream` — a counter-based, splittable source of randomness
  giving bit-identical replay for a given ``(seed, stream_id)`` pair,
* :class:`TestResult` — the outcome of a single hypothesis test.

Plus the two weight statistics used everywhere: mean-one normalization and
the second moment of normalized weights (which is >= 1 by Jensen and drives
both the finite-sample level bounds and the degeneracy diagnostics).
"""

from __future__ import annotations

import csv
import hashlib
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping

import numpy as np

__all__ = [
    "Dataset",
    "WeightFunction",
    "RandomStream",
    "TestResult",
    "normalize_weights",
    "estimate_second_moment",
]

_MASK64 = (1 << 64) - 1


# ---------------------------------------------------------------------------
# Random streams
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RandomStream:
    """A reproducible, splittable random stream.

    Two streams with the same ``(seed, stream_id)`` produce bit-identical
    draws; streams with different ``stream_id`` are statistically
    independent.  Implemented on top of the counter-based Philox generator,
    keyed by the 128-bit word ``seed | stream_id << 64``.

    Derived streams (:meth:`derive`, :meth:`split`) hash a tuple of tokens
    into a fresh ``stream_id``, so replication ``j`` of grid point ``g`` can
    be addressed deterministically regardless of execution order or thread
    count.
    """

    seed: int
    stream_id: int = 0

    def __post_init__(self) -> None:
        if not 0 <= int(self.seed) <= _MASK64:
            raise ValueError("seed must fit in 64 bits")

    def generator(self) -> np.random.Generator:
        """A fresh generator positioned at the start of this stream."""
        key = (int(self.seed) & _MASK64) | ((int(self.stream_id) & _MASK64) << 64)
        return np.random.Generator(np.random.Philox(key=key))

    def derive(self, *tokens: object) -> "RandomStream":
        """A child stream addressed by a stable hash of ``tokens``.

        Tokens must be primitives (str/int/float/bool/None) or flat tuples
        thereof; their canonical ``repr`` feeds a keyed blake2b hash, so the
        mapping is stable across processes and platforms.
        """
        h = hashlib.blake2b(digest_size=8)
        h.update(repr((int(self.stream_id), tokens)).encode("utf-8"))
        return RandomStream(self.seed, int.from_bytes(h.digest(), "big"))

    def split(self, k: int) -> list["RandomStream"]:
        """``k`` independent child streams."""
        return [self.derive("split", i) for i in range(k)]


# ---------------------------------------------------------------------------
# Datasets
# ---------------------------------------------------------------------------


def _validate_matrix(columns: tuple[str, ...], values: np.ndarray) -> np.ndarray:
    if len(columns) == 0:
        raise ValueError("dataset needs at least one column")
    if len(set(columns)) != len(columns):
        raise ValueError("duplicate column names")
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 2:
        raise ValueError("values must be a 2-d array")
    if values.shape[0] < 1:
        raise ValueError("dataset needs at least one row")
    if values.shape[1] != len(columns):
        raise ValueError(
            f"{len(columns)} column names but {values.shape[1]} value columns"
        )
    if not np.all(np.isfinite(values)):
        bad = np.argwhere(~np.isfinite(values))[0]
        raise ValueError(
            f"non-finite value at row {bad[0] + 1}, column {bad[1] + 1}"
        )
    return values


@dataclass(frozen=True)
class Dataset:
    """An immutable table of doubles with named columns.

    Rows are observations, columns are variables.  Values are all finite;
    attempting to build a dataset containing NaN or infinities raises with
    the offending (1-based) row and column.
    """

    columns: tuple[str, ...]
    values: np.ndarray = field(repr=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "columns", tuple(self.columns))
        v = _validate_matrix(self.columns, self.values)
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    # -- construction -------------------------------------------------

    @classmethod
    def from_columns(cls, data: Mapping[str, Iterable[float]]) -> "Dataset":
        names = tuple(data.keys())
        cols = [np.asarray(data[name], dtype=np.float64) for name in names]
        return cls(names, np.column_stack(cols))

    @classmethod
    def from_csv(cls, path: str) -> "Dataset":
        """Read the canonical CSV form: a header row, then numeric rows.

        Malformed input raises ``ValueError`` citing the 1-based row and
        column of the first offending cell.
        """
        with open(path, "r", newline="") as fh:
            reader = csv.reader(fh)
            try:
                header = next(reader)
            except StopIteration:
                raise ValueError("empty CSV: missing header row") from None
            names = tuple(name.strip() for name in header)
            if any(not n for n in names):
                raise ValueError("row 1: empty column name in header")
            rows: list[list[float]] = []
            for r, record in enumerate(reader, start=2):
                if len(record) != len(names):
                    raise ValueError(
                        f"row {r}: expected {len(names)} fields, got {len(record)}"
                    )
                parsed: list[float] = []
                for c, cell in enumerate(record, start=1):
                    try:
                        x = float(cell)
                    except ValueError:
                        raise ValueError(
                            f"row {r}, column {c}: could not parse {cell!r} as a number"
                        ) from None
                    if not math.isfinite(x):
                        raise ValueError(
                            f"row {r}, column {c}: non-finite value {cell!r}"
                        )
                    parsed.append(x)
                rows.append(parsed)
        if not rows:
            raise ValueError("CSV has a header but no data rows")
        return cls(names, np.asarray(rows, dtype=np.float64))

    # -- basic accessors ----------------------------------------------

    @property
    def n(self) -> int:
        return int(self.values.shape[0])

    @property
    def d(self) -> int:
        return int(self.values.shape[1])

    def col(self, name: str) -> np.ndarray:
        try:
            j = self.columns.index(name)
        except ValueError:
            raise KeyError(f"no column named {name!r}") from None
        return self.values[:, j]

    def cols(self, names: Iterable[str]) -> np.ndarray:
        """An ``(n, k)`` matrix of the named columns, in the given order."""
        names = list(names)
        return np.column_stack([self.col(name) for name in names]) if names else np.empty((self.n, 0))

    # -- derived datasets ----------------------------------------------

    def select_rows(self, idx: np.ndarray) -> "Dataset":
        """Rows ``idx`` (0-based, in order, repeats allowed) as a new dataset."""
        idx = np.asarray(idx, dtype=np.intp)
        return Dataset(self.columns, self.values[idx])

    def head(self, k: int) -> "Dataset":
        return Dataset(self.columns, self.values[:k])

    def tail_from(self, start: int) -> "Dataset":
        return Dataset(self.columns, self.values[start:])

    def with_column(self, name: str, values: Iterable[float]) -> "Dataset":
        col = np.asarray(values, dtype=np.float64).reshape(-1, 1)
        return Dataset(self.columns + (name,), np.hstack([self.values, col]))

    def to_csv(self, path: str) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(self.columns)
            for row in self.values:
                writer.writerow([repr(float(x)) for x in row])


# ---------------------------------------------------------------------------
# Weight functions
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class WeightFunction:
    """A nonnegative shift factor evaluated row-wise on a dataset.

    ``evaluator`` maps a dataset to one weight per row and must depend only
    on ``domain_columns``.  Weights may be unnormalized: every consumer in
    this package is invariant to a positive rescaling.  ``normalized`` marks
    evaluators already known to integrate to one against the observed
    distribution (pure density ratios); it is advisory.
    """

    evaluator: Callable[[Dataset], np.ndarray]
    domain_columns: tuple[str, ...]
    normalized: bool = False

    def __call__(self, data: Dataset) -> np.ndarray:
        w = np.asarray(self.evaluator(data), dtype=np.float64)
        if w.shape != (data.n,):
            raise ValueError(
                f"weight evaluator returned shape {w.shape}, expected ({data.n},)"
            )
        if not np.all(np.isfinite(w)):
            raise ValueError("weight evaluator produced non-finite values")
        if np.any(w < 0):
            raise ValueError("weight evaluator produced negative values")
        return w


# ---------------------------------------------------------------------------
# Weight statistics
# ---------------------------------------------------------------------------


def normalize_weights(raw: np.ndarray) -> np.ndarray:
    """Rescale nonnegative weights to have sample mean one.

    Raises on negative or non-finite weights and on the degenerate all-zero
    vector, for which no mean-one rescaling exists.
    """
    raw = np.asarray(raw, dtype=np.float64)
    if raw.ndim != 1 or raw.size == 0:
        raise ValueError("weights must be a non-empty 1-d array")
    if not np.all(np.isfinite(raw)):
        raise ValueError("weights must be finite")
    if np.any(raw < 0):
        raise ValueError("weights must be nonnegative")
    mean = raw.mean()
    if mean == 0.0:
        raise ValueError("degenerate weights: all weights are zero")
    return raw / mean


def estimate_second_moment(raw: np.ndarray) -> float:
    """Second moment of the mean-one normalized weights.

    This is the plug-in estimate of the weight overdispersion constant used
    by the finite-sample level bound; it equals 1 exactly when all weights
    are equal and grows as the weights concentrate.
    """
    w = normalize_weights(raw)
    return float(np.mean(w * w))


# ---------------------------------------------------------------------------
# Test results
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TestResult:
    """Outcome of one hypothesis test.

    ``reject`` is always ``p_value <= alpha``; the constructor enforces the
    equivalence so a result can never carry an inconsistent decision.
    """

    __test__ = False  # keep pytest from collecting this despite the name

    statistic: float
    p_value: float
    reject: bool
    alpha: float
    m_used: int
    diagnostics: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not 0.0 <= self.p_value <= 1.0:
            raise ValueError(f"p-value {self.p_value} outside [0, 1]")
        if not 0.0 < self.alpha < 1.0:
            raise ValueError(f"alpha {self.alpha} outside (0, 1)")
        expected = self.p_value <= self.alpha
        if self.reject != expected:
            raise ValueError("reject flag inconsistent with p-value and alpha")

    @classmethod
    def from_p(
        cls,
        statistic: float,
        p_value: float,
        alpha: float,
        m_used: int,
        diagnostics: dict | None = None,
    ) -> "TestResult":
        p = float(min(1.0, max(0.0, p_value)))
        return cls(
            statistic=float(statistic),
            p_value=p,
            reject=bool(p <= alpha),
            alpha=float(alpha),
            m_used=int(m_used),
            diagnostics=diagnostics or {},
        )

    def to_dict(self) -> dict:
        return {
            "statistic": self.statistic,
            "p_value": self.p_value,
            "reject": self.reject,
            "alpha": self.alpha,
            "m_used": self.m_used,
            "diagnostics": self.diagnostics,
        }
