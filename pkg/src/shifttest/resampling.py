"""Weighted resampling schemes over row indices.

Given nonnegative weights ``w_1..w_n`` (any positive rescaling is
equivalent), this module draws index sequences from three laws:

* ``repl`` — ``m`` i.i.d. categorical draws, ``P(i) = w_i / sum w``;
* ``norepl`` — sequential weighted draws without replacement (weights
  renormalized over the remaining candidates after every draw);
* ``drpl`` — *distinct replacement*: the law on pairwise-distinct sequences
  with ``P(i_1..i_m)`` proportional to ``prod_l w_{i_l}``.  This is the law
  the target-domain test theory is stated for.

``drpl`` is sampled exactly by a two-stage acceptance-rejection chain and
approximately by a Gibbs-refined fallback:

1. draw from ``repl`` until the sequence is distinct (conditioning yields
   exactly the distinct-replacement law);
2. propose from ``norepl`` and accept with probability
   ``prod_{l=1}^{m-1}(1 - p_{i_1} - .. - p_{i_l}) / prod_{l=1}^{m-1}(1 - p_(1) - .. - p_(l))``
   where ``p`` are the weights normalized to sum one and ``p_(k)`` the k-th
   smallest — the exact likelihood ratio between the two laws, maximized
   over sequences by taking the smallest weights in the denominator;
3. draw from ``norepl`` and run single-site Gibbs sweeps whose stationary
   law is ``drpl``; results from this stage are flagged ``approximate``.

Indices are 0-based throughout.  All samplers are scale-invariant: weights
``c*w`` with the same stream yield the identical index sequence.

A bounded-weight rejection sampler (keep row ``i`` independently with
probability ``w_i / M``) and a full-enumeration oracle for tiny instances
complete the module.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field, replace
from typing import Iterable

import numpy as np

from .core import RandomStream

__all__ = [
    "ResamplePlan",
    "IndexSample",
    "sample_repl",
    "sample_norepl",
    "sample_drpl",
    "gibbs_refine",
    "rejection_sample",
    "drpl_exact_distribution",
]

_SCHEMES = ("drpl", "no_repl", "repl", "rejection")
_STAGE1_CHUNK = 128


@dataclass(frozen=True)
class ResamplePlan:
    """Scheme choice and retry limits for one resampling run."""

    scheme: str = "drpl"
    m: int | None = None
    max_repl_attempts: int = 1000
    max_norepl_attempts: int = 1000
    gibbs_sweeps: int = 50

    def __post_init__(self) -> None:
        if self.scheme not in _SCHEMES:
            raise ValueError(f"unknown scheme {self.scheme!r}; choose from {_SCHEMES}")
        if self.m is not None and self.m < 1:
            raise ValueError("m must be >= 1 when present")
        if min(self.max_repl_attempts, self.max_norepl_attempts, self.gibbs_sweeps) < 0:
            raise ValueError("attempt/sweep counts must be >= 0")

    def with_m(self, m: int) -> "ResamplePlan":
        return replace(self, m=int(m))


@dataclass(frozen=True)
class IndexSample:
    """A drawn index sequence plus how it was produced."""

    indices: np.ndarray
    distinct: bool
    stage: str  # repl | norepl | repl_ar | norepl_ar | gibbs | rejection
    attempts: dict = field(default_factory=dict)
    approximate: bool = False

    def __post_init__(self) -> None:
        idx = np.asarray(self.indices, dtype=np.intp)
        idx.setflags(write=False)
        object.__setattr__(self, "indices", idx)


# ---------------------------------------------------------------------------
# weight plumbing
# ---------------------------------------------------------------------------


def _normalized_probs(weights) -> np.ndarray:
    w = np.asarray(weights, dtype=np.float64)
    if w.ndim != 1 or w.size == 0:
        raise ValueError("weights must be a non-empty 1-d array")
    if not np.all(np.isfinite(w)):
        raise ValueError("weights must be finite")
    if np.any(w < 0):
        raise ValueError("weights must be nonnegative")
    total = w.sum()
    if total <= 0:
        raise ValueError("degenerate weights: all weights are zero")
    return w / total


def _require_positive(p: np.ndarray, m: int) -> None:
    if int(np.count_nonzero(p)) < m:
        raise ValueError(f"need at least {m} strictly positive weights")


def _repl_block(cum: np.ndarray, m: int, count: int, rng: np.random.Generator) -> np.ndarray:
    """``count`` independent repl draws as a (count, m) index matrix."""
    u = rng.random((count, m))
    idx = np.searchsorted(cum, u, side="right")
    return np.minimum(idx, cum.size - 1)


def _norepl_indices(p: np.ndarray, m: int, rng: np.random.Generator) -> np.ndarray:
    """One sequential weighted draw without replacement, in draw order.

    Uses exponential races: index ``i`` gets key ``E_i / p_i`` with
    ``E_i ~ Exp(1)``; the ``m`` smallest keys in increasing order are
    distributed exactly as sequential renormalized draws.
    """
    keys = rng.standard_exponential(p.size)
    with np.errstate(divide="ignore"):
        keys = np.where(p > 0, keys / p, np.inf)
    if m == p.size:
        order = np.argsort(keys, kind="stable")
        return order
    part = np.argpartition(keys, m - 1)[:m]
    return part[np.argsort(keys[part], kind="stable")]


# ---------------------------------------------------------------------------
# public samplers
# ---------------------------------------------------------------------------


def sample_repl(weights, m: int, stream: RandomStream) -> IndexSample:
    """``m`` i.i.d. categorical draws with probabilities proportional to weights."""
    p = _normalized_probs(weights)
    if m < 1:
        raise ValueError("m must be >= 1")
    rng = stream.generator()
    idx = _repl_block(np.cumsum(p), m, 1, rng)[0]
    distinct = bool(np.unique(idx).size == m)
    return IndexSample(idx, distinct, "repl", {"repl": 1})


def sample_norepl(weights, m: int, stream: RandomStream) -> IndexSample:
    """Sequential weighted draws without replacement."""
    p = _normalized_probs(weights)
    if not 1 <= m <= p.size:
        raise ValueError("m must satisfy 1 <= m <= n")
    _require_positive(p, m)
    rng = stream.generator()
    idx = _norepl_indices(p, m, rng)
    return IndexSample(idx, True, "norepl", {"norepl": 1})


def _log_norepl_acceptance(p: np.ndarray, seq: np.ndarray, log_den: float) -> float:
    """Log acceptance ratio for the norepl proposal of ``seq``."""
    m = seq.size
    if m <= 1:
        return 0.0
    partial = np.cumsum(p[seq[: m - 1]])
    if np.any(partial >= 1.0):
        return -np.inf
    log_num = float(np.sum(np.log1p(-partial)))
    return log_num - log_den


def _norepl_log_denominator(p: np.ndarray, m: int) -> float:
    """Log of the maximal norepl product term: smallest ``m-1`` weights first."""
    if m <= 1:
        return 0.0
    smallest = np.sort(p)[: m - 1]
    partial = np.cumsum(smallest)
    partial = np.minimum(partial, 1.0 - np.finfo(float).tiny)
    return float(np.sum(np.log1p(-partial)))


def sample_drpl(
    weights, m: int, plan: ResamplePlan, stream: RandomStream
) -> IndexSample:
    """Draw a distinct index sequence with probability ∝ product of weights.

    Runs the fallback chain described in the module docstring; the returned
    sample records the producing stage and per-stage attempt counts.  Only
    the Gibbs stage is approximate (``approximate=True``).
    """
    p = _normalized_probs(weights)
    if not 1 <= m <= p.size:
        raise ValueError("m must satisfy 1 <= m <= n")
    _require_positive(p, m)
    rng = stream.generator()
    attempts = {"repl": 0, "norepl": 0}

    # Stage 1: accept the first distinct replacement draw.
    cum = np.cumsum(p)
    remaining = plan.max_repl_attempts
    while remaining > 0:
        block = min(remaining, _STAGE1_CHUNK)
        idx = _repl_block(cum, m, block, rng)
        srt = np.sort(idx, axis=1)
        ok = np.all(srt[:, 1:] != srt[:, :-1], axis=1) if m > 1 else np.ones(block, bool)
        hits = np.flatnonzero(ok)
        if hits.size:
            attempts["repl"] += int(hits[0]) + 1
            return IndexSample(idx[hits[0]], True, "repl_ar", attempts)
        attempts["repl"] += block
        remaining -= block

    # Stage 2: acceptance-rejection from the no-replacement proposal.
    log_den = _norepl_log_denominator(p, m)
    for _ in range(plan.max_norepl_attempts):
        attempts["norepl"] += 1
        seq = _norepl_indices(p, m, rng)
        log_ratio = _log_norepl_acceptance(p, seq, log_den)
        ratio = min(1.0, math.exp(min(log_ratio, 0.0)))
        if rng.random() <= ratio:
            return IndexSample(seq, True, "norepl_ar", attempts)

    # Stage 3: no-replacement draw refined by Gibbs sweeps (approximate).
    seq = _norepl_indices(p, m, rng)
    refined = _gibbs_sweeps(seq, p, plan.gibbs_sweeps, rng)
    attempts["gibbs_sweeps"] = plan.gibbs_sweeps
    return IndexSample(refined, True, "gibbs", attempts, approximate=True)


def _gibbs_sweeps(
    seq: np.ndarray, p: np.ndarray, sweeps: int, rng: np.random.Generator
) -> np.ndarray:
    """Single-site Gibbs updates whose stationary law is distinct replacement.

    Position ``l`` is redrawn from ``P(j) = p_j / sum_{v not in rest} p_v``
    over indices not used by the other positions.  Implemented by rejection
    against the unconditional categorical (exact), with a renormalized
    direct draw as a rare fallback when the selected mass is large.
    """
    n = p.size
    cum = np.cumsum(p)
    selected = np.array(seq, dtype=np.intp)
    in_sample = np.zeros(n, dtype=bool)
    in_sample[selected] = True
    m = selected.size
    for _ in range(sweeps):
        for pos in range(m):
            current = selected[pos]
            in_sample[current] = False
            chosen = -1
            for _retry in range(64):
                u = rng.random()
                j = int(np.searchsorted(cum, u, side="right"))
                j = min(j, n - 1)
                if not in_sample[j] and p[j] > 0.0:
                    chosen = j
                    break
            if chosen < 0:
                admissible = np.flatnonzero(~in_sample & (p > 0.0))
                q = p[admissible]
                q = q / q.sum()
                chosen = int(rng.choice(admissible, p=q))
            selected[pos] = chosen
            in_sample[chosen] = True
    return selected


def gibbs_refine(
    current: Iterable[int], weights, sweeps: int, stream: RandomStream
) -> IndexSample:
    """Run ``sweeps`` full Gibbs sweeps starting from a distinct sequence."""
    p = _normalized_probs(weights)
    seq = np.asarray(list(current), dtype=np.intp)
    if np.unique(seq).size != seq.size:
        raise ValueError("current indices must be distinct")
    if np.any(seq < 0) or np.any(seq >= p.size):
        raise ValueError("index out of range")
    if np.any(p[seq] <= 0):
        raise ValueError("current indices must have positive weight")
    if sweeps == 0:
        return IndexSample(seq, True, "gibbs", {"gibbs_sweeps": 0}, approximate=True)
    rng = stream.generator()
    refined = _gibbs_sweeps(seq, p, sweeps, rng)
    return IndexSample(refined, True, "gibbs", {"gibbs_sweeps": sweeps}, approximate=True)


def rejection_sample(weights, bound: float, stream: RandomStream) -> IndexSample:
    """Keep row ``i`` independently with probability ``w_i / bound``.

    Kept indices are returned in original row order; the output size is
    random with expectation ``sum(w) / bound``.
    """
    w = np.asarray(weights, dtype=np.float64)
    if w.ndim != 1 or w.size == 0:
        raise ValueError("weights must be a non-empty 1-d array")
    if not np.all(np.isfinite(w)) or np.any(w < 0):
        raise ValueError("weights must be finite and nonnegative")
    if not bound > 0:
        raise ValueError("bound must be positive")
    if np.any(w > bound):
        raise ValueError("bound violated: some weight exceeds the bound")
    rng = stream.generator()
    keep = rng.random(w.size) < (w / bound)
    idx = np.flatnonzero(keep)
    return IndexSample(
        idx, True, "rejection", {"kept": int(idx.size), "n": int(w.size)}
    )


def drpl_exact_distribution(weights, m: int) -> dict[tuple[int, ...], float]:
    """Exact distinct-replacement law by full enumeration (tiny instances).

    Returns a map from 0-based index tuples to probabilities; sequences of
    zero probability are omitted.  Guarded to ``n <= 8`` and ``m <= 4``.
    """
    w = np.asarray(weights, dtype=np.float64)
    n = w.size
    if n > 8 or m > 4:
        raise ValueError("instance too large for exact enumeration (n <= 8, m <= 4)")
    if not 1 <= m <= n:
        raise ValueError("m must satisfy 1 <= m <= n")
    _normalized_probs(w)  # validation
    table: dict[tuple[int, ...], float] = {}
    total = 0.0
    for seq in itertools.permutations(range(n), m):
        prod = float(np.prod(w[list(seq)]))
        if prod > 0.0:
            table[seq] = prod
            total += prod
    if total <= 0:
        raise ValueError("no admissible sequence has positive probability")
    return {seq: prob / total for seq, prob in table.items()}
