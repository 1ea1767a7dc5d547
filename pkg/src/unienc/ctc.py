"""Alignment machinery over frame-level log-probability lattices.

Covers the full collapse/marginalize/align toolbox: CTC negative
log-likelihood by log-domain forward-backward over the blank-interleaved
trellis, forced (Viterbi) alignment with a deterministic tie-break, greedy
decoding with per-frame confidences, confidence-thresholded alignment
sampling, and token segment-boundary extraction.

Everything here is plain numpy over immutable inputs; the gradient returned
by :func:`ctc_loss` is analytic (occupancy posteriors), so the autodiff
engine only needs to treat the loss as one primitive.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from itertools import groupby
from typing import Sequence

import numpy as np

from .errors import ContractViolation, DomainError, InfeasibleLengthError, NumericalError
from .numerics import log_sum_exp

BLANK = 0

_ROW_NORM_TOL = 1e-8


@dataclass(frozen=True)
class LogProbLattice:
    """T x (V+1) frame-level log-posteriors; column 0 is the blank."""

    values: np.ndarray

    def __post_init__(self):
        v = np.ascontiguousarray(self.values, dtype=np.float64)
        if v.ndim != 2 or v.shape[0] < 1 or v.shape[1] < 2:
            raise ContractViolation(f"lattice must be [T, V+1] with V >= 1, got {v.shape}")
        row_lse = np.array([log_sum_exp(row) for row in v])
        if np.any(np.abs(row_lse) > _ROW_NORM_TOL):
            worst = int(np.argmax(np.abs(row_lse)))
            raise ContractViolation(
                f"lattice row {worst} is not a log-distribution (logsumexp={row_lse[worst]:.3e})")
        object.__setattr__(self, "values", v)

    @classmethod
    def from_logits(cls, scores) -> "LogProbLattice":
        """Row-normalize arbitrary scores into a valid lattice."""
        s = np.asarray(scores, dtype=np.float64)
        shifted = s - s.max(axis=-1, keepdims=True)
        return cls(shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True)))

    @property
    def frame_count(self) -> int:
        return self.values.shape[0]

    @property
    def vocab_size(self) -> int:
        return self.values.shape[1] - 1


@dataclass(frozen=True)
class Alignment:
    """A frame-length label sequence over {blank} ∪ vocab with its log-prob."""

    labels: np.ndarray
    score: float

    def __post_init__(self):
        object.__setattr__(self, "labels", np.ascontiguousarray(self.labels, dtype=np.int64))
        if self.labels.ndim != 1:
            raise ContractViolation("alignment labels must be a 1-D id sequence")

    def __len__(self) -> int:
        return int(self.labels.shape[0])


@dataclass(frozen=True)
class SegmentBoundaries:
    """Per-token half-open frame spans that partition [0, T)."""

    spans: tuple

    def __post_init__(self):
        spans = tuple((int(s), int(e)) for s, e in self.spans)
        if not spans:
            raise ContractViolation("boundaries need at least one span")
        if spans[0][0] != 0:
            raise ContractViolation("first span must start at frame 0")
        for (s0, e0), (s1, _) in zip(spans, spans[1:]):
            if s1 != e0:
                raise ContractViolation("spans must be contiguous")
        if any(e <= s for s, e in spans):
            raise ContractViolation("every span must be non-empty")
        object.__setattr__(self, "spans", spans)

    @property
    def token_count(self) -> int:
        return len(self.spans)

    @property
    def total_frames(self) -> int:
        return self.spans[-1][1]


def collapse(alignment) -> list[int]:
    """Merge adjacent repeats, then drop blanks."""
    labels = alignment.labels if isinstance(alignment, Alignment) else alignment
    return [int(k) for k, _ in groupby(np.asarray(labels).tolist()) if k != BLANK]


def _validate_target(lattice: LogProbLattice, target: Sequence[int]) -> list[int]:
    target = [int(y) for y in target]
    if not target:
        raise ContractViolation("target must be non-empty")
    if any(y < 1 or y > lattice.vocab_size for y in target):
        raise ContractViolation(
            f"target ids must lie in [1, {lattice.vocab_size}], got {target}")
    repeats = sum(a == b for a, b in zip(target, target[1:]))
    if lattice.frame_count < len(target) + repeats:
        raise InfeasibleLengthError(
            f"target of {len(target)} tokens ({repeats} adjacent repeats) cannot fit "
            f"in {lattice.frame_count} frames")
    return target


def _extended_labels(target: list[int]) -> np.ndarray:
    ext = np.zeros(2 * len(target) + 1, dtype=np.int64)
    ext[1::2] = target
    return ext


def _skip_into(ext: np.ndarray) -> np.ndarray:
    """skip_into[s]: transition s-2 -> s is legal (s non-blank, differs from s-2)."""
    m = ext.shape[0]
    ok = np.zeros(m, dtype=bool)
    if m > 2:
        ok[2:] = (ext[2:] != BLANK) & (ext[2:] != ext[:-2])
    return ok


def _shift_right(row: np.ndarray, k: int) -> np.ndarray:
    out = np.full_like(row, -np.inf)
    if k < row.shape[0]:
        out[k:] = row[:row.shape[0] - k]
    return out


def _shift_left(row: np.ndarray, k: int) -> np.ndarray:
    out = np.full_like(row, -np.inf)
    if k < row.shape[0]:
        out[:row.shape[0] - k] = row[k:]
    return out


def _forward(lp: np.ndarray, skip: np.ndarray) -> np.ndarray:
    """alpha[t, s]: log-mass of prefixes ending in state s after frame t."""
    t_len, m = lp.shape
    alpha = np.full((t_len, m), -np.inf)
    alpha[0, 0] = lp[0, 0]
    if m > 1:
        alpha[0, 1] = lp[0, 1]
    for t in range(1, t_len):
        prev = alpha[t - 1]
        stay = prev
        step = _shift_right(prev, 1)
        skipped = np.where(skip, _shift_right(prev, 2), -np.inf)
        alpha[t] = lp[t] + np.logaddexp(np.logaddexp(stay, step), skipped)
    return alpha


def _backward_excl(lp: np.ndarray, skip: np.ndarray) -> np.ndarray:
    """beta_ex[t, s]: log-mass of suffixes strictly after frame t, given state s at t.

    Excludes the emission at t itself so that occupancy is
    alpha + beta_ex - logZ with no -inf/-inf cancellation.
    """
    t_len, m = lp.shape
    beta = np.full((t_len, m), -np.inf)
    beta[t_len - 1, m - 1] = 0.0
    if m > 1:
        beta[t_len - 1, m - 2] = 0.0
    skip_from = _shift_left(skip.astype(np.float64), 2) > 0.5  # s -> s+2 legality
    for t in range(t_len - 2, -1, -1):
        nxt = lp[t + 1] + beta[t + 1]
        stay = nxt
        step = _shift_left(nxt, 1)
        skipped = np.where(skip_from, _shift_left(nxt, 2), -np.inf)
        beta[t] = np.logaddexp(np.logaddexp(stay, step), skipped)
    return beta


def ctc_loss(lattice: LogProbLattice, target: Sequence[int]) -> tuple[float, np.ndarray]:
    """Negative log-likelihood of all alignments collapsing to ``target``.

    Returns ``(nll, grad)`` where ``grad`` is d(nll)/d(pre-softmax scores)
    of which the lattice is the row-wise log-softmax: exp(lattice) minus
    the label occupancy posterior.  Each gradient row sums to zero.
    """
    target = _validate_target(lattice, target)
    ext = _extended_labels(target)
    skip = _skip_into(ext)
    lp = lattice.values[:, ext]
    alpha = _forward(lp, skip)
    m = ext.shape[0]
    log_z = np.logaddexp(alpha[-1, m - 1], alpha[-1, m - 2])
    if not np.isfinite(log_z):
        raise NumericalError("target has zero probability under the lattice")
    beta = _backward_excl(lp, skip)
    occ = np.exp(alpha + beta - log_z)  # state occupancy, rows sum to 1
    t_len = lattice.frame_count
    gamma = np.zeros_like(lattice.values)
    np.add.at(gamma, (np.arange(t_len)[:, None], np.broadcast_to(ext, (t_len, m))), occ)
    grad = np.exp(lattice.values) - gamma
    return float(-log_z), grad


def ctc_posteriors(lattice: LogProbLattice, target: Sequence[int]) -> tuple[float, np.ndarray]:
    """Like :func:`ctc_loss` but returning the raw label occupancy ``gamma``.

    d(nll)/d(lattice values) is ``-gamma``; the loss primitive in the
    training graph uses this directly since the lattice node already sits
    behind a log-softmax.
    """
    nll, grad = ctc_loss(lattice, target)
    gamma = np.exp(lattice.values) - grad
    return nll, gamma


def viterbi_align(lattice: LogProbLattice, target: Sequence[int]) -> Alignment:
    """Highest-probability alignment whose collapse equals ``target``.

    Ties are broken toward entering the next trellis state as soon as
    possible, i.e. every token is emitted at the earliest frame any
    optimal alignment allows; trailing blanks are likewise entered early.
    """
    target = _validate_target(lattice, target)
    ext = _extended_labels(target)
    skip = _skip_into(ext)
    lp = lattice.values[:, ext]
    t_len, m = lp.shape

    # best[t, s]: max log-prob of a suffix strictly after t, given state s at t
    best = np.full((t_len, m), -np.inf)
    best[t_len - 1, m - 1] = 0.0
    if m > 1:
        best[t_len - 1, m - 2] = 0.0
    skip_from = _shift_left(skip.astype(np.float64), 2) > 0.5
    for t in range(t_len - 2, -1, -1):
        nxt = lp[t + 1] + best[t + 1]
        stay = nxt
        step = _shift_left(nxt, 1)
        skipped = np.where(skip_from, _shift_left(nxt, 2), -np.inf)
        best[t] = np.maximum(np.maximum(stay, step), skipped)

    # greedy forward walk; on ties prefer the more advanced state
    start_scores = [(lp[0, s] + best[0, s], s) for s in (1, 0) if s < m]
    score, state = max(start_scores, key=lambda p: p[0])  # s=1 listed first wins ties
    if not np.isfinite(score):
        raise NumericalError("target has zero probability under the lattice")
    states = [state]
    for t in range(1, t_len):
        candidates = [states[-1]]
        if states[-1] + 1 < m:
            candidates.append(states[-1] + 1)
        if states[-1] + 2 < m and skip_from[states[-1]]:
            candidates.append(states[-1] + 2)
        chosen, chosen_val = None, -np.inf
        for c in candidates:  # ascending; >= keeps the largest tied state
            val = lp[t, c] + best[t, c]
            if val >= chosen_val:
                chosen, chosen_val = c, val
        states.append(chosen)
    return Alignment(labels=ext[np.asarray(states)], score=float(score))


def greedy_decode(lattice: LogProbLattice) -> tuple[Alignment, np.ndarray]:
    """Per-frame argmax path and its per-frame confidences exp(max log-prob).

    Ties go to the lowest label id (the blank first).
    """
    labels = np.argmax(lattice.values, axis=1)
    frame_logp = lattice.values[np.arange(lattice.frame_count), labels]
    return Alignment(labels=labels, score=float(frame_logp.sum())), np.exp(frame_logp)


def esa_sample(lattice: LogProbLattice, threshold: float, count: int,
               rng: np.random.Generator) -> list[Alignment]:
    """Sample ``count`` alignments anchored on the greedy path.

    Frames whose greedy confidence is at least ``threshold`` keep the argmax
    label; the rest draw from that frame's full posterior (blank included).
    A draw that collapses to nothing is retried once, then replaced by the
    greedy path so downstream consumers never see zero tokens from a
    recoverable sample.
    """
    if not 0.0 <= threshold <= 1.0:
        raise DomainError(f"threshold must lie in [0, 1], got {threshold}")
    if count < 1:
        raise DomainError(f"sample count must be >= 1, got {count}")
    greedy, conf = greedy_decode(lattice)
    uncertain = np.flatnonzero(conf < threshold)
    samples: list[Alignment] = []
    if uncertain.size == 0:
        for _ in range(count):
            samples.append(Alignment(labels=greedy.labels.copy(), score=greedy.score))
        return samples

    cdf = np.cumsum(np.exp(lattice.values[uncertain]), axis=1)
    cdf /= cdf[:, -1:]

    def draw() -> np.ndarray:
        labels = greedy.labels.copy()
        u = rng.random(uncertain.size)
        labels[uncertain] = (u[:, None] > cdf).sum(axis=1)
        return labels

    for _ in range(count):
        labels = draw()
        if not collapse(labels):
            labels = draw()
        if not collapse(labels):
            labels = greedy.labels.copy()
        score = float(lattice.values[np.arange(lattice.frame_count), labels].sum())
        samples.append(Alignment(labels=labels, score=score))
    return samples


def segment_boundaries(alignment: Alignment) -> SegmentBoundaries:
    """Token frame spans: token u ends at its last emission frame.

    Leading and intermediate blanks attach to the following token; frames
    after the last token's final emission attach to the last token, so the
    spans always partition [0, T).
    """
    labels = alignment.labels
    t_len = labels.shape[0]
    last_frames: list[int] = []
    pos = 0
    for label, run in groupby(labels.tolist()):
        run_len = sum(1 for _ in run)
        if label != BLANK:
            last_frames.append(pos + run_len - 1)
        pos += run_len
    if not last_frames:
        raise DomainError("all-blank alignment has no tokens to segment")
    spans = []
    start = 0
    for i, t_u in enumerate(last_frames):
        end = t_len if i == len(last_frames) - 1 else t_u + 1
        spans.append((start, end))
        start = end
    return SegmentBoundaries(spans=tuple(spans))
