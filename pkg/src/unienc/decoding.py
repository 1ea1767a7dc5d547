"""Iterative inference: sampled alignments drive repeated second passes.

Iteration 1 samples S1 alignments from the pass-1 lattice; each one yields
token spans, a TAE matrix, and a fresh pass-2 forward.  Iteration n >= 2
re-samples each live branch's own pass-2 frame lattice S_n ways, pooling
TAEs from that branch's frame states.  After the last iteration every
branch emits the argmax of its CE rows; branches are ranked (by default
with the model's own length-normalized CE score) and returned best-first.

Branch randomness is keyed by (iteration, branch trace), so results are
independent of evaluation order and bit-reproducible for a fixed seed.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import ctc as ctc_mod
from .ctc import Alignment, LogProbLattice
from .errors import ContractViolation, DomainError
from .model import UniEncModel
from .numerics import Tensor


@dataclass(frozen=True)
class DecodeSchedule:
    """Per-iteration sample counts (S1, ..., SN) and confidence thresholds."""

    samples_per_iteration: tuple
    thresholds: tuple = ()

    def __post_init__(self):
        samples = tuple(int(s) for s in self.samples_per_iteration)
        if not samples or any(s < 1 for s in samples):
            raise ContractViolation("need N >= 1 iterations with every S_n >= 1")
        thresholds = tuple(float(t) for t in self.thresholds)
        if not thresholds:
            thresholds = (0.9,) * len(samples)
        if len(thresholds) == 1 and len(samples) > 1:
            thresholds = thresholds * len(samples)
        if len(thresholds) != len(samples):
            raise ContractViolation("one threshold per iteration (or a single shared one)")
        if any(not 0.0 <= t <= 1.0 for t in thresholds):
            raise ContractViolation("thresholds must lie in [0, 1]")
        object.__setattr__(self, "samples_per_iteration", samples)
        object.__setattr__(self, "thresholds", thresholds)

    @property
    def total_branches(self) -> int:
        out = 1
        for s in self.samples_per_iteration:
            out *= s
        return out

    @classmethod
    def parse(cls, text: str, threshold: float = 0.9) -> "DecodeSchedule":
        try:
            samples = tuple(int(part) for part in str(text).split(","))
        except ValueError as exc:
            raise ContractViolation(f"cannot parse schedule {text!r}") from exc
        return cls(samples_per_iteration=samples, thresholds=(threshold,) * len(samples))


@dataclass
class Hypothesis:
    """A decoded token sequence with score, branch provenance, and CE rows."""

    tokens: list
    score: float
    trace: tuple
    token_logprobs: np.ndarray
    fallback: bool = False


def rank(hypothesis: Hypothesis) -> float:
    """Default ranking score: mean per-token CE log-probability.

    Length-normalized so short outputs are not automatically favored;
    empty hypotheses score -inf.  Callers may substitute any scorer via
    ``decode_utterance(scorer=...)``.
    """
    if len(hypothesis.tokens) == 0:
        return -np.inf
    return float(np.mean(hypothesis.token_logprobs))


@dataclass
class _Branch:
    frame_out: Tensor
    token_out: Optional[Tensor]
    lattice: LogProbLattice
    trace: tuple


def _branch_rng(seed: int, iteration: int, trace: tuple) -> np.random.Generator:
    return np.random.default_rng(
        np.random.SeedSequence(entropy=seed, spawn_key=(iteration, *trace)))


def decode_utterance(model: UniEncModel, features: np.ndarray,
                     schedule: DecodeSchedule, seed: int = 0,
                     scorer: Callable[[Hypothesis], float] | None = None
                     ) -> list[Hypothesis]:
    """Full iterative decode; returns all branches, best score first.

    Exactly ``schedule.total_branches`` hypotheses come back on the normal
    path (duplicates across branches are kept).  If every branch dies (the
    sampler cannot produce a non-empty token sequence anywhere), the greedy
    CTC transcript is returned alone with ``fallback=True``.
    """
    scorer = scorer or rank
    h = model.conv_frontend(features)
    out1 = model.encode_pass1(h)
    lattice1 = LogProbLattice(model.ctc_head(out1.frame_out).data)
    branches = [_Branch(frame_out=out1.frame_out, token_out=None,
                        lattice=lattice1, trace=())]

    for iteration, (count, threshold) in enumerate(
            zip(schedule.samples_per_iteration, schedule.thresholds), start=1):
        grown: list[_Branch] = []
        for branch in branches:
            rng = _branch_rng(seed, iteration, branch.trace)
            alignments = ctc_mod.esa_sample(branch.lattice, threshold, count, rng)
            for s_idx, alignment in enumerate(alignments):
                if not ctc_mod.collapse(alignment):
                    continue  # unrecoverable even after the sampler's greedy substitute
                boundaries = ctc_mod.segment_boundaries(alignment)
                tae = model.extract_tae(branch.frame_out, boundaries)
                out2 = model.encode_pass2(h, tae)
                grown.append(_Branch(
                    frame_out=out2.frame_out, token_out=out2.token_out,
                    lattice=LogProbLattice(model.ctc_head(out2.frame_out).data),
                    trace=branch.trace + (s_idx,)))
        branches = grown
        if not branches:
            fallback = decode_greedy_ctc(model, features)
            fallback.fallback = True
            return [fallback]

    hypotheses = []
    for branch in branches:
        ce = model.ce_head(branch.token_out).data
        picks = np.argmax(ce, axis=1)
        logprobs = ce[np.arange(ce.shape[0]), picks]
        hyp = Hypothesis(tokens=[int(p) + 1 for p in picks], score=0.0,
                         trace=branch.trace, token_logprobs=logprobs)
        hyp.score = float(scorer(hyp))
        hypotheses.append(hyp)
    hypotheses.sort(key=lambda hy: -hy.score)  # stable: ties keep branch order
    return hypotheses


def decode_greedy_ctc(model: UniEncModel, features: np.ndarray) -> Hypothesis:
    """Single pass-1 greedy CTC decode, the speed/quality baseline.

    Per-token log-probs are the lattice scores at each token's first
    emission frame.
    """
    h = model.conv_frontend(features)
    out1 = model.encode_pass1(h)
    lattice = LogProbLattice(model.ctc_head(out1.frame_out).data)
    alignment, _ = ctc_mod.greedy_decode(lattice)
    tokens = ctc_mod.collapse(alignment)
    onsets = []
    prev = ctc_mod.BLANK
    for t, label in enumerate(alignment.labels.tolist()):
        if label != ctc_mod.BLANK and label != prev:
            onsets.append(t)
        prev = label
    logprobs = np.array([lattice.values[t, alignment.labels[t]] for t in onsets])
    hyp = Hypothesis(tokens=tokens, score=0.0, trace=(), token_logprobs=logprobs)
    hyp.score = rank(hyp)
    return hyp
