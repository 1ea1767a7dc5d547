"""WER/CER-style scoring and real-time-factor measurement.

Corpus WER is (sum S + sum D + sum I) / (sum reference tokens), not the
mean of per-utterance rates.  Unknown tokens are removed from both sides
before alignment, so hypotheses are neither rewarded nor punished on
unknown reference positions.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .data import UNK_TOKEN
from .errors import ContractViolation, DomainError


@dataclass
class UtteranceScore:
    substitutions: int
    deletions: int
    insertions: int
    ref_len: int

    @property
    def errors(self) -> int:
        return self.substitutions + self.deletions + self.insertions


@dataclass
class ScoreReport:
    substitutions: int
    deletions: int
    insertions: int
    ref_tokens: int
    per_utterance: dict

    @property
    def wer(self) -> float:
        if self.ref_tokens == 0:
            return 0.0 if (self.substitutions + self.deletions + self.insertions) == 0 \
                else float("inf")
        return (self.substitutions + self.deletions + self.insertions) / self.ref_tokens

    def block(self) -> str:
        lines = [
            f"ref_tokens     {self.ref_tokens}",
            f"substitutions  {self.substitutions}",
            f"deletions      {self.deletions}",
            f"insertions     {self.insertions}",
            f"wer            {self.wer:.6f}",
        ]
        return "\n".join(lines)


def edit_alignment(ref: Sequence, hyp: Sequence) -> UtteranceScore:
    """Unit-cost Levenshtein with a deterministic backtrace.

    Tie-break prefers substitution over insertion over deletion; that fixes
    the S/D/I breakdown (the total distance is unaffected).
    """
    n, m = len(ref), len(hyp)
    dist = np.zeros((n + 1, m + 1), dtype=np.int64)
    dist[:, 0] = np.arange(n + 1)
    dist[0, :] = np.arange(m + 1)
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            sub = dist[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1])
            ins = dist[i, j - 1] + 1
            dele = dist[i - 1, j] + 1
            dist[i, j] = min(sub, ins, dele)
    s = d = ins_count = 0
    i, j = n, m
    while i > 0 or j > 0:
        if i > 0 and j > 0 and dist[i, j] == dist[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1]):
            if ref[i - 1] != hyp[j - 1]:
                s += 1
            i, j = i - 1, j - 1
        elif j > 0 and dist[i, j] == dist[i, j - 1] + 1:
            ins_count += 1
            j -= 1
        else:
            d += 1
            i -= 1
    return UtteranceScore(substitutions=s, deletions=d, insertions=ins_count, ref_len=n)


def wer(refs: dict, hyps: dict, unk_token: str = UNK_TOKEN) -> ScoreReport:
    """Corpus WER over per-utterance token sequences keyed by utterance id.

    Unknown tokens are stripped from both reference and hypothesis before
    alignment.  Reference and hypothesis id sets must match exactly.
    """
    missing_hyp = sorted(set(refs) - set(hyps))
    missing_ref = sorted(set(hyps) - set(refs))
    if missing_hyp or missing_ref:
        raise ContractViolation(
            f"utterance-id mismatch: missing from hyps {missing_hyp}, "
            f"missing from refs {missing_ref}")
    totals = ScoreReport(0, 0, 0, 0, per_utterance={})
    for utt_id in refs:
        ref = [t for t in refs[utt_id] if t != unk_token]
        hyp = [t for t in hyps[utt_id] if t != unk_token]
        score = edit_alignment(ref, hyp)
        totals.substitutions += score.substitutions
        totals.deletions += score.deletions
        totals.insertions += score.insertions
        totals.ref_tokens += score.ref_len
        totals.per_utterance[utt_id] = score
    return totals


@dataclass
class RtfReport:
    wall_seconds: float
    audio_seconds: float

    @property
    def rtf(self) -> float:
        return self.wall_seconds / self.audio_seconds

    def summary(self) -> str:
        return (f"decode_wall_s  {self.wall_seconds:.4f}\n"
                f"audio_s        {self.audio_seconds:.4f}\n"
                f"rtf            {self.rtf:.6f}")


def rtf(decode_fn: Callable, utterances: Sequence, repeats: int = 3) -> RtfReport:
    """Median-of-repeats wall clock over the corpus divided by audio time.

    ``decode_fn(utterance)`` must do the complete inference (lattice,
    sampling, forwards, ranking); data loading happens before the clock.
    Runs are sequential so reports stay comparable.
    """
    audio = float(sum(u.duration for u in utterances))
    if audio <= 0.0:
        raise DomainError("dataset has no audio to decode")
    times = []
    for _ in range(max(1, repeats)):
        start = time.perf_counter()
        for utt in utterances:
            decode_fn(utt)
        times.append(time.perf_counter() - start)
    return RtfReport(wall_seconds=float(np.median(times)), audio_seconds=audio)
