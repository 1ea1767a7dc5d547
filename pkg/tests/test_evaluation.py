"""WER scoring against the recursive oracle; RTF properties."""

import time

import numpy as np
import pytest

from oracles import edit_distance
from unienc.errors import ContractViolation, DomainError
from unienc.evaluation import RtfReport, edit_alignment, rtf, wer


def test_wer_identical_is_zero():
    report = wer({"u1": ["a", "b", "c"]}, {"u1": ["a", "b", "c"]})
    assert report.wer == 0.0
    assert report.substitutions == report.deletions == report.insertions == 0


def test_wer_hand_computed_deletion():
    report = wer({"u": ["a", "b", "c"]}, {"u": ["a", "c"]})
    assert report.deletions == 1 and report.substitutions == 0 and report.insertions == 0
    assert report.wer == pytest.approx(1 / 3)


def test_wer_unk_stripping():
    report = wer({"u": ["a", "<unk>", "b"]}, {"u": ["a", "b"]})
    assert report.wer == 0.0
    report = wer({"u": ["a", "b"]}, {"u": ["a", "<unk>", "b"]})
    assert report.wer == 0.0


def test_wer_id_mismatch_lists_ids():
    with pytest.raises(ContractViolation, match="u2"):
        wer({"u1": ["a"], "u2": ["b"]}, {"u1": ["a"]})


def test_wer_corpus_aggregation_not_mean_of_rates():
    refs = {"long": ["a"] * 10, "short": ["a"]}
    hyps = {"long": ["a"] * 10, "short": ["b"]}
    report = wer(refs, hyps)
    assert report.wer == pytest.approx(1 / 11)  # not (0 + 1)/2


def test_edit_alignment_matches_recursive_oracle(rng):
    alphabet = list("abcde")
    for _ in range(300):
        ref = tuple(rng.choice(alphabet, size=rng.integers(0, 9)))
        hyp = tuple(rng.choice(alphabet, size=rng.integers(0, 9)))
        score = edit_alignment(list(ref), list(hyp))
        assert score.errors == edit_distance(ref, hyp)


def test_breakdown_tie_prefers_substitution():
    score = edit_alignment(["a"], ["b"])
    assert (score.substitutions, score.deletions, score.insertions) == (1, 0, 0)


class _Utt:
    def __init__(self, duration):
        self.duration = duration


def test_rtf_zero_duration_domain_error():
    with pytest.raises(DomainError):
        rtf(lambda u: None, [_Utt(0.0)])


def test_rtf_reports_ratio():
    utts = [_Utt(1.0), _Utt(1.0)]
    report = rtf(lambda u: time.sleep(0.002), utts, repeats=3)
    assert report.audio_seconds == 2.0
    assert report.rtf > 0
    assert report.wall_seconds >= 0.004


def test_rtf_duplication_leaves_ratio_roughly_unchanged():
    def decode(utt):
        time.sleep(0.001)

    single = rtf(decode, [_Utt(0.5)] * 4, repeats=3)
    double = rtf(decode, [_Utt(0.5)] * 8, repeats=3)
    assert double.rtf == pytest.approx(single.rtf, rel=0.2)
