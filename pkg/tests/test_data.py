"""Vocab/manifest/feature I/O and the synthetic task generator."""

import numpy as np
import pytest

from unienc import ctc
from unienc.data import (BLANK_TOKEN, UNK_TOKEN, SynthTaskSpec, Utterance, Vocab,
                         detokenize, load_alignments, load_dataset, load_manifest,
                         load_vocab, read_features, synth_generate, tokenize,
                         write_dataset, write_features)
from unienc.errors import (ContractViolation, DataIntegrityError, DomainError,
                           ParseError)


# ---------------------------------------------------------------------------
# vocab
# ---------------------------------------------------------------------------

def test_vocab_three_line_file(tmp_path):
    path = tmp_path / "vocab.txt"
    path.write_text(f"{BLANK_TOKEN}\na\nb\n")
    vocab = load_vocab(path)
    assert vocab.size == 2
    assert vocab.lookup(BLANK_TOKEN) == 0
    assert vocab.lookup("a") == 1 and vocab.lookup("b") == 2


def test_vocab_duplicate_line_error(tmp_path):
    path = tmp_path / "vocab.txt"
    path.write_text(f"{BLANK_TOKEN}\na\na\n")
    with pytest.raises(ParseError, match="line 2"):
        load_vocab(path)


def test_vocab_missing_blank_error(tmp_path):
    path = tmp_path / "vocab.txt"
    path.write_text("a\nb\n")
    with pytest.raises(ParseError, match="blank"):
        load_vocab(path)


def test_vocab_round_trip_all_entries(tmp_path):
    vocab = SynthTaskSpec().build_vocab()
    vocab.save(tmp_path / "vocab.txt")
    loaded = load_vocab(tmp_path / "vocab.txt")
    assert loaded.tokens == vocab.tokens
    for idx, token in enumerate(loaded.tokens):
        assert loaded.lookup(token) == idx
        assert loaded.token(idx) == token


# ---------------------------------------------------------------------------
# tokenize / detokenize
# ---------------------------------------------------------------------------

def test_tokenize_round_trip():
    vocab = Vocab([BLANK_TOKEN, UNK_TOKEN, "a", "b"])
    ids, unk = tokenize("a b", vocab)
    assert ids == [2, 3] and unk == 0
    assert detokenize(ids, vocab) == "a b"


def test_tokenize_oov_maps_to_unk_with_count():
    vocab = Vocab([BLANK_TOKEN, UNK_TOKEN, "a"])
    ids, unk = tokenize("a zzz a qqq", vocab)
    assert ids == [2, 1, 2, 1] and unk == 2


def test_tokenize_empty_string():
    vocab = Vocab([BLANK_TOKEN, UNK_TOKEN, "a"])
    assert tokenize("", vocab).ids == []


def test_tokenize_oov_without_unk_declared_is_error():
    vocab = Vocab([BLANK_TOKEN, "a"])
    with pytest.raises(ContractViolation):
        tokenize("zzz", vocab)


# ---------------------------------------------------------------------------
# feature files
# ---------------------------------------------------------------------------

def test_feature_file_round_trip(tmp_path, rng):
    path = tmp_path / "x.feat"
    original = rng.normal(size=(7, 5)).astype(np.float32)
    write_features(path, original)
    loaded = read_features(path)
    assert loaded.dtype == np.float64
    np.testing.assert_array_equal(loaded.astype(np.float32), original)


def test_feature_file_truncation_detected(tmp_path, rng):
    path = tmp_path / "x.feat"
    write_features(path, rng.normal(size=(4, 3)))
    blob = path.read_bytes()
    path.write_bytes(blob[:-4])
    with pytest.raises(ParseError, match="bytes"):
        read_features(path)


# ---------------------------------------------------------------------------
# manifest
# ---------------------------------------------------------------------------

def _write_tiny_dataset(tmp_path, n=2):
    utts, vocab = synth_generate(SynthTaskSpec(seed=1), n)
    write_dataset(utts, vocab, tmp_path)
    return utts, vocab


def test_manifest_empty_file(tmp_path):
    (tmp_path / "manifest.tsv").write_text("")
    vocab = SynthTaskSpec().build_vocab()
    assert load_manifest(tmp_path / "manifest.tsv", vocab) == []


def test_manifest_round_trip_two_records(tmp_path):
    utts, vocab = _write_tiny_dataset(tmp_path)
    loaded = load_manifest(tmp_path / "manifest.tsv", vocab)
    assert len(loaded) == 2
    for orig, back in zip(utts, loaded):
        assert back.utt_id == orig.utt_id
        assert back.transcript == orig.transcript
        assert back.features.shape == orig.features.shape
        np.testing.assert_allclose(back.features, orig.features, atol=1e-6)


def test_manifest_frame_count_mismatch_cites_both(tmp_path):
    _write_tiny_dataset(tmp_path)
    manifest = tmp_path / "manifest.tsv"
    lines = manifest.read_text().splitlines()
    parts = lines[0].split("\t")
    true_frames = parts[2]
    parts[2] = "999"
    lines[0] = "\t".join(parts)
    manifest.write_text("\n".join(lines) + "\n")
    vocab = load_vocab(tmp_path / "vocab.txt")
    with pytest.raises(DataIntegrityError) as err:
        load_manifest(manifest, vocab)
    assert "999" in str(err.value) and true_frames in str(err.value)


def test_manifest_order_preserving_and_pure(tmp_path):
    _write_tiny_dataset(tmp_path, n=5)
    vocab = load_vocab(tmp_path / "vocab.txt")
    a = load_manifest(tmp_path / "manifest.tsv", vocab)
    b = load_manifest(tmp_path / "manifest.tsv", vocab)
    assert [u.utt_id for u in a] == [u.utt_id for u in b] == [
        f"synth-{i:06d}" for i in range(5)]


# ---------------------------------------------------------------------------
# synthetic task
# ---------------------------------------------------------------------------

def test_synth_noise_zero_frames_equal_means():
    spec = SynthTaskSpec(noise_scale=0.0, seed=4)
    utts, _ = synth_generate(spec, 3)
    means = spec.token_means()
    for utt in utts:
        for t, label in enumerate(utt.gold_alignment.tolist()):
            if label == 0:
                np.testing.assert_array_equal(utt.features[t], 0.0)
            else:
                np.testing.assert_array_equal(utt.features[t], means[label - 2])


def test_synth_gold_alignment_collapses_to_transcript():
    utts, _ = synth_generate(SynthTaskSpec(seed=9), 50)
    for utt in utts:
        assert ctc.collapse(utt.gold_alignment) == utt.transcript
        assert len(utt.gold_alignment) == utt.features.shape[0]


def test_synth_fixed_seed_byte_identical(tmp_path):
    for run in ("a", "b"):
        utts, vocab = synth_generate(SynthTaskSpec(seed=21), 4)
        write_dataset(utts, vocab, tmp_path / run)
    for name in ["manifest.tsv", "vocab.txt", "alignments.tsv"]:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    for feat in sorted((tmp_path / "a" / "feats").iterdir()):
        twin = tmp_path / "b" / "feats" / feat.name
        assert feat.read_bytes() == twin.read_bytes()


def test_synth_feasibility_by_construction():
    utts, _ = synth_generate(SynthTaskSpec(seed=13), 100)
    for utt in utts:
        repeats = sum(a == b for a, b in zip(utt.transcript, utt.transcript[1:]))
        assert utt.features.shape[0] >= len(utt.transcript) + repeats


def test_synth_zero_utterances():
    utts, vocab = synth_generate(SynthTaskSpec(), 0)
    assert utts == [] and vocab.size == 21


def test_dataset_round_trip_with_alignments(tmp_path):
    utts, vocab = _write_tiny_dataset(tmp_path, n=3)
    loaded, loaded_vocab = load_dataset(tmp_path)
    assert loaded_vocab.tokens == vocab.tokens
    for orig, back in zip(utts, loaded):
        np.testing.assert_array_equal(back.gold_alignment, orig.gold_alignment)


def test_utterance_validation():
    with pytest.raises(ContractViolation):
        Utterance(utt_id="x", features=np.zeros((3, 2)), transcript=[], duration=1.0)
    with pytest.raises(ContractViolation):
        Utterance(utt_id="x", features=np.zeros((3, 2)), transcript=[1], duration=0.0)
