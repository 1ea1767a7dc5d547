"""Dataset and vocabulary I/O plus the synthetic speech-like task.

The synthetic generator emits utterances whose every frame label is known:
each token holds a per-token mean vector for a few frames (plus isotropic
noise), with silence runs in between, so the gold frame alignment collapses
to the transcript by construction.  That gives the oracle checks a corpus
that real speech never could.

File formats (all little-endian, see README):
  features  "FEAT" magic, u32 T, u32 F, then T*F float32 row-major
  manifest  TSV: id, relative feature path, frame count, duration s, transcript
  vocab     one token per line; line 0 must be the blank marker
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import NamedTuple, Optional, Sequence

import numpy as np

from .errors import ContractViolation, DataIntegrityError, DomainError, ParseError

FEATURE_MAGIC = b"FEAT"
BLANK_TOKEN = "<blank>"
UNK_TOKEN = "<unk>"
FRAME_SECONDS = 0.01  # nominal 10 ms frame period for synthetic audio


class Vocab:
    """Dense token-id table; id 0 is the blank, ``<unk>`` is reserved."""

    def __init__(self, tokens: Sequence[str]):
        tokens = list(tokens)
        if not tokens or tokens[0] != BLANK_TOKEN:
            raise ParseError(f"line 0 must be the blank marker {BLANK_TOKEN!r}")
        seen = {}
        for i, tok in enumerate(tokens):
            if tok in seen:
                raise ParseError(f"duplicate token {tok!r} at line {i} (first at {seen[tok]})")
            seen[tok] = i
        self._tokens = tokens
        self._ids = seen
        self.unk_id = seen.get(UNK_TOKEN)

    def __len__(self) -> int:
        return len(self._tokens)

    @property
    def size(self) -> int:
        """Number of real tokens (excludes the blank)."""
        return len(self._tokens) - 1

    def token(self, idx: int) -> str:
        return self._tokens[idx]

    def lookup(self, token: str) -> int | None:
        return self._ids.get(token)

    @property
    def tokens(self) -> list[str]:
        return list(self._tokens)

    def save(self, path) -> None:
        Path(path).write_text("\n".join(self._tokens) + "\n", encoding="utf-8")


def load_vocab(path) -> Vocab:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    return Vocab([line for line in lines if line != ""])


class TokenizedText(NamedTuple):
    ids: list
    unk_count: int


def tokenize(text: str, vocab: Vocab) -> TokenizedText:
    """Whitespace tokenization; out-of-vocab symbols map to the unknown id."""
    ids = []
    unk = 0
    for symbol in text.split():
        idx = vocab.lookup(symbol)
        if idx is None:
            if vocab.unk_id is None:
                raise ContractViolation(
                    f"symbol {symbol!r} is out of vocabulary and no {UNK_TOKEN!r} is declared")
            idx = vocab.unk_id
            unk += 1
        ids.append(idx)
    return TokenizedText(ids=ids, unk_count=unk)


def detokenize(ids: Sequence[int], vocab: Vocab) -> str:
    return " ".join(vocab.token(int(i)) for i in ids)


@dataclass
class Utterance:
    utt_id: str
    features: np.ndarray               # [raw_frames, feat_dim] float64
    transcript: list                   # token ids
    duration: float                    # seconds
    gold_alignment: Optional[np.ndarray] = None  # raw-frame labels (synthetic only)

    def __post_init__(self):
        self.features = np.ascontiguousarray(self.features, dtype=np.float64)
        if not self.transcript:
            raise ContractViolation(f"utterance {self.utt_id} has an empty transcript")
        if self.duration <= 0:
            raise ContractViolation(f"utterance {self.utt_id} has non-positive duration")


# ---------------------------------------------------------------------------
# feature files
# ---------------------------------------------------------------------------

def write_features(path, features: np.ndarray) -> None:
    arr = np.ascontiguousarray(features, dtype="<f4")
    if arr.ndim != 2:
        raise ContractViolation(f"features must be 2-D, got shape {arr.shape}")
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAGIC)
        fh.write(struct.pack("<II", arr.shape[0], arr.shape[1]))
        fh.write(arr.tobytes(order="C"))


def read_features(path) -> np.ndarray:
    """Read a FEAT file, widening float32 payload to float64."""
    blob = Path(path).read_bytes()
    if blob[:4] != FEATURE_MAGIC:
        raise ParseError(f"{path}: bad feature-file magic")
    if len(blob) < 12:
        raise ParseError(f"{path}: truncated header")
    t_len, f_dim = struct.unpack("<II", blob[4:12])
    expected = 12 + 4 * t_len * f_dim
    if len(blob) != expected:
        raise ParseError(f"{path}: expected {expected} bytes for [{t_len}, {f_dim}], "
                         f"got {len(blob)}")
    payload = np.frombuffer(blob, dtype="<f4", offset=12).reshape(t_len, f_dim)
    return payload.astype(np.float64)


# ---------------------------------------------------------------------------
# manifest
# ---------------------------------------------------------------------------

def load_manifest(path, vocab: Vocab) -> list[Utterance]:
    """Parse a manifest and load every referenced feature file.

    Order-preserving.  A frame count that disagrees with the feature-file
    header is a data-integrity error naming both values.
    """
    path = Path(path)
    utterances = []
    for line_no, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 5:
            raise ParseError(f"{path}:{line_no}: expected 5 tab-separated fields, "
                             f"got {len(parts)}")
        utt_id, rel_path, frame_str, dur_str, transcript = parts
        try:
            frames = int(frame_str)
            duration = float(dur_str)
        except ValueError as exc:
            raise ParseError(f"{path}:{line_no}: bad numeric field") from exc
        features = read_features(path.parent / rel_path)
        if features.shape[0] != frames:
            raise DataIntegrityError(
                f"{path}:{line_no}: manifest says {frames} frames but "
                f"{rel_path} holds {features.shape[0]}")
        ids = tokenize(transcript, vocab).ids
        utterances.append(Utterance(utt_id=utt_id, features=features,
                                    transcript=ids, duration=duration))
    return utterances


def load_alignments(path) -> dict[str, np.ndarray]:
    """Gold alignment sidecar: id TAB space-separated frame labels."""
    out = {}
    for line_no, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(),
                                   start=1):
        if not line.strip():
            continue
        try:
            utt_id, labels = line.split("\t")
            out[utt_id] = np.array([int(x) for x in labels.split()], dtype=np.int64)
        except ValueError as exc:
            raise ParseError(f"{path}:{line_no}: malformed alignment record") from exc
    return out


# ---------------------------------------------------------------------------
# synthetic task
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SynthTaskSpec:
    """Controls the synthetic corpus; defaults keep greedy CTC imperfect
    but learnable in minutes."""

    vocab_size: int = 20               # real tokens, excluding blank and <unk>
    feat_dim: int = 16
    frames_per_token: tuple = (2, 5)
    silence_run: tuple = (0, 3)
    tokens_per_utt: tuple = (3, 8)
    noise_scale: float = 0.3
    seed: int = 0

    def __post_init__(self):
        if self.vocab_size < 1 or self.feat_dim < 1:
            raise ContractViolation("vocab_size and feat_dim must be positive")
        if self.frames_per_token[0] < 1 or self.frames_per_token[0] > self.frames_per_token[1]:
            raise ContractViolation("frames_per_token must be a range with min >= 1")
        if self.silence_run[0] < 0 or self.silence_run[0] > self.silence_run[1]:
            raise ContractViolation("silence_run must be a non-negative range")
        if self.tokens_per_utt[0] < 1 or self.tokens_per_utt[0] > self.tokens_per_utt[1]:
            raise ContractViolation("tokens_per_utt must be a range with min >= 1")
        if self.noise_scale < 0:
            raise ContractViolation("noise_scale must be >= 0")

    def build_vocab(self) -> Vocab:
        width = len(str(self.vocab_size))
        return Vocab([BLANK_TOKEN, UNK_TOKEN]
                     + [f"w{i:0{width}d}" for i in range(1, self.vocab_size + 1)])

    def token_means(self) -> np.ndarray:
        """Per-token mean vectors, deterministic in the seed.

        Row i is the emission mean of token id i+2 (ids 0 and 1 are the
        blank and <unk>, which the generator never emits).
        """
        rng = np.random.default_rng(np.random.SeedSequence(entropy=self.seed,
                                                           spawn_key=(0,)))
        return rng.uniform(-1.0, 1.0, size=(self.vocab_size, self.feat_dim))


def synth_generate(spec: SynthTaskSpec, num_utts: int,
                   start_index: int = 0) -> tuple[list[Utterance], Vocab]:
    """Generate utterances with gold frame alignments, deterministic per seed.

    Every utterance satisfies CTC feasibility at the raw frame rate by
    construction: tokens emit at least frames_per_token[0] >= 1 frames and a
    silence frame is forced between adjacent equal tokens.

    Token mean vectors depend only on the spec seed, so disjoint corpora of
    the *same* task (train/valid/test) come from one spec with different
    ``start_index`` ranges; changing the seed changes the task itself.
    """
    if num_utts < 0:
        raise DomainError("num_utts must be >= 0")
    if start_index < 0:
        raise DomainError("start_index must be >= 0")
    vocab = spec.build_vocab()
    means = spec.token_means()
    utterances = []
    first_token_id = 2  # after blank and <unk>
    for n in range(start_index, start_index + num_utts):
        rng = np.random.default_rng(np.random.SeedSequence(entropy=spec.seed,
                                                           spawn_key=(1, n)))
        n_tokens = int(rng.integers(spec.tokens_per_utt[0], spec.tokens_per_utt[1] + 1))
        token_ids = rng.integers(first_token_id, first_token_id + spec.vocab_size,
                                 size=n_tokens)
        frames = []
        labels = []

        def emit_silence(count: int):
            if count > 0:
                frames.append(rng.normal(0.0, spec.noise_scale,
                                         size=(count, spec.feat_dim)))
                labels.extend([0] * count)

        emit_silence(int(rng.integers(spec.silence_run[0], spec.silence_run[1] + 1)))
        for i, tok in enumerate(token_ids):
            if i > 0:
                gap = int(rng.integers(spec.silence_run[0], spec.silence_run[1] + 1))
                if gap == 0 and token_ids[i - 1] == tok:
                    gap = 1  # keep adjacent repeats separable after collapse
                emit_silence(gap)
            k = int(rng.integers(spec.frames_per_token[0], spec.frames_per_token[1] + 1))
            mean = means[tok - first_token_id]
            frames.append(mean + rng.normal(0.0, spec.noise_scale,
                                            size=(k, spec.feat_dim)))
            labels.extend([int(tok)] * k)
        emit_silence(int(rng.integers(spec.silence_run[0], spec.silence_run[1] + 1)))

        features = np.concatenate(frames, axis=0)
        utterances.append(Utterance(
            utt_id=f"synth-{n:06d}",
            features=features,
            transcript=[int(t) for t in token_ids],
            duration=features.shape[0] * FRAME_SECONDS,
            gold_alignment=np.array(labels, dtype=np.int64)))
    return utterances, vocab


# ---------------------------------------------------------------------------
# directory layout helpers (used by the CLI)
# ---------------------------------------------------------------------------

def write_dataset(utterances: Sequence[Utterance], vocab: Vocab, out_dir) -> None:
    out = Path(out_dir)
    (out / "feats").mkdir(parents=True, exist_ok=True)
    vocab.save(out / "vocab.txt")
    manifest_lines = []
    align_lines = []
    for utt in utterances:
        rel = f"feats/{utt.utt_id}.feat"
        write_features(out / rel, utt.features)
        transcript = detokenize(utt.transcript, vocab)
        manifest_lines.append(
            f"{utt.utt_id}\t{rel}\t{utt.features.shape[0]}\t{utt.duration:.6f}\t{transcript}")
        if utt.gold_alignment is not None:
            align_lines.append(
                f"{utt.utt_id}\t{' '.join(str(int(x)) for x in utt.gold_alignment)}")
    (out / "manifest.tsv").write_text(
        "\n".join(manifest_lines) + ("\n" if manifest_lines else ""), encoding="utf-8")
    if align_lines:
        (out / "alignments.tsv").write_text("\n".join(align_lines) + "\n", encoding="utf-8")


def load_dataset(data_dir) -> tuple[list[Utterance], Vocab]:
    data_dir = Path(data_dir)
    vocab = load_vocab(data_dir / "vocab.txt")
    utterances = load_manifest(data_dir / "manifest.tsv", vocab)
    align_path = data_dir / "alignments.tsv"
    if align_path.exists():
        alignments = load_alignments(align_path)
        for utt in utterances:
            utt.gold_alignment = alignments.get(utt.utt_id)
    return utterances, vocab
