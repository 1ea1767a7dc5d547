"""Desk-scale encoder-only non-autoregressive speech recognizer.

One shared contextual encoder runs in two passes: pass 1 turns frames into
a CTC lattice and token-level acoustic embeddings; pass 2 re-encodes frames
together with those embeddings to emit the transcript.  Training combines
cross-entropy on the token rows with CTC on both passes' frame rows through
a shared head; decoding refines sampled alignments iteratively.
"""

from .ctc import (Alignment, LogProbLattice, SegmentBoundaries, collapse,
                  ctc_loss, esa_sample, greedy_decode, segment_boundaries,
                  viterbi_align)
from .data import SynthTaskSpec, Utterance, Vocab, load_manifest, load_vocab, synth_generate
from .decoding import DecodeSchedule, Hypothesis, decode_greedy_ctc, decode_utterance, rank
from .evaluation import RtfReport, ScoreReport, rtf, wer
from .model import EncoderOutput, ModelConfig, UniEncModel
from .numerics import GradTape, Tensor, backward, finite_diff_grad, log_sum_exp
from .training import (AdamOptimizer, LossWeights, TrainConfig, fit, joint_loss,
                       load_checkpoint, noam_lr, save_checkpoint)

__version__ = "0.1.0"

__all__ = [
    "Alignment", "LogProbLattice", "SegmentBoundaries", "collapse", "ctc_loss",
    "esa_sample", "greedy_decode", "segment_boundaries", "viterbi_align",
    "SynthTaskSpec", "Utterance", "Vocab", "load_manifest", "load_vocab",
    "synth_generate", "DecodeSchedule", "Hypothesis", "decode_greedy_ctc",
    "decode_utterance", "rank", "RtfReport", "ScoreReport", "rtf", "wer",
    "EncoderOutput", "ModelConfig", "UniEncModel", "GradTape", "Tensor",
    "backward", "finite_diff_grad", "log_sum_exp", "AdamOptimizer",
    "LossWeights", "TrainConfig", "fit", "joint_loss", "load_checkpoint",
    "noam_lr", "save_checkpoint",
]
