"""Joint two-pass objective, noam schedule, training loop, checkpoints.

The objective sums the token-level cross-entropy from pass 2 with CTC
losses on both passes' frame lattices through the shared head:
``total = l_dec + lambda1 * l_ctc1 + lambda2 * l_ctc2``.  The TAE path is
teacher-forced: the pass-1 lattice is force-aligned against the ground
truth (never a sampled alignment) and the resulting spans drive the TAE
extractor.

Checkpoints are a self-contained named-tensor binary (magic ``UECN``) that
also carries the optimizer moments, step counter, and a numeric config
snapshot, so a round trip restores training bit-exactly.
"""

from __future__ import annotations

import logging
import math
import struct
import time
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import ctc as ctc_mod
from . import numerics as nx
from .ctc import LogProbLattice
from .errors import (CheckpointFormatError, ContractViolation, DomainError,
                     InfeasibleLengthError, NumericalError)
from .model import ModelConfig, UniEncModel
from .numerics import GradTape, Tensor

log = logging.getLogger("unienc.training")

CHECKPOINT_MAGIC = b"UECN"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class LossWeights:
    """Mixing weights of the joint objective plus CE label smoothing."""

    lambda1: float = 1.0
    lambda2: float = 1.0
    label_smoothing: float = 0.0

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0 or not 0.0 <= self.label_smoothing < 1.0:
            raise ContractViolation("loss weights must be >= 0, smoothing in [0, 1)")


@dataclass(frozen=True)
class TrainConfig:
    """Optimization settings; desk-scale defaults, paper-scale expressible."""

    warmup_steps: int = 100
    peak_lr_encoder: float = 3e-3
    peak_lr_new_modules: float = 3e-3
    batch_frame_budget: int = 1200
    max_epochs: int = 30
    early_stop_patience: int = 10
    grad_clip_norm: float = 5.0
    seed: int = 0

    def __post_init__(self):
        if self.warmup_steps < 1:
            raise ContractViolation("warmup_steps must be >= 1")
        if self.batch_frame_budget < 1 or self.max_epochs < 1 or self.early_stop_patience < 1:
            raise ContractViolation("budgets, epochs, and patience must be positive")


def noam_lr(step: int, warmup_steps: int, peak: float) -> float:
    """Linear warmup to ``peak`` at step == warmup_steps, then 1/sqrt decay."""
    if step < 1:
        raise DomainError(f"step must be >= 1, got {step}")
    return peak * min(step / warmup_steps, math.sqrt(warmup_steps / step))


# ---------------------------------------------------------------------------
# joint objective
# ---------------------------------------------------------------------------

@dataclass
class JointLossResult:
    total: Tensor
    l_dec: float
    l_ctc1: float
    l_ctc2: float


def _ctc_loss_node(lattice_node: Tensor, target: Sequence[int]) -> tuple[Tensor, float]:
    """Attach the CTC marginalizer to the graph as one primitive."""
    nll, gamma = ctc_mod.ctc_posteriors(LogProbLattice(lattice_node.data), target)
    out = nx.record_op("ctc_nll", (lattice_node,), np.asarray(nll),
                       lambda g: (g * (-gamma),))
    return out, nll


def _cross_entropy(log_probs: Tensor, target: Sequence[int], smoothing: float) -> Tensor:
    """Mean per-token NLL over CE rows; column j holds token id j+1."""
    rows = np.arange(len(target))
    cols = np.asarray(target, dtype=np.intp) - 1
    picked = nx.mean_all(nx.gather_rows(log_probs, rows, cols))
    if smoothing > 0.0:
        uniform = nx.mean_all(log_probs)
        picked = nx.add(nx.mul_const(picked, 1.0 - smoothing),
                        nx.mul_const(uniform, smoothing))
    return nx.mul_const(picked, -1.0)


def joint_loss(model: UniEncModel, features: np.ndarray, target: Sequence[int],
               weights: LossWeights, train: bool = False,
               rng: np.random.Generator | None = None) -> JointLossResult:
    """Run both passes and combine the three losses.

    Raises :class:`InfeasibleLengthError` when the downsampled frame count
    cannot carry the target; training callers skip such pairs, API callers
    see the error.
    """
    target = [int(y) for y in target]
    h = model.conv_frontend(features, train, rng)
    out1 = model.encode_pass1(h, train, rng)
    lattice1 = model.ctc_head(out1.frame_out)
    l_ctc1_node, l_ctc1 = _ctc_loss_node(lattice1, target)

    align = ctc_mod.viterbi_align(LogProbLattice(lattice1.data), target)
    boundaries = ctc_mod.segment_boundaries(align)
    tae = model.extract_tae(out1.frame_out, boundaries, train, rng)

    out2 = model.encode_pass2(h, tae, train, rng)
    lattice2 = model.ctc_head(out2.frame_out)
    l_ctc2_node, l_ctc2 = _ctc_loss_node(lattice2, target)
    l_dec_node = _cross_entropy(model.ce_head(out2.token_out), target, weights.label_smoothing)

    total = nx.add(l_dec_node, nx.add(nx.mul_const(l_ctc1_node, weights.lambda1),
                                      nx.mul_const(l_ctc2_node, weights.lambda2)))
    return JointLossResult(total=total, l_dec=l_dec_node.item(),
                           l_ctc1=l_ctc1, l_ctc2=l_ctc2)


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

class AdamOptimizer:
    """Adam with (0.9, 0.98, 1e-9) under a per-group noam schedule."""

    def __init__(self, model: UniEncModel, config: TrainConfig,
                 betas: tuple[float, float] = (0.9, 0.98), eps: float = 1e-9):
        self.model = model
        self.config = config
        self.betas = betas
        self.eps = eps
        self.step_count = 0
        self.m = {name: np.zeros_like(t.data) for name, t in model.params.items()}
        self.v = {name: np.zeros_like(t.data) for name, t in model.params.items()}

    def _peak(self, name: str) -> float:
        if self.model.parameter_group(name) == "encoder":
            return self.config.peak_lr_encoder
        return self.config.peak_lr_new_modules

    def apply_gradients(self) -> float:
        """Clip to the global-norm budget and take one step; returns encoder lr."""
        self.step_count += 1
        grads = {}
        sq = 0.0
        for name, t in self.model.params.items():
            g = t.grad if t.grad is not None else np.zeros_like(t.data)
            grads[name] = g
            sq += float((g * g).sum())
        norm = math.sqrt(sq)
        clip = self.config.grad_clip_norm
        scale = clip / norm if clip > 0 and norm > clip else 1.0
        b1, b2 = self.betas
        bias1 = 1.0 - b1 ** self.step_count
        bias2 = 1.0 - b2 ** self.step_count
        for name, t in self.model.params.items():
            g = grads[name] * scale
            self.m[name] = b1 * self.m[name] + (1 - b1) * g
            self.v[name] = b2 * self.v[name] + (1 - b2) * g * g
            lr = noam_lr(self.step_count, self.config.warmup_steps, self._peak(name))
            m_hat = self.m[name] / bias1
            v_hat = self.v[name] / bias2
            t.data = t.data - lr * m_hat / (np.sqrt(v_hat) + self.eps)
        return noam_lr(self.step_count, self.config.warmup_steps,
                       self.config.peak_lr_encoder)

    def state(self) -> dict:
        return {"m": {k: v.copy() for k, v in self.m.items()},
                "v": {k: v.copy() for k, v in self.v.items()},
                "step": self.step_count}

    def load_state(self, state: dict):
        self.m = {k: np.array(v, dtype=np.float64) for k, v in state["m"].items()}
        self.v = {k: np.array(v, dtype=np.float64) for k, v in state["v"].items()}
        self.step_count = int(state["step"])


# ---------------------------------------------------------------------------
# checkpoint format: named float64 tensors + CRC32 trailer
# ---------------------------------------------------------------------------

def _pack_tensors(tensors: dict[str, np.ndarray]) -> bytes:
    body = bytearray()
    body += struct.pack("<I", CHECKPOINT_VERSION)
    body += struct.pack("<I", len(tensors))
    for name in sorted(tensors):
        arr = np.asarray(tensors[name], dtype=np.float64)
        if arr.ndim:
            arr = np.ascontiguousarray(arr)
        encoded = name.encode("utf-8")
        body += struct.pack("<H", len(encoded))
        body += encoded
        body += struct.pack("<B", arr.ndim)
        for dim in arr.shape:
            body += struct.pack("<Q", dim)
        body += arr.astype("<f8").tobytes(order="C")
    body += struct.pack("<I", zlib.crc32(bytes(body)))
    return CHECKPOINT_MAGIC + bytes(body)


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.blob):
            raise CheckpointFormatError(f"truncated while reading {what}", offset=self.pos)
        chunk = self.blob[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))[0]


def _unpack_tensors(blob: bytes) -> dict[str, np.ndarray]:
    r = _Reader(blob)
    if r.take(4, "magic") != CHECKPOINT_MAGIC:
        raise CheckpointFormatError("bad magic bytes", offset=0)
    body_start = r.pos
    version = r.unpack("<I", "version")
    if version != CHECKPOINT_VERSION:
        raise CheckpointFormatError(f"unsupported format version {version}", offset=4)
    count = r.unpack("<I", "tensor count")
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        name_len = r.unpack("<H", "name length")
        name_offset = r.pos
        try:
            name = r.take(name_len, "name").decode("utf-8")
        except UnicodeDecodeError:
            raise CheckpointFormatError("tensor name is not valid UTF-8",
                                        offset=name_offset) from None
        rank = r.unpack("<B", "rank")
        dims = tuple(r.unpack("<Q", f"dim of {name}") for _ in range(rank))
        n_values = int(np.prod(dims)) if dims else 1
        payload = r.take(8 * n_values, f"payload of {name}")
        tensors[name] = np.frombuffer(payload, dtype="<f8").reshape(dims).copy()
    stored_crc = r.unpack("<I", "crc32")
    if r.pos != len(blob):
        raise CheckpointFormatError("trailing bytes after checksum", offset=r.pos)
    actual = zlib.crc32(blob[body_start:len(blob) - 4])
    if actual != stored_crc:
        raise CheckpointFormatError(
            f"checksum mismatch: stored {stored_crc:#010x}, computed {actual:#010x}",
            offset=len(blob) - 4)
    return tensors


def checkpoint_bytes(model: UniEncModel, optimizer: AdamOptimizer | None = None,
                     step: int = 0) -> bytes:
    tensors: dict[str, np.ndarray] = {f"param/{k}": v for k, v in model.get_state().items()}
    for key, value in model.config.to_dict().items():
        tensors[f"config/{key}"] = np.asarray(float(value))
    tensors["meta/step"] = np.asarray(float(step))
    if optimizer is not None:
        state = optimizer.state()
        tensors["meta/step"] = np.asarray(float(state["step"]))
        for k, v in state["m"].items():
            tensors[f"optim/m/{k}"] = v
        for k, v in state["v"].items():
            tensors[f"optim/v/{k}"] = v
    return _pack_tensors(tensors)


def save_checkpoint(model: UniEncModel, path, optimizer: AdamOptimizer | None = None,
                    step: int = 0) -> None:
    Path(path).write_bytes(checkpoint_bytes(model, optimizer, step))


@dataclass
class CheckpointBundle:
    model: UniEncModel
    step: int
    optimizer_state: dict | None


def load_checkpoint(path) -> CheckpointBundle:
    """Rebuild the model (and optimizer state, when present) from disk."""
    tensors = _unpack_tensors(Path(path).read_bytes())
    config_values = {k[len("config/"):]: float(v)
                     for k, v in tensors.items() if k.startswith("config/")}
    if not config_values:
        raise CheckpointFormatError("checkpoint carries no config snapshot")
    config = ModelConfig.from_dict(config_values)
    model = UniEncModel(config, seed=0)
    state = {k[len("param/"):]: v for k, v in tensors.items() if k.startswith("param/")}
    model.set_state(state)
    step = int(tensors.get("meta/step", np.asarray(0.0)))
    optim_m = {k[len("optim/m/"):]: v for k, v in tensors.items() if k.startswith("optim/m/")}
    optim_v = {k[len("optim/v/"):]: v for k, v in tensors.items() if k.startswith("optim/v/")}
    optimizer_state = None
    if optim_m:
        optimizer_state = {"m": optim_m, "v": optim_v, "step": step}
    return CheckpointBundle(model=model, step=step, optimizer_state=optimizer_state)


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

@dataclass
class EpochRecord:
    epoch: int
    step: int
    lr: float
    l_dec: float
    l_ctc1: float
    l_ctc2: float
    valid_wer_greedy: float

    def to_line(self) -> str:
        import json
        return json.dumps({"epoch": self.epoch, "step": self.step, "lr": self.lr,
                           "l_dec": self.l_dec, "l_ctc1": self.l_ctc1,
                           "l_ctc2": self.l_ctc2,
                           "valid_wer_greedy": self.valid_wer_greedy})


@dataclass
class FitResult:
    records: list[EpochRecord]
    best_epoch: int
    best_valid_wer: float
    best_state: dict[str, np.ndarray]
    final_step: int
    stopped: str                      # "early_stop" | "max_epochs" | "diverged"
    skipped_utterances: int
    wall_seconds: float


def make_batches(utterances: Sequence, budget: int,
                 rng: np.random.Generator) -> list[list]:
    """Sort-by-length bucketing under a total-raw-frame budget, shuffled order."""
    ordered = sorted(utterances, key=lambda u: u.features.shape[0])
    batches: list[list] = []
    current: list = []
    frames = 0
    for utt in ordered:
        n = utt.features.shape[0]
        if current and frames + n > budget:
            batches.append(current)
            current, frames = [], 0
        current.append(utt)
        frames += n
    if current:
        batches.append(current)
    order = rng.permutation(len(batches))
    return [batches[i] for i in order]


def _greedy_wer(model: UniEncModel, utterances: Sequence) -> float:
    from .decoding import decode_greedy_ctc
    from .evaluation import wer
    refs = {u.utt_id: [str(t) for t in u.transcript] for u in utterances}
    hyps = {}
    for u in utterances:
        hyp = decode_greedy_ctc(model, u.features)
        hyps[u.utt_id] = [str(t) for t in hyp.tokens]
    return wer(refs, hyps).wer


def fit(model: UniEncModel, train_set: Sequence, valid_set: Sequence,
        config: TrainConfig, weights: LossWeights,
        out_dir=None, resume: CheckpointBundle | None = None) -> FitResult:
    """Train with early stopping on valid greedy-CTC WER.

    Writes ``train_log.jsonl`` and ``best.ckpt`` under ``out_dir`` when
    given.  On divergence (non-finite loss) training aborts and the result
    carries the last good parameter state.
    """
    if not train_set or not valid_set:
        raise ContractViolation("train and valid sets must be non-empty")
    rng = np.random.default_rng(config.seed)
    optimizer = AdamOptimizer(model, config)
    if resume is not None and resume.optimizer_state is not None:
        optimizer.load_state(resume.optimizer_state)

    out_path = Path(out_dir) if out_dir is not None else None
    log_file = None
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)
        log_file = (out_path / "train_log.jsonl").open("w", encoding="utf-8")

    records: list[EpochRecord] = []
    best_state = model.get_state()
    best_wer = math.inf
    best_epoch = 0
    skipped = 0
    stopped = "max_epochs"
    start = time.perf_counter()

    try:
        for epoch in range(1, config.max_epochs + 1):
            epoch_rng = np.random.default_rng(
                np.random.SeedSequence(entropy=config.seed, spawn_key=(epoch,)))
            sums = np.zeros(3)
            n_utts = 0
            diverged = False
            lr = noam_lr(max(optimizer.step_count, 1), config.warmup_steps,
                         config.peak_lr_encoder)
            for batch in make_batches(train_set, config.batch_frame_budget, epoch_rng):
                losses = []
                with GradTape() as tape:
                    for utt in batch:
                        try:
                            losses.append(joint_loss(model, utt.features, utt.transcript,
                                                     weights, train=True, rng=epoch_rng))
                        except InfeasibleLengthError:
                            skipped += 1
                        except NumericalError:
                            diverged = True
                            break
                    if not diverged and losses:
                        batch_loss = nx.mul_const(
                            losses[0].total if len(losses) == 1 else _sum_losses(losses),
                            1.0 / len(losses))
                        if np.isfinite(batch_loss.item()):
                            for t in model.params.values():
                                t.grad = None
                            nx.backward(tape, batch_loss)
                        else:
                            diverged = True
                if diverged:
                    break
                if not losses:
                    continue
                lr = optimizer.apply_gradients()
                for r in losses:
                    sums += (r.l_dec, r.l_ctc1, r.l_ctc2)
                n_utts += len(losses)
            if diverged:
                stopped = "diverged"
                log.warning("non-finite loss at epoch %d; restoring last good state", epoch)
                model.set_state(best_state)
                break

            valid_wer = _greedy_wer(model, valid_set)
            means = sums / max(n_utts, 1)
            record = EpochRecord(epoch=epoch, step=optimizer.step_count, lr=lr,
                                 l_dec=float(means[0]), l_ctc1=float(means[1]),
                                 l_ctc2=float(means[2]), valid_wer_greedy=valid_wer)
            records.append(record)
            if log_file is not None:
                log_file.write(record.to_line() + "\n")
                log_file.flush()
            log.info("epoch %d: l_dec=%.4f l_ctc1=%.4f l_ctc2=%.4f wer=%.4f",
                     epoch, means[0], means[1], means[2], valid_wer)

            if valid_wer < best_wer:
                best_wer = valid_wer
                best_epoch = epoch
                best_state = model.get_state()
                if out_path is not None:
                    save_checkpoint(model, out_path / "best.ckpt", optimizer)
            elif epoch - best_epoch >= config.early_stop_patience:
                stopped = "early_stop"
                break
    finally:
        if log_file is not None:
            log_file.close()

    model.set_state(best_state)
    return FitResult(records=records, best_epoch=best_epoch,
                     best_valid_wer=best_wer, best_state=best_state,
                     final_step=optimizer.step_count, stopped=stopped,
                     skipped_utterances=skipped,
                     wall_seconds=time.perf_counter() - start)


def _sum_losses(losses: list[JointLossResult]) -> Tensor:
    total = losses[0].total
    for r in losses[1:]:
        total = nx.add(total, r.total)
    return total
