"""The shared-encoder network run in two passes.

One transformer encoder serves both roles: pass 1 consumes the conv
frontend's frame features and feeds the CTC head; pass 2 consumes the same
frames concatenated with token-level acoustic embeddings (TAEs) and feeds
both the shared CTC head (frame rows) and the CE head (token rows).  The
TAE extractor is a single masked cross-attention block that pools each
token's frame span into one vector.

Positional scheme for the concatenated sequence: frame rows keep positions
0..T-1, token rows restart at 0, and learned FRAME/TOKEN type embeddings
distinguish the two.  Because the pass-2 code path with zero tokens is
literally the pass-1 code path, ``encode_pass2(h, empty) == encode_pass1(h)``
bit-exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from typing import Optional

import numpy as np

from . import numerics as nx
from .ctc import SegmentBoundaries
from .errors import CapacityError, ContractViolation, DomainError
from .numerics import Tensor


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters.

    ``vocab_size`` counts real tokens only; the CTC head adds the blank on
    top (lattice width vocab_size + 1).  Desk defaults are small enough for
    CPU gradient checks; paper-scale tuples like (512, 2048, 8) remain
    expressible.
    """

    model_dim: int = 64
    ffn_dim: int = 256
    num_heads: int = 4
    num_blocks: int = 4
    conv_downsample: int = 4
    taee_dim: int = 64
    taee_ffn: int = 256
    taee_heads: int = 4
    vocab_size: int = 21
    feat_dim: int = 16
    max_frames: int = 4096
    dropout: float = 0.1

    def __post_init__(self):
        if self.model_dim % self.num_heads:
            raise ContractViolation("model_dim must be divisible by num_heads")
        if self.taee_dim % self.taee_heads:
            raise ContractViolation("taee_dim must be divisible by taee_heads")
        if self.conv_downsample < 1:
            raise ContractViolation("conv_downsample must be >= 1")
        if self.vocab_size < 1:
            raise ContractViolation("need at least one real token besides the blank")
        if self.feat_dim < 1 or self.max_frames < 1:
            raise ContractViolation("feat_dim and max_frames must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ContractViolation("dropout must lie in [0, 1)")

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        kwargs = {}
        for f in fields(cls):
            if f.name in d:
                value = d[f.name]
                kwargs[f.name] = float(value) if f.name == "dropout" else int(round(value))
        return cls(**kwargs)


@dataclass
class EncoderOutput:
    """Contextual states split back into frame rows and token rows."""

    frame_out: Tensor          # [T, d]
    token_out: Tensor          # [U, d]; U == 0 for pass 1


def sinusoid_table(length: int, dim: int) -> np.ndarray:
    """Standard sin/cos interleaved positional encodings, [length, dim]."""
    pos = np.arange(length, dtype=np.float64)[:, None]
    idx = np.arange(dim, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, 2.0 * np.floor(idx / 2.0) / dim)
    table = np.empty((length, dim))
    table[:, 0::2] = np.sin(angle[:, 0::2])
    table[:, 1::2] = np.cos(angle[:, 1::2])
    return table


def _factorize(n: int) -> list[int]:
    factors = []
    k = 2
    while n > 1:
        while n % k == 0:
            factors.append(k)
            n //= k
        k += 1
    return factors


class UniEncModel:
    """Conv frontend + shared contextual encoder + TAE extractor + heads.

    Weights are plain named float64 tensors; inference never mutates them,
    so one model can serve concurrent decodes.  Forward methods accept
    ``train``/``rng`` to switch dropout on; with dropout off every forward
    is bit-reproducible.
    """

    ENCODER_GROUP_PREFIXES = ("frontend.", "enc", "embed.")

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        self.params: dict[str, Tensor] = {}
        rng = np.random.default_rng(seed)
        d, c = config.model_dim, config

        self._add_weight(rng, "frontend.in_proj.w", (c.feat_dim, d))
        self._add_zeros("frontend.in_proj.b", (d,))
        self.conv_strides = _factorize(c.conv_downsample)
        for i, f in enumerate(self.conv_strides):
            self._add_weight(rng, f"frontend.conv{i}.w", (2 * f - 1, d, d))
            self._add_zeros(f"frontend.conv{i}.b", (d,))

        self.params["embed.frame_type"] = nx.parameter(
            rng.normal(0.0, 0.02, size=d), "embed.frame_type")
        self.params["embed.token_type"] = nx.parameter(
            rng.normal(0.0, 0.02, size=d), "embed.token_type")

        for i in range(c.num_blocks):
            p = f"enc{i}"
            self._add_ln(f"{p}.ln1", d)
            for w in ("wq", "wk", "wv", "wo"):
                self._add_weight(rng, f"{p}.attn.{w}", (d, d))
            for b in ("bq", "bk", "bv", "bo"):
                self._add_zeros(f"{p}.attn.{b}", (d,))
            self._add_ln(f"{p}.ln2", d)
            self._add_weight(rng, f"{p}.ffn.w1", (d, c.ffn_dim))
            self._add_zeros(f"{p}.ffn.b1", (c.ffn_dim,))
            self._add_weight(rng, f"{p}.ffn.w2", (c.ffn_dim, d))
            self._add_zeros(f"{p}.ffn.b2", (d,))
        self._add_ln("enc_final_ln", d)

        td = c.taee_dim
        self._add_weight(rng, "taee.q_proj.w", (td, td))
        self._add_zeros("taee.q_proj.b", (td,))
        self._add_ln("taee.ln_q", td)
        self._add_weight(rng, "taee.k_proj.w", (d, td))
        self._add_zeros("taee.k_proj.b", (td,))
        self._add_weight(rng, "taee.v_proj.w", (d, td))
        self._add_zeros("taee.v_proj.b", (td,))
        self._add_weight(rng, "taee.attn_out.w", (td, td))
        self._add_zeros("taee.attn_out.b", (td,))
        self._add_ln("taee.ln2", td)
        self._add_weight(rng, "taee.ffn.w1", (td, c.taee_ffn))
        self._add_zeros("taee.ffn.b1", (c.taee_ffn,))
        self._add_weight(rng, "taee.ffn.w2", (c.taee_ffn, td))
        self._add_zeros("taee.ffn.b2", (td,))
        self._add_ln("taee.ln_out", td)
        self._add_weight(rng, "taee.out_proj.w", (td, d))
        self._add_zeros("taee.out_proj.b", (d,))

        self._add_weight(rng, "ctc_head.w", (d, c.vocab_size + 1))
        self._add_zeros("ctc_head.b", (c.vocab_size + 1,))
        self._add_weight(rng, "ce_head.w", (d, c.vocab_size))
        self._add_zeros("ce_head.b", (c.vocab_size,))

        self._pe_cache: np.ndarray | None = None

    # -- parameter bookkeeping ------------------------------------------------

    def _add_weight(self, rng, name: str, shape: tuple):
        fan_in = int(np.prod(shape[:-1]))
        fan_out = shape[-1]
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        self.params[name] = nx.parameter(rng.uniform(-limit, limit, size=shape), name)

    def _add_zeros(self, name: str, shape: tuple):
        self.params[name] = nx.parameter(np.zeros(shape), name)

    def _add_ln(self, prefix: str, dim: int):
        self.params[f"{prefix}.g"] = nx.parameter(np.ones(dim), f"{prefix}.g")
        self.params[f"{prefix}.b"] = nx.parameter(np.zeros(dim), f"{prefix}.b")

    def parameter_names(self) -> list[str]:
        return list(self.params)

    def parameter_group(self, name: str) -> str:
        """'encoder' for frontend/encoder/embedding weights, 'new_modules' else."""
        if name.startswith(self.ENCODER_GROUP_PREFIXES):
            return "encoder"
        return "new_modules"

    def get_state(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self.params.items()}

    def set_state(self, state: dict[str, np.ndarray]):
        missing = set(self.params) - set(state)
        extra = set(state) - set(self.params)
        if missing or extra:
            raise ContractViolation(
                f"state mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for name, t in self.params.items():
            arr = np.ascontiguousarray(state[name], dtype=np.float64)
            if arr.shape != t.data.shape:
                raise ContractViolation(
                    f"tensor {name}: expected shape {t.data.shape}, got {arr.shape}")
            t.data = arr

    # -- shared sub-layers ----------------------------------------------------

    def _pe(self, length: int) -> np.ndarray:
        if self._pe_cache is None or self._pe_cache.shape[0] < length:
            self._pe_cache = sinusoid_table(
                max(length, min(self.config.max_frames, 2 * length)), self.config.model_dim)
        return self._pe_cache[:length]

    def _dropout(self, x: Tensor, train: bool, rng) -> Tensor:
        return nx.dropout(x, self.config.dropout if train else 0.0, rng if train else None)

    def _mha(self, prefix: str, x_q: Tensor, x_kv: Tensor, num_heads: int,
             mask: np.ndarray | None) -> Tensor:
        p = self.params
        q = nx.add_bias(nx.matmul(x_q, p[f"{prefix}.wq"]), p[f"{prefix}.bq"])
        k = nx.add_bias(nx.matmul(x_kv, p[f"{prefix}.wk"]), p[f"{prefix}.bk"])
        v = nx.add_bias(nx.matmul(x_kv, p[f"{prefix}.wv"]), p[f"{prefix}.bv"])
        dh = q.shape[-1] // num_heads

        def split_heads(t: Tensor) -> Tensor:
            return nx.transpose(nx.reshape(t, (t.shape[0], num_heads, dh)), (1, 0, 2))

        att = nx.masked_scaled_dot_attention(
            split_heads(q), split_heads(k), split_heads(v), mask)
        merged = nx.reshape(nx.transpose(att, (1, 0, 2)), (q.shape[0], num_heads * dh))
        return nx.add_bias(nx.matmul(merged, p[f"{prefix}.wo"]), p[f"{prefix}.bo"])

    def _ffn(self, prefix: str, x: Tensor) -> Tensor:
        p = self.params
        h = nx.gelu(nx.add_bias(nx.matmul(x, p[f"{prefix}.w1"]), p[f"{prefix}.b1"]))
        return nx.add_bias(nx.matmul(h, p[f"{prefix}.w2"]), p[f"{prefix}.b2"])

    def _ln(self, prefix: str, x: Tensor) -> Tensor:
        return nx.layer_norm(x, self.params[f"{prefix}.g"], self.params[f"{prefix}.b"])

    # -- frontend ---------------------------------------------------------------

    def conv_frontend(self, features: np.ndarray, train: bool = False,
                      rng: np.random.Generator | None = None) -> Tensor:
        """Project raw features to model_dim and downsample the frame rate.

        Input [raw_frames, feat_dim]; output [ceil(raw/downsample), d].
        With conv_downsample == 1 this is a pure linear projection.
        """
        feats = np.asarray(features, dtype=np.float64)
        if feats.ndim != 2 or feats.shape[1] != self.config.feat_dim:
            raise ContractViolation(
                f"features must be [frames, {self.config.feat_dim}], got {feats.shape}")
        if feats.shape[0] < self.config.conv_downsample:
            raise DomainError(
                f"need at least {self.config.conv_downsample} frames, got {feats.shape[0]}")
        p = self.params
        x = nx.add_bias(nx.matmul(Tensor(feats), p["frontend.in_proj.w"]),
                        p["frontend.in_proj.b"])
        for i, f in enumerate(self.conv_strides):
            x = nx.gelu(nx.conv1d(x, p[f"frontend.conv{i}.w"], p[f"frontend.conv{i}.b"],
                                  stride=f, padding=f - 1))
        return x

    # -- the two encoder passes -------------------------------------------------

    def _encode(self, h: Tensor, tae: Optional[Tensor], train: bool,
                rng: np.random.Generator | None) -> EncoderOutput:
        t_len = h.shape[0]
        u_len = 0 if tae is None else tae.shape[0]
        if t_len + u_len > self.config.max_frames:
            raise CapacityError(
                f"sequence of {t_len}+{u_len} rows exceeds max_frames={self.config.max_frames}")
        p = self.params
        x = nx.add_bias(nx.add(h, Tensor(self._pe(t_len))), p["embed.frame_type"])
        if u_len:
            tok = nx.add_bias(nx.add(tae, Tensor(self._pe(u_len))), p["embed.token_type"])
            x = nx.concat_rows(x, tok)
        x = self._dropout(x, train, rng)
        for i in range(self.config.num_blocks):
            pre = f"enc{i}"
            normed = self._ln(f"{pre}.ln1", x)
            x = nx.add(x, self._dropout(
                self._mha(f"{pre}.attn", normed, normed, self.config.num_heads, None),
                train, rng))
            x = nx.add(x, self._dropout(self._ffn(f"{pre}.ffn", self._ln(f"{pre}.ln2", x)),
                                        train, rng))
        x = self._ln("enc_final_ln", x)
        return EncoderOutput(frame_out=nx.slice_rows(x, 0, t_len),
                             token_out=nx.slice_rows(x, t_len, t_len + u_len))

    def encode_pass1(self, h: Tensor, train: bool = False,
                     rng: np.random.Generator | None = None) -> EncoderOutput:
        """First pass: frames only; token_out comes back empty."""
        return self._encode(h, None, train, rng)

    def encode_pass2(self, h: Tensor, tae: Optional[Tensor], train: bool = False,
                     rng: np.random.Generator | None = None) -> EncoderOutput:
        """Second pass over T frame rows followed by U TAE rows.

        Full self-attention across all T+U positions; the output splits back
        into frame_out [T, d] and token_out [U, d].
        """
        if tae is not None and tae.shape[0] == 0:
            tae = None
        return self._encode(h, tae, train, rng)

    # -- TAE extractor ------------------------------------------------------------

    def _taee_queries(self, token_count: int) -> Tensor:
        table = sinusoid_table(token_count, self.config.taee_dim)
        return nx.add_bias(nx.matmul(Tensor(table), self.params["taee.q_proj.w"]),
                           self.params["taee.q_proj.b"])

    def span_attention(self, frame_out: Tensor, boundaries: SegmentBoundaries) -> Tensor:
        """Masked cross-attention pooling only (pre-residual, pre-FFN).

        Token u attends to exactly its span's frames; with an identity value
        path and uniform scores this reduces to the span mean.
        """
        if boundaries.total_frames != frame_out.shape[0]:
            raise ContractViolation(
                f"boundaries cover {boundaries.total_frames} frames, "
                f"frame_out has {frame_out.shape[0]}")
        u_len = boundaries.token_count
        mask = np.zeros((u_len, frame_out.shape[0]), dtype=bool)
        for u, (s, e) in enumerate(boundaries.spans):
            mask[u, s:e] = True
        p = self.params
        q = self._ln("taee.ln_q", self._taee_queries(u_len))
        k = nx.add_bias(nx.matmul(frame_out, p["taee.k_proj.w"]), p["taee.k_proj.b"])
        v = nx.add_bias(nx.matmul(frame_out, p["taee.v_proj.w"]), p["taee.v_proj.b"])
        heads = self.config.taee_heads
        dh = self.config.taee_dim // heads

        def split_heads(t: Tensor) -> Tensor:
            return nx.transpose(nx.reshape(t, (t.shape[0], heads, dh)), (1, 0, 2))

        att = nx.masked_scaled_dot_attention(split_heads(q), split_heads(k),
                                             split_heads(v), mask)
        merged = nx.reshape(nx.transpose(att, (1, 0, 2)), (u_len, self.config.taee_dim))
        return nx.add_bias(nx.matmul(merged, p["taee.attn_out.w"]), p["taee.attn_out.b"])

    def extract_tae(self, frame_out: Tensor, boundaries: SegmentBoundaries,
                    train: bool = False, rng: np.random.Generator | None = None) -> Tensor:
        """Pool frame states into one embedding per token, [U, model_dim]."""
        q0 = self._taee_queries(boundaries.token_count)
        x = nx.add(q0, self._dropout(self.span_attention(frame_out, boundaries), train, rng))
        x = nx.add(x, self._dropout(self._ffn("taee.ffn", self._ln("taee.ln2", x)), train, rng))
        return nx.add_bias(nx.matmul(self._ln("taee.ln_out", x), self.params["taee.out_proj.w"]),
                           self.params["taee.out_proj.b"])

    # -- output heads ---------------------------------------------------------------

    def ctc_head(self, frame_out: Tensor) -> Tensor:
        """Shared projection to blank+vocab log-probs; serves both passes."""
        return nx.log_softmax_rows(nx.add_bias(
            nx.matmul(frame_out, self.params["ctc_head.w"]), self.params["ctc_head.b"]))

    def ce_head(self, token_out: Tensor) -> Tensor:
        """Per-token log-probs over real tokens (no blank); column j is id j+1."""
        return nx.log_softmax_rows(nx.add_bias(
            nx.matmul(token_out, self.params["ce_head.w"]), self.params["ce_head.b"]))
