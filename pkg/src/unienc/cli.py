"""Operator entry point: synth / train / decode / eval / gradcheck.

Configuration is a flat dotted-key file (``key = value`` lines, ``#``
comments) overridable with repeated ``--set key=value`` flags; unknown keys
are rejected.  The key table printed by ``--help`` is generated from the
same schema the parser validates against, so it cannot drift.

Exit codes: 0 success, 1 usage/config error, 2 data integrity error,
3 numerical failure.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import data as data_mod
from . import evaluation
from . import training
from .ctc import LogProbLattice
from .decoding import DecodeSchedule, decode_greedy_ctc, decode_utterance
from .errors import (ContractViolation, DataIntegrityError, DomainError,
                     NumericalError, ParseError, UniencError, UsageError)
from .model import ModelConfig, UniEncModel
from .numerics import GradTape, backward, finite_diff_grad, relative_error
from .training import (FitResult, LossWeights, TrainConfig, fit, joint_loss,
                       load_checkpoint, save_checkpoint)

log = logging.getLogger("unienc.cli")

# (type, default, help) per flat config key; the single source of truth.
CONFIG_SCHEMA: dict[str, tuple] = {
    "model.model_dim":        (int, 64, "encoder width d"),
    "model.ffn_dim":          (int, 256, "feed-forward width"),
    "model.num_heads":        (int, 4, "attention heads"),
    "model.num_blocks":       (int, 4, "encoder blocks"),
    "model.conv_downsample":  (int, 4, "frontend frame-rate reduction"),
    "model.taee_dim":         (int, 64, "token-embedding extractor width"),
    "model.taee_ffn":         (int, 256, "extractor feed-forward width"),
    "model.taee_heads":       (int, 4, "extractor attention heads"),
    "model.vocab_size":       (int, 0, "real tokens; 0 = infer from vocab file"),
    "model.feat_dim":         (int, 0, "input feature dim; 0 = infer from data"),
    "model.max_frames":       (int, 4096, "positional-table capacity"),
    "model.dropout":          (float, 0.1, "training dropout rate"),
    "train.warmup_steps":     (int, 100, "noam warmup steps"),
    "train.peak_lr_encoder":  (float, 3e-3, "peak lr, frontend+encoder group"),
    "train.peak_lr_new_modules": (float, 3e-3, "peak lr, extractor+heads group"),
    "train.batch_frame_budget": (int, 1200, "raw frames per batch"),
    "train.max_epochs":       (int, 30, "epoch cap"),
    "train.early_stop_patience": (int, 10, "epochs without valid improvement"),
    "train.grad_clip_norm":   (float, 5.0, "global gradient-norm clip"),
    "train.seed":             (int, 0, "training rng seed"),
    "train.valid_fraction":   (float, 0.1, "held-out share when no --valid dir"),
    "loss.lambda1":           (float, 1.0, "first-pass CTC weight"),
    "loss.lambda2":           (float, 1.0, "second-pass CTC weight"),
    "loss.label_smoothing":   (float, 0.0, "CE label smoothing"),
    "decode.schedule":        (str, "25,2", "samples per iteration S1,..,SN"),
    "decode.threshold":       (float, 0.9, "greedy-confidence threshold"),
    "data.vocab_size":        (int, 20, "synthetic real tokens"),
    "data.feat_dim":          (int, 16, "synthetic feature dim"),
    "data.frames_per_token_min": (int, 2, "min frames per token"),
    "data.frames_per_token_max": (int, 5, "max frames per token"),
    "data.silence_run_min":   (int, 0, "min silence frames between tokens"),
    "data.silence_run_max":   (int, 3, "max silence frames between tokens"),
    "data.tokens_per_utt_min": (int, 3, "min tokens per utterance"),
    "data.tokens_per_utt_max": (int, 8, "max tokens per utterance"),
    "data.noise_scale":       (float, 0.3, "frame noise sigma"),
}


def default_config() -> dict:
    return {key: spec[1] for key, spec in CONFIG_SCHEMA.items()}


def _coerce(key: str, raw: str):
    if key not in CONFIG_SCHEMA:
        raise UsageError(f"unknown config key {key!r}")
    kind = CONFIG_SCHEMA[key][0]
    try:
        return kind(raw)
    except ValueError:
        raise UsageError(
            f"config key {key!r} expects {kind.__name__}, got {raw!r}") from None


def parse_config_file(path) -> dict:
    cfg = {}
    for line_no, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(),
                                   start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise UsageError(f"{path}:{line_no}: expected 'key = value'")
        key, raw = (part.strip() for part in stripped.split("=", 1))
        cfg[key] = _coerce(key, raw)
    return cfg


def resolve_config(config_path=None, set_flags=()) -> dict:
    cfg = default_config()
    if config_path is not None:
        cfg.update(parse_config_file(config_path))
    for flag in set_flags or ():
        if "=" not in flag:
            raise UsageError(f"--set expects key=value, got {flag!r}")
        key, raw = flag.split("=", 1)
        cfg[key.strip()] = _coerce(key.strip(), raw.strip())
    return cfg


def config_help_table() -> str:
    lines = ["configuration keys (key = default  # description):"]
    for key, (kind, default, help_text) in CONFIG_SCHEMA.items():
        lines.append(f"  {key} = {default}  # [{kind.__name__}] {help_text}")
    return "\n".join(lines)


def synth_spec_from_config(cfg: dict, seed: int) -> data_mod.SynthTaskSpec:
    return data_mod.SynthTaskSpec(
        vocab_size=cfg["data.vocab_size"],
        feat_dim=cfg["data.feat_dim"],
        frames_per_token=(cfg["data.frames_per_token_min"], cfg["data.frames_per_token_max"]),
        silence_run=(cfg["data.silence_run_min"], cfg["data.silence_run_max"]),
        tokens_per_utt=(cfg["data.tokens_per_utt_min"], cfg["data.tokens_per_utt_max"]),
        noise_scale=cfg["data.noise_scale"],
        seed=seed)


def model_config_from(cfg: dict, vocab_size: int, feat_dim: int) -> ModelConfig:
    return ModelConfig(
        model_dim=cfg["model.model_dim"], ffn_dim=cfg["model.ffn_dim"],
        num_heads=cfg["model.num_heads"], num_blocks=cfg["model.num_blocks"],
        conv_downsample=cfg["model.conv_downsample"], taee_dim=cfg["model.taee_dim"],
        taee_ffn=cfg["model.taee_ffn"], taee_heads=cfg["model.taee_heads"],
        vocab_size=cfg["model.vocab_size"] or vocab_size,
        feat_dim=cfg["model.feat_dim"] or feat_dim,
        max_frames=cfg["model.max_frames"], dropout=cfg["model.dropout"])


def train_config_from(cfg: dict) -> TrainConfig:
    return TrainConfig(
        warmup_steps=cfg["train.warmup_steps"],
        peak_lr_encoder=cfg["train.peak_lr_encoder"],
        peak_lr_new_modules=cfg["train.peak_lr_new_modules"],
        batch_frame_budget=cfg["train.batch_frame_budget"],
        max_epochs=cfg["train.max_epochs"],
        early_stop_patience=cfg["train.early_stop_patience"],
        grad_clip_norm=cfg["train.grad_clip_norm"],
        seed=cfg["train.seed"])


def loss_weights_from(cfg: dict) -> LossWeights:
    return LossWeights(lambda1=cfg["loss.lambda1"], lambda2=cfg["loss.lambda2"],
                       label_smoothing=cfg["loss.label_smoothing"])


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_synth(args) -> int:
    out = Path(args.out)
    if out.exists() and any(out.iterdir()) and not args.force:
        raise UsageError(f"output dir {out} is not empty; pass --force to overwrite")
    cfg = resolve_config(None, args.set)
    spec = synth_spec_from_config(cfg, args.seed)
    utterances, vocab = data_mod.synth_generate(spec, args.num_utts,
                                                start_index=args.start_index)
    data_mod.write_dataset(utterances, vocab, out)
    print(f"wrote {len(utterances)} utterances to {out}")
    return 0


def _split_train_valid(utterances, fraction: float):
    if not 0.0 < fraction < 1.0:
        raise UsageError(f"valid fraction must lie in (0, 1), got {fraction}")
    stride = max(2, round(1.0 / fraction))
    valid = [u for i, u in enumerate(utterances) if i % stride == 0]
    train = [u for i, u in enumerate(utterances) if i % stride != 0]
    return train, valid


def cmd_train(args) -> int:
    cfg = resolve_config(args.config, args.set)
    utterances, vocab = data_mod.load_dataset(args.data)
    if not utterances:
        raise DataIntegrityError(f"dataset at {args.data} is empty")
    feat_dim = utterances[0].features.shape[1]
    if args.valid:
        valid, _ = data_mod.load_dataset(args.valid)
        train_set = utterances
    else:
        train_set, valid = _split_train_valid(utterances, cfg["train.valid_fraction"])

    if args.resume:
        bundle = load_checkpoint(args.resume)
        model = bundle.model
    else:
        bundle = None
        model = UniEncModel(model_config_from(cfg, vocab.size, feat_dim),
                            seed=cfg["train.seed"])
    result = fit(model, train_set, valid, train_config_from(cfg),
                 loss_weights_from(cfg), out_dir=args.out, resume=bundle)
    if result.skipped_utterances:
        print(f"skipped {result.skipped_utterances} infeasible utterance passes")
    print(f"stopped: {result.stopped} after {len(result.records)} epochs "
          f"(step {result.final_step}); best valid WER {result.best_valid_wer:.4f} "
          f"at epoch {result.best_epoch}")
    if result.stopped == "diverged":
        raise NumericalError("training diverged; last good checkpoint kept")
    if not (Path(args.out) / "best.ckpt").exists():
        save_checkpoint(model, Path(args.out) / "best.ckpt")
    return 0


def _needs_seed(schedule: DecodeSchedule) -> bool:
    return any(s > 1 and t < 1.0
               for s, t in zip(schedule.samples_per_iteration, schedule.thresholds))


def _utt_seed(base: int, index: int) -> int:
    return int(np.random.SeedSequence(entropy=base, spawn_key=(index,)).generate_state(1)[0])


def _decode_one(payload):
    model, utt, schedule, seed, greedy = payload
    if greedy:
        return utt.utt_id, [decode_greedy_ctc(model, utt.features)]
    return utt.utt_id, decode_utterance(model, utt.features, schedule, seed=seed)


def cmd_decode(args) -> int:
    bundle = load_checkpoint(args.checkpoint)
    model = bundle.model
    vocab_path = Path(args.vocab) if args.vocab else Path(args.manifest).parent / "vocab.txt"
    vocab = data_mod.load_vocab(vocab_path)
    utterances = data_mod.load_manifest(args.manifest, vocab)
    schedule = DecodeSchedule.parse(args.schedule, threshold=args.threshold)
    if not args.greedy and _needs_seed(schedule) and args.seed is None:
        raise UsageError("--seed is required when the schedule actually samples "
                         "(some S_n > 1 with threshold < 1)")
    seed = args.seed if args.seed is not None else 0

    jobs = [(model, utt, schedule, _utt_seed(seed, i), args.greedy)
            for i, utt in enumerate(utterances)]
    start = time.perf_counter()
    if args.jobs > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            results = list(pool.map(_decode_one, jobs))
    else:
        results = [_decode_one(j) for j in jobs]
    wall = time.perf_counter() - start

    out_lines = []
    nbest_lines = []
    for utt_id, hyps in results:
        best = hyps[0]
        out_lines.append(f"{utt_id}\t{data_mod.detokenize(best.tokens, vocab)}")
        for r, hyp in enumerate(hyps):
            trace = ",".join(str(i) for i in hyp.trace)
            nbest_lines.append(f"{utt_id}\t{r}\t{hyp.score:.6f}\t{trace}\t"
                               f"{data_mod.detokenize(hyp.tokens, vocab)}")
    Path(args.out).write_text("\n".join(out_lines) + ("\n" if out_lines else ""),
                              encoding="utf-8")
    if args.nbest:
        Path(args.nbest).write_text("\n".join(nbest_lines) + ("\n" if nbest_lines else ""),
                                    encoding="utf-8")
    audio = sum(u.duration for u in utterances)
    report = evaluation.RtfReport(wall_seconds=wall, audio_seconds=audio)
    print(report.summary())
    return 0


def _read_ref_manifest(path) -> dict:
    refs = {}
    for line_no, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(),
                                   start=1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 5:
            raise ParseError(f"{path}:{line_no}: expected 5 fields, got {len(parts)}")
        refs[parts[0]] = parts[4].split()
    return refs


def _read_hyp_file(path) -> dict:
    hyps = {}
    for line_no, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(),
                                   start=1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise ParseError(f"{path}:{line_no}: expected 'id<TAB>transcript'")
        hyps[parts[0]] = parts[1].split()
    return hyps


def cmd_eval(args) -> int:
    refs = _read_ref_manifest(args.ref)
    hyps = _read_hyp_file(args.hyp)
    report = evaluation.wer(refs, hyps)
    print(report.block())
    if args.per_utt:
        lines = [f"{utt_id}\t{s.substitutions}\t{s.deletions}\t{s.insertions}\t{s.ref_len}"
                 for utt_id, s in sorted(report.per_utterance.items())]
        Path(args.per_utt).write_text("\n".join(lines) + ("\n" if lines else ""),
                                      encoding="utf-8")
    return 0


def _parse_dims(text: str) -> dict:
    known = {"d": 8, "blocks": 2, "heads": 2, "taee": 8, "taee_heads": 2,
             "ffn": 16, "taee_ffn": 16, "downsample": 2, "feat": 4, "vocab": 5}
    for part in text.split(","):
        if not part.strip():
            continue
        if "=" not in part:
            raise UsageError(f"--dims expects k=v pairs, got {part!r}")
        key, raw = (p.strip() for p in part.split("=", 1))
        if key not in known:
            raise UsageError(f"unknown dim {key!r}; known: {sorted(known)}")
        known[key] = int(raw)
    return known


def cmd_gradcheck(args) -> int:
    dims = _parse_dims(args.dims)
    config = ModelConfig(
        model_dim=dims["d"], ffn_dim=dims["ffn"], num_heads=dims["heads"],
        num_blocks=dims["blocks"], conv_downsample=dims["downsample"],
        taee_dim=dims["taee"], taee_ffn=dims["taee_ffn"], taee_heads=dims["taee_heads"],
        vocab_size=dims["vocab"], feat_dim=dims["feat"], dropout=0.0)
    weights = LossWeights(lambda1=1.0, lambda2=1.0)
    worst = 0.0
    for trial in range(args.trials):
        seed = args.seed + trial
        model = UniEncModel(config, seed=seed)
        rng = np.random.default_rng(seed + 1000)
        raw_frames = 12 * config.conv_downsample
        features = rng.uniform(-1.0, 1.0, size=(raw_frames, config.feat_dim))
        target = rng.integers(1, config.vocab_size + 1, size=3).tolist()

        with GradTape() as tape:
            result = joint_loss(model, features, target, weights)
            backward(tape, result.total)
        params = list(model.params.values())
        analytic = [p.grad if p.grad is not None else np.zeros_like(p.data)
                    for p in params]

        def loss_value() -> float:
            return joint_loss(model, features, target, weights).total.item()

        numeric = finite_diff_grad(loss_value, params, eps=args.eps)
        trial_worst = max(relative_error(a, n) for a, n in zip(analytic, numeric))
        worst = max(worst, trial_worst)
        print(f"trial {trial}: worst relative error {trial_worst:.3e}")
        for p in params:
            p.grad = None
    print(f"worst relative error {worst:.3e} (threshold 1e-3)")
    if worst > 1e-3:
        raise NumericalError(f"gradient check failed: {worst:.3e} > 1e-3")
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="unienc",
                     description="shared-encoder two-pass non-autoregressive ASR, desk scale")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[], help="generate a synthetic dataset",
                       epilog=config_help_table(),
                       formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--num-utts", type=int, required=True)
    p.add_argument("--seed", type=int, default=0, help="task seed (also fixes token means)")
    p.add_argument("--start-index", type=int, default=0,
                   help="first utterance index; disjoint ranges of one seed share the task")
    p.add_argument("--force", action="store_true", help="overwrite a non-empty directory")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override a data.* config key")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train on a dataset directory",
                       epilog=config_help_table(),
                       formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--config", help="flat dotted-key config file")
    p.add_argument("--data", required=True, help="dataset directory (manifest+vocab)")
    p.add_argument("--out", required=True, help="run directory (logs, checkpoints)")
    p.add_argument("--valid", help="separate validation dataset directory")
    p.add_argument("--resume", help="checkpoint to resume from")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override any config key")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("decode", help="decode a manifest with a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--vocab", help="vocab path (default: vocab.txt next to manifest)")
    p.add_argument("--schedule", default="25,2", help="samples per iteration, e.g. 25,2")
    p.add_argument("--threshold", type=float, default=0.9)
    p.add_argument("--seed", type=int, default=None,
                   help="sampling seed; mandatory when the schedule samples")
    p.add_argument("--out", required=True, help="hypothesis TSV path")
    p.add_argument("--nbest", help="optional n-best sidecar path")
    p.add_argument("--greedy", action="store_true", help="greedy CTC baseline instead")
    p.add_argument("--jobs", type=int, default=1, help="parallel decode processes")
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("eval", help="score hypotheses against a reference manifest")
    p.add_argument("--ref", required=True, help="reference manifest")
    p.add_argument("--hyp", required=True, help="hypothesis TSV from decode")
    p.add_argument("--per-utt", help="optional per-utterance TSV output")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="compare backward against finite differences")
    p.add_argument("--dims", default="d=8,blocks=2", help="k=v list, e.g. d=8,blocks=2")
    p.add_argument("--eps", type=float, default=1e-5)
    p.add_argument("--trials", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    level = os.environ.get("UNIENC_LOG_LEVEL", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except (ParseError, DataIntegrityError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3
    except (ContractViolation, DomainError) as exc:
        print(f"invalid request: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
