"""Command-line surface: corpus generation, augmentation, training, dubbing,
and evaluation as subcommands over shared config.

Exit codes: 0 success, 1 runtime failure (single-line error on stderr),
2 usage error. All randomness flows from --seed; worker threads are capped
by PRODUB_NUM_WORKERS.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import augment as augment_mod
from . import corpus as corpus_mod
from . import evaluation, training
from .adapting import load_visual
from .config import load_train_config
from .errors import InvalidArgumentError, ProdubError
from .signal_core import load_waveform, save_waveform


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    # flag names mirror TrainConfig keys; None means "not overridden"
    p.add_argument("--config", type=Path, default=None, help="key=value config file")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--batch-size", dest="batch_size", type=int, default=None)
    p.add_argument("--d-m", dest="d_m", type=int, default=None)
    p.add_argument("--n-head", dest="n_head", type=int, default=None)
    p.add_argument("--diffusion-steps", dest="diffusion_steps", type=int, default=None)
    p.add_argument("--log", type=Path, default=None, help="per-step TSV training log")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="produb")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-corpus", help="generate a synthetic corpus")
    p.add_argument("--kind", choices=("speech", "dub"), default="speech")
    p.add_argument("--speakers", type=int, default=4)
    p.add_argument("--utts", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--d-m", dest="d_m", type=int, default=128,
                   help="visual feature width (dub corpora)")
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("augment", help="apply the prosody enhancement policy")
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--ratio", type=float, default=0.03)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("pretrain", help="stage-I acoustic pre-training")
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--seed", type=int, default=0)
    _add_train_flags(p)

    p = sub.add_parser("adapt", help="stage-II prosody adaptation")
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--acoustic", type=Path, required=True,
                   help="stage-I checkpoint to freeze")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--seed", type=int, default=0)
    _add_train_flags(p)

    p = sub.add_parser("dub", help="synthesize dubbing for one clip")
    p.add_argument("--clip", type=Path, required=True, help="PDVIS1 visual file")
    p.add_argument("--ref", type=Path, required=True, help="reference wav")
    p.add_argument("--script", required=True,
                   help="comma-separated phoneme ids, or a file of ids")
    p.add_argument("--ckpt", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("eval", help="objective metrics over a manifest")
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--setting", choices=evaluation.SETTINGS, required=True)
    p.add_argument("--ckpt", type=Path, required=True)
    p.add_argument("--out", type=Path, default=Path("report.tsv"))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--ref-pool", type=Path, default=None,
                   help="directory of wav files for the zero_shot setting")
    return parser


def _parse_script(spec: str) -> np.ndarray:
    path = Path(spec)
    text = path.read_text() if path.exists() else spec
    try:
        ids = [int(v) for v in text.replace(",", " ").split()]
    except ValueError as exc:
        raise InvalidArgumentError(f"cannot parse script {spec!r}") from exc
    if not ids:
        raise InvalidArgumentError("script contains no phoneme ids")
    return np.asarray(ids, dtype=np.int64)


def _train_overrides(args) -> dict:
    keys = ("epochs", "lr", "batch_size", "d_m", "n_head", "diffusion_steps", "seed")
    return {k: getattr(args, k, None) for k in keys}


def _cmd_gen_corpus(args) -> int:
    if args.kind == "speech":
        manifest = corpus_mod.generate_speech_corpus(args.speakers, args.utts,
                                                     args.seed, args.out)
    else:
        manifest = corpus_mod.generate_dub_corpus(args.speakers, args.utts,
                                                  args.seed, args.out, d_m=args.d_m)
    print(manifest)
    return 0


def _cmd_augment(args) -> int:
    policy = augment_mod.EnhancementPolicy(ratio=args.ratio, seed=args.seed)
    records = list(corpus_mod.ingest_manifest(args.manifest))
    augmented = augment_mod.apply_policy(records, policy)
    manifest = corpus_mod.write_corpus(augmented, args.out)
    n_aug = sum(1 for r in augmented if r.augmentation is not None)
    print(f"{manifest} ({n_aug}/{len(augmented)} augmented)")
    return 0


def _cmd_pretrain(args) -> int:
    cfg = load_train_config(args.config, {**_train_overrides(args), "stage": "pretrain"})
    records = list(corpus_mod.ingest_manifest(args.manifest))
    ckpt = training.pretrain(records, cfg, log_path=args.log)
    args.out.parent.mkdir(parents=True, exist_ok=True)
    training.save_checkpoint(ckpt, args.out)
    print(f"{args.out} (final loss {ckpt.history[-1]['loss']:.4f})"
          if ckpt.history else str(args.out))
    return 0


def _cmd_adapt(args) -> int:
    cfg = load_train_config(args.config, {**_train_overrides(args), "stage": "adapt"})
    acoustic_ckpt = training.load_checkpoint(args.acoustic)
    records = list(corpus_mod.ingest_manifest(args.manifest))
    ckpt = training.adapt(records, acoustic_ckpt, cfg, log_path=args.log)
    args.out.parent.mkdir(parents=True, exist_ok=True)
    training.save_checkpoint(ckpt, args.out)
    print(f"{args.out} (acoustic hash {ckpt.acoustic_hash[:12]} unchanged)")
    return 0


def _cmd_dub(args) -> int:
    ckpt = training.load_checkpoint(args.ckpt)
    model = ckpt.build_model()
    script = _parse_script(args.script)
    reference = load_waveform(args.ref)
    visual = load_visual(args.clip)
    t0 = time.perf_counter()
    details = model.synthesize_details(script, reference, visual, seed=args.seed)
    wave = model.synthesize_dub(script, reference, visual, seed=args.seed)
    args.out.parent.mkdir(parents=True, exist_ok=True)
    save_waveform(args.out, wave)
    sidecar = {
        "clip": str(args.clip),
        "reference": str(args.ref),
        "seed": args.seed,
        "phonemes": [int(v) for v in script],
        "durations": [int(v) for v in details["durations"]],
        "mel_frames": details["mel"].n_frames,
        "samples": len(wave),
        "elapsed_seconds": round(time.perf_counter() - t0, 3),
    }
    Path(f"{args.out}.log").write_text(json.dumps(sidecar, indent=2) + "\n")
    print(f"{args.out} ({len(wave)} samples)")
    return 0


def _cmd_eval(args) -> int:
    ckpt = training.load_checkpoint(args.ckpt)
    model = ckpt.build_model()
    ref_pool = None
    if args.ref_pool is not None:
        ref_pool = sorted(args.ref_pool.glob("*.wav"))
        if not ref_pool:
            raise InvalidArgumentError(f"no wav files in ref pool {args.ref_pool}")
    report = evaluation.evaluate_corpus(args.manifest, model, args.setting,
                                        seed=args.seed, ref_pool=ref_pool)
    evaluation.write_report(report, args.out)
    means = report.means
    print(f"{args.out}\tmcd_dtw={means['mcd_dtw']:.3f}\t"
          f"mcd_dtw_sl={means['mcd_dtw_sl']:.3f}\tsecs={100 * means['secs']:.2f}%\t"
          f"duration_error={means['duration_error']:.3f}")
    return 0


_COMMANDS = {
    "gen-corpus": _cmd_gen_corpus,
    "augment": _cmd_augment,
    "pretrain": _cmd_pretrain,
    "adapt": _cmd_adapt,
    "dub": _cmd_dub,
    "eval": _cmd_eval,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except (ProdubError, OSError) as exc:
        print(f"error: {args.command}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
