"""Command-line entry point: ``sxlnet {gen-data,pretrain,finetune,landscape,attn-dump}``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from .analysis import LandscapeError, dump_attention, loss_landscape, write_attention_dump, write_landscape
from .features import (CmvnStats, FeatureFormatError, FeatureSequence, LabeledCorpus, apply_cmvn,
                       compute_global_cmvn, gen_synthetic, load_features, load_labels, save_features, save_labels,
                       stack_frames, stack_labels)
from .model import PRESETS, ModelConfig, init_params
from .optim import Schedule
from .permutation import build_masks, permutation_rng, sample_permutation
from .trainer import (Checkpoint, CheckpointError, NumericalError, TrainConfig, finetune, finetune_init,
                      load_checkpoint, pretrain, save_checkpoint, write_metrics_csv)

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 2, 3

log = logging.getLogger("sxlnet")


class UsageError(Exception):
    pass


# flags generated from config dataclasses; these are handled by hand
_MODEL_SKIP = {"pos_encoding"}
_TRAIN_SKIP = {"mode", "schedule", "freeze", "init_from", "perm_mode"}


def _flag(name: str) -> str:
    return "--" + name.replace("_", "-")


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("model (override --config)")
    for f in fields(ModelConfig):
        if f.name not in _MODEL_SKIP:
            g.add_argument(_flag(f.name), dest=f"model.{f.name}", type=type(f.default), default=None)
    g = p.add_argument_group("training (override --config)")
    for f in fields(TrainConfig):
        if f.name not in _TRAIN_SKIP:
            g.add_argument(_flag(f.name), dest=f"train.{f.name}", type=type(f.default), default=None)
    g.add_argument("--perm", dest="train.perm_mode", choices=["random", "identity"], default=None,
                   help="identity = left-to-right (no permutation) ablation")
    g.add_argument("--freeze", dest="train.freeze", action="append", default=None, metavar="PATTERN")
    s = p.add_argument_group("schedule")
    s.add_argument("--schedule", dest="schedule.kind", choices=["linear_warmup_decay", "noam"], default=None)
    s.add_argument("--warmup-steps", dest="schedule.warmup_steps", type=int, default=None)
    s.add_argument("--peak-lr", dest="schedule.peak_lr", type=float, default=None)
    s.add_argument("--noam-k", dest="schedule.k", type=float, default=None)
    s.add_argument("--paper-exact-noam", dest="schedule.paper_exact", action="store_true", default=None,
                   help="use d_model**+0.5 in the noam schedule instead of the usual -0.5")
    p.add_argument("--preset", choices=sorted(PRESETS), default=None, help="model preset (before overrides)")
    p.add_argument("--config", type=Path, default=None, help='JSON file: {"model": {...}, "train": {...}}')
    p.add_argument("--stack", type=int, default=1)
    p.add_argument("--skip", type=int, default=1)
    p.add_argument("--no-cmvn", action="store_true")
    p.add_argument("--out", type=Path, required=True)


def _effective_config(args, mode: str, feature_dim: int | None, num_classes: int | None,
                      base_model: ModelConfig | None = None) -> tuple[ModelConfig, TrainConfig]:
    """Preset (or ``base_model``) < config file < command-line flags."""
    file_cfg = {}
    if args.config is not None:
        try:
            file_cfg = json.loads(args.config.read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise UsageError(f"cannot read config {args.config}: {e}") from None
        unknown = set(file_cfg) - {"model", "train", "preset"}
        if unknown:
            raise UsageError(f"unknown config sections: {sorted(unknown)}")
    preset = args.preset or file_cfg.get("preset")
    if base_model is not None and preset is None:
        model = base_model.to_dict()
    else:
        model = PRESETS[preset or "toy"].to_dict()
    if feature_dim is not None:
        model["F_in"] = feature_dim
    if num_classes is not None:
        model["C_out"] = num_classes
    model.update(file_cfg.get("model", {}))
    train = dict(file_cfg.get("train", {}))
    sched = dict(train.pop("schedule", {}) or {})
    flags = vars(args)
    for key, value in flags.items():
        if value is None or "." not in key:
            continue
        section, name = key.split(".", 1)
        if section == "model":
            model[name] = value
        elif section == "train":
            train[name] = value
        else:
            sched[name] = value
    train["mode"] = mode
    if "init_from" in flags and mode == "finetune":
        train["init_from"] = flags["init_from"]
    paper_exact = sched.pop("paper_exact", None)
    try:
        mcfg = ModelConfig.from_dict(model)
        total = train.get("total_steps", TrainConfig.total_steps)
        base = {"kind": "linear_warmup_decay", "warmup_steps": max(1, total // 10), "total_steps": total,
                "peak_lr": 1e-3, "d_model": mcfg.d_model}
        base.update(sched)
        base["total_steps"] = total
        if base["kind"] == "noam":
            base["d_model"] = mcfg.d_model
            if paper_exact:
                base["exponent"] = 0.5
        train["schedule"] = Schedule.from_dict(base)
        tcfg = TrainConfig.from_dict(train)
    except (TypeError, ValueError) as e:
        raise UsageError(f"bad configuration: {e}") from None
    return mcfg, tcfg


def _echo_config(out: Path, mcfg: ModelConfig, tcfg: TrainConfig, extra: dict) -> None:
    out.mkdir(parents=True, exist_ok=True)
    doc = {"model": mcfg.to_dict(), "train": tcfg.to_dict(), **extra}
    (out / "config.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _prepare(seqs: list[FeatureSequence], cmvn: CmvnStats | None, stack: int, skip: int) -> list[FeatureSequence]:
    if cmvn is not None:
        seqs = [apply_cmvn(s, cmvn) for s in seqs]
    if stack != 1 or skip != 1:
        seqs = [stack_frames(s, stack, skip) for s in seqs]
    return seqs


def _read_features(path: Path) -> list[FeatureSequence]:
    if not path.exists():
        raise UsageError(f"missing input {path}")
    return load_features(path)


def _read_checkpoint(path: Path) -> Checkpoint:
    if not Path(path).exists():
        raise UsageError(f"missing checkpoint {path}")
    return load_checkpoint(path)


def _cmvn_from(ckpt: Checkpoint | None, seqs, disabled: bool) -> CmvnStats | None:
    if disabled:
        return None
    if ckpt is not None and "cmvn" in ckpt.meta:
        return CmvnStats.from_dict(ckpt.meta["cmvn"])
    return compute_global_cmvn(seqs)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def run_gen_data(args) -> int:
    if args.utts < 1:
        raise UsageError("--utts must be >= 1")
    if args.classes < 1 or args.dim < 1 or not 1 <= args.min_frames <= args.max_frames:
        raise UsageError("need --classes >= 1, --dim >= 1 and 1 <= --min-frames <= --max-frames")
    corpus = gen_synthetic(args.utts, (args.min_frames, args.max_frames), args.dim, args.classes, args.seed,
                           world_seed=args.world_seed, stay_prob=args.stay_prob, noise=args.noise)
    args.out.mkdir(parents=True, exist_ok=True)
    save_features(corpus.sequences, args.out / "features.sxlf")
    save_labels(corpus.labels, args.out / "labels.sxll")
    frames = sum(s.num_frames for s in corpus.sequences)
    print(f"wrote {len(corpus)} utterances, {frames} frames, {corpus.num_classes} classes to {args.out}")
    return EXIT_OK


def run_pretrain(args) -> int:
    seqs = _read_features(args.data)
    cmvn = _cmvn_from(None, seqs, args.no_cmvn)
    seqs = _prepare(seqs, cmvn, args.stack, args.skip)
    mcfg, tcfg = _effective_config(args, "pretrain", seqs[0].dim, None)
    extra = {"data": str(args.data), "stack": args.stack, "skip": args.skip, "use_cmvn": not args.no_cmvn}
    _echo_config(args.out, mcfg, tcfg, extra)
    ckpt = pretrain(seqs, tcfg, mcfg)
    if cmvn is not None:
        ckpt.meta["cmvn"] = cmvn.to_dict()
    ckpt.meta.update(extra)
    start = Checkpoint(mcfg, init_params(mcfg, tcfg.seed, np.dtype(tcfg.dtype)), 0,
                       meta={"mode": "pretrain_init", **{k: v for k, v in ckpt.meta.items() if k != "mode"}})
    save_checkpoint(start, args.out / "init.sxck")
    save_checkpoint(ckpt, args.out / "checkpoint.sxck")
    write_metrics_csv(ckpt.history, args.out / "metrics.csv")
    losses = [r[3] for r in ckpt.history if r[2] == "huber"]
    print(f"pretrain: {ckpt.step} steps, huber {losses[0]:.4f} -> {losses[-1]:.4f}")
    return EXIT_OK


def _labelled(features: Path, labels: Path) -> tuple[list[FeatureSequence], list[np.ndarray]]:
    seqs = _read_features(features)
    if not labels.exists():
        raise UsageError(f"missing input {labels}")
    labs = load_labels(labels)
    if len(labs) != len(seqs):
        raise UsageError(f"{features} has {len(seqs)} utterances but {labels} has {len(labs)}")
    return seqs, labs


def run_finetune(args) -> int:
    init = None
    if args.init_from not in (None, "none", ""):
        init = _read_checkpoint(Path(args.init_from))
    seqs, labs = _labelled(args.data, args.labels)
    cmvn = _cmvn_from(init, seqs, args.no_cmvn)
    prepared = _prepare(seqs, cmvn, args.stack, args.skip)
    if args.skip != 1:
        labs = [stack_labels(lab, args.skip) for lab in labs]
    num_classes = int(max(int(lab.max()) for lab in labs)) + 1
    corpus = LabeledCorpus(prepared, labs, num_classes)
    dev = None
    if args.dev_data is not None:
        if args.dev_labels is None:
            raise UsageError("--dev-data needs --dev-labels")
        dseqs, dlabs = _labelled(args.dev_data, args.dev_labels)
        if args.skip != 1:
            dlabs = [stack_labels(lab, args.skip) for lab in dlabs]
        dev = LabeledCorpus(_prepare(dseqs, cmvn, args.stack, args.skip), dlabs, num_classes)
    # with --init-from the encoder architecture defaults to the checkpoint's
    base = init.model_config if init is not None else None
    mcfg, tcfg = _effective_config(args, "finetune", prepared[0].dim, num_classes, base_model=base)
    extra = {"data": str(args.data), "labels": str(args.labels), "stack": args.stack, "skip": args.skip,
             "use_cmvn": not args.no_cmvn, "init_from": args.init_from or "none"}
    _echo_config(args.out, mcfg, tcfg, extra)
    ckpt, metrics = finetune(corpus, tcfg, mcfg, dev=dev, init=init)
    start = Checkpoint(mcfg, finetune_init(mcfg, tcfg, init), 0,
                       meta={"mode": "finetune_init", "init_from": args.init_from or "none"})
    for c in (ckpt, start):
        if cmvn is not None:
            c.meta["cmvn"] = cmvn.to_dict()
        c.meta.update({"stack": args.stack, "skip": args.skip})
    # the starting point is the natural theta0 for the landscape command
    save_checkpoint(start, args.out / "init.sxck")
    save_checkpoint(ckpt, args.out / "checkpoint.sxck")
    write_metrics_csv(ckpt.history, args.out / "metrics.csv")
    print(f"finetune: {ckpt.step} steps, dev ce {metrics.get('ce', float('nan')):.4f}, "
          f"frame accuracy {metrics.get('frame_accuracy', float('nan')):.4f}")
    return EXIT_OK


def run_landscape(args) -> int:
    ck0 = _read_checkpoint(args.ckpt0)
    ck1 = _read_checkpoint(args.ckpt1)
    seqs = _read_features(args.data)
    cmvn = _cmvn_from(ck1, seqs, args.no_cmvn)
    stack, skip = ck1.meta.get("stack", 1), ck1.meta.get("skip", 1)
    seqs = _prepare(seqs, cmvn, stack, skip)
    if args.labels is not None:
        if not args.labels.exists():
            raise UsageError(f"missing input {args.labels}")
        labs = [stack_labels(lab, skip) for lab in load_labels(args.labels)]
        dataset = LabeledCorpus(seqs, labs, ck1.model_config.C_out)
    else:
        dataset = seqs
    frozen = args.freeze if args.freeze is not None else ["cls_head.*"]
    curve = loss_landscape(ck0, ck1, dataset, args.alpha_min, args.alpha_max, args.points, frozen)
    args.out.mkdir(parents=True, exist_ok=True)
    curve.metadata.update({"ckpt0": str(args.ckpt0), "ckpt1": str(args.ckpt1), "data": str(args.data)})
    write_landscape(curve, args.out / "landscape.csv", args.out / "landscape.json")
    print(f"landscape: {len(curve.alphas)} points over [{curve.alphas[0]}, {curve.alphas[-1]}]")
    return EXIT_OK


def run_attn_dump(args) -> int:
    ckpt = _read_checkpoint(args.ckpt)
    seqs = _read_features(args.data)
    cmvn = _cmvn_from(ckpt, seqs, args.no_cmvn)
    seqs = _prepare(seqs, cmvn, ckpt.meta.get("stack", 1), ckpt.meta.get("skip", 1))
    if not 0 <= args.utt < len(seqs):
        raise UsageError(f"--utt {args.utt} out of range (corpus has {len(seqs)} utterances)")
    seq = seqs[args.utt]
    masks = None
    if args.mode == "pretrain":
        perm = sample_permutation(seq.num_frames, args.perm, permutation_rng(args.seed, 0, args.utt))
        masks = build_masks(perm, args.fraction)
    dump = dump_attention(ckpt, seq, args.mode, masks)
    files = write_attention_dump(dump, args.out)
    print(f"attn-dump: wrote {len(files) - 1} matrices for {seq.utterance_id} (T={seq.num_frames})")
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sxlnet", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a synthetic labelled corpus")
    p.add_argument("--utts", type=int, default=100)
    p.add_argument("--classes", type=int, default=6)
    p.add_argument("--dim", type=int, default=40)
    p.add_argument("--min-frames", type=int, default=20)
    p.add_argument("--max-frames", type=int, default=60)
    p.add_argument("--noise", type=float, default=1.5)
    p.add_argument("--stay-prob", type=float, default=0.9)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--world-seed", type=int, default=0)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=run_gen_data)

    p = sub.add_parser("pretrain", help="permutation pretraining on unlabelled features")
    p.add_argument("--data", type=Path, required=True)
    _add_config_flags(p)
    p.set_defaults(func=run_pretrain)

    p = sub.add_parser("finetune", help="frame-level CE finetuning")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--labels", type=Path, required=True)
    p.add_argument("--dev-data", type=Path, default=None)
    p.add_argument("--dev-labels", type=Path, default=None)
    p.add_argument("--init-from", default="none", help="pretrained checkpoint or 'none'")
    _add_config_flags(p)
    p.set_defaults(func=run_finetune)

    p = sub.add_parser("landscape", help="loss along theta0 -> theta1")
    p.add_argument("--ckpt0", type=Path, required=True)
    p.add_argument("--ckpt1", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--labels", type=Path, default=None, help="labels switch the loss to CE")
    p.add_argument("--alpha-min", type=float, default=-4.0)
    p.add_argument("--alpha-max", type=float, default=4.0)
    p.add_argument("--points", type=int, default=40)
    p.add_argument("--freeze", action="append", default=None, metavar="PATTERN",
                   help="parameters held at ckpt1 values (default: cls_head.*)")
    p.add_argument("--no-cmvn", action="store_true")
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=run_landscape)

    p = sub.add_parser("attn-dump", help="write attention probabilities for one utterance")
    p.add_argument("--ckpt", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--utt", type=int, default=0)
    p.add_argument("--mode", choices=["finetune", "pretrain"], default="finetune")
    p.add_argument("--perm", choices=["random", "identity"], default="random")
    p.add_argument("--fraction", type=float, default=0.2)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--no-cmvn", action="store_true")
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=run_attn_dump)
    return parser


def _limit_threads():
    n = int(os.environ.get("SXL_THREADS", "1"))
    if n < 1:
        raise UsageError("SXL_THREADS must be >= 1")
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=n)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        with _limit_threads():
            return args.func(args)
    except NumericalError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (UsageError, CheckpointError, FeatureFormatError, LandscapeError, OSError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
