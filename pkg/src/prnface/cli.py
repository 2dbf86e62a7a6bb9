"""Command line entry point: ``prnface <command> ...``.

Exit codes: 0 success, 2 validation error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from .errors import MissingPrerequisite, NumericalError, ValidationError
from .numerics.checkpoint import CheckpointError

EXIT_OK, EXIT_INVALID, EXIT_NUMERICAL = 0, 2, 3


def _gen_data(args):
    from .harness.data import gen_dataset

    data = gen_dataset(args.ids, args.per_id, seed=args.seed, image_size=args.size)
    data.save(args.out)
    print(f"wrote {len(data.train)} train / {len(data.val)} val samples to {args.out}")


def _train(args):
    from .harness.config import load_config
    from .harness.data import Dataset
    from .harness.pipeline import build_model, load_state, save_model
    from .harness.train import prerequisites, train_stage

    cfg = load_config(args.config)
    data = Dataset.load(args.data)
    model = build_model(cfg)
    if args.resume:
        load_state(model, args.resume)
    elif prerequisites(args.stage, cfg.model.variant):
        raise MissingPrerequisite(f"stage {args.stage!r} needs --from CKPT with its earlier stages")
    log_path = Path(args.log) if args.log else Path(f"{args.out}.log.jsonl")
    with open(log_path, "w") as log:
        result = train_stage(model, args.stage, data, cfg, log)
    save_model(model, cfg, args.out)
    print(f"stage {args.stage}: {len(result.steps)} steps, final val accuracy {result.final_accuracy:.4f}")
    print(f"checkpoint {args.out}, loss log {log_path}")


def _eval(args):
    from .harness.data import Dataset
    from .harness.evaluate import all_pairs, identify, mean_templates, verify_pairs
    from .harness.pipeline import embeddings_and_logits, load_model

    model, _ = load_model(args.ckpt)
    data = Dataset.load(args.data)
    val_emb, _ = embeddings_and_logits(model, data.val.images(), data.val.landmarks)
    if args.mode == "verify":
        i, j, same = all_pairs(data.val.labels)
        report = verify_pairs(val_emb[i], val_emb[j], same)
    else:
        # open set: the last quarter of identities has no gallery template
        train_emb, _ = embeddings_and_logits(model, data.train.images(), data.train.landmarks)
        gallery, g_labels = mean_templates(train_emb, data.train.labels)
        keep = g_labels < int(np.ceil(0.75 * data.num_ids))
        report = identify(gallery[keep], g_labels[keep], val_emb, data.val.labels)
    text = "\n".join(report.lines()) + "\n"
    if args.report:
        Path(args.report).write_text(text)
    sys.stdout.write(text)


def _gradcheck(args):
    from .harness.gradcheck_suite import TARGETS, run_targets

    names = list(TARGETS) if args.target == "all" else [args.target]
    worst = 0.0
    for name, err in run_targets(names, seeds=range(args.seeds)):
        worst = max(worst, err)
        print(f"{name}, max_rel_err, {err:.3e}, {'ok' if err < args.tol else 'FAIL'}")
    if worst >= args.tol:
        raise NumericalError(f"gradient check failed: max relative error {worst:.3e}")


def _align(args):
    from .geometry import align_face, read_landmarks, write_landmarks

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    for path in map(Path, args.files):
        transform, aligned = align_face(read_landmarks(path), args.size)
        write_landmarks(out_dir / path.name, aligned)
        (out_dir / (path.stem + ".transform")).write_text(transform.record() + "\n")
        print(f"{path} -> {out_dir / path.name}: {transform.record()}")


def _pairs(args):
    from .prn import enumerate_pairs

    pairs = enumerate_pairs(args.n)
    for i, j in pairs:
        print(f"{i} {j}")
    print(f"count {len(pairs)}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="prnface", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a synthetic identity dataset")
    p.add_argument("--ids", type=int, default=16)
    p.add_argument("--per-id", type=int, default=40)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--size", type=int, default=56, help="aligned image size")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_gen_data)

    p = sub.add_parser("train", help="train one stage and write a checkpoint")
    p.add_argument("--stage", required=True, choices=("backbone", "encoder", "prn", "fusion"))
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--from", dest="resume", help="checkpoint holding the earlier stages")
    p.add_argument("--log", help="loss log path (default: OUT.log.jsonl)")
    p.set_defaults(func=_train)

    p = sub.add_parser("eval", help="verification or identification report")
    p.add_argument("--mode", required=True, choices=("verify", "identify"))
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--report")
    p.set_defaults(func=_eval)

    p = sub.add_parser("gradcheck", help="finite-difference check of every differentiable op")
    p.add_argument("--target", default="all")
    p.add_argument("--seeds", type=int, default=3)
    p.add_argument("--tol", type=float, default=1e-4)
    p.set_defaults(func=_gradcheck)

    p = sub.add_parser("align", help="align 68-point landmark files")
    p.add_argument("files", nargs="+")
    p.add_argument("--size", type=int, default=140)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_align)

    p = sub.add_parser("pairs", help="print the landmark pair list")
    p.add_argument("--n", type=int, default=68)
    p.set_defaults(func=_pairs)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except (ValidationError, CheckpointError, ValueError, KeyError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (NumericalError, ArithmeticError) as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
