"""Command-line entry point: ``protodistill {pretrain,probe,gradcheck,inspect}``.

Exit codes: 0 success, 2 configuration error, 3 numeric abort,
4 shape mismatch / bad index / unreadable checkpoint, 5 gradient check failure.
Machine-readable output goes to stdout, logs to stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import platform
import sys
import time
from contextlib import nullcontext
from pathlib import Path

import numpy as np

from . import __version__
from . import config as config_mod
from .checkpoint import CheckpointError, load_checkpoint
from .data import load_corpus, save_corpus, synth_corpus

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_SHAPE, EXIT_GRADCHECK = 0, 2, 3, 4, 5

log = logging.getLogger("protodistill")


def _threads():
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:  # pragma: no cover
        return nullcontext()
    return threadpool_limits(int(os.environ.get("PROS_THREADS", "1")))


def _manifest(args, command: str, cfg_text: str | None, inputs: dict, outputs: dict, started: float) -> dict:
    return {
        "command": command,
        "args": {k: v for k, v in vars(args).items() if k != "func"},
        "config": cfg_text,
        "inputs": inputs,
        "outputs": outputs,
        "engine_version": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "threads": int(os.environ.get("PROS_THREADS", "1")),
        "started_unix": started,
        "wall_clock_s": time.time() - started,
    }


def cmd_pretrain(args) -> int:
    from .train import NumericAbort, pretrain, write_json

    started = time.time()
    try:
        cfg = config_mod.load(args.config)
    except config_mod.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    resume = None
    if args.resume:
        try:
            resume = load_checkpoint(args.resume)
        except (CheckpointError, OSError) as exc:
            print(f"cannot resume: {exc}", file=sys.stderr)
            return EXIT_SHAPE
    corpus = synth_corpus(cfg.corpus_size, cfg.corpus_classes, cfg.image_side, cfg.corpus_seed)
    save_corpus(out / "corpus.bin", corpus, cfg.corpus_classes, cfg.corpus_seed)
    cfg_text = config_mod.dumps(cfg)
    (out / "config.txt").write_text(cfg_text, encoding="utf-8")
    try:
        pretrain(cfg, corpus, out, resume=resume)
    except NumericAbort as exc:
        print(f"numeric abort at step {exc.step}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"cannot pretrain: {exc}", file=sys.stderr)
        return EXIT_SHAPE
    outputs = sorted(p.name for p in out.iterdir() if p.suffix in (".ckpt", ".jsonl", ".bin", ".txt"))
    write_json(out / "manifest.json", _manifest(
        args, "pretrain", cfg_text,
        {"config": str(args.config), "resume": args.resume},
        {"dir": str(out), "files": outputs},
        started,
    ))
    return EXIT_OK


def _load_for_eval(ckpt_path, corpus_path=None):
    ck = load_checkpoint(ckpt_path)
    cfg = config_mod.loads(ck.config_text)
    if corpus_path:
        corpus, _ = load_corpus(corpus_path)
    else:
        corpus = synth_corpus(cfg.corpus_size, cfg.corpus_classes, cfg.image_side, cfg.corpus_seed)
    return ck, cfg, corpus


def cmd_probe(args) -> int:
    from .probe import ProbeError, extract_features, knn_probe, linear_probe

    try:
        ck, _, corpus = _load_for_eval(args.ckpt, args.corpus)
        table = extract_features(ck, corpus, source=str(args.ckpt))
        if args.mode == "knn":
            result = knn_probe(table, args.k, args.seed)
        else:
            result = linear_probe(table, args.epochs, args.lr, args.seed)
    except (CheckpointError, ProbeError, OSError) as exc:
        print(f"probe failed: {exc}", file=sys.stderr)
        return EXIT_SHAPE
    except ValueError as exc:
        print(f"probe failed: {exc}", file=sys.stderr)
        return EXIT_SHAPE
    print(result.to_json())
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import TOLERANCE, run_suite

    results = run_suite(args.seed, args.scope)
    failed = [r for r in results if not r.ok]
    for r in results:
        print(json.dumps({"op": r.op, "worst_rel_error": r.worst, "ok": r.ok}))
    worst = max(r.worst for r in results)
    print(f"gradcheck seed={args.seed} scope={args.scope}: worst {worst:.3e} (tolerance {TOLERANCE:g})",
          file=sys.stderr)
    if failed:
        print("gradient check failed for: " + ", ".join(r.op for r in failed), file=sys.stderr)
        return EXIT_GRADCHECK
    return EXIT_OK


def cmd_inspect(args) -> int:
    from . import tensor as T
    from . import vit
    from .probe import ProbeError, extract_features, projected_features, prototype_nn

    try:
        ck, cfg, corpus = _load_for_eval(args.ckpt, args.corpus)
    except (CheckpointError, OSError, ValueError) as exc:
        print(f"inspect failed: {exc}", file=sys.stderr)
        return EXIT_SHAPE
    did = False
    if args.attention is not None:
        if not 0 <= args.attention < len(corpus):
            print(f"image index {args.attention} outside [0, {len(corpus)})", file=sys.stderr)
            return EXIT_SHAPE
        layer = args.layer or cfg.depth
        if not 1 <= layer <= cfg.depth:
            print(f"layer {layer} outside [1, {cfg.depth}]", file=sys.stderr)
            return EXIT_SHAPE
        params = {k: T.Tensor(v) for k, v in ck.teacher.items()}
        grid = vit.attention_map(params, cfg.encoder(), corpus[args.attention].pixels, layer)
        g = grid.shape[-1]
        lines = ["head,row," + ",".join(f"c{j}" for j in range(g))]
        for h in range(grid.shape[0]):
            for r in range(g):
                lines.append(f"{h},{r}," + ",".join(repr(float(v)) for v in grid[h, r]))
        print("\n".join(lines))
        did = True
    if args.prototypes:
        try:
            table = extract_features(ck, corpus)
            assign = prototype_nn(ck.prototypes, projected_features(ck, table))
        except ProbeError as exc:
            print(f"inspect failed: {exc}", file=sys.stderr)
            return EXIT_SHAPE
        print(assign.to_json())
        did = True
    if not did:
        manifest_path = Path(args.ckpt).with_name("manifest.json")
        summary = {
            "checkpoint": str(args.ckpt),
            "step": ck.step,
            "epoch": ck.epoch,
            "optim_step": ck.optim_step,
            "metrics": ck.metrics,
            "num_prototypes": int(ck.prototypes.shape[0]),
            "student_params": int(sum(v.size for v in ck.student.values())),
            "config": {k: v for k, v in (line.split("=", 1) for line in ck.config_text.splitlines())},
            "manifest": json.loads(manifest_path.read_text()) if manifest_path.exists() else None,
        }
        print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="protodistill", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pretrain", help="run self-distillation pre-training")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--resume")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("probe", help="kNN or linear probe on frozen teacher features")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--corpus")
    p.add_argument("--mode", choices=("knn", "linear"), required=True)
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--epochs", type=int, default=200)
    p.add_argument("--lr", type=float, default=0.1)
    p.add_argument("--seed", type=int, required=True)
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--scope", choices=("primitives", "loss", "all"), default="all")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("inspect", help="attention grids, prototype assignments, or a summary")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--corpus")
    p.add_argument("--attention", type=int, metavar="IMAGE_INDEX")
    p.add_argument("--layer", type=int)
    p.add_argument("--prototypes", action="store_true")
    p.set_defaults(func=cmd_inspect)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    with _threads():
        return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
