"""Command-line entry point: ``cocoreco <verb> [flags]``.

Every verb prints one JSON document on standard output. Exit status is 0 on
success, 1 when an input fails validation (or a run fails) and 2 on a usage
error; diagnostics go to standard error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import __version__
from .connectome import ConnectomeError, default_connectome, load_connectome, validate_connectome, parse_connectome
from .data import standardize, synth_dataset, write_dataset, load_dataset
from .imageio import ImageDecodeError, read_image
from .model import VARIANTS
from .tensor import bilinear_resize
from .training import (
    CheckpointError,
    DivergenceError,
    TrainConfig,
    evaluate,
    load_checkpoint,
    read_manifest,
    reproducibility_stanza,
    run_training,
    thread_limit,
)

log = logging.getLogger("cocoreco")

EXIT_OK, EXIT_INVALID, EXIT_USAGE = 0, 1, 2
INVALID = (ConnectomeError, CheckpointError, ImageDecodeError, DivergenceError, ValueError, KeyError, OSError)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise _UsageError(message)


class _UsageError(Exception):
    pass


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="cocoreco", description="Connectome-structured image classifiers.")
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to standard error")
    sub = p.add_subparsers(dest="verb", required=True, parser_class=_Parser)

    t = sub.add_parser("train", help="train a model and write checkpoint + metrics JSON")
    t.add_argument("--config", help="training config JSON (defaults apply to absent fields)")
    t.add_argument("--connectome", help="connectome JSON (default: the shipped document)")
    t.add_argument("--data", required=True, help="dataset root (class subdirectories, optionally under train/val/test)")
    t.add_argument("--variant", default="cocoreco", choices=VARIANTS)
    t.add_argument("--seed", type=int, help="overrides the config seed")
    t.add_argument("--out", required=True, help="output directory")

    e = sub.add_parser("eval", help="score a checkpoint on a dataset")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", help="split to score (default: test if present, else all samples)")

    x = sub.add_parser("explain", help="write a Grad-CAM heatmap for one image")
    x.add_argument("--checkpoint", required=True)
    x.add_argument("--image", required=True)
    x.add_argument("--class", dest="class_id", type=int, required=True)
    x.add_argument("--layers", help="comma-separated target layers (default: the variant's single layer)")
    x.add_argument("--out", required=True, help="heatmap path (.pgm grayscale, .ppm blended overlay)")

    v = sub.add_parser("connectome-validate", help="check a connectome document")
    v.add_argument("path")

    sub.add_parser("gradcheck", help="run the finite-difference gradient suite")

    s = sub.add_parser("synth", help="write the synthetic shapes dataset as a PPM tree")
    s.add_argument("--out", required=True)
    s.add_argument("--n", type=int, default=100, help="train images per class; val and test get n/5 each")
    s.add_argument("--size", type=int, default=64)
    s.add_argument("--seed", type=int, default=0)
    return p


def _emit(doc: dict) -> None:
    print(json.dumps(doc, indent=2, sort_keys=True))


def _cmd_train(args) -> int:
    cfg = TrainConfig.from_json(Path(args.config).read_text(encoding="utf-8")) if args.config else TrainConfig()
    if args.seed is not None:
        cfg = TrainConfig(**{**json.loads(cfg.to_json()), "seed": args.seed})
    spec = load_connectome(args.connectome) if args.connectome else default_connectome()
    data = load_dataset(args.data, image_size=cfg.image_size)
    results = run_training(args.variant, spec, data, cfg, out_dir=args.out)
    results.pop("model")
    results["checkpoint"] = str(Path(args.out) / "checkpoint")
    _emit(results)
    return EXIT_OK


def _train_config(manifest: dict) -> Optional[TrainConfig]:
    raw = manifest.get("extra", {}).get("train_config")
    return TrainConfig(**raw) if raw else None


def _image_size(manifest: dict) -> int:
    cfg = _train_config(manifest)
    return cfg.image_size if cfg else 64


def _stanza(manifest: dict) -> dict:
    cfg = _train_config(manifest)
    return reproducibility_stanza(cfg.seed if cfg else 0, cfg, manifest["spec_hash"])


def _cmd_eval(args) -> int:
    manifest = read_manifest(args.checkpoint)
    model = load_checkpoint(args.checkpoint)
    data = load_dataset(args.data, image_size=_image_size(manifest))
    split = args.split or ("test" if len(data.indices("test")) else data.split[0])
    m = evaluate(model, data, split)
    _emit({
        "split": split,
        "samples": int(len(data.indices(split))),
        **m.to_dict(),
        "reproducibility": _stanza(manifest),
    })
    return EXIT_OK


def _cmd_explain(args) -> int:
    from .explain import explain, render_heatmap

    manifest = read_manifest(args.checkpoint)
    model = load_checkpoint(args.checkpoint)
    size = _image_size(manifest)
    img = read_image(args.image)
    if img.shape[1:] != (size, size):
        img = bilinear_resize(img, size, size)
    layers = [s for s in args.layers.split(",") if s] if args.layers else None
    cam = explain(model, standardize(img), args.class_id, layers)
    overlay = img if Path(args.out).suffix.lower() == ".ppm" else None
    render_heatmap(cam, args.out, overlay=overlay)
    peak = np.unravel_index(int(cam.values.argmax()), cam.values.shape)
    _emit({
        "out": args.out,
        "class_id": args.class_id,
        "target_layers": cam.target_layers,
        "shape": list(cam.values.shape),
        "peak": [int(peak[0]), int(peak[1])],
        "reproducibility": _stanza(manifest),
    })
    return EXIT_OK


def _cmd_validate(args) -> int:
    spec = parse_connectome(Path(args.path).read_text(encoding="utf-8"))
    violations = validate_connectome(spec)
    _emit({
        "path": args.path,
        "valid": not violations,
        "violations": violations,
        "spec_hash": spec.spec_hash(),
        "areas": len(spec.areas),
        "edges": len(spec.edges),
    })
    if violations:
        for v in violations:
            print(f"invalid connectome: {v}", file=sys.stderr)
        return EXIT_INVALID
    return EXIT_OK


def _cmd_gradcheck(args) -> int:
    from .gradcheck import EPS, TOL, run_suite

    results = run_suite()
    ok = all(r.passed for r in results)
    for r in results:
        print(f"{r.name:28s} {r.max_error:10.3e} {'ok' if r.passed else 'FAIL'}", file=sys.stderr)
    _emit({
        "eps": EPS,
        "tolerance": TOL,
        "passed": ok,
        "ops": [{"name": r.name, "instances": r.instances, "max_rel_error": r.max_error, "seconds": r.seconds, "passed": r.passed} for r in results],
        "reproducibility": reproducibility_stanza(0, None, None),
    })
    return EXIT_OK if ok else EXIT_INVALID


def _cmd_synth(args) -> int:
    if args.n < 1:
        raise ValueError("--n must be at least 1")
    held = max(args.n // 5, 1)
    index = synth_dataset(0, image_size=args.size, seed=args.seed, splits={"train": args.n, "val": held, "test": held})
    write_dataset(index, args.out)
    _emit({
        "out": args.out,
        "classes": index.class_names,
        "counts": {s: int(len(index.indices(s))) for s in ("train", "val", "test")},
        "image_size": args.size,
        "reproducibility": reproducibility_stanza(args.seed, None, None),
    })
    return EXIT_OK


COMMANDS = {
    "train": _cmd_train,
    "eval": _cmd_eval,
    "explain": _cmd_explain,
    "connectome-validate": _cmd_validate,
    "gradcheck": _cmd_gradcheck,
    "synth": _cmd_synth,
}


def dispatch(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError:
        return EXIT_USAGE
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr)
    try:
        with thread_limit():
            return COMMANDS[args.verb](args)
    except ConnectomeError as exc:
        for v in exc.violations or [str(exc)]:
            print(f"invalid connectome: {v}", file=sys.stderr)
        return EXIT_INVALID
    except INVALID as exc:
        print(f"cocoreco {args.verb}: {exc}", file=sys.stderr)
        return EXIT_INVALID


def main() -> None:
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
