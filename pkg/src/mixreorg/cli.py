"""Command-line entry point.

Exit codes: 0 ok, 1 usage, 2 data or format error, 3 numerical abort.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, ModelConfig
from .synthdata import CorpusSpec, FormatError, class_captions, generate_corpus, read_dataset, write_dataset

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad arguments; that code is reserved for data errors
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _read_classes(path) -> list[str]:
    if path is None:
        return class_captions()
    lines = [ln.strip() for ln in Path(path).read_text(encoding="utf-8").splitlines()]
    classes = [ln for ln in lines if ln and not ln.startswith("#")]
    if not classes:
        raise UsageError(f"no class captions in {path}")
    return classes


def _load_config(path) -> ModelConfig:
    return ModelConfig.load(path) if path else ModelConfig()


def _load_image(spec: str, data: str | None) -> np.ndarray:
    if spec.isdigit():
        if data is None:
            raise UsageError("--image given as an index needs --data")
        scenes = read_dataset(data)
        idx = int(spec)
        if idx >= len(scenes):
            raise UsageError(f"image index {idx} out of range for {len(scenes)} scenes")
        return scenes[idx].image
    path = Path(spec)
    if path.suffix == ".npy":
        img = np.load(path)
    elif path.suffix == ".ppm":
        img = read_ppm(path)
    else:
        raise UsageError(f"unsupported image file {spec} (use .npy or .ppm)")
    if img.ndim != 3 or img.shape[2] != 3:
        raise FormatError(f"image must be H x W x 3, got {img.shape}")
    return img.astype(np.float32)


def write_ppm(path, image: np.ndarray) -> None:
    h, w, _ = image.shape
    raw = (np.clip(image, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode("ascii") + raw.tobytes())


def read_ppm(path) -> np.ndarray:
    blob = Path(path).read_bytes()
    parts = blob.split(maxsplit=4)
    if len(parts) < 5 or parts[0] != b"P6":
        raise FormatError(f"{path} is not a binary PPM")
    w, h, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    data = parts[4][: w * h * 3]
    if len(data) != w * h * 3:
        raise FormatError(f"{path}: truncated PPM payload")
    return np.frombuffer(data, dtype=np.uint8).reshape(h, w, 3).astype(np.float32) / maxval


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_data(args) -> int:
    spec = CorpusSpec.from_text(Path(args.spec).read_text(encoding="utf-8"))
    scenes = generate_corpus(spec)
    write_dataset(args.out, scenes)
    print(f"wrote {len(scenes)} scenes to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .pipeline.checkpoint import latest_checkpoint, load_checkpoint
    from .pipeline.train import train

    cfg = _load_config(args.config)
    if args.steps is not None:
        cfg = cfg.replace(steps=args.steps)
    scenes = read_dataset(args.data)
    state = None
    if args.resume:
        found = latest_checkpoint(args.out)
        if found is not None:
            state = load_checkpoint(found, expected=cfg)
    state = train(cfg, scenes, args.out, state)
    print(f"trained to step {state.step}; checkpoints in {args.out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .pipeline.checkpoint import load_checkpoint
    from .pipeline.evaluate import eval_classify, eval_miou, eval_reorg

    params = load_checkpoint(args.ckpt).params
    scenes = read_dataset(args.data)
    if args.mode == "miou":
        res = eval_miou(params, scenes, _read_classes(args.classes), args.threshold)
        for cid, iou in sorted(res.per_class.items()):
            print(f"iou\t{cid}\t{iou!r}")
        print(f"miou\t{res.miou!r}")
    elif args.mode == "classify":
        acc1, acc5 = eval_classify(params, scenes, _read_classes(args.classes))
        print(f"acc@1\t{acc1!r}")
        print(f"acc@5\t{acc5!r}")
    else:
        res = eval_reorg(params, scenes)
        for i, row in enumerate(res.confusion.matrix):
            print("cm\t" + str(i) + "\t" + "\t".join(repr(float(v)) for v in row))
        print(f"mean_diagonal\t{res.confusion.mean_diagonal!r}")
        print(f"groups\t{res.groups}")
        if args.rasters:
            out = Path(args.rasters)
            out.mkdir(parents=True, exist_ok=True)
            for g, group in enumerate(res.rasters):
                for m, img in enumerate(group):
                    write_ppm(out / f"group{g:03d}_slot{m}.ppm", img)
    return EXIT_OK


def cmd_segment(args) -> int:
    from .pipeline.checkpoint import load_checkpoint
    from .pipeline.evaluate import segment, write_pgm

    params = load_checkpoint(args.ckpt).params
    classes = _read_classes(args.classes)
    if len(classes) > 255:
        raise UsageError("at most 255 classes fit a greymap")
    labels = segment(params, _load_image(args.image, args.data), classes, args.threshold)
    write_pgm(args.out, labels, classes)
    print(f"wrote {args.out}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    from .pipeline.ablate import AxisError, ablate, format_table

    cfg = _load_config(args.config)
    if args.steps is not None:
        cfg = cfg.replace(steps=args.steps)
    if args.data:
        scenes = read_dataset(args.data)
    else:
        scenes = generate_corpus(CorpusSpec(count=64, seed=cfg.seed, image_size=cfg.image_size, max_len=cfg.max_len))
    eval_scenes = read_dataset(args.eval_data) if args.eval_data else None
    try:
        rows = ablate(cfg, args.axis, args.values, scenes, eval_scenes)
    except AxisError as exc:
        raise UsageError(str(exc)) from exc
    table = format_table(rows)
    if args.out:
        Path(args.out).write_text(table, encoding="utf-8")
    sys.stdout.write(table)
    return EXIT_OK


def cmd_grad_check(args) -> int:
    from .pipeline.verify import end_to_end_grad_check

    cfg = _load_config(args.config)
    report, names = end_to_end_grad_check(cfg, tolerance=args.tolerance)
    worst = sorted(zip(names, report.per_input), key=lambda t: -t[1])[:5]
    for name, err in worst:
        print(f"{name}\t{err:.3e}")
    status = "PASS" if report.passed else "FAIL"
    print(f"{status} max relative error {report.max_rel_error:.3e} (tolerance {report.tolerance:.0e})")
    return EXIT_OK if report.passed else EXIT_NUMERIC


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="mixreorg", description="Desk-scale mixed patch reorganization pre-training.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="generate a synthetic scene dataset")
    g.add_argument("--spec", required=True, help="corpus spec file (key=value)")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train and write checkpoints plus metrics.tsv")
    t.add_argument("--config", required=True)
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--steps", type=int, help="override the configured step count")
    t.add_argument("--resume", action="store_true", help="continue from the latest checkpoint in --out")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--mode", required=True, choices=("miou", "reorg", "classify"))
    e.add_argument("--classes", help="class caption file, one per line (default: every shape/color class)")
    e.add_argument("--threshold", type=float, help="background cosine threshold (default from config)")
    e.add_argument("--rasters", help="directory for reorganized images (reorg mode)")
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("segment", help="zero-shot segmentation of one image to a PGM")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--image", required=True, help="dataset index (with --data) or a .npy/.ppm file")
    s.add_argument("--classes", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--data")
    s.add_argument("--threshold", type=float)
    s.set_defaults(func=cmd_segment)

    a = sub.add_parser("ablate", help="train+eval once per value of one axis")
    a.add_argument("--axis", required=True)
    a.add_argument("--values", required=True, help="comma-separated, e.g. on,off or 2,4,8")
    a.add_argument("--config")
    a.add_argument("--data")
    a.add_argument("--eval-data")
    a.add_argument("--steps", type=int)
    a.add_argument("--out", help="also write the table here")
    a.set_defaults(func=cmd_ablate)

    c = sub.add_parser("grad-check", help="finite-difference check of the full objective")
    c.add_argument("--config", required=True)
    c.add_argument("--tolerance", type=float, default=1e-3)
    c.set_defaults(func=cmd_grad_check)
    return p


def main(argv=None) -> int:
    from .numerics import NonFiniteError
    from .pipeline.train import NumericalAbort, StorageAbort

    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NumericalAbort, NonFiniteError) as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FormatError, ConfigError, StorageAbort, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
