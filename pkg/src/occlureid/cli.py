"""Command-line interface: one executable, one subcommand per capability.

Exit codes: 0 success, 1 domain errors (bad data, bad files, failed
checks), 2 usage errors (unknown flags, missing arguments). Machine-
readable results go to stdout, diagnostics to stderr. All randomness
flows from --seed; the only wall-clock input is the audit-log timestamp.
"""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import replace
from typing import Dict, List, Optional, Sequence

import numpy as np

from .data import (
    AugmentSpec,
    CLASS_FOLDERS,
    LabeledImage,
    OcclusionClass,
    augment,
    decode_resize,
    load_dataset,
    read_ppm,
    write_ppm,
)
from .gru import GRADCHECK_TOLERANCE, gradient_check, random_cell
from .kernels import ConvCostInput, conv_cost, depletion_ratio
from .metrics import metrics as class_metrics, report_table, tally
from .network import Model, NetworkConfig, build_network, load_checkpoint, save_checkpoint
from .reid import DEFAULT_THRESHOLD, Gallery, identify, run_batch
from .training import TrainConfig, evaluate, load_train_config, train

GRADCHECK_CELLS = 5


def _fail(flag: str, path: str, exc: Exception) -> ValueError:
    return ValueError(f"{flag} {path}: {exc}")


def _load_model(path: str) -> Model:
    try:
        return load_checkpoint(path)
    except (OSError, ValueError) as exc:
        raise _fail("--model", path, exc) from exc


def _load_gallery(path: str) -> Gallery:
    try:
        return Gallery.load(path)
    except (OSError, ValueError) as exc:
        raise _fail("--gallery", path, exc) from exc


def _load_image(path: str, size: int) -> np.ndarray:
    try:
        with open(path, "rb") as fh:
            return decode_resize(fh.read(), size)
    except (OSError, ValueError) as exc:
        raise _fail("--image", path, exc) from exc


def _load_data(root: str, size: int) -> List[LabeledImage]:
    try:
        return load_dataset(root, size)
    except (OSError, ValueError) as exc:
        raise _fail("--data", root, exc) from exc


def cmd_cost(args: argparse.Namespace) -> int:
    c = ConvCostInput(
        height=args.h, width=args.w, channels_in=args.din,
        channels_out=args.dout, kernel_size=args.k,
    )
    print(f"cost={conv_cost(c)}")
    print(f"D={depletion_ratio(c):.6f}")
    return 0


def cmd_gradcheck(args: argparse.Namespace) -> int:
    rng = np.random.default_rng(args.seed)
    worst: Dict[str, float] = {}
    for _ in range(GRADCHECK_CELLS):
        params, h0, xs, target = random_cell(rng)
        for name, err in gradient_check(params, h0, xs, target).items():
            worst[name] = max(worst.get(name, 0.0), err)
    for name in sorted(worst):
        print(f"{name} {worst[name]:.3e}")
    if max(worst.values()) <= GRADCHECK_TOLERANCE:
        print("PASS")
        return 0
    print("FAIL")
    return 1


def cmd_train(args: argparse.Namespace) -> int:
    tc = TrainConfig()
    if args.config:
        try:
            tc = load_train_config(args.config, tc)
        except (OSError, ValueError) as exc:
            raise _fail("--config", args.config, exc) from exc
    if args.seed is not None:
        tc = replace(tc, seed=args.seed)
    cfg = NetworkConfig.for_profile(args.profile)
    dataset = _load_data(args.data, cfg.input_size)
    model = build_network(cfg, tc.seed)
    history = train(model, dataset, tc)
    for row in history:
        print(
            f"epoch={row.epoch} lr={row.learning_rate:.6g} "
            f"loss={row.train_loss:.6f} accuracy={row.train_accuracy:.4f}"
        )
    save_checkpoint(model, args.model)
    print(f"saved {args.model}", file=sys.stderr)
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    model = _load_model(args.model)
    dataset = _load_data(args.data, model.config.input_size)
    loss, accuracy, predictions = evaluate(model, dataset)
    print(f"loss={loss:.6f} accuracy={accuracy:.4f}", file=sys.stderr)
    counts = tally(predictions, [img.occlusion for img in dataset])
    reports = {cls: class_metrics(c) for cls, c in counts.items()}
    print(report_table(reports, args.report), end="")
    return 0


def cmd_classify(args: argparse.Namespace) -> int:
    model = _load_model(args.model)
    pixels = _load_image(args.image, model.config.input_size)
    readout = model.forward(pixels)[0]
    best = int(np.argmax(readout))
    print(f"{CLASS_FOLDERS[OcclusionClass(best)]} {readout[best]:.4f}")
    return 0


def cmd_enroll(args: argparse.Namespace) -> int:
    model = _load_model(args.model)
    dataset = _load_data(args.data, model.config.input_size)
    gallery = Gallery.load(args.gallery) if _exists(args.gallery) else Gallery()
    by_person: Dict[str, List[LabeledImage]] = {}
    for image in dataset:
        by_person.setdefault(image.person, []).append(image)
    for person in sorted(by_person):
        gallery.enroll(person, by_person[person], model)
    gallery.save(args.gallery)
    print(f"persons={len(by_person)} images={len(dataset)}")
    return 0


def cmd_identify(args: argparse.Namespace) -> int:
    model = _load_model(args.model)
    gallery = _load_gallery(args.gallery)
    pixels = _load_image(args.image, model.config.input_size)
    person, score = identify(gallery, pixels, model)
    gate = "pass" if score > args.threshold else "fail"
    print(f"person={person} score={score:.2f} gate={gate}")
    return 0


def cmd_watch(args: argparse.Namespace) -> int:
    model = _load_model(args.model)
    gallery = _load_gallery(args.gallery)
    summary = run_batch(model, gallery, getattr(args, "in"), args.log, args.threshold)
    for path, message in summary.failures:
        print(f"error: {path}: {message}", file=sys.stderr)
    print(
        f"processed={summary.processed} passed={summary.passed} "
        f"failed_gate={summary.failed_gate} errored={summary.errored}"
    )
    return 0


def cmd_augment(args: argparse.Namespace) -> int:
    spec = AugmentSpec(seed=args.seed)
    if args.image:
        paths = [args.image]
    else:
        root = getattr(args, "in")
        try:
            names = sorted(n for n in os.listdir(root) if n.lower().endswith(".ppm"))
        except OSError as exc:
            raise _fail("--in", root, exc) from exc
        paths = [os.path.join(root, n) for n in names]
        if not paths:
            raise ValueError(f"--in {root}: no PPM images found")
    written = 0
    for path in paths:
        try:
            pixels = read_ppm(path)
        except (OSError, ValueError) as exc:
            raise _fail("--image" if args.image else "--in", path, exc) from exc
        image = LabeledImage(pixels=pixels, occlusion=OcclusionClass.FACE, person="", source=path)
        stem = path[:-4] if path.lower().endswith(".ppm") else path
        for i in range(args.count):
            variant = augment(image, spec, i)
            write_ppm(f"{stem}_aug{i}.ppm", variant.pixels)
            written += 1
    print(f"written={written}")
    return 0


def _exists(path: str) -> bool:
    return os.path.exists(path)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="occlureid",
        description="Occluded-face classification and person re-identification.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("cost", help="multiply-accumulate cost of a separable convolution")
    p.add_argument("--h", type=int, required=True, help="input height in pixels")
    p.add_argument("--w", type=int, required=True, help="input width in pixels")
    p.add_argument("--din", type=int, required=True, help="input channel count")
    p.add_argument("--dout", type=int, required=True, help="output channel count")
    p.add_argument("--k", type=int, required=True, help="kernel side length")
    p.set_defaults(func=cmd_cost)

    p = sub.add_parser("gradcheck", help="compare analytic gradients against finite differences")
    p.add_argument("--seed", type=int, default=0, help="random cell seed")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("train", help="train a classifier on a dataset tree")
    p.add_argument("--data", required=True, help="dataset root directory")
    p.add_argument("--model", required=True, help="checkpoint path to write")
    p.add_argument("--config", help="key = value training config file")
    p.add_argument("--profile", choices=("full", "toy"), default="full", help="network profile")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint and print the metric table")
    p.add_argument("--data", required=True, help="dataset root directory")
    p.add_argument("--model", required=True, help="checkpoint path to read")
    p.add_argument("--report", choices=("text", "csv"), default="text", help="table format")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("classify", help="classify the occlusion in one image")
    p.add_argument("--model", required=True, help="checkpoint path to read")
    p.add_argument("--image", required=True, help="PPM image to classify")
    p.set_defaults(func=cmd_classify)

    p = sub.add_parser("enroll", help="add a dataset tree's persons to a gallery")
    p.add_argument("--model", required=True, help="checkpoint path to read")
    p.add_argument("--gallery", required=True, help="gallery file to create or extend")
    p.add_argument("--data", required=True, help="dataset root directory")
    p.set_defaults(func=cmd_enroll)

    p = sub.add_parser("identify", help="match one probe image against the gallery")
    p.add_argument("--model", required=True, help="checkpoint path to read")
    p.add_argument("--gallery", required=True, help="gallery file to read")
    p.add_argument("--image", required=True, help="PPM probe image")
    p.add_argument("--threshold", type=float, default=DEFAULT_THRESHOLD, help="gate threshold")
    p.set_defaults(func=cmd_identify)

    p = sub.add_parser("watch", help="run the gated two-stage pipeline over a directory")
    p.add_argument("--model", required=True, help="checkpoint path to read")
    p.add_argument("--gallery", required=True, help="gallery file to read")
    p.add_argument("--in", required=True, help="directory of probe PPM images")
    p.add_argument("--log", required=True, help="audit log CSV to append to")
    p.add_argument("--threshold", type=float, default=DEFAULT_THRESHOLD, help="gate threshold")
    p.set_defaults(func=cmd_watch)

    p = sub.add_parser("augment", help="write deterministic augmented variants next to sources")
    p.add_argument("--image", help="one source PPM image")
    p.add_argument("--in", help="directory of source PPM images")
    p.add_argument("--count", type=int, default=5, help="variants per source image")
    p.add_argument("--seed", type=int, default=0, help="augmentation seed")
    p.set_defaults(func=cmd_augment)

    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "augment" and bool(args.image) == bool(getattr(args, "in")):
        parser.error("augment requires exactly one of --image or --in")
    try:
        return args.func(args)
    except (OSError, ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
