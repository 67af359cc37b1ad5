"""Batch command-line interface: ``asr train|detect|describe|match|eval|bench``.

Exit codes: 0 success, 1 usage error, 2 I/O or format error, 3 numeric
failure (rank deficiency, singular homography, empty ground truth).
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import descriptor as desc_mod
from ._io import FormatError, atomic_write_text
from .detect import DogParams, ImageTooSmallError, KeypointFormatError, detect_dog, read_keypoints, write_keypoints
from .matchbench import (EmptyGroundTruthError, SingularHomographyError, baseline_single_view,
                         bench_timing, curve_for, ground_truth_correspondences, match_nndr,
                         read_homography, recall_at, timing_to_csv, write_curve_csv)
from .model import ASRParams, RankDeficiencyError, augment_images, collect_reference_patches, load_model, save_model, train_model
from .patch import read_image

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC = 0, 1, 2, 3
IMAGE_SUFFIXES = {".pgm", ".png", ".jpg", ".jpeg", ".tif", ".tiff", ".bmp"}

log = logging.getLogger("asr")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _add_params(p: argparse.ArgumentParser) -> None:
    d = ASRParams()
    g = p.add_argument_group("descriptor parameters")
    g.add_argument("--n_p", type=int, default=d.n_p, help="orientation pattern points")
    g.add_argument("--n_l", type=int, default=d.n_l, help="reference patch components")
    g.add_argument("--s_l", type=int, default=d.s_l, help="local patch side")
    g.add_argument("--s_r", type=int, default=d.s_r, help="reference patch side")
    g.add_argument("--n_d", type=int, default=d.n_d, help="PCA-patch vector dimension")
    g.add_argument("--n_s", type=int, default=d.n_s, help="subspace dimension")
    g.add_argument("--T_o", type=float, default=d.T_o, help="minimal ellipse overlap")
    g.add_argument("--n_t", type=int, default=d.n_t, help="number of tilts")
    g.add_argument("--c_s", type=float, default=d.c_s, help="support radius in keypoint scales")


def _add_dog(p: argparse.ArgumentParser, contrast: float | None = None) -> None:
    d = DogParams()
    g = p.add_argument_group("DoG detector")
    g.add_argument("--octaves", type=int, default=d.octaves)
    g.add_argument("--scales-per-octave", type=int, default=d.scales_per_octave)
    g.add_argument("--contrast-threshold", type=float,
                   default=d.contrast_threshold if contrast is None else contrast)
    g.add_argument("--edge-ratio-threshold", type=float, default=d.edge_ratio_threshold)
    g.add_argument("--base-sigma", type=float, default=d.base_sigma)


def _dog(args) -> DogParams:
    try:
        return DogParams(args.octaves, args.scales_per_octave, args.contrast_threshold,
                         args.edge_ratio_threshold, args.base_sigma)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _params(args) -> ASRParams:
    try:
        return ASRParams(n_d=args.n_d, n_s=args.n_s, n_l=args.n_l, s_l=args.s_l, s_r=args.s_r,
                         n_p=args.n_p, c_s=args.c_s, T_o=args.T_o, n_t=args.n_t)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _keypoints(image: np.ndarray, path: str | None, dog: DogParams):
    return read_keypoints(path) if path else detect_dog(image, dog)


# -- commands --------------------------------------------------------------------------


def cmd_train(args) -> int:
    params = _params(args)
    image_dir = Path(args.image_dir)
    if not image_dir.is_dir():
        raise FileNotFoundError(f"{image_dir} is not a directory")
    paths = sorted(p for p in image_dir.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    if not paths:
        raise FileNotFoundError(f"no readable images in {image_dir}")
    images = [read_image(p) for p in paths]
    if args.augment:
        images = augment_images(images)
    images = [im for im in images if min(im.shape) >= 32]
    refs = collect_reference_patches(images, params, _dog(args), args.max_per_image)
    print(f"images: {len(images)}  reference patches: {len(refs)}")
    model = train_model(refs, params, warped_views=not args.unwarped_only,
                        max_pd_patches=args.max_projection_patches)
    for key, value in model.stats.items():
        print(f"{key}: {value:.6g}" if isinstance(value, float) else f"{key}: {value}")
    save_model(model, args.out_model)
    return EXIT_OK


def cmd_detect(args) -> int:
    img = read_image(args.image)
    kps = detect_dog(img, _dog(args))
    write_keypoints(kps, args.out_keypoints)
    print(f"{len(kps)} keypoints")
    return EXIT_OK


def _describe_file(img, kps, model, mode, realign, threads):
    kps = desc_mod.assign_orientations(img, kps, model)
    return kps, desc_mod.describe(img, kps, model, mode, realign, threads)


def cmd_describe(args) -> int:
    model = load_model(args.model)
    img = read_image(args.image)
    kps = read_keypoints(args.keypoints)
    kps, descs = _describe_file(img, kps, model, args.mode, args.realign, args.threads)
    dim = model.descriptor_dim
    if args.csv:
        desc_mod.write_descriptors_csv(args.out, kps, descs, dim)
    else:
        desc_mod.write_descriptors(args.out, kps, descs, dim)
    failed = sum(d is None for d in descs)
    print(f"{len(descs)} descriptors (dim {dim}, {failed} failed)")
    return EXIT_OK


def cmd_match(args) -> int:
    _, a = desc_mod.read_descriptors(args.desc_a)
    _, b = desc_mod.read_descriptors(args.desc_b)
    matches = match_nndr(list(a), list(b), args.ratio)
    lines = ["index_a,index_b,distance,ratio"]
    lines += [f"{mp.index_a},{mp.index_b},{mp.distance:.6f},{mp.ratio:.6f}" for mp in matches]
    atomic_write_text(args.out, "\n".join(lines) + "\n")
    print(f"{len(matches)} matches")
    return EXIT_OK


def cmd_eval(args) -> int:
    model = load_model(args.model)
    h = read_homography(args.homography)
    img_a, img_b = read_image(args.image_a), read_image(args.image_b)
    dog = _dog(args)
    kps_a = desc_mod.assign_orientations(img_a, _keypoints(img_a, args.keypoints_a, dog), model)
    kps_b = desc_mod.assign_orientations(img_b, _keypoints(img_b, args.keypoints_b, dog), model)
    gt = ground_truth_correspondences(kps_a, kps_b, h, args.dist_thresh, args.scale_ratio_max)
    runs = [(args.mode, args.out_csv,
             lambda img, kps: desc_mod.describe(img, kps, model, args.mode, None, args.threads))]
    if args.with_baseline:
        out = Path(args.baseline_out) if args.baseline_out else \
            Path(args.out_csv).with_name(Path(args.out_csv).stem + "_baseline.csv")
        runs.append(("baseline", out, lambda img, kps: baseline_single_view(img, kps, model)))
    print(f"keypoints: {len(kps_a)} / {len(kps_b)}  correspondences: {len(gt)}")
    for name, out, fn in runs:
        curve = curve_for(fn(img_a, kps_a), fn(img_b, kps_b), gt)
        write_curve_csv(curve, out)
        final = curve[-1] if curve else None
        print(f"{name}: recall@1-p=0.2 {recall_at(curve, 0.2):.4f}  "
              f"final recall {final.recall if final else 0.0:.4f}  -> {out}")
    return EXIT_OK


def cmd_bench(args) -> int:
    model = load_model(args.model)
    img = read_image(args.image)
    kps = desc_mod.assign_orientations(img, read_keypoints(args.keypoints), model)
    modes = ["naive", "fast"] if args.mode == "both" else [args.mode]
    blocks = []
    for mode in modes:
        report = bench_timing(img, kps, model, mode, args.repetitions)
        print(f"[{mode}]")
        print(timing_to_csv(report), end="")
        blocks.append((mode, report))
    if args.out:
        for mode, report in blocks:
            out = Path(args.out)
            if len(blocks) > 1:
                out = out.with_name(f"{out.stem}_{mode}{out.suffix}")
            atomic_write_text(out, timing_to_csv(report))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="asr", description="Affine subspace descriptors.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="learn projections and view tables")
    p.add_argument("image_dir")
    p.add_argument("out_model")
    p.add_argument("--max-per-image", type=int, default=None)
    p.add_argument("--max-projection-patches", type=int, default=5000)
    p.add_argument("--unwarped-only", action="store_true",
                   help="fit the patch projection to unwarped patches only")
    p.add_argument("--augment", action="store_true",
                   help="also train on rotated and rescaled copies of each image")
    _add_params(p)
    _add_dog(p, contrast=0.01)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("detect", help="DoG keypoints to a keypoint file")
    p.add_argument("image")
    p.add_argument("out_keypoints")
    _add_dog(p)
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("describe", help="compute descriptors for a keypoint file")
    p.add_argument("image")
    p.add_argument("keypoints")
    p.add_argument("model")
    p.add_argument("out")
    p.add_argument("--mode", choices=desc_mod.MODES, default="naive")
    p.add_argument("--realign", action=argparse.BooleanOptionalAction, default=None,
                   help="per-view orientation (naive mode; default on)")
    p.add_argument("--csv", action="store_true", help="write CSV instead of binary")
    p.add_argument("--threads", type=int, default=None)
    p.set_defaults(func=cmd_describe)

    p = sub.add_parser("match", help="NNDR matching of two descriptor files")
    p.add_argument("desc_a")
    p.add_argument("desc_b")
    p.add_argument("out")
    p.add_argument("--ratio", type=float, default=0.8)
    p.set_defaults(func=cmd_match)

    p = sub.add_parser("eval", help="recall / 1-precision curve for an image pair")
    p.add_argument("image_a")
    p.add_argument("image_b")
    p.add_argument("homography")
    p.add_argument("model")
    p.add_argument("out_csv")
    p.add_argument("--mode", choices=desc_mod.MODES, default="naive")
    p.add_argument("--with-baseline", action="store_true")
    p.add_argument("--baseline-out", default=None)
    p.add_argument("--keypoints-a", default=None)
    p.add_argument("--keypoints-b", default=None)
    p.add_argument("--dist-thresh", type=float, default=2.5)
    p.add_argument("--scale-ratio-max", type=float, default=1.8)
    p.add_argument("--threads", type=int, default=None)
    _add_dog(p, contrast=0.01)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="per-stage timing report")
    p.add_argument("image")
    p.add_argument("keypoints")
    p.add_argument("model")
    p.add_argument("--mode", choices=("naive", "fast", "both"), default="both")
    p.add_argument("--repetitions", type=int, default=20)
    p.add_argument("--out", default=None, help="timing CSV path")
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"asr: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (RankDeficiencyError, SingularHomographyError, EmptyGroundTruthError,
            np.linalg.LinAlgError) as exc:
        print(f"asr: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, FormatError, KeypointFormatError, ImageTooSmallError) as exc:
        print(f"asr: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        # malformed images, homography files and the like
        print(f"asr: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
