"""Command-line driver: infer, render, rectify, detect, inpaint, eval.

Machine output is JSON (to --out or stdout); images are PNG. All
diagnostics go to stderr. Exit codes: 0 success, 1 domain failures (no
regularity found, uncovered inpainting region), 2 usage or IO errors.
"""

from __future__ import annotations

import argparse
import json
import sys

import numpy as np

from . import __version__
from .camera import CameraIntrinsics, CameraPose
from .dsl import (
    CentroidSet,
    ProgramJSONError,
    centroids_from_list,
    centroids_to_list,
    program_from_dict,
    program_to_dict,
    serialize,
)
from .features import extract_gradient_features, extract_pixel_features, import_features
from .fitness import NotScoreableError
from .inference import NoRegularityError, SearchConfig, infer
from .manipulate import UncoveredRegionError, inpaint, rectify
from .metrics import centroid_metrics, pose_error
from .render import SPRITE_KINDS, make_sprite, render
from .tensor import FeatureMap, TensorIOError, load_image, save_image

_DOMAIN_ERRORS = (NoRegularityError, UncoveredRegionError, NotScoreableError)


def _emit(doc: dict, out_path) -> None:
    text = json.dumps(doc, indent=2) + "\n"
    if out_path:
        with open(out_path, "w", encoding="utf-8") as f:
            f.write(text)
    else:
        sys.stdout.write(text)


def _load_program_file(path):
    with open(path, "r", encoding="utf-8") as f:
        return program_from_dict(json.load(f))


def _search_flags(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--features", default="pixel", help="pixel | grad | file:<path> (PPIT tensor)")
    sub.add_argument("--feature-scale", type=float, default=1.0, help="image px per feature px for file: features")
    sub.add_argument("--blur-radius", type=float, default=1.0, help="pixel extractor Gaussian sigma")
    sub.add_argument("--downsample", type=int, default=2, help="pixel extractor stride")
    sub.add_argument("--bins", type=int, default=8, help="gradient extractor orientation bins")
    sub.add_argument("--cell", type=int, default=8, help="gradient extractor cell size")
    sub.add_argument("--structures", default="lattice,circular,hybrid")
    sub.add_argument("--grid-step-px", type=float, default=2.0)
    sub.add_argument("--grid-step-deg", type=float, default=2.0)
    sub.add_argument("--angle-range", type=float, default=45.0)
    sub.add_argument("--displacement-min", type=float, default=None)
    sub.add_argument("--displacement-max", type=float, default=None)
    sub.add_argument("--max-descent-iters", type=int, default=200)
    sub.add_argument("--descent-tol", type=float, default=1e-6)
    sub.add_argument("--top-k-refine", type=int, default=50)
    sub.add_argument("--threads", type=int, default=None, help="worker threads (default: PLANEPROG_THREADS or cpu count)")


def _config_from(args) -> SearchConfig:
    return SearchConfig(
        grid_step_px=args.grid_step_px,
        grid_step_deg=args.grid_step_deg,
        angle_range=args.angle_range,
        displacement_min=args.displacement_min,
        displacement_max=args.displacement_max,
        max_descent_iters=args.max_descent_iters,
        descent_tol=args.descent_tol,
        structures=tuple(s.strip() for s in args.structures.split(",") if s.strip()),
        top_k_refine=args.top_k_refine,
        threads=args.threads,
    )


def _features_from(args, image: FeatureMap):
    spec = args.features
    if spec == "pixel":
        return extract_pixel_features(image, blur_radius=args.blur_radius, downsample=args.downsample)
    if spec == "grad":
        return extract_gradient_features(image, bins=args.bins, cell=args.cell)
    if spec.startswith("file:"):
        return import_features(spec[5:], scale=args.feature_scale)
    raise ValueError(f"unknown --features {spec!r}")


def _run_infer(args):
    image = load_image(args.image)
    induced = infer(_features_from(args, image), _config_from(args))
    return image, induced


def _draw_overlay(image: FeatureMap, centroids: CentroidSet, path) -> None:
    from PIL import Image, ImageDraw

    arr = np.clip(np.rint(image.to_hwc() * 255.0), 0, 255).astype(np.uint8)
    im = Image.fromarray(arr, mode="RGB")
    draw = ImageDraw.Draw(im)
    for c in centroids.points:
        draw.ellipse([c.x - 3, c.y - 3, c.x + 3, c.y + 3], outline=(0, 255, 80), width=1)
    im.save(path, format="PNG")


def cmd_infer(args) -> int:
    image, induced = _run_infer(args)
    _emit(program_to_dict(induced.program, induced.pose, induced.loss.normalized), args.out)
    if args.overlay:
        _draw_overlay(image, induced.centroids_image_space, args.overlay)
    return 0


def cmd_detect(args) -> int:
    _, induced = _run_infer(args)
    _emit(
        {
            "structure": induced.program.structure,
            "pose": {"rx": induced.pose.rx, "ry": induced.pose.ry},
            "centroids": centroids_to_list(induced.centroids_image_space),
        },
        args.out,
    )
    return 0


def cmd_render(args) -> int:
    prog, pose, _ = _load_program_file(args.program)
    sprite = make_sprite(args.sprite, args.sprite_size)
    background = tuple(float(v) for v in args.background.split(","))
    if len(background) != 3:
        raise ValueError("--background must be R,G,B in [0,1]")
    result = render(
        prog,
        pose,
        sprite,
        width=args.width,
        height=args.height,
        background=background,
        noise_sigma=args.noise_sigma,
        seed=args.seed,
    )
    save_image(result.image, args.out)
    if args.gt:
        _emit(
            {
                "program": program_to_dict(prog, pose),
                "pose": {"rx": pose.rx, "ry": pose.ry},
                "centroids": centroids_to_list(result.gt),
            },
            args.gt,
        )
    return 0


def cmd_rectify(args) -> int:
    image = load_image(args.image)
    if args.program:
        _, pose, _ = _load_program_file(args.program)
    else:
        pose = CameraPose(args.rx, args.ry)
    result = rectify(image, pose)
    from PIL import Image

    rgb = np.clip(np.rint(result.fmap.to_hwc() * 255.0), 0, 255).astype(np.uint8)
    alpha = (result.valid * 255).astype(np.uint8)[:, :, None]
    Image.fromarray(np.concatenate([rgb, alpha], axis=2), mode="RGBA").save(args.out, format="PNG")
    return 0


def cmd_inpaint(args) -> int:
    image = load_image(args.image)
    mask_img = load_image(args.mask)
    mask = mask_img.to_hwc().max(axis=2) > 0.5
    if args.auto:
        induced = infer(extract_pixel_features(image), SearchConfig(threads=args.threads))
        prog, pose = induced.program, induced.pose
    elif args.program:
        prog, pose, _ = _load_program_file(args.program)
    else:
        raise ValueError("inpaint needs --program <json> or --auto")
    intr = CameraIntrinsics(width=image.width, height=image.height)
    save_image(inpaint(image, mask, prog, pose, intr), args.out)
    return 0


def cmd_eval(args) -> int:
    with open(args.detected, "r", encoding="utf-8") as f:
        det_doc = json.load(f)
    with open(args.gt, "r", encoding="utf-8") as f:
        gt_doc = json.load(f)
    det = centroids_from_list(det_doc.get("centroids", []))
    gt = centroids_from_list(gt_doc.get("centroids", []))
    m = centroid_metrics(det, gt, args.width, args.height)
    doc = {"det_to_gt": m.det_to_gt, "gt_to_det": m.gt_to_det, "chamfer": m.chamfer}
    if "pose" in det_doc and "pose" in gt_doc:
        p_det = CameraPose(float(det_doc["pose"]["rx"]), float(det_doc["pose"]["ry"]))
        p_gt = CameraPose(float(gt_doc["pose"]["rx"]), float(gt_doc["pose"]["ry"]))
        doc["pose_error_deg"] = pose_error(p_det, p_gt)
    _emit(doc, args.out)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="planeprog", description=__doc__)
    parser.add_argument("--version", action="version", version=f"planeprog {__version__}")
    subs = parser.add_subparsers(dest="command", required=True)

    p = subs.add_parser("infer", help="induce program + pose from an image")
    p.add_argument("image")
    _search_flags(p)
    p.add_argument("--out", default=None)
    p.add_argument("--overlay", default=None, help="write a centroid-overlay PNG")
    p.set_defaults(fn=cmd_infer)

    p = subs.add_parser("detect", help="induce and emit centroids only")
    p.add_argument("image")
    _search_flags(p)
    p.add_argument("--out", default=None)
    p.set_defaults(fn=cmd_detect)

    p = subs.add_parser("render", help="render a synthetic scene + ground truth")
    p.add_argument("--program", required=True, help="program JSON path")
    p.add_argument("--sprite", default="disk", choices=SPRITE_KINDS)
    p.add_argument("--sprite-size", type=int, default=13)
    p.add_argument("--width", type=int, default=192)
    p.add_argument("--height", type=int, default=192)
    p.add_argument("--background", default="0.12,0.14,0.18")
    p.add_argument("--noise-sigma", type=float, default=0.0)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--gt", default=None, help="write ground-truth JSON")
    p.set_defaults(fn=cmd_render)

    p = subs.add_parser("rectify", help="warp an image to the fronto-parallel view")
    p.add_argument("image")
    p.add_argument("--program", default=None)
    p.add_argument("--rx", type=float, default=0.0)
    p.add_argument("--ry", type=float, default=0.0)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_rectify)

    p = subs.add_parser("inpaint", help="fill masked pixels from repetition correspondents")
    p.add_argument("--image", required=True)
    p.add_argument("--mask", required=True, help="PNG; nonzero = masked")
    p.add_argument("--program", default=None)
    p.add_argument("--auto", action="store_true", help="run infer first")
    p.add_argument("--threads", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_inpaint)

    p = subs.add_parser("eval", help="score detection JSON against ground-truth JSON")
    p.add_argument("--detected", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--width", type=int, required=True)
    p.add_argument("--height", type=int, required=True)
    p.add_argument("--out", default=None)
    p.set_defaults(fn=cmd_eval)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        return args.fn(args)
    except _DOMAIN_ERRORS as e:
        print(f"planeprog: {e}", file=sys.stderr)
        return 1
    except (OSError, ValueError, ProgramJSONError, TensorIOError, json.JSONDecodeError) as e:
        print(f"planeprog: {e}", file=sys.stderr)
        return 2


def main_entry() -> None:
    sys.exit(main())
