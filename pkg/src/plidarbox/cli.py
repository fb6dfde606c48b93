"""Command-line front end: lift / synth / pipeline / refine / eval.

All randomness flows from named ``--seed`` flags, per-frame work depends
only on that frame's inputs and its derived seed, and outputs are therefore
byte-identical across runs and worker counts. A flat ``key = value`` config
file can pre-set any flag of the invoked subcommand; explicit flags win.

Exit codes: 0 success, 1 finished with per-frame warnings (permissive
mode), 2 input or configuration error.
"""
from __future__ import annotations

import argparse
import logging
import math
import os
import sys
import zlib
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import evaluation, kitti_io, synth
from .box_fit import fit_box_baseline, trim_outliers
from .boxes import mask_mbr
from .consistency import (
    BoundCoeffs,
    DEConfig,
    DEFAULT_BOUND_COEFFS,
    consistency_loss,
    refine_box,
)
from .errors import (
    DegenerateInputError,
    FormatError,
    InvalidInputError,
    NotFoundError,
    PlacementError,
    UndefinedRecallError,
)
from .pseudolidar import (
    crop_cloud,
    extract_frustum_mask,
    generate_pseudolidar,
    sample_points,
)

log = logging.getLogger("plidarbox")

EXIT_OK = 0
EXIT_WARNINGS = 1
EXIT_USAGE = 2

_SCORE_AREA_SCALE = 10000.0


class CliError(Exception):
    """Input/configuration problem; reported and turned into exit code 2."""


def _derive_seed(*parts) -> int:
    """Stable 32-bit seed derived from integers and strings."""
    entropy = [
        zlib.crc32(p.encode()) if isinstance(p, str) else int(p) for p in parts
    ]
    return int(np.random.SeedSequence(entropy).generate_state(1)[0])


def _read_bytes(path: Path, what: str) -> bytes:
    if not path.is_file():
        raise CliError(f"missing {what}: {path}")
    return path.read_bytes()


def _frame_stems(directory: Path, suffix: str) -> list:
    if not directory.is_dir():
        raise CliError(f"missing input directory: {directory}")
    return sorted(p.stem for p in directory.glob(f"*{suffix}"))


def _load_frame_camera(calib_dir: Path, stem: str):
    calib = kitti_io.parse_calib(_read_bytes(calib_dir / f"{stem}.txt", "calib file"))
    return kitti_io.intrinsics_from_calib(calib)


def _parse_float_list(text: str, expected: int, what: str) -> np.ndarray:
    vals = [float(tok) for tok in text.split(",") if tok.strip() != ""]
    if len(vals) != expected:
        raise CliError(f"{what} expects {expected} comma-separated values")
    return np.array(vals)


def _de_config(args) -> DEConfig:
    return DEConfig(
        population_size=args.de_popsize,
        weight_f=args.de_weight,
        crossover_cr=args.de_crossover,
        max_generations=args.de_generations,
        tol=args.de_tol,
        seed=args.seed,
    )


def _bound_coeffs(args) -> BoundCoeffs:
    a = DEFAULT_BOUND_COEFFS.a
    b = DEFAULT_BOUND_COEFFS.b
    if args.bound_a is not None:
        a = _parse_float_list(args.bound_a, 7, "--bound-a")
    if args.bound_b is not None:
        b = _parse_float_list(args.bound_b, 7, "--bound-b")
    return BoundCoeffs(a=a, b=b)


# ---------------------------------------------------------------------------
# lift


def cmd_lift(args) -> int:
    depth_dir, calib_dir = Path(args.depth_dir), Path(args.calib_dir)
    out_dir = Path(args.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    stems = _frame_stems(depth_dir, ".png")
    if not stems:
        raise CliError(f"no depth maps (*.png) found in {depth_dir}")
    for stem in stems:
        intr = _load_frame_camera(calib_dir, stem)
        depth = kitti_io.read_depth_png(_read_bytes(depth_dir / f"{stem}.png", "depth map"))
        cloud = generate_pseudolidar(depth, intr)
        cloud = crop_cloud(cloud, min_depth=args.min_depth, max_depth=args.max_depth)
        data = kitti_io.write_pointcloud(cloud, args.format)
        (out_dir / f"{stem}.{args.format}").write_bytes(data)
        print(f"{stem}: {len(cloud)} points")
    return EXIT_OK


# ---------------------------------------------------------------------------
# synth


def _synth_frame(out_dir: Path, stem: str, spec: synth.SceneSpec,
                 noise, clean: bool) -> None:
    scene = synth.generate_scene(spec)
    depth, mask = synth.render_depth(scene)
    if not clean:
        depth = synth.corrupt_depth(depth, mask, noise)
    records = []
    for idx, obj in enumerate(scene.objects, start=1):
        try:
            bbox = mask_mbr(mask, idx)
        except NotFoundError:
            log.warning("%s: object %d is not visible, skipped", stem, idx)
            continue
        records.append(
            kitti_io.label_from_box3d(obj.box, obj.class_name, bbox)
        )
    p2 = np.array(
        [
            [spec.camera.fx, 0.0, spec.camera.cx, spec.camera.bx * spec.camera.fx],
            [0.0, spec.camera.fy, spec.camera.cy, spec.camera.by * spec.camera.fy],
            [0.0, 0.0, 1.0, 0.0],
        ]
    )
    calib = kitti_io.CalibRecord(
        p2=p2, r0_rect=np.eye(3), tr_velo_to_cam=np.hstack([np.eye(3), np.zeros((3, 1))])
    )
    (out_dir / "calib" / f"{stem}.txt").write_text(kitti_io.format_calib(calib))
    (out_dir / "label_2" / f"{stem}.txt").write_text(kitti_io.format_labels(records))
    (out_dir / "depth" / f"{stem}.png").write_bytes(kitti_io.write_depth_png(depth))
    (out_dir / "mask" / f"{stem}.png").write_bytes(kitti_io.write_instance_mask(mask))


def cmd_synth(args) -> int:
    out_dir = Path(args.output_dir)
    for sub in ("calib", "label_2", "depth", "mask"):
        (out_dir / sub).mkdir(parents=True, exist_ok=True)
    for i in range(args.n_scenes):
        stem = f"{i:06d}"
        scene_seed, noise_seed = (
            _derive_seed(args.seed, i, "scene"),
            _derive_seed(args.seed, i, "noise"),
        )
        spec = synth.SceneSpec(
            n_boxes=args.n_boxes,
            depth_range=(args.min_depth, args.max_depth),
            seed=scene_seed,
        )
        noise = synth.NoiseModel(
            misalignment_bias=args.noise_bias,
            misalignment_jitter=args.noise_jitter,
            tail_width=args.tail_width,
            tail_stretch=args.tail_stretch,
            seed=noise_seed,
        )
        _synth_frame(out_dir, stem, spec, noise, args.clean)
        print(f"{stem}: {args.n_boxes} objects")
    return EXIT_OK


# ---------------------------------------------------------------------------
# pipeline


def _pipeline_frame(task: dict):
    """Process one frame; returns (stem, label text, warnings)."""
    stem = task["stem"]
    warnings = []
    intr = _load_frame_camera(Path(task["calib_dir"]), stem)
    depth = kitti_io.read_depth_png(
        _read_bytes(Path(task["depth_dir"]) / f"{stem}.png", "depth map")
    )
    mask = kitti_io.read_instance_mask(
        _read_bytes(Path(task["mask_dir"]) / f"{stem}.png", "instance mask")
    )
    records = []
    for instance_id in mask.instance_ids:
        cloud = extract_frustum_mask(depth, mask, int(instance_id), intr)
        mask_pixels = len(cloud)
        cloud = crop_cloud(
            cloud,
            min_depth=task["min_depth"],
            max_depth=task["max_depth"],
            max_y=task["max_y"],
        )
        if len(cloud) < 3:
            warnings.append(f"{stem}: instance {instance_id} has too few points")
            continue
        if task["trim_k"] > 0:
            cloud = trim_outliers(cloud, task["trim_k"])
        seed = _derive_seed(task["seed"], stem, int(instance_id))
        cloud = sample_points(cloud, task["sample_n"], seed)
        try:
            box = fit_box_baseline(cloud)
        except DegenerateInputError as exc:
            warnings.append(f"{stem}: instance {instance_id} fit failed ({exc})")
            continue
        proposal = mask_mbr(mask, int(instance_id))
        if task["refine"]:
            cfg = DEConfig(
                population_size=task["de_popsize"],
                weight_f=task["de_weight"],
                crossover_cr=task["de_crossover"],
                max_generations=task["de_generations"],
                tol=task["de_tol"],
                seed=seed,
            )
            coeffs = BoundCoeffs(a=np.array(task["bound_a"]), b=np.array(task["bound_b"]))
            # a fit within quantization distance of its proposal is already
            # consistent; re-optimizing it only trades 3D accuracy for
            # sub-pixel 2D agreement
            if consistency_loss(box, proposal, intr) > task["refine_gate"]:
                box = refine_box(box, proposal, intr, cfg, coeffs)
        score = min(max(mask_pixels / _SCORE_AREA_SCALE, 0.01), 1.0)
        records.append(
            kitti_io.label_from_box3d(
                box, task["class_name"], proposal, score=score
            )
        )
    return stem, kitti_io.format_labels(records), warnings


def cmd_pipeline(args) -> int:
    out_dir = Path(args.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    stems = _frame_stems(Path(args.depth_dir), ".png")
    if not stems:
        raise CliError(f"no depth maps (*.png) found in {args.depth_dir}")
    coeffs = _bound_coeffs(args)
    tasks = [
        {
            "stem": stem,
            "calib_dir": args.calib_dir,
            "depth_dir": args.depth_dir,
            "mask_dir": args.mask_dir,
            "sample_n": args.sample_n,
            "trim_k": args.trim_k,
            "min_depth": args.min_depth,
            "max_depth": args.max_depth,
            "max_y": args.max_y,
            "refine": not args.no_refine,
            "refine_gate": args.refine_gate,
            "seed": args.seed,
            "class_name": args.class_name,
            "de_popsize": args.de_popsize,
            "de_weight": args.de_weight,
            "de_crossover": args.de_crossover,
            "de_generations": args.de_generations,
            "de_tol": args.de_tol,
            "bound_a": coeffs.a.tolist(),
            "bound_b": coeffs.b.tolist(),
        }
        for stem in stems
    ]
    warnings = []
    if args.workers > 1:
        with ProcessPoolExecutor(max_workers=args.workers) as pool:
            results = list(pool.map(_pipeline_frame, tasks))
    else:
        results = [_pipeline_frame(task) for task in tasks]
    for stem, text, frame_warnings in results:
        (out_dir / f"{stem}.txt").write_text(text)
        n = len([line for line in text.splitlines() if line])
        print(f"{stem}: {n} detections")
        warnings.extend(frame_warnings)
    for message in warnings:
        log.warning("%s", message)
    if warnings and args.strict:
        raise CliError(f"{len(warnings)} frame-level failures in strict mode")
    return EXIT_WARNINGS if warnings else EXIT_OK


# ---------------------------------------------------------------------------
# refine


def cmd_refine(args) -> int:
    out_dir = Path(args.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    label_dir = Path(args.label_dir)
    stems = _frame_stems(label_dir, ".txt")
    if not stems:
        raise CliError(f"no label files (*.txt) found in {label_dir}")
    cfg_base = _de_config(args)
    coeffs = _bound_coeffs(args)
    warnings = []
    for stem in stems:
        intr = _load_frame_camera(Path(args.calib_dir), stem)
        records = kitti_io.parse_labels(
            _read_bytes(label_dir / f"{stem}.txt", "label file")
        )
        mask = None
        if args.proposal == "mask":
            mask = kitti_io.read_instance_mask(
                _read_bytes(Path(args.mask_dir) / f"{stem}.png", "instance mask")
            )
        refined = []
        for det_idx, rec in enumerate(records):
            if rec.class_name == "DontCare":
                refined.append(rec)
                continue
            proposal = rec.bbox2d
            if mask is not None:
                proposal = _best_mask_proposal(mask, rec.bbox2d)
                if proposal is None:
                    warnings.append(
                        f"{stem}: no mask overlaps detection {det_idx}, left unrefined"
                    )
                    refined.append(rec)
                    continue
            cfg = DEConfig(
                population_size=cfg_base.population_size,
                weight_f=cfg_base.weight_f,
                crossover_cr=cfg_base.crossover_cr,
                max_generations=cfg_base.max_generations,
                tol=cfg_base.tol,
                seed=_derive_seed(args.seed, stem, det_idx),
            )
            box = refine_box(kitti_io.label_to_box3d(rec), proposal, intr, cfg, coeffs)
            refined.append(
                kitti_io.label_from_box3d(
                    box,
                    rec.class_name,
                    rec.bbox2d,
                    truncation=rec.truncation,
                    occlusion=rec.occlusion,
                    alpha=rec.alpha,
                    score=rec.score,
                )
            )
        (out_dir / f"{stem}.txt").write_text(kitti_io.format_labels(refined))
        print(f"{stem}: refined {len(records)} detections")
    for message in warnings:
        log.warning("%s", message)
    return EXIT_WARNINGS if warnings else EXIT_OK


def _best_mask_proposal(mask, bbox):
    from .boxes import iou2d

    best, best_iou = None, 0.05
    for instance_id in mask.instance_ids:
        rect = mask_mbr(mask, int(instance_id))
        overlap = iou2d(rect, bbox)
        if overlap > best_iou:
            best, best_iou = rect, overlap
    return best


# ---------------------------------------------------------------------------
# eval


def _load_labels_dir(directory: Path, what: str) -> dict:
    if not directory.is_dir():
        raise CliError(f"missing {what} directory: {directory}")
    out = {}
    for path in sorted(directory.glob("*.txt")):
        out[path.stem] = kitti_io.parse_labels(path.read_bytes())
    return out


def cmd_eval(args) -> int:
    gt_labels = _load_labels_dir(Path(args.gt_dir), "ground-truth label")
    det_labels = _load_labels_dir(Path(args.det_dir), "detection label")
    if not gt_labels:
        raise CliError(f"no ground-truth labels found in {args.gt_dir}")
    gts = {
        stem: [evaluation.groundtruth_from_label(r) for r in recs]
        for stem, recs in gt_labels.items()
    }
    dets = {
        stem: [
            evaluation.detection_from_label(r)
            for r in det_labels.get(stem, [])
            if r.class_name != "DontCare"
        ]
        for stem in gt_labels
    }
    metrics = [m.strip().upper() for m in args.metrics.split(",") if m.strip()]
    thresholds = [float(t) for t in args.thresholds.split(",") if t.strip()]
    difficulties = [d.strip().lower() for d in args.difficulties.split(",") if d.strip()]
    classes = [c.strip() for c in args.classes.split(",") if c.strip()]
    ap_points, skip_zero = (41, True) if args.ap_mode == 40 else (11, False)
    rows = []
    had_undefined = False
    for metric in metrics:
        for class_name in classes:
            for difficulty in difficulties:
                for threshold in thresholds:
                    cfg = evaluation.EvalConfig(
                        metric=metric,
                        iou_threshold=threshold,
                        difficulty=None if difficulty == "all" else difficulty.capitalize(),
                        ap_points=ap_points,
                        skip_zero_recall=skip_zero,
                    )
                    try:
                        ap = evaluation.evaluate(dets, gts, cfg, class_name)
                    except UndefinedRecallError:
                        log.warning(
                            "no valid %s ground truth at difficulty %s",
                            class_name,
                            difficulty,
                        )
                        ap = float("nan")
                        had_undefined = True
                    rows.append((metric, class_name, difficulty, threshold, ap))
    csv_text = evaluation.results_csv(rows)
    print(csv_text, end="")
    if args.csv:
        Path(args.csv).parent.mkdir(parents=True, exist_ok=True)
        Path(args.csv).write_text(csv_text)
    return EXIT_WARNINGS if had_undefined else EXIT_OK


# ---------------------------------------------------------------------------
# parser / config plumbing


def _add_de_options(p: argparse.ArgumentParser):
    p.add_argument("--de-popsize", type=int, default=105, help="DE population size")
    p.add_argument("--de-weight", type=float, default=0.5, help="DE mutation factor F")
    p.add_argument("--de-crossover", type=float, default=0.9, help="DE crossover rate CR")
    p.add_argument("--de-generations", type=int, default=200, help="DE generation budget")
    p.add_argument("--de-tol", type=float, default=1e-8, help="DE population-spread stop")
    p.add_argument(
        "--bound-a",
        default=None,
        help="7 comma-separated constant bound half-widths (x,y,z,h,w,l,theta)",
    )
    p.add_argument(
        "--bound-b",
        default=None,
        help="7 comma-separated per-meter-of-depth bound growth rates",
    )


class _SubparsersWithConfig:
    """Subparser factory that lets ``--config`` appear after the subcommand too."""

    def __init__(self, parser):
        self._sub = parser.add_subparsers(dest="command", required=True)

    def add_parser(self, name, **kwargs):
        p = self._sub.add_parser(name, **kwargs)
        p.add_argument("--config", default=None, help=argparse.SUPPRESS)
        return p


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="plidarbox",
        description="Pseudo-LiDAR frustum detection toolkit",
    )
    parser.add_argument(
        "--config",
        default=None,
        help="flat key = value file pre-setting flags of the subcommand",
    )
    sub = _SubparsersWithConfig(parser)

    p = sub.add_parser("lift", help="lift depth maps to pseudo-LiDAR clouds")
    p.add_argument("--depth-dir", required=True)
    p.add_argument("--calib-dir", required=True)
    p.add_argument("--output-dir", required=True)
    p.add_argument("--format", choices=("bin", "ply"), default="bin")
    p.add_argument("--min-depth", type=float, default=None)
    p.add_argument("--max-depth", type=float, default=None)
    p.set_defaults(func=cmd_lift)

    p = sub.add_parser("synth", help="generate a synthetic KITTI-layout dataset")
    p.add_argument("--output-dir", required=True)
    p.add_argument("--n-scenes", type=int, default=10)
    p.add_argument("--n-boxes", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--min-depth", type=float, default=9.0)
    p.add_argument("--max-depth", type=float, default=22.0)
    p.add_argument("--clean", action="store_true", help="skip depth corruption")
    p.add_argument("--noise-bias", type=float, default=0.03)
    p.add_argument("--noise-jitter", type=float, default=0.02)
    p.add_argument("--tail-width", type=int, default=2)
    p.add_argument("--tail-stretch", type=float, default=0.5)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("pipeline", help="depth + masks -> refined 3D detections")
    p.add_argument("--depth-dir", required=True)
    p.add_argument("--calib-dir", required=True)
    p.add_argument("--mask-dir", required=True)
    p.add_argument("--output-dir", required=True)
    p.add_argument("--sample-n", type=int, default=512)
    p.add_argument("--trim-k", type=float, default=0.0)
    p.add_argument("--min-depth", type=float, default=None)
    p.add_argument("--max-depth", type=float, default=None)
    p.add_argument("--max-y", type=float, default=None,
                   help="drop frustum points below this camera-frame height (ground crop)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--class-name", default="Car")
    p.add_argument("--no-refine", action="store_true", help="skip consistency refinement")
    p.add_argument("--refine-gate", type=float, default=2.0,
                   help="only refine boxes whose consistency loss exceeds this")
    p.add_argument("--strict", action="store_true", help="abort on per-frame failures")
    _add_de_options(p)
    p.set_defaults(func=cmd_pipeline)

    p = sub.add_parser("refine", help="re-optimize existing detections against proposals")
    p.add_argument("--label-dir", required=True)
    p.add_argument("--calib-dir", required=True)
    p.add_argument("--mask-dir", default=None)
    p.add_argument("--output-dir", required=True)
    p.add_argument("--proposal", choices=("mask", "box"), default="mask")
    p.add_argument("--seed", type=int, default=0)
    _add_de_options(p)
    p.set_defaults(func=cmd_refine)

    p = sub.add_parser("eval", help="KITTI-style AP over label directories")
    p.add_argument("--gt-dir", required=True)
    p.add_argument("--det-dir", required=True)
    p.add_argument("--classes", default="Car")
    p.add_argument("--metrics", default="2D,BEV,3D")
    p.add_argument("--thresholds", default="0.5,0.7")
    p.add_argument("--difficulties", default="easy,moderate,hard")
    p.add_argument("--ap-mode", type=int, choices=(11, 40), default=11)
    p.add_argument("--csv", default=None, help="also write the table to this path")
    p.set_defaults(func=cmd_eval)
    return parser


def _load_config(path: str) -> dict:
    cfg_path = Path(path)
    if not cfg_path.is_file():
        raise CliError(f"missing config file: {cfg_path}")
    out = {}
    for lineno, raw in enumerate(cfg_path.read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise CliError(f"{cfg_path}:{lineno}: expected 'key = value'")
        key, _, value = line.partition("=")
        out[key.strip().replace("-", "_")] = value.strip()
    return out


_BOOL_TRUE = {"1", "true", "yes", "on"}
_BOOL_FALSE = {"0", "false", "no", "off"}


def _apply_config(subparser: argparse.ArgumentParser, config: dict):
    actions = {a.dest: a for a in subparser._actions}
    defaults = {}
    for key, raw in config.items():
        if key == "config":
            continue
        action = actions.get(key)
        if action is None:
            raise CliError(f"unknown config key: {key}")
        if isinstance(action, (argparse._StoreTrueAction, argparse._StoreFalseAction)):
            low = raw.lower()
            if low not in _BOOL_TRUE | _BOOL_FALSE:
                raise CliError(f"config key {key} expects a boolean, got {raw!r}")
            defaults[key] = low in _BOOL_TRUE
        elif action.type is not None:
            try:
                defaults[key] = action.type(raw)
            except ValueError:
                raise CliError(f"config key {key}: cannot parse {raw!r}")
        else:
            defaults[key] = raw
        if action.choices and defaults[key] not in action.choices:
            raise CliError(f"config key {key}: {raw!r} not in {action.choices}")
        if action.required:
            action.required = False
    subparser.set_defaults(**defaults)


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    logging.basicConfig(
        level=logging.DEBUG if os.environ.get("PLIDARBOX_VERBOSE") else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    parser = build_parser()
    try:
        config_path = None
        for i, token in enumerate(argv):
            if token == "--config" and i + 1 < len(argv):
                config_path = argv[i + 1]
            elif token.startswith("--config="):
                config_path = token.split("=", 1)[1]
        sub_actions = next(
            a for a in parser._actions if isinstance(a, argparse._SubParsersAction)
        )
        command = next((a for a in argv if a in sub_actions.choices), None)
        if config_path and command:
            _apply_config(sub_actions.choices[command], _load_config(config_path))
        args = parser.parse_args(argv)
        return args.func(args)
    except (CliError, FormatError, InvalidInputError, PlacementError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
