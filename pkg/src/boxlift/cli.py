"""Command-line interface.

Subcommands cover the full loop: ``synth`` writes synthetic datasets in the
on-disk formats, ``lift`` turns masks + attribute maps + calibration into
KITTI-style detection files, ``eval`` scores detections against ground
truth, ``roundtrip`` measures lifting error under controlled noise, and
``bench`` times the pipeline stages.  Report-producing commands write JSON
plus a CSV table and matplotlib figures next to it.

Exit codes: 0 success, 1 configuration or input error, 2 partial failure
(some frames or scenes failed, the rest were processed).
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import io as bio
from .camera import PinholeCamera
from .evaluation import EvalConfig, FrameMismatchError, evaluate
from .geom import LMOptions, RPLayout, box_corners_3d
from .synth import (
    EmptySceneError,
    NoiseSpec,
    SceneSpec,
    perturb,
    random_scene_spec,
    render_scene,
    roundtrip_report,
)
from .voting import aggregate_instance, eight_point_seed, instances_to_boxes
from .geom import refine_box_lm

log = logging.getLogger("boxlift")

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_PARTIAL = 2

_CAMERA_DEFAULTS = {"width": 621, "height": 188, "fov_deg": 81.0}

DEFAULTS: dict[str, dict] = {
    "lift": {
        "masks": None, "maps": None, "calib": None, "out": None,
        "layout": "8rp", "no_lm": False, "jobs": 1, "overlay": False,
    },
    "eval": {
        "gt": None, "det": None, "iou": 0.7, "recall": "r40", "metric": "3d",
        "category": "Car", "out": None, "json": False, "no_figures": False,
    },
    "synth": {
        "scenes": 1, "seed": 0, "layout": "8rp", "out": None, "boxes": 2,
        "noise_rp": 0.0, "noise_dims": 0.0, "noise_angle": 0.0, "occlusion": 0.0,
        "no_angles": False, **_CAMERA_DEFAULTS,
    },
    "roundtrip": {
        "scenes": 100, "seed": 0, "layout": "both", "out": ".", "report": None,
        "noise_rp": 0.0, "noise_dims": 0.0, "noise_angle": 0.0, "occlusion": 0.0,
        "json": False, "no_figures": False, **_CAMERA_DEFAULTS,
    },
    "bench": {
        "scenes": 20, "seed": 0, "layout": "8rp", "boxes": 2, **_CAMERA_DEFAULTS,
    },
}


def _add_camera_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--width", type=int, default=argparse.SUPPRESS, help="image width in px")
    p.add_argument("--height", type=int, default=argparse.SUPPRESS, help="image height in px")
    p.add_argument("--fov-deg", type=float, default=argparse.SUPPRESS,
                   help="horizontal field of view in degrees")


def _add_noise_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--noise-rp", type=float, default=argparse.SUPPRESS,
                   help="Gaussian sigma on reference-point offsets (px)")
    p.add_argument("--noise-dims", type=float, default=argparse.SUPPRESS,
                   help="Gaussian sigma on dimension votes (m)")
    p.add_argument("--noise-angle", type=float, default=argparse.SUPPRESS,
                   help="Gaussian sigma on angle channels")
    p.add_argument("--occlusion", type=float, default=argparse.SUPPRESS,
                   help="fraction of pixels per instance with corrupted votes")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="boxlift",
        description="Camera-independent 3D box lifting from per-pixel votes.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("lift", help="lift masks + attribute maps to 3D detections")
    p.add_argument("--masks", default=argparse.SUPPRESS, help="directory of 16-bit mask PNGs")
    p.add_argument("--maps", default=argparse.SUPPRESS, help="directory of .blam attribute maps")
    p.add_argument("--calib", default=argparse.SUPPRESS, help="directory of KITTI calib files")
    p.add_argument("--out", default=argparse.SUPPRESS, help="output directory for label files")
    p.add_argument("--layout", choices=["2rp", "8rp"], default=argparse.SUPPRESS)
    p.add_argument("--no-lm", action="store_true", default=argparse.SUPPRESS,
                   help="skip reprojection refinement for the 8rp layout")
    p.add_argument("--jobs", type=int, default=argparse.SUPPRESS, help="parallel frame workers")
    p.add_argument("--overlay", action="store_true", default=argparse.SUPPRESS,
                   help="also write projected wireframe sidecar files")

    p = sub.add_parser("eval", help="KITTI-style AP evaluation of detection files")
    p.add_argument("--gt", default=argparse.SUPPRESS, help="ground-truth label directory")
    p.add_argument("--det", default=argparse.SUPPRESS, help="detection label directory")
    p.add_argument("--iou", type=float, default=argparse.SUPPRESS, help="IoU threshold")
    p.add_argument("--recall", choices=["r11", "r40"], default=argparse.SUPPRESS)
    p.add_argument("--metric", choices=["3d", "bev"], default=argparse.SUPPRESS)
    p.add_argument("--category", default=argparse.SUPPRESS, help="evaluated object class")
    p.add_argument("--out", default=argparse.SUPPRESS, help="report JSON path")
    p.add_argument("--json", action="store_true", default=argparse.SUPPRESS,
                   help="print the report as JSON on stdout")
    p.add_argument("--no-figures", action="store_true", default=argparse.SUPPRESS)

    p = sub.add_parser("synth", help="generate a synthetic dataset on disk")
    p.add_argument("--scenes", type=int, default=argparse.SUPPRESS)
    p.add_argument("--seed", type=int, default=argparse.SUPPRESS)
    p.add_argument("--layout", choices=["2rp", "8rp"], default=argparse.SUPPRESS)
    p.add_argument("--out", default=argparse.SUPPRESS, help="output dataset directory")
    p.add_argument("--boxes", type=int, default=argparse.SUPPRESS, help="boxes per scene")
    p.add_argument("--no-angles", action="store_true", default=argparse.SUPPRESS,
                   help="omit the rotation channels")
    _add_noise_flags(p)
    _add_camera_flags(p)

    p = sub.add_parser("roundtrip", help="render, corrupt, lift, and report errors")
    p.add_argument("--scenes", type=int, default=argparse.SUPPRESS, help="number of trials")
    p.add_argument("--seed", type=int, default=argparse.SUPPRESS)
    p.add_argument("--layout", choices=["2rp", "8rp", "both"], default=argparse.SUPPRESS)
    p.add_argument("--out", default=argparse.SUPPRESS, help="directory for report artifacts")
    p.add_argument("--report", default=argparse.SUPPRESS, help="explicit report JSON path")
    p.add_argument("--json", action="store_true", default=argparse.SUPPRESS,
                   help="print the report as JSON on stdout")
    p.add_argument("--no-figures", action="store_true", default=argparse.SUPPRESS)
    _add_noise_flags(p)
    _add_camera_flags(p)

    p = sub.add_parser("bench", help="time the pipeline stages on synthetic scenes")
    p.add_argument("--scenes", type=int, default=argparse.SUPPRESS)
    p.add_argument("--seed", type=int, default=argparse.SUPPRESS)
    p.add_argument("--layout", choices=["2rp", "8rp"], default=argparse.SUPPRESS)
    p.add_argument("--boxes", type=int, default=argparse.SUPPRESS)
    _add_camera_flags(p)

    for name, sp in sub.choices.items():
        sp.add_argument("--config", default=argparse.SUPPRESS,
                        help="JSON file with option defaults (flags win)")
    return parser


def _merge_options(command: str, args: argparse.Namespace) -> dict:
    """defaults < config file < explicit flags."""
    given = {k: v for k, v in vars(args).items() if k != "command"}
    config_path = given.pop("config", None)
    merged = dict(DEFAULTS[command])
    if config_path is not None:
        try:
            loaded = json.loads(Path(config_path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ValueError(f"cannot read config {config_path}: {exc}") from exc
        if not isinstance(loaded, dict):
            raise ValueError(f"config {config_path} must hold a JSON object")
        unknown = sorted(set(loaded) - set(merged))
        if unknown:
            raise ValueError(f"unknown config key(s) for {command}: {', '.join(unknown)}")
        merged.update(loaded)
    merged.update(given)
    return merged


# ---------------------------------------------------------------------------
# Atomic output helpers


def _atomic_write(path: Path, write_fn) -> None:
    """Write via a temp file in the same directory, then rename into place.

    The temp name keeps the real suffix so format-sniffing writers
    (matplotlib, Pillow) behave the same as for the final path.
    """
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".{path.stem}.{os.getpid()}.tmp{path.suffix}")
    try:
        write_fn(tmp)
        os.replace(tmp, path)
    finally:
        if tmp.exists():
            tmp.unlink()


def _atomic_text(path: Path, text: str) -> None:
    _atomic_write(path, lambda tmp: tmp.write_text(text))


# ---------------------------------------------------------------------------
# lift


def _require(opts: dict, keys: list[str], command: str) -> None:
    missing = [k for k in keys if not opts.get(k)]
    if missing:
        flags = ", ".join("--" + k.replace("_", "-") for k in missing)
        raise ValueError(f"{command} requires {flags}")


def _lift_frame(stem: str, opts: dict, layout: RPLayout) -> int:
    masks_dir, maps_dir = Path(opts["masks"]), Path(opts["maps"])
    calib_dir, out_dir = Path(opts["calib"]), Path(opts["out"])
    mask = bio.read_mask_png(masks_dir / f"{stem}.png")
    maps = bio.read_attribute_maps(maps_dir / f"{stem}.blam")
    if maps.layout is not layout:
        raise ValueError(
            f"maps for {stem} use layout {maps.layout.n_points}rp, requested {layout.n_points}rp"
        )
    maps.validate_against(mask)
    calib = bio.parse_calib(
        (calib_dir / f"{stem}.txt").read_text(), image_size=(mask.width, mask.height)
    )
    cam = calib.intrinsics

    aggs = [aggregate_instance(mask, maps, iid, cam) for iid in mask.instance_ids()]
    failures: list = []
    results = instances_to_boxes(
        aggs, cam, layout, refine=not opts["no_lm"], failures=failures
    )
    for iid, exc in failures:
        log.warning("frame %s: instance %d skipped (%s)", stem, iid, exc)
    labels = [bio.detection_to_label(box, conf, cam) for box, conf in results]
    _atomic_text(out_dir / f"{stem}.txt", bio.write_kitti_label_file(labels))
    if opts["overlay"]:
        lines = []
        for (box, _), label in zip(results, labels):
            px = cam.project(box_corners_3d(box))
            coords = " ".join(f"{v:.3f}" for v in px.reshape(-1))
            lines.append(f"{label.type} {coords}")
        _atomic_text(out_dir / f"{stem}.wire.txt", "\n".join(lines) + ("\n" if lines else ""))
    return len(results)


def cmd_lift(opts: dict) -> int:
    _require(opts, ["masks", "maps", "calib", "out"], "lift")
    masks_dir = Path(opts["masks"])
    if not masks_dir.is_dir():
        log.error("mask directory %s does not exist", masks_dir)
        return EXIT_CONFIG
    for key in ("maps", "calib"):
        if not Path(opts[key]).is_dir():
            log.error("%s directory %s does not exist", key, opts[key])
            return EXIT_CONFIG
    layout = RPLayout.from_string(opts["layout"])
    stems = sorted(p.stem for p in masks_dir.glob("*.png"))
    if not stems:
        log.warning("no mask files in %s; nothing to do", masks_dir)
        return EXIT_OK

    jobs = max(int(opts["jobs"]), 1)
    errors: dict[str, Exception] = {}
    total = 0
    if jobs == 1:
        for stem in stems:
            try:
                total += _lift_frame(stem, opts, layout)
            except Exception as exc:  # per-frame isolation
                errors[stem] = exc
    else:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            futures = {stem: pool.submit(_lift_frame, stem, opts, layout) for stem in stems}
        for stem, fut in futures.items():
            try:
                total += fut.result()
            except Exception as exc:
                errors[stem] = exc
    for stem in sorted(errors):
        log.error("frame %s failed: %s", stem, errors[stem])
    log.info("lifted %d boxes from %d/%d frames", total, len(stems) - len(errors), len(stems))
    return EXIT_PARTIAL if errors else EXIT_OK


# ---------------------------------------------------------------------------
# eval


def _read_label_dir(directory: Path) -> dict[str, list]:
    out = {}
    for path in sorted(directory.glob("*.txt")):
        out[path.stem] = bio.parse_kitti_label_file(path.read_text())
    return out


def cmd_eval(opts: dict) -> int:
    _require(opts, ["gt", "det"], "eval")
    gt_dir, det_dir = Path(opts["gt"]), Path(opts["det"])
    for d in (gt_dir, det_dir):
        if not d.is_dir():
            log.error("directory %s does not exist", d)
            return EXIT_CONFIG
    cfg = EvalConfig(
        iou_threshold=float(opts["iou"]),
        recall_variant=opts["recall"],
        metric=opts["metric"],
        category=opts["category"],
    )
    try:
        gt_labels = _read_label_dir(gt_dir)
        det_labels = _read_label_dir(det_dir)
    except bio.FormatError as exc:
        log.error("failed to parse labels: %s", exc)
        return EXIT_CONFIG
    gts, dontcare = {}, {}
    for stem, labels in gt_labels.items():
        gts[stem], dontcare[stem] = bio.labels_to_gt(labels)
    dets = {stem: bio.labels_to_detections(labels) for stem, labels in det_labels.items()}
    try:
        report = evaluate(gts, dets, cfg, dontcare)
    except FrameMismatchError as exc:
        log.error("%s", exc)
        return EXIT_CONFIG

    if opts["json"]:
        print(json.dumps(bio.eval_report_to_dict(report), sort_keys=True))
    else:
        print(f"AP ({cfg.metric}, {cfg.recall_variant}, IoU >= {cfg.iou_threshold:.2f}, "
              f"{cfg.category})")
        for name in ("easy", "moderate", "hard"):
            print(f"  {name:<10} {report.per_difficulty[name].ap * 100.0:7.2f}")

    if opts["out"]:
        out = Path(opts["out"])
        _atomic_write(out, lambda tmp: bio.write_eval_report(tmp, report))
        base = out.with_suffix("") if out.suffix else out
        _atomic_write(base.with_name(base.name + ".csv"),
                      lambda tmp: bio.write_eval_csv(tmp, report))
        if not opts["no_figures"]:
            from .figures import save_pr_figure

            _atomic_write(base.with_name(base.name + "_pr.png"),
                          lambda tmp: save_pr_figure(tmp, report))
    return EXIT_OK


# ---------------------------------------------------------------------------
# synth


def _camera_from_opts(opts: dict) -> PinholeCamera:
    return PinholeCamera.from_fov(
        math.radians(float(opts["fov_deg"])), int(opts["width"]), int(opts["height"])
    )


def _noise_from_opts(opts: dict) -> NoiseSpec:
    return NoiseSpec(
        sigma_dims=float(opts["noise_dims"]),
        sigma_rp=float(opts["noise_rp"]),
        sigma_angle=float(opts["noise_angle"]),
        occlusion_fraction=float(opts["occlusion"]),
    )


def cmd_synth(opts: dict) -> int:
    _require(opts, ["out"], "synth")
    cam = _camera_from_opts(opts)
    noise = _noise_from_opts(opts)
    layout = RPLayout.from_string(opts["layout"])
    out = Path(opts["out"])
    n_scenes = int(opts["scenes"])
    if n_scenes <= 0:
        log.warning("no scenes requested; nothing to do")
        return EXIT_OK
    seed = int(opts["seed"])
    calib = bio.KittiCalib(
        p2=np.array([[cam.fx, 0.0, cam.cx, 0.0], [0.0, cam.fy, cam.cy, 0.0],
                     [0.0, 0.0, 1.0, 0.0]]),
        image_size=(cam.width, cam.height),
    )
    failed = 0
    for i in range(n_scenes):
        rng = np.random.default_rng(seed + i)
        spec = random_scene_spec(
            cam, rng, layout, n_boxes=int(opts["boxes"]),
            include_angles=not opts["no_angles"],
        )
        try:
            mask, maps, gt = render_scene(spec)
        except EmptySceneError as exc:
            log.warning("scene %d skipped: %s", i, exc)
            failed += 1
            continue
        if not noise.is_zero:
            maps = perturb(maps, noise, seed=int(rng.integers(2**63)), mask=mask)
        stem = f"{i:06d}"
        _atomic_write(out / "masks" / f"{stem}.png",
                      lambda tmp, m=mask: bio.write_mask_png(tmp, m))
        _atomic_write(out / "maps" / f"{stem}.blam",
                      lambda tmp, m=maps: bio.write_attribute_maps(tmp, m))
        _atomic_text(out / "calib" / f"{stem}.txt", bio.write_calib(calib))
        labels = [
            bio.detection_to_label(obj.box, 1.0, cam) for obj in gt
        ]
        for label, obj in zip(labels, gt):
            label.bbox = obj.bbox2d
            label.score = None
        _atomic_text(out / "labels" / f"{stem}.txt", bio.write_kitti_label_file(labels))
    log.info("wrote %d/%d scenes under %s", n_scenes - failed, n_scenes, out)
    return EXIT_PARTIAL if failed else EXIT_OK


# ---------------------------------------------------------------------------
# roundtrip


def cmd_roundtrip(opts: dict) -> int:
    cam = _camera_from_opts(opts)
    noise = _noise_from_opts(opts)
    layouts = ("2rp", "8rp") if opts["layout"] == "both" else (opts["layout"],)
    report = roundtrip_report(
        cam, noise, trials=int(opts["scenes"]), seed=int(opts["seed"]), layouts=layouts
    )
    report_path = Path(opts["report"]) if opts["report"] else Path(opts["out"]) / "roundtrip.json"
    _atomic_write(report_path, lambda tmp: bio.write_roundtrip_report(tmp, report))
    base = report_path.with_suffix("") if report_path.suffix else report_path
    _atomic_write(base.with_name(base.name + ".csv"),
                  lambda tmp: bio.write_roundtrip_csv(tmp, report))
    if not opts["no_figures"]:
        from .figures import save_roundtrip_figures

        save_roundtrip_figures(base, report)
    if opts["json"]:
        print(json.dumps(report.to_dict(), sort_keys=True))
    else:
        for layout in layouts:
            stats = report.stats[layout]["center_err"]
            print(f"{layout}: median center error {stats['median']:.4f} m "
                  f"(p95 {stats['p95']:.4f} m, {report.failures[layout]} failures)")
    return EXIT_OK


# ---------------------------------------------------------------------------
# bench


def _percentiles(samples: list[float]) -> tuple[float, float, float]:
    arr = np.array(samples) * 1e3
    return float(arr.mean()), float(np.median(arr)), float(np.percentile(arr, 95))


def cmd_bench(opts: dict) -> int:
    cam = _camera_from_opts(opts)
    layout = RPLayout.from_string(opts["layout"])
    n_scenes = int(opts["scenes"])
    seed = int(opts["seed"])
    stage_times: dict[str, list[float]] = {"aggregate": [], "lift": []}
    if layout is RPLayout.EIGHT:
        stage_times["refine"] = []
    for i in range(n_scenes):
        rng = np.random.default_rng(seed + i)
        spec = random_scene_spec(cam, rng, layout, n_boxes=int(opts["boxes"]))
        try:
            mask, maps, gt = render_scene(spec)
        except EmptySceneError:
            continue
        for obj in gt:
            t0 = time.perf_counter()
            agg = aggregate_instance(mask, maps, obj.instance_id, cam)
            t1 = time.perf_counter()
            stage_times["aggregate"].append(t1 - t0)
            if layout is RPLayout.TWO:
                instances_to_boxes([agg], cam, layout)
                stage_times["lift"].append(time.perf_counter() - t1)
            else:
                init = eight_point_seed(cam, agg)
                t2 = time.perf_counter()
                stage_times["lift"].append(t2 - t1)
                refine_box_lm(cam, init, agg.rps_abs, LMOptions())
                stage_times["refine"].append(time.perf_counter() - t2)
    print(f"{'stage':<12}{'n':>6}{'mean_ms':>12}{'median_ms':>12}{'p95_ms':>12}")
    for stage, samples in stage_times.items():
        if not samples:
            print(f"{stage:<12}{0:>6}{'-':>12}{'-':>12}{'-':>12}")
            continue
        mean, med, p95 = _percentiles(samples)
        print(f"{stage:<12}{len(samples):>6}{mean:>12.3f}{med:>12.3f}{p95:>12.3f}")
    return EXIT_OK


# ---------------------------------------------------------------------------


_COMMANDS = {
    "lift": cmd_lift,
    "eval": cmd_eval,
    "synth": cmd_synth,
    "roundtrip": cmd_roundtrip,
    "bench": cmd_bench,
}


def main(argv=None) -> int:
    logging.basicConfig(stream=sys.stderr, level=logging.INFO, format="%(levelname)s %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse uses exit code 2 for usage errors; map onto "config error".
        return EXIT_OK if exc.code in (0, None) else EXIT_CONFIG
    try:
        opts = _merge_options(args.command, args)
        return _COMMANDS[args.command](opts)
    except ValueError as exc:
        log.error("%s", exc)
        return EXIT_CONFIG


if __name__ == "__main__":
    raise SystemExit(main())
