"""Acceptance gate: one test and one printed PASS/FAIL line per criterion.

Run with ``pytest tests/test_acceptance.py -v -s`` to see the lines.
Every tolerance is pinned in the assertion itself.
"""

import json
import math
import struct
import time

import numpy as np

from boxlift import (
    AttributeMaps,
    Box3D,
    Detection,
    Dimensions,
    EmptySceneError,
    EquirectangularCamera,
    EvalConfig,
    GtObject,
    InstanceMask,
    LMOptions,
    NoiseSpec,
    PinholeCamera,
    RPLayout,
    SceneSpec,
    aggregate_instance,
    ap_from_matches,
    bev_iou,
    box_reference_points_3d,
    decode_viewing_angle,
    encode_viewing_angle,
    instances_to_boxes,
    iou_3d,
    lift_two_point,
    normalize_angle,
    random_box,
    refine_box_lm,
    rel_to_abs,
    render_scene,
    reprojection_jacobian,
    reprojection_residual,
    roundtrip_report,
)
from boxlift.evaluation import Difficulty
from boxlift.io import (
    FormatError,
    decode_attribute_maps,
    encode_attribute_maps,
    parse_calib,
    parse_kitti_label_file,
    read_mask_png,
    write_calib,
    write_kitti_label_file,
    write_mask_png,
)

from conftest import DATA, make_box
from test_evaluation import brute_force_ap, det_for, gt_at

PIN81 = PinholeCamera.from_fov(math.radians(81.0), 621, 188)
PIN48 = PinholeCamera.from_fov(math.radians(48.0), 621, 188)


def _line(name: str, ok: bool, detail: str) -> None:
    print(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")
    assert ok, f"{name}: {detail}"


def _lift_scene(cam, boxes, layout):
    mask, maps, gt = render_scene(SceneSpec(cam, boxes, layout))
    aggs = [aggregate_instance(mask, maps, o.instance_id, cam) for o in gt]
    lifted = instances_to_boxes(aggs, cam, layout)
    assert len(lifted) == len(gt)
    return [est for est, _ in lifted], [o.box for o in gt]


def test_criterion_1_end_to_end_exactness():
    """100 zero-noise scenes, both layouts, recovered to tight tolerances."""
    t0 = time.perf_counter()
    worst_center = worst_yaw = worst_dims = 0.0
    n_objects = 0
    for i in range(100):
        rng = np.random.default_rng(1000 + i)
        boxes = [random_box(rng) for _ in range(int(rng.integers(1, 4)))]
        for layout in (RPLayout.TWO, RPLayout.EIGHT):
            try:
                ests, gts = _lift_scene(PIN81, boxes, layout)
            except EmptySceneError:
                continue
            for est, gt in zip(ests, gts):
                worst_center = max(
                    worst_center,
                    float(np.linalg.norm(est.bottom_center - gt.bottom_center)),
                )
                worst_yaw = max(worst_yaw, abs(normalize_angle(est.ry - gt.ry)))
                worst_dims = max(
                    worst_dims,
                    float(np.max(np.abs(est.dims.as_array() - gt.dims.as_array()))),
                )
                n_objects += 1
    elapsed = time.perf_counter() - t0
    ok = (
        worst_center < 1e-6
        and worst_yaw < 1e-6
        and worst_dims < 1e-9
        and elapsed < 10.0
    )
    _line(
        "criterion-1 end-to-end exactness",
        ok,
        f"{n_objects} objects: center {worst_center:.2e} m (<1e-6), "
        f"yaw {worst_yaw:.2e} rad (<1e-6), dims {worst_dims:.2e} m (<1e-9), "
        f"{elapsed:.2f}s (<10s)",
    )


def test_criterion_2_camera_independence():
    """Same 3D scenes through 81/48 degree pinholes and an equirect panorama."""
    eq = EquirectangularCamera(2048, 1024)
    rng = np.random.default_rng(77)
    boxes = [
        random_box(rng, z_range=(8.0, 30.0), az_range=(-0.25, 0.25))
        for _ in range(20)
    ]
    worst_pin = worst_eq = 0.0
    for layout in (RPLayout.TWO, RPLayout.EIGHT):
        for box in boxes:
            out = {}
            for name, cam in (("81", PIN81), ("48", PIN48), ("eq", eq)):
                (est,), _ = _lift_scene(cam, [box], layout)
                out[name] = est.bottom_center
            worst_pin = max(worst_pin, float(np.linalg.norm(out["81"] - out["48"])))
            worst_eq = max(worst_eq, float(np.linalg.norm(out["eq"] - out["81"])))
    ok = worst_pin < 1e-6 and worst_eq < 1e-5
    _line(
        "criterion-2 camera independence",
        ok,
        f"pinhole 81 vs 48: {worst_pin:.2e} m (<1e-6); "
        f"equirect vs pinhole: {worst_eq:.2e} m (<1e-5); both layouts",
    )


def test_criterion_3_redundancy_benefit():
    """200 paired noisy trials: eight points beat the two-point lift."""
    frozen = json.loads((DATA / "roundtrip_fixture.json").read_text())
    rep = roundtrip_report(
        PIN81, NoiseSpec(sigma_rp=0.5), trials=200, seed=424242,
        layouts=("2rp", "8rp"),
    )
    live = json.loads(json.dumps(rep.to_dict()))
    m2 = rep.stats["2rp"]["center_err"]["median"]
    m8 = rep.stats["8rp"]["center_err"]["median"]
    ok = live == frozen and m8 < m2
    _line(
        "criterion-3 redundancy benefit",
        ok,
        f"median center error 8rp {m8:.6f} m < 2rp {m2:.6f} m "
        f"({m2 / m8:.1f}x); report identical to pinned-seed fixture: "
        f"{live == frozen}",
    )


def test_criterion_4_lm_correctness():
    """Perturbed starts converge to truth; cost never increases; Jacobian exact."""
    rng = np.random.default_rng(314159)
    n, hits, monotone = 500, 0, 0
    for _ in range(n):
        box = random_box(rng, z_range=(8.0, 35.0), perpendicular=False)
        predicted = PIN81.project(box_reference_points_3d(box, RPLayout.EIGHT))
        init = Box3D(
            box.x + rng.uniform(-2, 2),
            box.y + rng.uniform(-0.3, 0.3),
            box.z + rng.uniform(-2, 2),
            box.dims,
            box.ry + rng.uniform(-0.2, 0.2),
        )
        refined, diag = refine_box_lm(PIN81, init, predicted, LMOptions())
        err = max(
            abs(refined.x - box.x),
            abs(refined.y - box.y),
            abs(refined.z - box.z),
            abs(normalize_angle(refined.ry - box.ry)),
        )
        hits += err < 1e-4 and diag.iterations <= 100
        monotone += all(
            b <= a + 1e-15 for a, b in zip(diag.cost_history, diag.cost_history[1:])
        )

    worst_jac = 0.0
    for _ in range(25):
        box = random_box(rng, z_range=(8.0, 35.0), perpendicular=False)
        predicted = PIN81.project(box_reference_points_3d(box, RPLayout.EIGHT))
        jac = reprojection_jacobian(PIN81, box, optimize_dims=False)
        eps = 1e-6
        params = [box.x, box.y, box.z, box.ry]
        for k in range(4):
            hi, lo = list(params), list(params)
            hi[k] += eps
            lo[k] -= eps
            box_hi = Box3D(hi[0], hi[1], hi[2], box.dims, hi[3])
            box_lo = Box3D(lo[0], lo[1], lo[2], box.dims, lo[3])
            num = (
                reprojection_residual(PIN81, box_hi, predicted)
                - reprojection_residual(PIN81, box_lo, predicted)
            ) / (2 * eps)
            scale = max(float(np.max(np.abs(num))), 1.0)
            worst_jac = max(worst_jac, float(np.max(np.abs(jac[:, k] - num))) / scale)

    ok = hits >= 495 and monotone == n and worst_jac < 1e-4
    _line(
        "criterion-4 LM correctness",
        ok,
        f"{hits}/{n} converged to GT within 1e-4 (need >=495); "
        f"{monotone}/{n} monotone cost histories; "
        f"Jacobian vs central differences {worst_jac:.2e} rel (<1e-4)",
    )


def test_criterion_5_metric_fidelity():
    """IoU vs Monte-Carlo oracles; AP vs a brute-force reference; perfect AP=1."""
    oracle = json.loads((DATA / "iou_mc_oracle.json").read_text())
    worst_bev = worst_3d = 0.0
    for pair in oracle["pairs"]:
        b1 = Box3D(*pair["box1"][:3], Dimensions(*pair["box1"][3:6]), pair["box1"][6])
        b2 = Box3D(*pair["box2"][:3], Dimensions(*pair["box2"][3:6]), pair["box2"][6])
        worst_bev = max(worst_bev, abs(bev_iou(b1, b2) - pair["mc_bev"]))
        worst_3d = max(worst_3d, abs(iou_3d(b1, b2) - pair["mc_3d"]))

    gts = {"000000": [gt_at(x=10.0 * i) for i in range(5)]}
    dets = {
        "000000": [
            det_for(gts["000000"][0], 0.95),
            Detection(make_box(x=-30.0), 0.90, "Car"),
            det_for(gts["000000"][1], 0.85),
            det_for(gts["000000"][2], 0.80),
            Detection(make_box(x=-35.0), 0.75, "Car"),
            det_for(gts["000000"][3], 0.70),
            det_for(gts["000000"][4], 0.65),
        ]
    }
    worst_ap = 0.0
    perfect_ok = True
    perfect = {"000000": [det_for(g, 1.0) for g in gts["000000"]]}
    for variant in ("r11", "r40"):
        cfg = EvalConfig(recall_variant=variant)
        got = ap_from_matches(gts, dets, cfg, Difficulty.HARD).ap
        want = brute_force_ap(gts, dets, cfg, Difficulty.HARD)
        worst_ap = max(worst_ap, abs(got - want))
        perfect_ok &= ap_from_matches(gts, perfect, cfg, Difficulty.HARD).ap == 1.0

    ok = (
        worst_bev <= 1e-3 and worst_3d <= 1e-3
        and worst_ap <= 1e-12 and perfect_ok
    )
    _line(
        "criterion-5 metric fidelity",
        ok,
        f"IoU vs MC ({oracle['samples']} samples, {len(oracle['pairs'])} pairs): "
        f"bev {worst_bev:.2e}, 3d {worst_3d:.2e} (<=1e-3); "
        f"AP vs brute force {worst_ap:.1e} (<=1e-12); perfect AP==1.0: {perfect_ok}",
    )


def test_criterion_6_equation_checks():
    """Closed-form anchors: right-angle range, offset identity, angle codec."""
    # a right angle subtended by the two points puts the midpoint at h/2
    cam = PinholeCamera(fx=1000.0, fy=1000.0, cx=600.0, cy=300.0,
                        width=1200, height=600)
    est = lift_two_point(
        cam, np.array([600.0, -700.0]), np.array([600.0, 1300.0]),
        Dimensions(3.0, 1.7, 3.9), 0.0,
    )
    mid = est.bottom_center - np.array([0.0, 1.5, 0.0])
    d = float(np.linalg.norm(mid))
    d_ok = abs(d - 1.5) <= 1.5 * 1e-12

    # offset-plus-grid reconstructs the projected point bit for bit
    rng = np.random.default_rng(11)
    spec = SceneSpec(PIN81, [random_box(rng)], RPLayout.EIGHT)
    mask, maps, gt = render_scene(spec)
    proj = PIN81.project(box_reference_points_3d(gt[0].box, RPLayout.EIGHT))
    ys, xs = mask.pixels(gt[0].instance_id)
    ident_ok = True
    for k in range(8):
        au, av = rel_to_abs(
            maps.rp_maps[2 * k][ys, xs], maps.rp_maps[2 * k + 1][ys, xs],
            xs.astype(float), ys.astype(float),
        )
        ident_ok &= bool(np.all(au == proj[k, 0]) and np.all(av == proj[k, 1]))

    alphas = np.linspace(-math.pi, math.pi, 361)
    worst_codec = max(
        abs(normalize_angle(decode_viewing_angle(encode_viewing_angle(a)) - a))
        for a in alphas
    )

    worst_alpha = 0.0
    for stem in ("000000", "000001", "000002"):
        text = (DATA / f"kitti/label_2/{stem}.txt").read_text()
        for lb in parse_kitti_label_file(text):
            if lb.type == "DontCare":
                continue
            want = normalize_angle(lb.ry - math.atan2(lb.x, lb.z))
            worst_alpha = max(worst_alpha, abs(normalize_angle(want - lb.alpha)))

    ok = d_ok and ident_ok and worst_codec <= 1e-9 and worst_alpha <= 0.02
    _line(
        "criterion-6 equation-level checks",
        ok,
        f"right-angle range {d:.15f} vs 1.5 (rel<=1e-12); offset identity exact: "
        f"{ident_ok}; codec round trip {worst_codec:.1e} (<=1e-9) over 361 angles; "
        f"observation angle vs bundled labels {worst_alpha:.4f} rad (<=0.02)",
    )


def test_criterion_7_format_fidelity(tmp_path):
    """Round trips are exact; a malformed corpus fails loudly, never crashes."""
    labels = parse_kitti_label_file((DATA / "kitti/label_2/000001.txt").read_text())
    labels_ok = parse_kitti_label_file(write_kitti_label_file(labels)) == labels

    calib = parse_calib((DATA / "kitti/calib/000000.txt").read_text())
    calib_ok = np.array_equal(parse_calib(write_calib(calib)).p2, calib.p2)

    rng = np.random.default_rng(40)
    maps = AttributeMaps(
        RPLayout.EIGHT,
        rng.normal(size=(3, 6, 7)),
        rng.normal(size=(16, 6, 7)),
        rng.normal(size=(4, 6, 7)),
    )
    blob = encode_attribute_maps(maps)
    maps_ok = encode_attribute_maps(decode_attribute_maps(blob)) == blob

    mask = InstanceMask(rng.integers(0, 0xFFFF, size=(20, 30), dtype=np.uint16))
    write_mask_png(tmp_path / "m.png", mask)
    mask_ok = np.array_equal(read_mask_png(tmp_path / "m.png").labels, mask.labels)

    good = (
        "Car 0.00 0 -1.58 587.01 173.33 614.12 200.12 "
        "1.65 1.67 3.64 -0.65 1.71 46.70 -1.59"
    )
    t = good.split()
    corpus = [
        lambda: parse_kitti_label_file(" ".join(t[:14])),
        lambda: parse_kitti_label_file(" ".join(t + ["1.0", "2.0"])),
        lambda: parse_kitti_label_file(" ".join(["Car", "abc"] + t[2:])),
        lambda: parse_kitti_label_file(" ".join(t[:3] + ["nan"] + t[4:])),
        lambda: parse_kitti_label_file(" ".join(t[:2] + ["1.5"] + t[3:])),
        lambda: parse_kitti_label_file(" ".join(t[:13] + ["inf"] + t[14:])),
        lambda: parse_kitti_label_file(" ".join(t[:13] + ["-inf"] + t[14:])),
        lambda: parse_kitti_label_file(" ".join(t + ["notascore"])),
        lambda: parse_kitti_label_file(" ".join(t[:8] + ["1.6.5"] + t[9:])),
        lambda: parse_kitti_label_file(good + "\nCar 0.0 bad"),
        lambda: parse_calib("P0: 1 0 0 0 0 1 0 0 0 0 1 0\n"),
        lambda: parse_calib("P2: 1 0 0 0 0 1 0 0 0 0 1\n"),
        lambda: parse_calib("P2: 1 0 0 0 0 1 x 0 0 0 1 0\n"),
        lambda: parse_calib("P2: 1 0 0 0 0 1 nan 0 0 0 1 0\n"),
        lambda: decode_attribute_maps(blob[:10]),
        lambda: decode_attribute_maps(b"MALB" + blob[4:]),
        lambda: decode_attribute_maps(blob[:4] + struct.pack("<H", 2) + blob[6:]),
        lambda: decode_attribute_maps(blob[:6] + b"\x03" + blob[7:]),
        lambda: decode_attribute_maps(blob[:7] + b"\x04" + blob[8:]),
        lambda: decode_attribute_maps(blob[:16] + struct.pack("<H", 9) + blob[18:]),
        lambda: decode_attribute_maps(blob[:8] + struct.pack("<I", 0) + blob[12:]),
        lambda: decode_attribute_maps(blob[:-4]),
        lambda: decode_attribute_maps(blob + b"\x00" * 4),
        lambda: read_mask_png(tmp_path / "junk.bin"),
        lambda: write_mask_png(tmp_path / "bad.png", np.full((2, 2), -1)),
        lambda: write_mask_png(tmp_path / "bad3d.png", np.zeros((2, 2, 3))),
    ]
    (tmp_path / "junk.bin").write_bytes(b"definitely not a png")
    structured = 0
    for thunk in corpus:
        try:
            thunk()
        except FormatError:
            structured += 1
        except Exception:  # a crash, not a structured failure
            pass
    corpus_ok = structured == len(corpus) and len(corpus) >= 20

    ok = labels_ok and calib_ok and maps_ok and mask_ok and corpus_ok
    _line(
        "criterion-7 format fidelity",
        ok,
        f"labels field-identical: {labels_ok}; calib: {calib_ok}; "
        f"attribute maps bit-identical: {maps_ok}; mask png: {mask_ok}; "
        f"malformed corpus {structured}/{len(corpus)} structured errors (>=20)",
    )


def test_criterion_8_depth_sensitivity_trend():
    """Fixed pixel noise hurts depth more as range increases."""
    medians = []
    for z in (10.0, 20.0, 40.0):
        rep = roundtrip_report(
            PIN81, NoiseSpec(sigma_rp=0.5), trials=120, seed=9000,
            layouts=("8rp",), z_range=(z, z), az_range=(-0.05, 0.05),
        )
        medians.append(rep.stats["8rp"]["depth_err"]["median"])
    ok = medians[0] < medians[1] < medians[2]
    _line(
        "criterion-8 depth sensitivity trend",
        ok,
        "median depth error at z=10/20/40 m: "
        + " < ".join(f"{m:.4f}" for m in medians)
        + " (strictly increasing)",
    )
