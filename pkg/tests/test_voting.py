"""Per-pixel vote aggregation over instance masks."""

import math

import numpy as np
import pytest

from boxlift import (
    AttributeMaps,
    Box3D,
    DegenerateEncodingError,
    Dimensions,
    InstanceMask,
    MissingAnglesError,
    RPLayout,
    SceneSpec,
    UnknownInstanceError,
    aggregate_instance,
    box_corners_3d,
    box_reference_points_3d,
    encode_viewing_angle,
    instances_to_boxes,
    random_scene_spec,
    rel_to_abs,
    render_scene,
    yaw_to_alpha,
)

from conftest import make_box


def blank_maps(layout: RPLayout, h: int = 6, w: int = 8, angles: bool = True) -> AttributeMaps:
    return AttributeMaps(
        layout=layout,
        dims_maps=np.zeros((3, h, w)),
        rp_maps=np.zeros((2 * layout.n_points, h, w)),
        angle_maps=np.zeros((4, h, w)) if angles else None,
    )


def fill_constant(maps: AttributeMaps, dims, alpha: float = 0.0):
    for k, v in enumerate(dims):
        maps.dims_maps[k] = v
    if maps.angle_maps is not None:
        enc = encode_viewing_angle(alpha)
        for k, v in enumerate((enc.c2, enc.s2, enc.c1, enc.s1)):
            maps.angle_maps[k] = v


class TestInstanceMask:
    def test_validation(self):
        with pytest.raises(ValueError):
            InstanceMask(np.zeros((2, 2, 2), dtype=np.uint16))
        with pytest.raises(ValueError):
            InstanceMask(np.zeros((2, 2), dtype=float))
        with pytest.raises(ValueError):
            InstanceMask(np.array([[-1, 0]], dtype=np.int32))

    def test_instance_ids_skip_background(self):
        m = InstanceMask(np.array([[0, 3], [1, 3]], dtype=np.uint16))
        assert m.instance_ids() == [1, 3]

    def test_pixels_raster_order(self):
        m = InstanceMask(np.array([[0, 7, 0], [7, 0, 7]], dtype=np.uint16))
        ys, xs = m.pixels(7)
        assert list(zip(ys.tolist(), xs.tolist())) == [(0, 1), (1, 0), (1, 2)]

    def test_unknown_instance(self, pin_cam):
        m = InstanceMask(np.zeros((4, 4), dtype=np.uint16))
        maps = blank_maps(RPLayout.TWO, 4, 4)
        with pytest.raises(UnknownInstanceError):
            aggregate_instance(m, maps, 5, pin_cam)


class TestAttributeMaps:
    def test_channel_count_round_trip(self):
        for layout, angles in [(RPLayout.TWO, True), (RPLayout.EIGHT, False)]:
            maps = blank_maps(layout, angles=angles)
            chans = maps.channels()
            assert len(chans) == 3 + 2 * layout.n_points + (4 if angles else 0)
            back = AttributeMaps.from_channels(layout, chans, has_angles=angles)
            assert back.layout is layout
            assert (back.angle_maps is None) == (not angles)

    def test_shape_validation(self):
        with pytest.raises(ValueError):
            AttributeMaps(RPLayout.TWO, np.zeros((2, 4, 4)), np.zeros((4, 4, 4)), None)
        with pytest.raises(ValueError):
            AttributeMaps(RPLayout.TWO, np.zeros((3, 4, 4)), np.zeros((16, 4, 4)), None)

    def test_mask_pairing_validated(self, pin_cam):
        mask = InstanceMask(np.ones((5, 5), dtype=np.uint16))
        maps = blank_maps(RPLayout.TWO, 4, 4)
        with pytest.raises(ValueError):
            aggregate_instance(mask, maps, 1, pin_cam)


class TestRelToAbs:
    def test_zero_offset_identity(self):
        assert rel_to_abs(0.0, 0.0, 100.0, 50.0) == (100.0, 50.0)

    def test_out_of_image_accepted(self):
        assert rel_to_abs(-120.0, 30.0, 100.0, 50.0) == (-20.0, 80.0)

    def test_round_trip_exact_on_rendered_maps(self, pin_cam):
        rng = np.random.default_rng(11)
        spec = random_scene_spec(pin_cam, rng, RPLayout.EIGHT, n_boxes=2)
        mask, maps, gt = render_scene(spec)
        for o in gt:
            proj = pin_cam.project(box_reference_points_3d(o.box, RPLayout.EIGHT))
            ys, xs = mask.pixels(o.instance_id)
            for k in range(8):
                au, av = rel_to_abs(
                    maps.rp_maps[2 * k][ys, xs], maps.rp_maps[2 * k + 1][ys, xs],
                    xs.astype(float), ys.astype(float),
                )
                assert np.all(au == proj[k, 0])
                assert np.all(av == proj[k, 1])


class TestAggregation:
    def test_unanimous_votes(self, pin_cam):
        # every pixel casts the identical vote: exact mean, zero spread
        mask = InstanceMask(np.full((6, 8), 2, dtype=np.uint16))
        maps = blank_maps(RPLayout.TWO, angles=False)
        fill_constant(maps, (1.5, 1.7, 4.0))
        ys, xs = mask.pixels(2)
        target = np.array([[3.0, -2.0], [3.0, 5.0]])
        for k in range(2):
            maps.rp_maps[2 * k][ys, xs] = target[k, 0] - xs
            maps.rp_maps[2 * k + 1][ys, xs] = target[k, 1] - ys
        agg = aggregate_instance(mask, maps, 2, pin_cam)
        assert (agg.dims.h, agg.dims.w, agg.dims.l) == (1.5, 1.7, 4.0)
        assert np.all(agg.dims_votes.std == 0.0)
        assert np.all(agg.rp_votes.std == 0.0)
        assert np.array_equal(agg.rps_abs, target)
        assert agg.confidence == 1.0
        assert agg.pixel_count == 48
        assert not agg.low_support

    def test_unanimous_votes_with_yaw(self, pin_cam):
        # on-axis stub makes the decoded yaw votes bit-identical too
        class AxialCamera(type(pin_cam)):
            def pixel_yaw_offsets(self, uv):
                return np.zeros(len(np.atleast_2d(uv)))

        cam = AxialCamera(pin_cam.fx, pin_cam.fy, pin_cam.cx, pin_cam.cy,
                          pin_cam.width, pin_cam.height)
        mask = InstanceMask(np.full((4, 4), 1, dtype=np.uint16))
        maps = blank_maps(RPLayout.TWO, 4, 4)
        fill_constant(maps, (1.5, 1.7, 4.0), alpha=0.3)
        ys, xs = mask.pixels(1)
        for k in range(2):
            maps.rp_maps[2 * k][ys, xs] = 3.0 - xs
            maps.rp_maps[2 * k + 1][ys, xs] = 5.0 - ys
        agg = aggregate_instance(mask, maps, 1, cam)
        assert agg.ry == pytest.approx(0.3, abs=1e-12)
        assert agg.ry_votes.std == 0.0
        assert agg.confidence == 1.0

    def test_two_pixel_statistics(self, pin_cam):
        labels = np.zeros((1, 2), dtype=np.uint16)
        labels[0, :] = 1
        mask = InstanceMask(labels)
        maps = blank_maps(RPLayout.TWO, 1, 2)
        fill_constant(maps, (0.0, 1.0, 1.0))
        maps.dims_maps[0, 0, 0] = 1.4
        maps.dims_maps[0, 0, 1] = 1.6
        agg = aggregate_instance(mask, maps, 1, pin_cam)
        assert agg.dims.h == pytest.approx(1.5, abs=1e-15)
        assert agg.dims_votes.std[0] == pytest.approx(0.1, abs=1e-12)
        assert agg.low_support

    def test_single_pixel_zero_std(self, pin_cam):
        labels = np.zeros((2, 2), dtype=np.uint16)
        labels[0, 0] = 1
        maps = blank_maps(RPLayout.TWO, 2, 2)
        fill_constant(maps, (1.5, 1.6, 4.0))
        agg = aggregate_instance(InstanceMask(labels), maps, 1, pin_cam)
        assert np.all(agg.dims_votes.std == 0.0)
        assert agg.low_support
        assert agg.pixel_count == 1

    def test_absolute_rp_votes(self, pin_cam):
        # every pixel points at the same absolute landmark
        labels = np.zeros((4, 4), dtype=np.uint16)
        labels[1:3, 1:3] = 1
        mask = InstanceMask(labels)
        maps = blank_maps(RPLayout.TWO, 4, 4)
        fill_constant(maps, (1.5, 1.6, 4.0))
        target = np.array([[10.0, -3.0], [11.0, 7.0]])
        ys, xs = mask.pixels(1)
        for k in range(2):
            maps.rp_maps[2 * k][ys, xs] = target[k, 0] - xs
            maps.rp_maps[2 * k + 1][ys, xs] = target[k, 1] - ys
        agg = aggregate_instance(mask, maps, 1, pin_cam)
        assert np.allclose(agg.rps_abs, target, atol=1e-12)
        assert np.all(agg.rp_votes.std == 0.0)

    def test_circular_yaw_mean_at_seam(self, pin_cam):
        # yaw votes pi-eps and -pi+eps must average to pi, not 0
        eps = 0.01
        labels = np.zeros((2, 1), dtype=np.uint16)
        labels[:, 0] = 1
        mask = InstanceMask(labels)
        maps = blank_maps(RPLayout.TWO, 2, 1)
        fill_constant(maps, (1.5, 1.6, 4.0))
        uv = np.array([[0.0, 0.0], [0.0, 1.0]], dtype=float)
        thetas = pin_cam.pixel_yaw_offsets(uv)
        for row, target in enumerate((np.pi - eps, -np.pi + eps)):
            enc = encode_viewing_angle(yaw_to_alpha(target, float(thetas[row])))
            for k, v in enumerate((enc.c2, enc.s2, enc.c1, enc.s1)):
                maps.angle_maps[k, row, 0] = v
        agg = aggregate_instance(mask, maps, 1, pin_cam)
        assert abs(agg.ry) == pytest.approx(np.pi, abs=1e-9)

    def test_degenerate_angle_pixels_dropped(self, pin_cam):
        labels = np.zeros((1, 3), dtype=np.uint16)
        labels[0, :] = 1
        mask = InstanceMask(labels)
        maps = blank_maps(RPLayout.TWO, 1, 3)
        fill_constant(maps, (1.5, 1.6, 4.0), alpha=0.2)
        maps.angle_maps[:, 0, 2] = 0.0  # one pixel with an unusable encoding
        agg = aggregate_instance(mask, maps, 1, pin_cam)
        want = [0.2 + t for t in pin_cam.pixel_yaw_offsets(np.array([[0.0, 0.0], [1.0, 0.0]]))]
        assert agg.ry == pytest.approx(np.mean(want), abs=1e-6)

    def test_all_degenerate_angles_raise(self, pin_cam):
        labels = np.ones((2, 2), dtype=np.uint16)
        mask = InstanceMask(labels)
        maps = blank_maps(RPLayout.TWO, 2, 2)
        fill_constant(maps, (1.5, 1.6, 4.0))
        maps.angle_maps[:] = 0.0
        with pytest.raises(DegenerateEncodingError):
            aggregate_instance(mask, maps, 1, pin_cam)

    def test_require_yaw_without_angles(self, pin_cam):
        mask = InstanceMask(np.ones((2, 2), dtype=np.uint16))
        maps = blank_maps(RPLayout.TWO, 2, 2, angles=False)
        with pytest.raises(MissingAnglesError):
            aggregate_instance(mask, maps, 1, pin_cam, require_yaw=True)

    def test_confidence_decays_with_spread(self, pin_cam):
        labels = np.zeros((1, 2), dtype=np.uint16)
        labels[0, :] = 1
        mask = InstanceMask(labels)
        maps = blank_maps(RPLayout.TWO, 1, 2, angles=False)
        fill_constant(maps, (0.0, 1.0, 1.0))
        maps.dims_maps[0, 0, 0] = 1.4
        maps.dims_maps[0, 0, 1] = 1.6
        ys, xs = mask.pixels(1)
        for k in range(2):
            maps.rp_maps[2 * k][ys, xs] = 3.0 - xs  # unanimous rp votes
        agg = aggregate_instance(mask, maps, 1, pin_cam)
        # one dim channel with std 0.1 against scale 0.2; 3 dim + 4 rp terms
        assert agg.confidence == pytest.approx(math.exp(-(0.1 / 0.2) / 7.0), abs=1e-9)

    def test_trimmed_mean_resists_outliers(self, pin_cam):
        labels = np.ones((10, 10), dtype=np.uint16)
        mask = InstanceMask(labels)
        maps = blank_maps(RPLayout.TWO, 10, 10)
        fill_constant(maps, (1.5, 1.6, 4.0))
        maps.dims_maps[0, 0, :5] = 90.0  # 5% wild votes
        plain = aggregate_instance(mask, maps, 1, pin_cam)
        trimmed = aggregate_instance(mask, maps, 1, pin_cam, trim_fraction=0.2)
        assert plain.dims.h > 5.0
        assert trimmed.dims.h == pytest.approx(1.5, abs=1e-12)

    def test_trim_fraction_validated(self, pin_cam):
        mask = InstanceMask(np.ones((2, 2), dtype=np.uint16))
        maps = blank_maps(RPLayout.TWO, 2, 2)
        with pytest.raises(ValueError):
            aggregate_instance(mask, maps, 1, pin_cam, trim_fraction=1.0)

    def test_deterministic_across_memory_layouts(self, pin_cam):
        rng = np.random.default_rng(21)
        spec = random_scene_spec(pin_cam, rng, RPLayout.EIGHT, n_boxes=2)
        mask, maps, gt = render_scene(spec)
        iid = gt[0].instance_id
        a = aggregate_instance(mask, maps, iid, pin_cam)

        mask_f = InstanceMask(np.asfortranarray(mask.labels))
        maps_f = AttributeMaps(
            maps.layout,
            np.asfortranarray(maps.dims_maps),
            np.asfortranarray(maps.rp_maps),
            np.asfortranarray(maps.angle_maps),
        )
        b = aggregate_instance(mask_f, maps_f, iid, pin_cam)
        assert np.array_equal(a.dims_votes.mean, b.dims_votes.mean)
        assert np.array_equal(a.rps_abs, b.rps_abs)
        assert a.ry == b.ry
        assert a.confidence == b.confidence

    def test_mean_matches_fsum_oracle(self, pin_cam):
        rng = np.random.default_rng(33)
        n = 5000
        labels = np.zeros((n, 1), dtype=np.uint16)
        labels[:, 0] = 1
        mask = InstanceMask(labels)
        maps = blank_maps(RPLayout.TWO, n, 1, angles=False)
        votes = rng.normal(1.5, 0.3, size=n) + rng.normal(0, 1e-9, size=n)
        maps.dims_maps[0, :, 0] = votes
        maps.dims_maps[1:, :, 0] = 1.0
        agg = aggregate_instance(mask, maps, 1, pin_cam)
        oracle = math.fsum(votes) / n
        assert abs(agg.dims.h - oracle) <= 2 * np.spacing(oracle)

    def test_perfect_scene_attributes_within_1e9(self, pin_cam):
        rng = np.random.default_rng(55)
        spec = random_scene_spec(pin_cam, rng, RPLayout.EIGHT, n_boxes=5)
        mask, maps, gt = render_scene(spec)
        for o in gt:
            agg = aggregate_instance(mask, maps, o.instance_id, pin_cam)
            assert np.allclose(
                [agg.dims.h, agg.dims.w, agg.dims.l],
                [o.box.dims.h, o.box.dims.w, o.box.dims.l], atol=1e-9,
            )
            proj = pin_cam.project(box_corners_3d(o.box))
            assert np.allclose(agg.rps_abs, proj, atol=1e-9)
            assert abs(agg.ry - o.box.ry) < 1e-9
            assert agg.confidence > 0.999999


class TestInstancesToBoxes:
    def test_empty_input(self, pin_cam):
        assert instances_to_boxes([], pin_cam, RPLayout.TWO) == []

    def test_two_point_requires_yaw(self, pin_cam):
        mask = InstanceMask(np.ones((3, 3), dtype=np.uint16))
        maps = blank_maps(RPLayout.TWO, 3, 3, angles=False)
        fill_constant(maps, (1.5, 1.6, 4.0))
        agg = aggregate_instance(mask, maps, 1, pin_cam)
        with pytest.raises(MissingAnglesError):
            instances_to_boxes([agg], pin_cam, RPLayout.TWO)

    def test_order_preserved_and_degenerate_skipped(self, pin_cam):
        rng = np.random.default_rng(4)
        spec = random_scene_spec(pin_cam, rng, RPLayout.TWO, n_boxes=3)
        mask, maps, gt = render_scene(spec)
        aggs = [aggregate_instance(mask, maps, o.instance_id, pin_cam) for o in gt]
        # middle instance gets coincident top/bottom votes: degenerate lift
        broken = aggs[len(aggs) // 2]
        broken.rps_abs = np.array([[50.0, 50.0], [50.0, 50.0]])
        failures = []
        out = instances_to_boxes(aggs, pin_cam, RPLayout.TWO, failures=failures)
        assert len(out) == len(aggs) - 1
        assert len(failures) == 1
        assert failures[0][0] == broken.instance_id

    def test_concurrent_aggregation_matches_serial(self, pin_cam):
        from concurrent.futures import ThreadPoolExecutor

        rng = np.random.default_rng(77)
        spec = random_scene_spec(pin_cam, rng, RPLayout.EIGHT, n_boxes=4)
        mask, maps, gt = render_scene(spec)
        ids = [o.instance_id for o in gt]
        serial = [aggregate_instance(mask, maps, i, pin_cam) for i in ids]
        with ThreadPoolExecutor(max_workers=4) as pool:
            threaded = list(pool.map(
                lambda i: aggregate_instance(mask, maps, i, pin_cam), ids
            ))
        for s, t in zip(serial, threaded):
            assert np.array_equal(s.rps_abs, t.rps_abs)
            assert s.ry == t.ry
            assert s.confidence == t.confidence

    def test_corrupted_corner_beats_single_pixel_estimate(self, pin_cam):
        # spread votes win against any single corrupted pixel's estimate
        gt = make_box(x=0.3, y=0.85, z=14.0, h=1.7, ry=0.3)
        spec = SceneSpec(pin_cam, [gt], RPLayout.EIGHT, include_angles=True, seed=0)
        mask, maps, _ = render_scene(spec)
        ys, xs = mask.pixels(1)
        n = len(ys)
        rng = np.random.default_rng(9)
        bad = rng.choice(n, size=int(0.3 * n), replace=False)
        maps.rp_maps[0][ys[bad], xs[bad]] += 40.0  # corner 0, u channel
        maps.rp_maps[1][ys[bad], xs[bad]] -= 25.0

        agg = aggregate_instance(mask, maps, 1, pin_cam)
        (voted, _), = instances_to_boxes([agg], pin_cam, RPLayout.EIGHT)
        voted_err = np.linalg.norm(np.subtract(voted.center, gt.center))

        # single corrupted pixel as its own one-pixel instance
        py, px = int(ys[bad[0]]), int(xs[bad[0]])
        solo = np.zeros_like(mask.labels)
        solo[py, px] = 1
        solo_agg = aggregate_instance(InstanceMask(solo), maps, 1, pin_cam)
        (single, _), = instances_to_boxes([solo_agg], pin_cam, RPLayout.EIGHT)
        single_err = np.linalg.norm(np.subtract(single.center, gt.center))
        assert voted_err < single_err
