"""Synthetic scenes with exact per-pixel votes, plus noise and round trips.

The renderer plays the role of a perfect network: every pixel of a box's
silhouette votes the true dimensions, the true reference-point offsets, and
the true observation angle for its own viewing ray.  Rendering a scene,
aggregating the votes and lifting must therefore reproduce the ground truth
up to floating-point error, which is the core correctness oracle for the
whole pipeline.  ``perturb`` then layers calibrated noise on top so
robustness and error-vs-depth behavior can be measured.

All randomness flows through numpy's seeded PCG64 generator; a scene or
report is a pure function of its seed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .camera import BehindCameraError, CameraModel, OutOfDomainError
from .geom import (
    Box3D,
    Dimensions,
    RPLayout,
    box_corners_3d,
    box_reference_points_3d,
    normalize_angle,
)
from .voting import (
    AttributeMaps,
    InstanceMask,
    aggregate_instance,
    instances_to_boxes,
)


class EmptySceneError(ValueError):
    """No box in the scene projects to a single pixel."""


@dataclass(frozen=True)
class NoiseSpec:
    """Per-channel Gaussian sigmas plus an occlusion-style corruption rate.

    ``occlusion_fraction`` of each instance's pixels get their entire vote
    replaced, either by the vote of a pixel from another instance (if one
    exists) or by uniform junk, mimicking mask bleed across occluders.
    """

    sigma_dims: float = 0.0
    sigma_rp: float = 0.0
    sigma_angle: float = 0.0
    occlusion_fraction: float = 0.0

    def __post_init__(self):
        for name in ("sigma_dims", "sigma_rp", "sigma_angle"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if not 0.0 <= self.occlusion_fraction <= 1.0:
            raise ValueError("occlusion_fraction must be in [0, 1]")

    @property
    def is_zero(self) -> bool:
        return (
            self.sigma_dims == 0.0
            and self.sigma_rp == 0.0
            and self.sigma_angle == 0.0
            and self.occlusion_fraction == 0.0
        )


@dataclass
class SceneSpec:
    cam: CameraModel
    boxes: list[Box3D]
    layout: RPLayout
    include_angles: bool = True
    seed: int = 0


@dataclass
class SceneObject:
    """Ground truth for one rendered instance."""

    instance_id: int
    box: Box3D
    bbox2d: tuple[float, float, float, float]
    pixel_count: int


def _convex_hull(points: np.ndarray) -> np.ndarray:
    """Convex hull (CCW, no duplicate endpoint) via Andrew's monotone chain."""
    pts = np.unique(np.asarray(points, dtype=float), axis=0)
    if len(pts) <= 2:
        return pts
    # np.unique sorts lexicographically, which is what the chain needs.

    def half(iterable):
        out: list[np.ndarray] = []
        for p in iterable:
            while len(out) >= 2:
                a, b = out[-1] - out[-2], p - out[-2]
                if a[0] * b[1] - a[1] * b[0] > 0:
                    break
                out.pop()
            out.append(p)
        return out

    lower = half(pts)
    upper = half(pts[::-1])
    return np.array(lower[:-1] + upper[:-1])


def _fill_convex(hull: np.ndarray, width: int, height: int) -> tuple[np.ndarray, np.ndarray]:
    """Integer pixels inside a convex polygon, scanline by scanline.

    A pixel (u, v) is inside when the point (u, v) itself is; spans come
    from the min/max edge crossings of each image row.
    """
    if len(hull) < 3:
        return np.array([], dtype=int), np.array([], dtype=int)
    v_lo = max(int(math.ceil(hull[:, 1].min())), 0)
    v_hi = min(int(math.floor(hull[:, 1].max())), height - 1)
    if v_hi < v_lo:
        return np.array([], dtype=int), np.array([], dtype=int)
    n_rows = v_hi - v_lo + 1
    xmin = np.full(n_rows, np.inf)
    xmax = np.full(n_rows, -np.inf)
    n = len(hull)
    for i in range(n):
        p, q = hull[i], hull[(i + 1) % n]
        y0, y1 = p[1], q[1]
        if y0 == y1:
            continue
        lo, hi = (y0, y1) if y0 < y1 else (y1, y0)
        r0 = max(int(math.ceil(lo)), v_lo)
        r1 = min(int(math.floor(hi)), v_hi)
        if r1 < r0:
            continue
        vs = np.arange(r0, r1 + 1, dtype=float)
        cross = p[0] + (vs - y0) * (q[0] - p[0]) / (y1 - y0)
        idx = (vs - v_lo).astype(int)
        np.minimum.at(xmin, idx, cross)
        np.maximum.at(xmax, idx, cross)

    ys_out: list[np.ndarray] = []
    xs_out: list[np.ndarray] = []
    for r in range(n_rows):
        if not np.isfinite(xmin[r]):
            continue
        u0 = max(int(math.ceil(xmin[r])), 0)
        u1 = min(int(math.floor(xmax[r])), width - 1)
        if u1 < u0:
            continue
        xs_out.append(np.arange(u0, u1 + 1))
        ys_out.append(np.full(u1 - u0 + 1, r + v_lo))
    if not xs_out:
        return np.array([], dtype=int), np.array([], dtype=int)
    return np.concatenate(ys_out), np.concatenate(xs_out)


def render_scene(spec: SceneSpec) -> tuple[InstanceMask, AttributeMaps, list[SceneObject]]:
    """Rasterize exact votes for every box silhouette.

    The mask is painted far-to-near so overlapping pixels belong to the
    nearest box.  Boxes that project to no pixel (out of frame or fully
    occluded) are omitted from the returned ground truth.  Raises
    EmptySceneError when nothing is visible at all.
    """
    cam = spec.cam
    h_img, w_img = cam.height, cam.width
    labels = np.zeros((h_img, w_img), dtype=np.uint16)
    if len(spec.boxes) > 0xFFFF:
        raise ValueError("too many boxes for a 16-bit mask")

    projections: dict[int, np.ndarray] = {}
    order = sorted(
        range(len(spec.boxes)),
        key=lambda i: -float(np.linalg.norm(spec.boxes[i].center)),
    )
    for idx in order:
        box = spec.boxes[idx]
        try:
            corners_px = cam.project(box_corners_3d(box))
        except (BehindCameraError, OutOfDomainError):
            continue
        ys, xs = _fill_convex(_convex_hull(corners_px), w_img, h_img)
        if len(ys) == 0:
            continue
        labels[ys, xs] = idx + 1
        projections[idx] = corners_px

    n_rp = spec.layout.n_points
    dims_maps = np.zeros((3, h_img, w_img))
    rp_maps = np.zeros((2 * n_rp, h_img, w_img))
    angle_maps = np.zeros((4, h_img, w_img)) if spec.include_angles else None

    mask = InstanceMask(labels)
    gt: list[SceneObject] = []
    for idx in sorted(projections):
        box = spec.boxes[idx]
        ys, xs = mask.pixels(idx + 1)
        if len(ys) == 0:
            continue  # fully occluded by a nearer box
        rps_px = cam.project(box_reference_points_3d(box, spec.layout))
        dims_maps[0, ys, xs] = box.dims.h
        dims_maps[1, ys, xs] = box.dims.w
        dims_maps[2, ys, xs] = box.dims.l
        for j in range(n_rp):
            rp_maps[2 * j, ys, xs] = rps_px[j, 0] - xs
            rp_maps[2 * j + 1, ys, xs] = rps_px[j, 1] - ys
        if angle_maps is not None:
            uv = np.column_stack([xs, ys]).astype(float)
            alpha = normalize_angle(box.ry - cam.pixel_yaw_offsets(uv))
            angle_maps[0, ys, xs] = np.cos(2.0 * alpha)
            angle_maps[1, ys, xs] = np.sin(2.0 * alpha)
            angle_maps[2, ys, xs] = np.cos(alpha)
            angle_maps[3, ys, xs] = np.sin(alpha)
        corners_px = projections[idx]
        bbox = (
            float(np.clip(corners_px[:, 0].min(), 0, w_img)),
            float(np.clip(corners_px[:, 1].min(), 0, h_img)),
            float(np.clip(corners_px[:, 0].max(), 0, w_img)),
            float(np.clip(corners_px[:, 1].max(), 0, h_img)),
        )
        gt.append(SceneObject(idx + 1, box, bbox, int(len(ys))))

    if not gt:
        raise EmptySceneError("no box projects to any pixel")
    maps = AttributeMaps(spec.layout, dims_maps, rp_maps, angle_maps)
    return mask, maps, gt


# Uniform junk ranges for occlusion corruption without a donor instance.
_JUNK_DIMS = (0.5, 5.0)
_JUNK_ANGLE = (-1.0, 1.0)


def perturb(
    maps: AttributeMaps,
    noise: NoiseSpec,
    seed: int,
    mask: InstanceMask | None = None,
) -> AttributeMaps:
    """Additive Gaussian noise per channel group plus occlusion corruption.

    Noise is applied in a fixed order (dims, reference points, angles,
    occlusion) from a single PCG64 stream, so the output is a pure function
    of (maps, noise, seed).  Channel groups with sigma 0 are left
    bit-identical.  Occlusion corruption needs ``mask`` to know which pixels
    belong to whom; donor votes are drawn from the pre-corruption state of
    other instances.
    """
    rng = np.random.default_rng(seed)
    dims = maps.dims_maps.copy()
    rps = maps.rp_maps.copy()
    angles = maps.angle_maps.copy() if maps.angle_maps is not None else None

    if noise.sigma_dims > 0:
        dims += rng.normal(0.0, noise.sigma_dims, dims.shape)
    if noise.sigma_rp > 0:
        rps += rng.normal(0.0, noise.sigma_rp, rps.shape)
    if noise.sigma_angle > 0 and angles is not None:
        angles += rng.normal(0.0, noise.sigma_angle, angles.shape)

    if noise.occlusion_fraction > 0:
        if mask is None:
            raise ValueError("occlusion corruption requires the instance mask")
        mask_arr = mask.labels
        groups = [dims, rps] + ([angles] if angles is not None else [])
        donor_state = [g.copy() for g in groups]
        for iid in mask.instance_ids():
            ys, xs = mask.pixels(iid)
            k = int(round(noise.occlusion_fraction * len(ys)))
            if k == 0:
                continue
            sel = rng.choice(len(ys), size=k, replace=False)
            oy, ox = np.nonzero((mask_arr != 0) & (mask_arr != iid))
            if len(oy) > 0:
                didx = rng.integers(0, len(oy), size=k)
                for g, src in zip(groups, donor_state):
                    g[:, ys[sel], xs[sel]] = src[:, oy[didx], ox[didx]]
            else:
                dims[:, ys[sel], xs[sel]] = rng.uniform(*_JUNK_DIMS, (3, k))
                half_w = maps.width / 2.0
                rps[:, ys[sel], xs[sel]] = rng.uniform(-half_w, half_w, (rps.shape[0], k))
                if angles is not None:
                    angles[:, ys[sel], xs[sel]] = rng.uniform(*_JUNK_ANGLE, (4, k))

    return AttributeMaps(maps.layout, dims, rps, angles)


# ---------------------------------------------------------------------------
# Random scenes and round-trip reports

_CAR_H = (1.3, 1.9)
_CAR_W = (1.5, 2.0)
_CAR_L = (3.2, 4.8)


def random_box(
    rng: np.random.Generator,
    z_range: tuple[float, float] = (10.0, 40.0),
    az_range: tuple[float, float] = (-0.3, 0.3),
    perpendicular: bool = True,
    elevation_range: tuple[float, float] = (-0.15, 0.15),
) -> Box3D:
    """Draw a car-like box; by default at camera height so the midpoint ray
    is perpendicular to the vertical axis (the exact-lift geometry)."""
    dims = Dimensions(
        rng.uniform(*_CAR_H), rng.uniform(*_CAR_W), rng.uniform(*_CAR_L)
    )
    z = rng.uniform(*z_range)
    x = z * math.tan(rng.uniform(*az_range))
    if perpendicular:
        y = dims.h / 2.0
    else:
        y = dims.h / 2.0 + math.hypot(x, z) * math.tan(rng.uniform(*elevation_range))
    ry = rng.uniform(-math.pi, math.pi)
    return Box3D(x, y, z, dims, ry)


def random_scene_spec(
    cam: CameraModel,
    rng: np.random.Generator,
    layout: RPLayout,
    n_boxes: int = 1,
    include_angles: bool = True,
    **box_kwargs,
) -> SceneSpec:
    boxes = [random_box(rng, **box_kwargs) for _ in range(n_boxes)]
    return SceneSpec(cam, boxes, layout, include_angles=include_angles)


_STAT_NAMES = ("mean", "median", "p95")
_METRIC_NAMES = ("center_err", "depth_err", "yaw_err", "dims_err")


def _summary(values: list[float]) -> dict[str, float]:
    arr = np.array(values)
    if arr.size == 0:
        return {name: float("nan") for name in _STAT_NAMES}
    return {
        "mean": float(arr.mean()),
        "median": float(np.median(arr)),
        "p95": float(np.percentile(arr, 95)),
    }


@dataclass
class RoundtripReport:
    """Paired lifting-error statistics for the two reference-point layouts."""

    seed: int
    trials: int
    layouts: tuple[str, ...]
    noise: NoiseSpec
    z_range: tuple[float, float]
    camera: str
    records: list[dict] = field(default_factory=list)
    stats: dict = field(default_factory=dict)
    failures: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "trials": self.trials,
            "layouts": list(self.layouts),
            "noise": {
                "sigma_dims": self.noise.sigma_dims,
                "sigma_rp": self.noise.sigma_rp,
                "sigma_angle": self.noise.sigma_angle,
                "occlusion_fraction": self.noise.occlusion_fraction,
            },
            "z_range": list(self.z_range),
            "camera": self.camera,
            "stats": self.stats,
            "failures": self.failures,
            "records": self.records,
        }


def roundtrip_report(
    cam: CameraModel,
    noise: NoiseSpec,
    trials: int,
    seed: int,
    layouts: tuple[str, ...] = ("2rp", "8rp"),
    z_range: tuple[float, float] = (10.0, 40.0),
    az_range: tuple[float, float] = (-0.3, 0.3),
    perpendicular: bool = True,
) -> RoundtripReport:
    """Render, corrupt, aggregate and lift; report errors per layout.

    Each trial draws one ground-truth box (seeded with ``seed + trial``) and
    runs it through every requested layout on its own noise stream, so the
    layouts are compared on identical scene geometry.  Lifting failures are
    excluded from the statistics and counted separately.
    """
    report = RoundtripReport(
        seed=seed,
        trials=trials,
        layouts=tuple(layouts),
        noise=noise,
        z_range=z_range,
        camera=repr(cam),
        failures={name: 0 for name in layouts},
    )
    errors: dict[str, dict[str, list[float]]] = {
        name: {metric: [] for metric in _METRIC_NAMES} for name in layouts
    }
    for trial in range(trials):
        box_rng = np.random.default_rng(seed + trial)
        box = random_box(box_rng, z_range=z_range, az_range=az_range,
                         perpendicular=perpendicular)
        record: dict = {"trial": trial, "z": box.z}
        for layout_idx, name in enumerate(layouts):
            layout = RPLayout.from_string(name)
            spec = SceneSpec(cam, [box], layout, include_angles=True)
            try:
                mask, maps, gt = render_scene(spec)
            except EmptySceneError:
                report.failures[name] += 1
                record[name] = None
                continue
            noisy = perturb(maps, noise, seed=(seed + trial) * 8 + layout_idx, mask=mask)
            agg = aggregate_instance(mask, noisy, gt[0].instance_id, cam)
            lifted = instances_to_boxes([agg], cam, layout)
            if not lifted:
                report.failures[name] += 1
                record[name] = None
                continue
            est = lifted[0][0]
            entry = {
                "center_err": float(np.linalg.norm(est.bottom_center - box.bottom_center)),
                "depth_err": abs(est.z - box.z),
                "yaw_err": abs(normalize_angle(est.ry - box.ry)),
                "dims_err": float(np.max(np.abs(est.dims.as_array() - box.dims.as_array()))),
            }
            record[name] = entry
            for metric in _METRIC_NAMES:
                errors[name][metric].append(entry[metric])
        report.records.append(record)

    report.stats = {
        name: {metric: _summary(errors[name][metric]) for metric in _METRIC_NAMES}
        for name in layouts
    }
    return report
