"""Per-pixel vote aggregation over instance masks.

Every pixel of an instance casts a full set of attribute votes: metric
dimensions, 2D reference-point offsets (relative to its own coordinates),
and optionally a trig-encoded observation angle.  Aggregation reduces each
instance to mean attributes plus dispersion statistics; no non-maximum
suppression is involved because the mask already defines the instance.

Sums run over pixels in raster-scan order with block-compensated (Kahan)
accumulation, so results are bit-identical no matter how the caller stored
or permuted the mask.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .camera import CameraModel
from .geom import (
    Box3D,
    DegenerateEncodingError,
    DegenerateGeometryError,
    Dimensions,
    LMOptions,
    MIN_ENCODING_NORM,
    RPLayout,
    TOP_CORNERS,
    BOTTOM_CORNERS,
    corner_yaw_estimate,
    lift_two_point,
    normalize_angle,
    refine_box_lm,
)
from .camera import BehindCameraError, OutOfDomainError

# Dispersion scales used to fold per-attribute stds into one confidence.
CONF_SCALE_DIMS = 0.2   # meters
CONF_SCALE_RP = 5.0     # pixels
CONF_SCALE_YAW = 0.2    # radians

# Instances smaller than this get a low-support flag.
LOW_SUPPORT_PIXELS = 3

_KAHAN_BLOCK = 256


class UnknownInstanceError(KeyError):
    """Requested instance id has no pixels in the mask."""


class MissingAnglesError(ValueError):
    """Yaw was required but the maps carry no rotation channels."""


@dataclass(frozen=True)
class InstanceMask:
    """Integer label raster; 0 is background, each positive id one instance."""

    labels: np.ndarray

    def __post_init__(self):
        if self.labels.ndim != 2:
            raise ValueError(f"mask must be 2D, got shape {self.labels.shape}")
        if not np.issubdtype(self.labels.dtype, np.integer):
            raise ValueError(f"mask must be integer-typed, got {self.labels.dtype}")
        if np.any(self.labels < 0):
            raise ValueError("mask ids must be non-negative")

    @property
    def height(self) -> int:
        return self.labels.shape[0]

    @property
    def width(self) -> int:
        return self.labels.shape[1]

    def instance_ids(self) -> list[int]:
        ids = np.unique(self.labels)
        return [int(i) for i in ids if i != 0]

    def pixels(self, instance_id: int) -> tuple[np.ndarray, np.ndarray]:
        """(rows, cols) of the instance in raster-scan order."""
        ys, xs = np.nonzero(self.labels == instance_id)
        return ys, xs


@dataclass
class AttributeMaps:
    """Dense per-pixel attribute rasters.

    dims_maps: (3, H, W) votes for (h, w, l) in meters.
    rp_maps:   (2N, H, W) reference-point offsets, channel order
               (du_0, dv_0, ..., du_{N-1}, dv_{N-1}); offsets are relative
               to the voting pixel.
    angle_maps: (4, H, W) trig channels (cos 2a, sin 2a, cos a, sin a) or
               None when the rotation branch is absent.
    """

    layout: RPLayout
    dims_maps: np.ndarray
    rp_maps: np.ndarray
    angle_maps: np.ndarray | None = None

    def __post_init__(self):
        if self.dims_maps.ndim != 3 or self.dims_maps.shape[0] != 3:
            raise ValueError(f"dims_maps must be (3, H, W), got {self.dims_maps.shape}")
        expected_rp = 2 * self.layout.n_points
        if self.rp_maps.shape != (expected_rp, *self.dims_maps.shape[1:]):
            raise ValueError(
                f"rp_maps must be ({expected_rp}, H, W) matching dims_maps, "
                f"got {self.rp_maps.shape}"
            )
        if self.angle_maps is not None and self.angle_maps.shape != (4, *self.dims_maps.shape[1:]):
            raise ValueError(f"angle_maps must be (4, H, W), got {self.angle_maps.shape}")

    @property
    def height(self) -> int:
        return self.dims_maps.shape[1]

    @property
    def width(self) -> int:
        return self.dims_maps.shape[2]

    @property
    def has_angles(self) -> bool:
        return self.angle_maps is not None

    @property
    def channel_count(self) -> int:
        return 3 + 2 * self.layout.n_points + (4 if self.has_angles else 0)

    def channels(self) -> np.ndarray:
        """All channels stacked (C, H, W): dims, then offsets, then angles."""
        parts = [self.dims_maps, self.rp_maps]
        if self.angle_maps is not None:
            parts.append(self.angle_maps)
        return np.concatenate(parts, axis=0)

    @classmethod
    def from_channels(
        cls, layout: RPLayout, stacked: np.ndarray, has_angles: bool
    ) -> "AttributeMaps":
        n_rp = 2 * layout.n_points
        expected = 3 + n_rp + (4 if has_angles else 0)
        if stacked.shape[0] != expected:
            raise ValueError(
                f"expected {expected} channels for {layout} "
                f"(angles={has_angles}), got {stacked.shape[0]}"
            )
        angles = stacked[3 + n_rp:] if has_angles else None
        return cls(layout, stacked[:3], stacked[3:3 + n_rp], angles)

    def validate_against(self, mask: InstanceMask) -> None:
        if (self.height, self.width) != (mask.height, mask.width):
            raise ValueError(
                f"maps are {self.width}x{self.height} but mask is "
                f"{mask.width}x{mask.height}"
            )


def rel_to_abs(du: float, dv: float, u: float, v: float) -> tuple[float, float]:
    """Absolute image position of a relative vote: the offset plus the
    coordinates of the pixel that cast it."""
    return du + u, dv + v


@dataclass(frozen=True)
class VoteDistribution:
    """First two moments of a group of votes (population std, N divisor)."""

    mean: np.ndarray
    std: np.ndarray
    count: int


@dataclass
class AggregatedInstance:
    instance_id: int
    dims: Dimensions
    dims_votes: VoteDistribution
    rps_abs: np.ndarray            # (N, 2) mean absolute reference points
    rp_votes: VoteDistribution     # (N, 2) stds
    ry: float | None
    ry_votes: VoteDistribution | None
    confidence: float
    pixel_count: int
    low_support: bool


def _compensated_sum(values: np.ndarray) -> np.ndarray:
    """Sum over axis 0 with Kahan compensation across fixed-size blocks.

    The block partitioning and within-block reduction are fixed functions of
    the (canonically ordered) input, so the result is deterministic and the
    compensation keeps the error independent of the pixel count.
    """
    n = values.shape[0]
    total = np.zeros(values.shape[1:], dtype=np.float64)
    comp = np.zeros_like(total)
    for start in range(0, n, _KAHAN_BLOCK):
        s = values[start:start + _KAHAN_BLOCK].sum(axis=0, dtype=np.float64)
        y = s - comp
        t = total + y
        comp = (t - total) - y
        total = t
    return total


def _mean_std(values: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    n = values.shape[0]
    mean = _compensated_sum(values) / n
    centered = values - mean
    var = _compensated_sum(centered * centered) / n
    std = np.sqrt(np.maximum(var, 0.0))
    # unanimous columns pass through exactly; n*v/n can round off v otherwise
    lo, hi = values.min(axis=0), values.max(axis=0)
    unanimous = lo == hi
    return np.where(unanimous, lo, mean), np.where(unanimous, 0.0, std)


def _trim(values: np.ndarray, fraction: float) -> np.ndarray:
    """Drop the lowest and highest ``fraction/2`` of each column.

    Columns are trimmed independently (per-channel order statistics), so the
    result rows no longer correspond to pixels.  At least one sample always
    survives.
    """
    n = values.shape[0]
    cut = min(int(n * fraction / 2.0), (n - 1) // 2)
    if cut == 0:
        return values
    return np.sort(values, axis=0)[cut:n - cut]


def aggregate_instance(
    mask: InstanceMask,
    maps: AttributeMaps,
    instance_id: int,
    cam: CameraModel,
    require_yaw: bool = False,
    trim_fraction: float = 0.0,
) -> AggregatedInstance:
    """Reduce one instance's pixel votes to mean attributes and dispersions.

    Reference-point votes are made absolute (offset plus voting pixel)
    before averaging.  Yaw votes are decoded per pixel, shifted by that
    pixel's ray bearing so they vote in the global frame, and combined with
    a circular mean; their dispersion is the circular std
    sqrt(-2 ln Rbar).  Pixels whose double-angle encoding is degenerate are
    dropped from the yaw vote only.

    Confidence is exp(-sigma_bar) where sigma_bar averages the stds
    normalized by nominal scales (0.2 m, 5 px, 0.2 rad), so unanimous votes
    give 1 and dispersion decays it smoothly.

    ``trim_fraction`` optionally discards that fraction of extreme votes
    (split between both tails, per channel) from the linear channels before
    averaging; the circular yaw vote is never trimmed.
    """
    maps.validate_against(mask)
    if not 0.0 <= trim_fraction < 1.0:
        raise ValueError(f"trim_fraction must be in [0, 1), got {trim_fraction}")
    ys, xs = mask.pixels(instance_id)
    n = len(ys)
    if n == 0:
        raise UnknownInstanceError(f"instance {instance_id} has no pixels")
    if require_yaw and not maps.has_angles:
        raise MissingAnglesError("maps carry no rotation channels")

    dims_votes = maps.dims_maps[:, ys, xs].T.astype(np.float64, copy=False)
    dims_mean, dims_std = _mean_std(_trim(dims_votes, trim_fraction))

    n_rp = maps.layout.n_points
    rp_votes = maps.rp_maps[:, ys, xs].T.astype(np.float64, copy=True)
    rp_votes[:, 0::2] += xs[:, None]  # du -> absolute u
    rp_votes[:, 1::2] += ys[:, None]  # dv -> absolute v
    rp_mean, rp_std = _mean_std(_trim(rp_votes, trim_fraction))

    ry = None
    ry_dist = None
    yaw_term = 0.0
    if maps.has_angles:
        c2, s2, c1, s1 = (maps.angle_maps[k, ys, xs].astype(np.float64) for k in range(4))
        norm2 = np.hypot(c2, s2)
        usable = norm2 >= MIN_ENCODING_NORM
        if not np.any(usable):
            raise DegenerateEncodingError(
                f"all {n} angle votes of instance {instance_id} are degenerate"
            )
        base = np.arctan2(s2[usable], c2[usable]) / 2.0
        flip = np.cos(base) * c1[usable] + np.sin(base) * s1[usable] < 0.0
        alpha = np.where(flip, base + np.pi, base)
        uv = np.column_stack([xs[usable], ys[usable]]).astype(np.float64)
        theta = cam.pixel_yaw_offsets(uv)
        votes = normalize_angle(alpha + theta)
        if float(votes.min()) == float(votes.max()):
            # unanimous pass-through, same rationale as _mean_std
            ry = float(votes[0])
            circ_std = 0.0
        else:
            sin_sum = _compensated_sum(np.sin(votes))
            cos_sum = _compensated_sum(np.cos(votes))
            ry = normalize_angle(math.atan2(float(sin_sum), float(cos_sum)))
            rbar = min(float(np.hypot(sin_sum, cos_sum)) / int(usable.sum()), 1.0)
            circ_std = math.sqrt(max(-2.0 * math.log(max(rbar, 1e-300)), 0.0))
        ry_dist = VoteDistribution(np.array(ry), np.array(circ_std), n)
        yaw_term = circ_std / CONF_SCALE_YAW

    norm_terms = np.concatenate([
        dims_std / CONF_SCALE_DIMS,
        rp_std / CONF_SCALE_RP,
        [yaw_term] if maps.has_angles else [],
    ])
    confidence = math.exp(-float(np.mean(norm_terms)))

    return AggregatedInstance(
        instance_id=instance_id,
        dims=Dimensions(*dims_mean),
        dims_votes=VoteDistribution(dims_mean, dims_std, n),
        rps_abs=rp_mean.reshape(n_rp, 2),
        rp_votes=VoteDistribution(rp_mean.reshape(n_rp, 2), rp_std.reshape(n_rp, 2), n),
        ry=ry,
        ry_votes=ry_dist,
        confidence=confidence,
        pixel_count=n,
        low_support=n < LOW_SUPPORT_PIXELS,
    )


def eight_point_seed(cam: CameraModel, agg: AggregatedInstance) -> Box3D:
    """Closed-form initial box for the eight-point layout.

    The means of the four top and four bottom corner projections act as a
    virtual top/bottom point pair for the two-point lift; yaw comes from the
    rotation vote when present, otherwise from the bearings of the lifted
    length edges.
    """
    predicted = agg.rps_abs
    top_px = predicted[list(TOP_CORNERS)].mean(axis=0)
    bot_px = predicted[list(BOTTOM_CORNERS)].mean(axis=0)
    seed = lift_two_point(cam, top_px, bot_px, agg.dims, 0.0)
    if agg.ry is not None:
        ry0 = agg.ry
    else:
        ry0 = corner_yaw_estimate(cam, predicted, agg.dims.h)
    return Box3D(seed.x, seed.y, seed.z, seed.dims, ry0)


def _lift_eight(
    cam: CameraModel,
    agg: AggregatedInstance,
    refine: bool,
    opts: LMOptions | None,
) -> Box3D:
    init = eight_point_seed(cam, agg)
    if not refine:
        return init
    refined, _ = refine_box_lm(cam, init, agg.rps_abs, opts)
    return refined


def instances_to_boxes(
    aggs: list[AggregatedInstance],
    cam: CameraModel,
    layout: RPLayout,
    refine: bool = True,
    opts: LMOptions | None = None,
    failures: list | None = None,
) -> list[tuple[Box3D, float]]:
    """Lift aggregated instances to (box, confidence) pairs.

    The two-point layout uses the closed-form lift and requires a yaw vote;
    the eight-point layout seeds a box from the mean top/bottom corner
    projections and refines it by reprojection (skippable via ``refine``).
    Instances with degenerate geometry are skipped and recorded in
    ``failures`` as (instance_id, exception); the rest are unaffected.
    """
    results = []
    for agg in aggs:
        if layout is RPLayout.TWO and agg.ry is None:
            raise MissingAnglesError(
                "two-point lifting needs a yaw vote; maps have no rotation channels"
            )
        try:
            if layout is RPLayout.TWO:
                box = lift_two_point(
                    cam, tuple(agg.rps_abs[0]), tuple(agg.rps_abs[1]), agg.dims, agg.ry
                )
            else:
                box = _lift_eight(cam, agg, refine, opts)
        except (DegenerateGeometryError, BehindCameraError, OutOfDomainError) as exc:
            if failures is not None:
                failures.append((agg.instance_id, exc))
            continue
        results.append((box, agg.confidence))
    return results
