"""Box geometry: corner layouts, viewing-angle encodings, and 2D-to-3D lifting.

A 3D box is parameterized by the center of its bottom face, metric
dimensions, and a yaw about the camera y-axis.  Two lifting routes exist:

* ``lift_two_point``: closed-form trigonometric depth from the top/bottom
  face centers (two reference points), exact when the segment is
  perpendicular to the viewing ray.
* ``refine_box_lm``: Levenberg-Marquardt refinement of pose against eight
  predicted corner projections, valid for any camera model.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .camera import (
    BehindCameraError,
    CameraModel,
    OutOfDomainError,
    angle_between_rays,
)

TAU = 2.0 * math.pi

# Encodings whose double-angle vector is shorter than this are unusable.
MIN_ENCODING_NORM = 1e-6

# Two-point lift rejects ray pairs closer than this (radians).
MIN_SUBTENDED_ANGLE = 1e-9


class DegenerateGeometryError(ValueError):
    """Geometry admits no stable solution (e.g. coincident viewing rays)."""


class DegenerateEncodingError(ValueError):
    """Angle encoding is too close to the origin to carry a direction."""


class SingularNormalEquationsError(RuntimeError):
    """The damped normal equations could not be solved at maximum damping."""


def normalize_angle(a):
    """Wrap an angle (or array of angles) to (-pi, pi]; -pi maps to +pi."""
    wrapped = np.pi - np.mod(np.pi - np.asarray(a, dtype=float), TAU)
    # np.mod can round a tiny negative operand up to the full period,
    # which would emit exactly -pi; fold that back to the closed end.
    wrapped = np.where(wrapped <= -np.pi, np.pi, wrapped)
    if np.ndim(a) == 0:
        return float(wrapped)
    return wrapped


@dataclass(frozen=True)
class Dimensions:
    """Metric box size: height, width (across), length (along heading)."""

    h: float
    w: float
    l: float

    def __post_init__(self):
        for name, value in (("h", self.h), ("w", self.w), ("l", self.l)):
            if not (0.0 < value < 100.0) or not math.isfinite(value):
                raise ValueError(f"dimension {name}={value!r} outside (0, 100)")

    def as_array(self) -> np.ndarray:
        return np.array([self.h, self.w, self.l])


@dataclass(frozen=True)
class Box3D:
    """Upright 3D box: bottom-face center (x, y, z), dimensions, yaw ry.

    ry is the rotation about the camera y-axis, zero when the length axis
    points along camera x, and is stored normalized to (-pi, pi].
    """

    x: float
    y: float
    z: float
    dims: Dimensions
    ry: float

    def __post_init__(self):
        for name, value in (("x", self.x), ("y", self.y), ("z", self.z), ("ry", self.ry)):
            if not math.isfinite(value):
                raise ValueError(f"box field {name}={value!r} is not finite")
        object.__setattr__(self, "ry", normalize_angle(self.ry))

    @property
    def bottom_center(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z])

    @property
    def center(self) -> np.ndarray:
        """Volumetric center (bottom center raised by half the height)."""
        return np.array([self.x, self.y - self.dims.h / 2.0, self.z])


class RPLayout(Enum):
    """Reference-point layout: top/bottom segment or all eight corners."""

    TWO = 2
    EIGHT = 8

    @property
    def n_points(self) -> int:
        return self.value

    @staticmethod
    def from_string(s: str) -> "RPLayout":
        try:
            return {"2rp": RPLayout.TWO, "8rp": RPLayout.EIGHT}[s.lower()]
        except KeyError:
            raise ValueError(f"unknown layout {s!r}; expected '2rp' or '8rp'") from None


# Corner sign table, lexicographic over sx in {-1,+1}, sy in {0,1},
# sz in {-1,+1}.  Object frame before yaw: x along length, z across width,
# y up is negative (so sy=1 selects the top face at y=-h).
_CORNER_SIGNS = np.array(
    [(sx, sy, sz) for sx in (-1.0, 1.0) for sy in (0.0, 1.0) for sz in (-1.0, 1.0)]
)
TOP_CORNERS = (2, 3, 6, 7)
BOTTOM_CORNERS = (0, 1, 4, 5)
# Corner pairs spanning the length axis (sx flips, sy/sz fixed).
LENGTH_EDGES = ((0, 4), (1, 5), (2, 6), (3, 7))
# Vertical corner pairs (bottom, top) sharing a footprint position.
VERTICAL_EDGES = ((0, 2), (1, 3), (4, 6), (5, 7))


def rotation_y(ry: float) -> np.ndarray:
    """Rotation about the camera y-axis by ry."""
    c, s = math.cos(ry), math.sin(ry)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def _rotation_y_deriv(ry: float) -> np.ndarray:
    c, s = math.cos(ry), math.sin(ry)
    return np.array([[-s, 0.0, c], [0.0, 0.0, 0.0], [-c, 0.0, -s]])


def _local_corners(dims: Dimensions) -> np.ndarray:
    out = np.empty((8, 3))
    out[:, 0] = _CORNER_SIGNS[:, 0] * (dims.l / 2.0)
    out[:, 1] = -_CORNER_SIGNS[:, 1] * dims.h
    out[:, 2] = _CORNER_SIGNS[:, 2] * (dims.w / 2.0)
    return out


def box_corners_3d(box: Box3D) -> np.ndarray:
    """The eight corners as an (8, 3) array in the fixed sign-table order."""
    return _local_corners(box.dims) @ rotation_y(box.ry).T + box.bottom_center


def box_reference_points_3d(box: Box3D, layout: RPLayout) -> np.ndarray:
    """3D reference points: [top center, bottom center] or the 8 corners."""
    if layout is RPLayout.TWO:
        return np.array(
            [[box.x, box.y - box.dims.h, box.z], [box.x, box.y, box.z]]
        )
    return box_corners_3d(box)


# ---------------------------------------------------------------------------
# Viewing-angle encoding


@dataclass(frozen=True)
class AngleEncoding:
    """Trig encoding of a viewing angle alpha.

    c2/s2 carry cos/sin of the doubled angle (orientation modulo pi);
    c1/s1, when present, carry cos/sin of alpha itself and disambiguate
    which of the two headings is meant.
    """

    c2: float
    s2: float
    c1: float | None = None
    s1: float | None = None

    @property
    def has_heading(self) -> bool:
        return self.c1 is not None and self.s1 is not None


def encode_viewing_angle(alpha: float, with_heading: bool = True) -> AngleEncoding:
    c2, s2 = math.cos(2.0 * alpha), math.sin(2.0 * alpha)
    if not with_heading:
        return AngleEncoding(c2, s2)
    return AngleEncoding(c2, s2, math.cos(alpha), math.sin(alpha))


def decode_viewing_angle(enc: AngleEncoding) -> float:
    """Recover alpha in (-pi, pi] from its trig encoding.

    The doubled-angle channels fix alpha modulo pi; the heading channels
    pick whichever of the two candidates points the same way.  Without
    heading channels the base solution in (-pi/2, pi/2] is returned.
    """
    norm = math.hypot(enc.c2, enc.s2)
    if norm < MIN_ENCODING_NORM:
        raise DegenerateEncodingError(
            f"double-angle vector norm {norm:.3g} < {MIN_ENCODING_NORM}"
        )
    base = math.atan2(enc.s2, enc.c2) / 2.0
    if not enc.has_heading:
        return base
    # Larger dot product with (cos alpha, sin alpha) wins; ties keep base.
    if math.cos(base) * enc.c1 + math.sin(base) * enc.s1 < 0.0:
        return normalize_angle(base + math.pi)
    return base


def alpha_to_yaw(alpha: float, theta_ray: float) -> float:
    """Global yaw from observation angle: ry = alpha + theta_ray."""
    return normalize_angle(alpha + theta_ray)


def yaw_to_alpha(ry: float, theta_ray: float) -> float:
    """Observation angle seen from a pixel with bearing theta_ray."""
    return normalize_angle(ry - theta_ray)


# ---------------------------------------------------------------------------
# Two-point trigonometric lift


def lift_two_point(cam: CameraModel, top, bot, dims: Dimensions, ry: float) -> Box3D:
    """Lift a vertical top/bottom pixel pair to a 3D box.

    The rays through the two pixels subtend an angle beta; treating the
    object's vertical extent h as a chord perpendicular to the bisector
    gives the distance to the segment midpoint

        d = h / (2 * tan(beta / 2))

    which is exact when the midpoint ray is perpendicular to the segment
    and degrades gracefully (bounded by the secant of the elevation)
    otherwise.  The midpoint is placed at distance d along the bisector and
    the bottom-face center half a height below it.
    """
    directions = cam.rays(np.array([top, bot], dtype=float))
    beta = angle_between_rays(directions[0], directions[1])
    if beta < MIN_SUBTENDED_ANGLE:
        raise DegenerateGeometryError(
            f"reference rays subtend {beta:.3g} rad; depth is unobservable"
        )
    bisector = directions[0] + directions[1]
    norm = float(np.linalg.norm(bisector))
    if norm < 1e-12:
        raise DegenerateGeometryError("reference rays are anti-parallel")
    bisector /= norm
    d = dims.h / (2.0 * math.tan(beta / 2.0))
    mid = d * bisector
    return Box3D(float(mid[0]), float(mid[1] + dims.h / 2.0), float(mid[2]), dims, ry)


# ---------------------------------------------------------------------------
# Reprojection residuals and Levenberg-Marquardt refinement


def reprojection_residual(cam: CameraModel, box: Box3D, predicted: np.ndarray) -> np.ndarray:
    """Flat residual (projected corners minus predicted), length 16.

    Entries 2j and 2j+1 are the u and v residuals of corner j in the fixed
    corner order.
    """
    predicted = np.asarray(predicted, dtype=float)
    if predicted.shape != (8, 2):
        raise ValueError(f"predicted corners must be (8, 2), got {predicted.shape}")
    proj = cam.project(box_corners_3d(box))
    return (proj - predicted).reshape(-1)


def reprojection_jacobian(
    cam: CameraModel, box: Box3D, optimize_dims: bool = False
) -> np.ndarray:
    """Jacobian of the corner residuals w.r.t. (x, y, z, ry[, h, w, l]).

    Pose columns are exact given the camera's projection Jacobian; the
    optional dimension columns use the corner sign table.
    """
    local = _local_corners(box.dims)
    rot = rotation_y(box.ry)
    drot = _rotation_y_deriv(box.ry)
    corners = local @ rot.T + box.bottom_center
    n_params = 7 if optimize_dims else 4
    jac = np.zeros((16, n_params))
    for j in range(8):
        jp = cam.project_jacobian(corners[j])
        rows = slice(2 * j, 2 * j + 2)
        jac[rows, 0:3] = jp
        jac[rows, 3] = jp @ (drot @ local[j])
        if optimize_dims:
            sx, sy, sz = _CORNER_SIGNS[j]
            jac[rows, 4] = jp @ (rot @ np.array([0.0, -sy, 0.0]))
            jac[rows, 5] = jp @ (rot @ np.array([0.0, 0.0, sz / 2.0]))
            jac[rows, 6] = jp @ (rot @ np.array([sx / 2.0, 0.0, 0.0]))
    return jac


@dataclass
class LMOptions:
    initial_lambda: float = 1e-3
    lambda_up: float = 10.0
    lambda_down: float = 10.0
    max_lambda: float = 1e12
    max_iterations: int = 100
    cost_tolerance: float = 1e-10   # relative decrease below this stops
    step_tolerance: float = 1e-10   # parameter step norm below this stops
    optimize_dims: bool = False

    def __post_init__(self):
        if self.initial_lambda <= 0.0:
            raise ValueError("initial_lambda must be positive")
        # lambda_up == 1 would loop forever on a rejected step
        if self.lambda_up <= 1.0 or self.lambda_down <= 1.0:
            raise ValueError("lambda_up and lambda_down must exceed 1")
        if self.max_lambda < self.initial_lambda:
            raise ValueError("max_lambda must be >= initial_lambda")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if self.cost_tolerance < 0.0 or self.step_tolerance < 0.0:
            raise ValueError("tolerances must be >= 0")


@dataclass
class LMDiagnostics:
    initial_cost: float
    final_cost: float
    iterations: int
    converged: bool
    cost_history: list[float] = field(default_factory=list)


def _params_from_box(box: Box3D, optimize_dims: bool) -> np.ndarray:
    p = [box.x, box.y, box.z, box.ry]
    if optimize_dims:
        p += [box.dims.h, box.dims.w, box.dims.l]
    return np.array(p)


def _box_from_params(p: np.ndarray, template: Box3D, optimize_dims: bool) -> Box3D:
    dims = Dimensions(p[4], p[5], p[6]) if optimize_dims else template.dims
    return Box3D(float(p[0]), float(p[1]), float(p[2]), dims, float(p[3]))


def refine_box_lm(
    cam: CameraModel,
    init: Box3D,
    predicted: np.ndarray,
    opts: LMOptions | None = None,
) -> tuple[Box3D, LMDiagnostics]:
    """Refine a box so its corners reproject onto the predicted pixels.

    Minimizes the sum of squared corner reprojection errors over
    (x, y, z, ry), holding dimensions fixed unless ``opts.optimize_dims``.
    Classic Levenberg-Marquardt with additive damping: steps solve
    (J^T J + lambda I) delta = -J^T r, lambda shrinks on accepted steps and
    grows on rejected ones.  Only strictly improving steps are accepted, so
    the returned box never costs more than the initialization.

    Returns the refined box and diagnostics; ``converged`` is False when the
    iteration budget runs out before the tolerances bite (soft failure).
    Raises SingularNormalEquationsError if the damped system is still
    unsolvable at maximum damping.
    """
    opts = opts or LMOptions()
    predicted = np.asarray(predicted, dtype=float)

    def cost_of(p: np.ndarray) -> float:
        box = _box_from_params(p, init, opts.optimize_dims)
        r = reprojection_residual(cam, box, predicted)
        return float(r @ r)

    params = _params_from_box(init, opts.optimize_dims)
    cost = cost_of(params)
    diag = LMDiagnostics(
        initial_cost=cost, final_cost=cost, iterations=0, converged=True,
        cost_history=[cost],
    )
    if cost == 0.0:
        return init, diag

    lam = opts.initial_lambda
    converged = False
    iterations = 0
    for _ in range(opts.max_iterations):
        iterations += 1
        box = _box_from_params(params, init, opts.optimize_dims)
        r = reprojection_residual(cam, box, predicted)
        jac = reprojection_jacobian(cam, box, opts.optimize_dims)
        grad = jac.T @ r
        hess = jac.T @ jac

        accepted = False
        while lam <= opts.max_lambda:
            damped = hess + lam * np.eye(hess.shape[0])
            try:
                step = np.linalg.solve(damped, -grad)
            except np.linalg.LinAlgError:
                step = None
            if step is None or not np.all(np.isfinite(step)):
                lam *= opts.lambda_up
                if lam > opts.max_lambda:
                    raise SingularNormalEquationsError(
                        f"normal equations singular at lambda={lam:.3g}"
                    )
                continue
            candidate = params + step
            try:
                new_cost = cost_of(candidate)
            except (BehindCameraError, OutOfDomainError, ValueError):
                new_cost = math.inf
            if new_cost < cost:
                rel_decrease = (cost - new_cost) / cost
                params, cost = candidate, new_cost
                diag.cost_history.append(cost)
                lam = max(lam / opts.lambda_down, 1e-18)
                accepted = True
                if rel_decrease < opts.cost_tolerance or float(np.linalg.norm(step)) < opts.step_tolerance:
                    converged = True
                break
            lam *= opts.lambda_up

        if not accepted:
            # No improving step exists at any damping: a (local) minimum.
            converged = True
            break
        if converged:
            break

    diag.iterations = iterations
    diag.final_cost = cost
    diag.converged = converged
    return _box_from_params(params, init, opts.optimize_dims), diag


def corner_yaw_estimate(cam: CameraModel, predicted: np.ndarray, height: float) -> float:
    """Yaw initialization from corner pixels when no rotation channels exist.

    Each vertical corner pair subtends the known box height, so the
    two-point construction recovers a per-pillar 3D midpoint; yaw is then
    the circular mean of the bottom-face length-edge bearings between those
    midpoints.  Depth per pillar keeps the foreshortening information that a
    shared-range placement would destroy.  Approximate off the perpendicular
    view, so this is an initializer for refinement, not an estimator.
    """
    predicted = np.asarray(predicted, dtype=float)
    rays = cam.rays(predicted)
    mids = np.empty((4, 3))
    for k, (b, t) in enumerate(VERTICAL_EDGES):
        dot = min(max(float(rays[b] @ rays[t]), -1.0), 1.0)
        beta = math.acos(dot)
        if beta < MIN_SUBTENDED_ANGLE:
            raise DegenerateGeometryError(
                f"corner pillar {k} subtends {beta:.2e} rad; depth unobservable"
            )
        bisector = rays[b] + rays[t]
        mids[k] = bisector / np.linalg.norm(bisector) * (height / (2.0 * math.tan(beta / 2.0)))
    sin_sum = 0.0
    cos_sum = 0.0
    # pillars 0->2 and 1->3 span the length axis (corners 0->4 and 1->5)
    for i, j in ((0, 2), (1, 3)):
        d = mids[j] - mids[i]
        bearing = math.atan2(-d[2], d[0])
        sin_sum += math.sin(bearing)
        cos_sum += math.cos(bearing)
    if sin_sum == 0.0 and cos_sum == 0.0:
        raise DegenerateGeometryError("length-edge bearings cancel; yaw unobservable")
    return normalize_angle(math.atan2(sin_sum, cos_sum))
