"""Camera models: pixel-to-ray and point-to-pixel mappings.

All cameras share one frame convention: x right, y down, z forward (optical
axis), so gravity points along +y.  Intrinsics live only in this module; the
rest of the pipeline consumes unit viewing rays and projections, which is
what lets it run unchanged on pinhole, fisheye and equirectangular imagery.

The vectorized entry points ``rays`` and ``project`` take and return numpy
arrays of shape (N, 2) / (N, 3).  ``pixel_to_ray`` and ``project_point`` are
scalar conveniences on top of them.
"""

from __future__ import annotations

import math
import warnings
from abc import ABC, abstractmethod
from dataclasses import dataclass

import numpy as np

TAU = 2.0 * math.pi

# z below this is treated as "behind the image plane" for pinhole projection.
MIN_PINHOLE_DEPTH = 1e-6

# Newton solve for the fisheye inverse distortion.
FISHEYE_INVERSE_TOL = 1e-10
FISHEYE_INVERSE_MAX_ITERS = 50


class BehindCameraError(ValueError):
    """Point cannot be projected because it lies behind the image plane."""


class OutOfDomainError(ValueError):
    """Pixel has no valid viewing ray under this camera model."""


class DegenerateRayError(ValueError):
    """Ray is parallel to the camera y-axis; its bearing is undefined."""


@dataclass(frozen=True)
class Ray:
    """Unit direction in the camera frame."""

    dx: float
    dy: float
    dz: float

    def __post_init__(self):
        n2 = self.dx * self.dx + self.dy * self.dy + self.dz * self.dz
        if not math.isfinite(n2) or abs(n2 - 1.0) > 1e-9:
            raise ValueError(f"ray direction must be unit length, got |d|^2 = {n2!r}")

    @staticmethod
    def from_vector(v) -> "Ray":
        v = np.asarray(v, dtype=float)
        n = float(np.linalg.norm(v))
        if n == 0.0 or not math.isfinite(n):
            raise ValueError("cannot normalize a zero or non-finite direction")
        return Ray(float(v[0]) / n, float(v[1]) / n, float(v[2]) / n)

    def as_array(self) -> np.ndarray:
        return np.array([self.dx, self.dy, self.dz])


def _as_direction(r) -> np.ndarray:
    if isinstance(r, Ray):
        return r.as_array()
    d = np.asarray(r, dtype=float)
    if d.shape != (3,):
        raise ValueError(f"expected a 3-vector or Ray, got shape {d.shape}")
    return d


def angle_between_rays(a, b) -> float:
    """Angle in radians between two rays: arccos of the clamped dot product."""
    da, db = _as_direction(a), _as_direction(b)
    na, nb = np.linalg.norm(da), np.linalg.norm(db)
    if na == 0.0 or nb == 0.0:
        raise ValueError("cannot measure the angle of a zero direction")
    c = float(np.dot(da, db) / (na * nb))
    return math.acos(min(1.0, max(-1.0, c)))


def ray_yaw_offset(r) -> float:
    """Bearing of a ray in the horizontal (x-z) plane: atan2(dx, dz).

    Zero for the principal direction (0, 0, 1), positive to the right.
    This is the per-pixel term that converts observation angles to global
    yaw; it is what removes the camera intrinsics from the rotation target.
    """
    d = _as_direction(r)
    if d[0] == 0.0 and d[2] == 0.0:
        raise DegenerateRayError("ray points along the y-axis; bearing undefined")
    return math.atan2(d[0], d[2])


class CameraModel(ABC):
    """Interface shared by all camera models.

    Concrete models are frozen dataclasses carrying intrinsics.  ``rays``
    and ``project`` are exact inverses on the model's valid domain.
    """

    width: int
    height: int

    @abstractmethod
    def rays(self, uv: np.ndarray) -> np.ndarray:
        """Unit rays for an (N, 2) array of pixel coordinates, as (N, 3)."""

    @abstractmethod
    def project(self, points: np.ndarray) -> np.ndarray:
        """Pixels for an (N, 3) array of camera-frame points, as (N, 2)."""

    def pixel_to_ray(self, u: float, v: float) -> Ray:
        d = self.rays(np.array([[u, v]], dtype=float))[0]
        return Ray(float(d[0]), float(d[1]), float(d[2]))

    def project_point(self, p) -> tuple[float, float]:
        uv = self.project(np.asarray([p], dtype=float))[0]
        return float(uv[0]), float(uv[1])

    def project_jacobian(self, p) -> np.ndarray:
        """d(pixel)/d(point) as a (2, 3) matrix.

        Default is central differences with step 1e-6; models with a cheap
        closed form override it.
        """
        p = np.asarray(p, dtype=float)
        jac = np.empty((2, 3))
        h = 1e-6
        for k in range(3):
            dp = np.zeros(3)
            dp[k] = h
            hi = self.project(np.array([p + dp]))[0]
            lo = self.project(np.array([p - dp]))[0]
            jac[:, k] = (hi - lo) / (2.0 * h)
        return jac

    def pixel_yaw_offsets(self, uv: np.ndarray) -> np.ndarray:
        """Vectorized ray_yaw_offset for an (N, 2) pixel array."""
        d = self.rays(uv)
        return np.arctan2(d[:, 0], d[:, 2])


def _check_image_size(width: int, height: int) -> None:
    if width <= 0 or height <= 0:
        raise ValueError(f"image size must be positive, got {width}x{height}")


@dataclass(frozen=True)
class PinholeCamera(CameraModel):
    """Ideal pinhole with focal lengths and principal point in pixels."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        _check_image_size(self.width, self.height)
        if not (0 <= self.cx <= self.width and 0 <= self.cy <= self.height):
            # Cropped images legitimately move the principal point outside.
            warnings.warn(
                f"principal point ({self.cx}, {self.cy}) lies outside the "
                f"{self.width}x{self.height} image",
                stacklevel=2,
            )

    def rays(self, uv: np.ndarray) -> np.ndarray:
        uv = np.asarray(uv, dtype=float)
        d = np.empty((uv.shape[0], 3))
        d[:, 0] = (uv[:, 0] - self.cx) / self.fx
        d[:, 1] = (uv[:, 1] - self.cy) / self.fy
        d[:, 2] = 1.0
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        return d

    def project(self, points: np.ndarray) -> np.ndarray:
        pts = np.asarray(points, dtype=float)
        z = pts[:, 2]
        if np.any(z <= MIN_PINHOLE_DEPTH):
            raise BehindCameraError(
                f"point depth {float(z.min()):.3g} <= {MIN_PINHOLE_DEPTH}; cannot project"
            )
        uv = np.empty((pts.shape[0], 2))
        uv[:, 0] = self.fx * pts[:, 0] / z + self.cx
        uv[:, 1] = self.fy * pts[:, 1] / z + self.cy
        return uv

    def project_jacobian(self, p) -> np.ndarray:
        x, y, z = np.asarray(p, dtype=float)
        if z <= MIN_PINHOLE_DEPTH:
            raise BehindCameraError(f"point depth {z:.3g} <= {MIN_PINHOLE_DEPTH}")
        return np.array(
            [
                [self.fx / z, 0.0, -self.fx * x / (z * z)],
                [0.0, self.fy / z, -self.fy * y / (z * z)],
            ]
        )

    @staticmethod
    def from_fov(hfov: float, width: int, height: int) -> "PinholeCamera":
        """Square-pixel pinhole with the given horizontal field of view."""
        if not 0.0 < hfov < math.pi:
            raise ValueError(f"pinhole hfov must be in (0, pi), got {hfov}")
        f = width / (2.0 * math.tan(hfov / 2.0))
        return PinholeCamera(fx=f, fy=f, cx=width / 2.0, cy=height / 2.0,
                             width=width, height=height)


@dataclass(frozen=True)
class EquidistantFisheyeCamera(CameraModel):
    """Equidistant fisheye with a polynomial distortion on the incidence angle.

    For a point at incidence angle theta from the optical axis the image
    radius is f * theta_d with

        theta_d = theta * (1 + k1*theta^2 + k2*theta^4 + k3*theta^6 + k4*theta^8)

    The inverse (pixel to ray) solves for theta by Newton iteration.  The
    polynomial must be strictly increasing over [0, fov/2]; this is sampled
    at construction so a bad calibration fails loudly instead of silently
    folding the image onto itself.
    """

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    k1: float = 0.0
    k2: float = 0.0
    k3: float = 0.0
    k4: float = 0.0
    fov: float = math.pi

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        _check_image_size(self.width, self.height)
        if not 0.0 < self.fov <= TAU:
            raise ValueError(f"fov must be in (0, 2*pi], got {self.fov}")
        theta = np.linspace(0.0, self.fov / 2.0, 512)
        theta_d = self._distort(theta)
        if np.any(np.diff(theta_d) <= 0.0):
            raise ValueError(
                "distortion polynomial is not strictly increasing on [0, fov/2]; "
                f"coefficients ({self.k1}, {self.k2}, {self.k3}, {self.k4}) are invalid"
            )

    def _distort(self, theta: np.ndarray) -> np.ndarray:
        t2 = theta * theta
        return theta * (1.0 + t2 * (self.k1 + t2 * (self.k2 + t2 * (self.k3 + t2 * self.k4))))

    def _distort_deriv(self, theta: np.ndarray) -> np.ndarray:
        t2 = theta * theta
        return 1.0 + t2 * (3.0 * self.k1 + t2 * (5.0 * self.k2 + t2 * (7.0 * self.k3 + t2 * (9.0 * self.k4))))

    def project(self, points: np.ndarray) -> np.ndarray:
        pts = np.asarray(points, dtype=float)
        x, y, z = pts[:, 0], pts[:, 1], pts[:, 2]
        r = np.hypot(x, y)
        theta = np.arctan2(r, z)
        theta_d = self._distort(theta)
        # On-axis points have no azimuth; they land on the principal point.
        scale = np.divide(theta_d, r, out=np.zeros_like(r), where=r > 0.0)
        uv = np.empty((pts.shape[0], 2))
        uv[:, 0] = self.cx + self.fx * scale * x
        uv[:, 1] = self.cy + self.fy * scale * y
        return uv

    def rays(self, uv: np.ndarray) -> np.ndarray:
        uv = np.asarray(uv, dtype=float)
        mx = (uv[:, 0] - self.cx) / self.fx
        my = (uv[:, 1] - self.cy) / self.fy
        theta_d = np.hypot(mx, my)

        theta = theta_d.copy()
        for _ in range(FISHEYE_INVERSE_MAX_ITERS):
            f = self._distort(theta) - theta_d
            if np.all(np.abs(f) < FISHEYE_INVERSE_TOL):
                break
            step = f / self._distort_deriv(theta)
            theta = np.clip(theta - step, 0.0, math.pi)
        if not np.all(np.abs(self._distort(theta) - theta_d) < FISHEYE_INVERSE_TOL):
            raise OutOfDomainError(
                "inverse distortion did not converge; pixel outside the lens domain"
            )
        if np.any(theta > self.fov / 2.0 + 1e-9):
            raise OutOfDomainError(
                f"pixel angle {float(theta.max()):.4f} rad exceeds fov/2 = {self.fov / 2.0:.4f}"
            )

        d = np.empty((uv.shape[0], 3))
        with np.errstate(invalid="ignore"):
            ratio = np.where(theta_d > 0.0, np.sin(theta) / np.where(theta_d > 0.0, theta_d, 1.0), 0.0)
        d[:, 0] = ratio * mx
        d[:, 1] = ratio * my
        d[:, 2] = np.cos(theta)
        return d


@dataclass(frozen=True)
class EquirectangularCamera(CameraModel):
    """Panoramic camera with pixels linear in azimuth and elevation.

    Azimuth is measured in the x-z plane from +z toward +x; elevation from
    the horizon toward +y (down).  ``yaw0``/``pitch0`` re-center the panorama
    so crops can be expressed without resampling.
    """

    width: int
    height: int
    hfov: float = TAU
    vfov: float = math.pi
    yaw0: float = 0.0
    pitch0: float = 0.0

    def __post_init__(self):
        _check_image_size(self.width, self.height)
        if not 0.0 < self.hfov <= TAU:
            raise ValueError(f"hfov must be in (0, 2*pi], got {self.hfov}")
        if not 0.0 < self.vfov <= math.pi:
            raise ValueError(f"vfov must be in (0, pi], got {self.vfov}")

    def rays(self, uv: np.ndarray) -> np.ndarray:
        uv = np.asarray(uv, dtype=float)
        u, v = uv[:, 0], uv[:, 1]
        if np.any(u < 0) or np.any(u > self.width) or np.any(v < 0) or np.any(v > self.height):
            raise OutOfDomainError("pixel outside the panorama bounds")
        az = (u / self.width - 0.5) * self.hfov + self.yaw0
        el = (v / self.height - 0.5) * self.vfov + self.pitch0
        d = np.empty((uv.shape[0], 3))
        cos_el = np.cos(el)
        d[:, 0] = np.sin(az) * cos_el
        d[:, 1] = np.sin(el)
        d[:, 2] = np.cos(az) * cos_el
        return d

    def project(self, points: np.ndarray) -> np.ndarray:
        pts = np.asarray(points, dtype=float)
        x, y, z = pts[:, 0], pts[:, 1], pts[:, 2]
        rho = np.hypot(x, z)
        if np.any((rho == 0.0) & (y == 0.0)):
            raise OutOfDomainError("cannot project the camera center")
        az = np.arctan2(x, z) - self.yaw0
        az = np.pi - np.mod(np.pi - az, TAU)  # wrap to (-pi, pi] around yaw0
        el = np.arctan2(y, rho) - self.pitch0
        uv = np.empty((pts.shape[0], 2))
        uv[:, 0] = (az / self.hfov + 0.5) * self.width
        uv[:, 1] = (el / self.vfov + 0.5) * self.height
        return uv

    def project_jacobian(self, p) -> np.ndarray:
        x, y, z = np.asarray(p, dtype=float)
        rho2 = x * x + z * z
        rho = math.sqrt(rho2)
        r2 = rho2 + y * y
        if rho2 == 0.0:
            raise OutOfDomainError("projection Jacobian undefined on the y-axis")
        ku = self.width / self.hfov
        kv = self.height / self.vfov
        return np.array(
            [
                [ku * z / rho2, 0.0, -ku * x / rho2],
                [-kv * y * x / (rho * r2), kv * rho / r2, -kv * y * z / (rho * r2)],
            ]
        )
