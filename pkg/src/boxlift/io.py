"""File formats: KITTI labels and calibration, attribute maps, masks, reports.

Text formats follow the KITTI object-detection conventions so outputs drop
into existing tooling.  The two binary formats are owned here:

* Attribute maps: magic ``BLAM``, little-endian header
  (magic 4s, version u16, layout u8, flags u8, width u32, height u32,
  channel count u16), then channel-major float32 rasters in C order.
  Channel order is dims (h, w, l), offsets (du_0, dv_0, ...), and, when
  flag bit 0 is set, the four angle channels.
* Instance masks: 16-bit single-channel PNG, id 0 = background.

Every reader validates structure and raises a typed error instead of
propagating whatever the underlying parser fell over on.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from .camera import CameraModel, PinholeCamera
from .evaluation import Detection, EvalReport, GtObject, PrCurve
from .geom import Box3D, Dimensions, RPLayout, box_corners_3d, normalize_angle
from .synth import RoundtripReport
from .voting import AttributeMaps, InstanceMask


class FormatError(ValueError):
    """Base class for structured file-format failures."""


class MalformedLineError(FormatError):
    def __init__(self, message: str, line: int, fld: int):
        super().__init__(f"line {line}, field {fld}: {message}")
        self.line = line
        self.field = fld


class MissingKeyError(FormatError):
    pass


class MalformedMatrixError(FormatError):
    pass


class BadMagicError(FormatError):
    pass


class UnsupportedVersionError(FormatError):
    pass


class SizeMismatchError(FormatError):
    pass


class MalformedHeaderError(FormatError):
    pass


class MaskFormatError(FormatError):
    pass


# ---------------------------------------------------------------------------
# KITTI object labels

# Nominal KITTI image size, used when a calibration has no paired raster.
KITTI_IMAGE_SIZE = (1242, 375)

_N_LABEL_FIELDS = 15  # plus optional trailing score


@dataclass
class KittiLabel:
    """One object line of a KITTI label file (raw fields, unvalidated)."""

    type: str
    truncated: float
    occluded: int
    alpha: float
    bbox: tuple[float, float, float, float]
    h: float
    w: float
    l: float
    x: float
    y: float
    z: float
    ry: float
    score: float | None = None


def _parse_float(token: str, line: int, fld: int) -> float:
    try:
        value = float(token)
    except ValueError:
        raise MalformedLineError(f"expected a number, got {token!r}", line, fld) from None
    if not math.isfinite(value):
        raise MalformedLineError(f"{token!r} is not a finite field value", line, fld)
    return value


def parse_kitti_label_file(text: str) -> list[KittiLabel]:
    """Parse a label file; all-or-nothing (any bad line fails the file).

    Lines have 15 whitespace-separated fields, detections 16 (trailing
    score).  Field indices in errors are 1-based.
    """
    labels: list[KittiLabel] = []
    for line_no, line in enumerate(text.splitlines(), start=1):
        tokens = line.split()
        if not tokens:
            continue
        if len(tokens) < _N_LABEL_FIELDS:
            raise MalformedLineError(
                f"expected {_N_LABEL_FIELDS} or {_N_LABEL_FIELDS + 1} fields, got {len(tokens)}",
                line_no,
                len(tokens) + 1,
            )
        if len(tokens) > _N_LABEL_FIELDS + 1:
            raise MalformedLineError(
                f"expected at most {_N_LABEL_FIELDS + 1} fields, got {len(tokens)}",
                line_no,
                _N_LABEL_FIELDS + 2,
            )
        values = [_parse_float(tokens[i], line_no, i + 1) for i in range(1, len(tokens))]
        occluded_f = values[1]
        if occluded_f != int(occluded_f):
            raise MalformedLineError(
                f"occlusion level must be an integer, got {tokens[2]!r}", line_no, 3
            )
        labels.append(
            KittiLabel(
                type=tokens[0],
                truncated=values[0],
                occluded=int(occluded_f),
                alpha=values[2],
                bbox=(values[3], values[4], values[5], values[6]),
                h=values[7],
                w=values[8],
                l=values[9],
                x=values[10],
                y=values[11],
                z=values[12],
                ry=values[13],
                score=values[14] if len(values) > 14 else None,
            )
        )
    return labels


def write_kitti_label_file(labels: list[KittiLabel]) -> str:
    """Serialize labels, floats with 6 decimal places (KITTI-compatible)."""
    lines = []
    for lb in labels:
        fields = [
            lb.type,
            f"{lb.truncated:.6f}",
            str(lb.occluded),
            f"{lb.alpha:.6f}",
            *(f"{v:.6f}" for v in lb.bbox),
            f"{lb.h:.6f}",
            f"{lb.w:.6f}",
            f"{lb.l:.6f}",
            f"{lb.x:.6f}",
            f"{lb.y:.6f}",
            f"{lb.z:.6f}",
            f"{lb.ry:.6f}",
        ]
        if lb.score is not None:
            fields.append(f"{lb.score:.6f}")
        lines.append(" ".join(fields))
    return "\n".join(lines) + ("\n" if lines else "")


def labels_to_gt(
    labels: list[KittiLabel],
) -> tuple[list[GtObject], list[tuple[float, float, float, float]]]:
    """Split labels into evaluable objects and DontCare 2D regions."""
    gts: list[GtObject] = []
    dontcare: list[tuple[float, float, float, float]] = []
    for lb in labels:
        if lb.type == "DontCare":
            dontcare.append(lb.bbox)
            continue
        gts.append(
            GtObject(
                box=Box3D(lb.x, lb.y, lb.z, Dimensions(lb.h, lb.w, lb.l), lb.ry),
                bbox2d=lb.bbox,
                truncated=lb.truncated,
                occluded=lb.occluded,
                category=lb.type,
            )
        )
    return gts, dontcare


def labels_to_detections(labels: list[KittiLabel]) -> list[Detection]:
    """Detections from label lines; a missing score defaults to 1.0."""
    dets = []
    for lb in labels:
        if lb.type == "DontCare":
            continue
        dets.append(
            Detection(
                box=Box3D(lb.x, lb.y, lb.z, Dimensions(lb.h, lb.w, lb.l), lb.ry),
                score=lb.score if lb.score is not None else 1.0,
                category=lb.type,
                bbox2d=lb.bbox,
            )
        )
    return dets


def detection_to_label(
    box: Box3D,
    score: float,
    cam: CameraModel | None = None,
    category: str = "Car",
) -> KittiLabel:
    """KITTI detection line for a lifted box.

    The observation angle is derived from the yaw and the bearing of the
    box location; the 2D bbox is the projected corner hull clipped to the
    image (zeros when no camera is given).
    """
    alpha = normalize_angle(box.ry - math.atan2(box.x, box.z))
    bbox = (0.0, 0.0, 0.0, 0.0)
    if cam is not None:
        px = cam.project(box_corners_3d(box))
        bbox = (
            float(np.clip(px[:, 0].min(), 0, cam.width)),
            float(np.clip(px[:, 1].min(), 0, cam.height)),
            float(np.clip(px[:, 0].max(), 0, cam.width)),
            float(np.clip(px[:, 1].max(), 0, cam.height)),
        )
    return KittiLabel(
        type=category,
        truncated=0.0,
        occluded=0,
        alpha=alpha,
        bbox=bbox,
        h=box.dims.h,
        w=box.dims.w,
        l=box.dims.l,
        x=box.x,
        y=box.y,
        z=box.z,
        ry=box.ry,
        score=score,
    )


# ---------------------------------------------------------------------------
# KITTI calibration


@dataclass
class KittiCalib:
    """Left-color projection matrix P2 with the derived pinhole intrinsics.

    The translation column of P2 (stereo baseline terms) is preserved for
    callers that need it, but plays no role in monocular lifting.
    """

    p2: np.ndarray
    image_size: tuple[int, int]

    @property
    def fx(self) -> float:
        return float(self.p2[0, 0])

    @property
    def fy(self) -> float:
        return float(self.p2[1, 1])

    @property
    def cx(self) -> float:
        return float(self.p2[0, 2])

    @property
    def cy(self) -> float:
        return float(self.p2[1, 2])

    @property
    def baseline_terms(self) -> tuple[float, float, float]:
        return (float(self.p2[0, 3]), float(self.p2[1, 3]), float(self.p2[2, 3]))

    @property
    def intrinsics(self) -> PinholeCamera:
        return PinholeCamera(
            fx=self.fx, fy=self.fy, cx=self.cx, cy=self.cy,
            width=self.image_size[0], height=self.image_size[1],
        )


def parse_calib(text: str, image_size: tuple[int, int] = KITTI_IMAGE_SIZE) -> KittiCalib:
    """Extract P2 (3x4, row-major) from a KITTI calibration file.

    KITTI calibrations carry no image size, so ``image_size`` defaults to
    the nominal KITTI resolution; pipelines override it with the size of
    the paired raster.
    """
    for line in text.splitlines():
        if not line.strip().startswith("P2:"):
            continue
        tokens = line.split(":", 1)[1].split()
        if len(tokens) != 12:
            raise MalformedMatrixError(f"P2 must have 12 entries, got {len(tokens)}")
        try:
            values = [float(t) for t in tokens]
        except ValueError:
            raise MalformedMatrixError(f"P2 contains a non-numeric entry: {line!r}") from None
        if any(math.isnan(v) for v in values):
            raise MalformedMatrixError("P2 contains NaN")
        return KittiCalib(p2=np.array(values).reshape(3, 4), image_size=image_size)
    raise MissingKeyError("calibration file has no P2 entry")


def write_calib(calib: KittiCalib) -> str:
    row = " ".join(f"{v:.12e}" for v in calib.p2.reshape(-1))
    return f"P2: {row}\n"


# ---------------------------------------------------------------------------
# Attribute-map files

MAPS_MAGIC = b"BLAM"
MAPS_VERSION = 1
_MAPS_HEADER = struct.Struct("<4sHBBIIH")
_FLAG_ANGLES = 0x01


def encode_attribute_maps(maps: AttributeMaps) -> bytes:
    """Serialize maps; in-memory float64 rasters are stored as float32."""
    flags = _FLAG_ANGLES if maps.has_angles else 0
    header = _MAPS_HEADER.pack(
        MAPS_MAGIC,
        MAPS_VERSION,
        maps.layout.n_points,
        flags,
        maps.width,
        maps.height,
        maps.channel_count,
    )
    return header + maps.channels().astype("<f4").tobytes(order="C")


def decode_attribute_maps(data: bytes) -> AttributeMaps:
    if len(data) < _MAPS_HEADER.size:
        raise SizeMismatchError(
            f"file is {len(data)} bytes, smaller than the {_MAPS_HEADER.size}-byte header"
        )
    magic, version, layout_tag, flags, width, height, channels = _MAPS_HEADER.unpack_from(data)
    if magic != MAPS_MAGIC:
        raise BadMagicError(f"bad magic {magic!r}, expected {MAPS_MAGIC!r}")
    if version != MAPS_VERSION:
        raise UnsupportedVersionError(f"unsupported version {version}")
    if layout_tag not in (2, 8):
        raise MalformedHeaderError(f"layout tag must be 2 or 8, got {layout_tag}")
    if flags & ~_FLAG_ANGLES:
        raise MalformedHeaderError(f"unknown flag bits 0x{flags:02x}")
    has_angles = bool(flags & _FLAG_ANGLES)
    expected_channels = 3 + 2 * layout_tag + (4 if has_angles else 0)
    if channels != expected_channels:
        raise MalformedHeaderError(
            f"channel count {channels} inconsistent with layout {layout_tag} "
            f"and flags 0x{flags:02x} (expected {expected_channels})"
        )
    if width == 0 or height == 0:
        raise MalformedHeaderError(f"invalid raster size {width}x{height}")
    expected_bytes = _MAPS_HEADER.size + channels * width * height * 4
    if len(data) != expected_bytes:
        raise SizeMismatchError(
            f"file is {len(data)} bytes but the header implies {expected_bytes}"
        )
    raster = np.frombuffer(data, dtype="<f4", offset=_MAPS_HEADER.size)
    stacked = raster.reshape(channels, height, width).copy()
    layout = RPLayout.TWO if layout_tag == 2 else RPLayout.EIGHT
    return AttributeMaps.from_channels(layout, stacked, has_angles)


def write_attribute_maps(path, maps: AttributeMaps) -> None:
    Path(path).write_bytes(encode_attribute_maps(maps))


def read_attribute_maps(path) -> AttributeMaps:
    return decode_attribute_maps(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# Instance-mask files (16-bit PNG)

_MASK_MODES = ("I;16", "I;16B", "I;16L", "I")


def write_mask_png(path, mask: InstanceMask | np.ndarray) -> None:
    labels = mask.labels if isinstance(mask, InstanceMask) else np.asarray(mask)
    if labels.ndim != 2:
        raise MaskFormatError(f"mask must be 2D, got shape {labels.shape}")
    if labels.min() < 0 or labels.max() > 0xFFFF:
        raise MaskFormatError("mask ids must fit in uint16")
    Image.fromarray(labels.astype(np.uint16)).save(Path(path), format="PNG")


def read_mask_png(path) -> InstanceMask:
    try:
        with Image.open(Path(path)) as img:
            if img.format != "PNG":
                raise MaskFormatError(f"expected PNG, got {img.format}")
            if img.mode not in _MASK_MODES:
                raise MaskFormatError(
                    f"expected a 16-bit single-channel PNG, got mode {img.mode!r}"
                )
            arr = np.asarray(img)
    except UnidentifiedImageError:
        raise MaskFormatError("file is not a decodable image") from None
    if arr.ndim != 2:
        raise MaskFormatError(f"expected a single channel, got shape {arr.shape}")
    if arr.min() < 0 or arr.max() > 0xFFFF:
        raise MaskFormatError("mask values out of uint16 range")
    return InstanceMask(arr.astype(np.uint16))


# ---------------------------------------------------------------------------
# Reports (JSON and CSV)


def eval_report_to_dict(report: EvalReport) -> dict:
    return {
        "metric": report.metric,
        "recall_variant": report.recall_variant,
        "iou_threshold": report.iou_threshold,
        "category": report.category,
        "per_difficulty": {
            name: {
                "ap": curve.ap,
                "pr": [[r, p] for r, p in zip(curve.recalls, curve.precisions)],
            }
            for name, curve in report.per_difficulty.items()
        },
    }


def eval_report_from_dict(data: dict) -> EvalReport:
    report = EvalReport(
        metric=data["metric"],
        recall_variant=data["recall_variant"],
        iou_threshold=data["iou_threshold"],
        category=data.get("category", "Car"),
    )
    for name, entry in data["per_difficulty"].items():
        recalls = [float(r) for r, _ in entry["pr"]]
        precs = [float(p) for _, p in entry["pr"]]
        report.per_difficulty[name] = PrCurve(recalls, precs, float(entry["ap"]))
    return report


def write_eval_report(path, report: EvalReport) -> None:
    Path(path).write_text(json.dumps(eval_report_to_dict(report), indent=2, sort_keys=True) + "\n")


def read_eval_report(path) -> EvalReport:
    return eval_report_from_dict(json.loads(Path(path).read_text()))


def write_eval_csv(path, report: EvalReport) -> None:
    """Flat PR samples: difficulty, ap, recall, precision per row."""
    lines = ["difficulty,ap,recall,precision"]
    for name, curve in report.per_difficulty.items():
        for r, p in zip(curve.recalls, curve.precisions):
            lines.append(f"{name},{curve.ap:.6f},{r:.6f},{p:.6f}")
    Path(path).write_text("\n".join(lines) + "\n")


def write_roundtrip_report(path, report: RoundtripReport) -> None:
    Path(path).write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")


def write_roundtrip_csv(path, report: RoundtripReport) -> None:
    """Summary statistics: layout, metric, mean, median, p95 per row."""
    lines = ["layout,metric,mean,median,p95"]
    for layout, metrics in report.stats.items():
        for metric, stats in metrics.items():
            lines.append(
                f"{layout},{metric},{stats['mean']:.9g},{stats['median']:.9g},{stats['p95']:.9g}"
            )
    Path(path).write_text("\n".join(lines) + "\n")
