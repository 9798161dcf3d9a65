"""Camera-independent 3D box estimation from per-pixel attribute votes.

The pipeline aggregates dense per-pixel votes over instance masks into
per-object attributes, lifts those attributes to metric 3D boxes through an
explicit camera model (pinhole, equidistant fisheye, or equirectangular),
and optionally refines the eight-point layout by Levenberg-Marquardt
reprojection.  Evaluation follows the KITTI 3D benchmark.
"""

from .camera import (
    BehindCameraError,
    CameraModel,
    DegenerateRayError,
    EquidistantFisheyeCamera,
    EquirectangularCamera,
    OutOfDomainError,
    PinholeCamera,
    Ray,
    angle_between_rays,
    ray_yaw_offset,
)
from .evaluation import (
    Detection,
    Difficulty,
    EvalConfig,
    EvalReport,
    FrameMismatchError,
    GtObject,
    PrCurve,
    ap_from_matches,
    assign_difficulty,
    bbox_iou_2d,
    bev_footprint,
    bev_iou,
    evaluate,
    iou_3d,
)
from .geom import (
    AngleEncoding,
    Box3D,
    DegenerateEncodingError,
    DegenerateGeometryError,
    Dimensions,
    LMDiagnostics,
    LMOptions,
    RPLayout,
    SingularNormalEquationsError,
    alpha_to_yaw,
    box_corners_3d,
    box_reference_points_3d,
    corner_yaw_estimate,
    decode_viewing_angle,
    encode_viewing_angle,
    lift_two_point,
    normalize_angle,
    refine_box_lm,
    reprojection_jacobian,
    reprojection_residual,
    yaw_to_alpha,
)
from .synth import (
    EmptySceneError,
    NoiseSpec,
    RoundtripReport,
    SceneObject,
    SceneSpec,
    perturb,
    random_box,
    random_scene_spec,
    render_scene,
    roundtrip_report,
)
from .voting import (
    AggregatedInstance,
    AttributeMaps,
    InstanceMask,
    MissingAnglesError,
    UnknownInstanceError,
    VoteDistribution,
    aggregate_instance,
    eight_point_seed,
    instances_to_boxes,
    rel_to_abs,
)

__version__ = "0.1.0"

__all__ = [
    "AggregatedInstance",
    "AngleEncoding",
    "AttributeMaps",
    "BehindCameraError",
    "Box3D",
    "CameraModel",
    "DegenerateEncodingError",
    "DegenerateGeometryError",
    "DegenerateRayError",
    "Detection",
    "Difficulty",
    "Dimensions",
    "EmptySceneError",
    "EquidistantFisheyeCamera",
    "EquirectangularCamera",
    "EvalConfig",
    "EvalReport",
    "FrameMismatchError",
    "GtObject",
    "InstanceMask",
    "LMDiagnostics",
    "LMOptions",
    "MissingAnglesError",
    "NoiseSpec",
    "OutOfDomainError",
    "PinholeCamera",
    "PrCurve",
    "RPLayout",
    "Ray",
    "RoundtripReport",
    "SceneObject",
    "SceneSpec",
    "SingularNormalEquationsError",
    "UnknownInstanceError",
    "VoteDistribution",
    "aggregate_instance",
    "alpha_to_yaw",
    "angle_between_rays",
    "ap_from_matches",
    "assign_difficulty",
    "bbox_iou_2d",
    "bev_footprint",
    "bev_iou",
    "box_corners_3d",
    "box_reference_points_3d",
    "corner_yaw_estimate",
    "decode_viewing_angle",
    "eight_point_seed",
    "encode_viewing_angle",
    "evaluate",
    "instances_to_boxes",
    "iou_3d",
    "lift_two_point",
    "normalize_angle",
    "perturb",
    "random_box",
    "random_scene_spec",
    "ray_yaw_offset",
    "refine_box_lm",
    "rel_to_abs",
    "render_scene",
    "reprojection_jacobian",
    "reprojection_residual",
    "roundtrip_report",
    "yaw_to_alpha",
]
