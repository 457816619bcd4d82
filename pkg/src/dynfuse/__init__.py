"""dynfuse: hybrid static/dynamic RGB-D reconstruction and streaming."""

__version__ = "0.1.0"

from .core import (  # noqa: F401
    BehindCameraError,
    CameraIntrinsics,
    DynParams,
    FlowField,
    InstanceInfo,
    InstanceMap,
    Pose,
    RgbdFrame,
    ScoreMap,
    backproject,
    backproject_grid,
    pixel_rays,
    project,
    project_points,
    transform,
    warp_image,
)
