"""Latency-robust cooperative perception with feature flow, at desk scale.

The package simulates a roadside sensor and an ego vehicle observing the same
traffic, moves infrastructure features over a delayed link, extrapolates them
to the ego timestamp and scores the fused detections.
"""

__version__ = "0.1.0"

from .geometry import Box3D, Pose2, bev_iou, iou_3d  # noqa: E402

__all__ = ["__version__", "Box3D", "Pose2", "bev_iou", "iou_3d"]
