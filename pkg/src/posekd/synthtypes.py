"""Shared pose geometry types used by the data generator, codec, and eval."""

from dataclasses import dataclass

import numpy as np


@dataclass
class Keypoint:
    """Image-space joint location; v: 0 = absent, 1 = occluded, 2 = visible."""

    x: float
    y: float
    v: int

    def __post_init__(self) -> None:
        if self.v not in (0, 1, 2):
            raise ValueError(f"visibility must be 0, 1, or 2, got {self.v}")


def instance_scale(keypoints: list[Keypoint]) -> float:
    """sqrt of the tight bbox area over labelled (v > 0) keypoints, 0 if none."""
    pts = [(kp.x, kp.y) for kp in keypoints if kp.v > 0]
    if not pts:
        return 0.0
    xs = [p[0] for p in pts]
    ys = [p[1] for p in pts]
    area = (max(xs) - min(xs)) * (max(ys) - min(ys))
    return float(np.sqrt(area))


@dataclass
class PoseInstance:
    """One figure's keypoints plus its scale (bbox-area sqrt) and id."""

    keypoints: list[Keypoint]
    scale: float
    instance_id: int

    @property
    def joint_count(self) -> int:
        return len(self.keypoints)

    def visible_count(self) -> int:
        return sum(1 for kp in self.keypoints if kp.v > 0)
