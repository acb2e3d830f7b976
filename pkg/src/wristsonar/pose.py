"""21-joint hand poses: normalization and evaluation metrics.

Joint order follows the usual landmark convention: index 0 is the
wrist, then four joints per finger (thumb CMC/MCP/IP/TIP, other fingers
MCP/PIP/DIP/TIP).  v5, v9 and v17 denote the vectors from the wrist to
the MCP joints of the index, middle and little finger; (v5, v17) spans
the palm plane and v9 encodes hand orientation.

All functions are pure; poses are treated as immutable.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .audio_io import atomic_write_bytes

JOINT_NAMES = (
    "wrist",
    "thumb_cmc", "thumb_mcp", "thumb_ip", "thumb_tip",
    "index_mcp", "index_pip", "index_dip", "index_tip",
    "middle_mcp", "middle_pip", "middle_dip", "middle_tip",
    "ring_mcp", "ring_pip", "ring_dip", "ring_tip",
    "pinky_mcp", "pinky_pip", "pinky_dip", "pinky_tip",
)
WRIST = 0
INDEX_MCP = 5
MIDDLE_MCP = 9
PINKY_MCP = 17

# Per-finger joint ids from knuckle to tip; prepend the wrist to get the
# full bone chain of a finger.
FINGER_CHAINS = (
    (1, 2, 3, 4),
    (5, 6, 7, 8),
    (9, 10, 11, 12),
    (13, 14, 15, 16),
    (17, 18, 19, 20),
)

_MIN_V17_M = 1e-3  # below this the palm frame is meaningless
_COLLINEAR_TOL = 1e-6
_ORIGIN_TOL_M = 1e-6


class DegeneratePalmError(ValueError):
    pass


class UnnormalizedPoseError(ValueError):
    pass


class ZeroLengthBoneError(ValueError):
    pass


class ZeroVectorError(ValueError):
    pass


class EmptyInputError(ValueError):
    pass


@dataclass(frozen=True)
class HandPose:
    """21 3-D joints in meters plus a timestamp in seconds."""

    joints: np.ndarray
    timestamp: float = 0.0

    def __post_init__(self):
        j = np.asarray(self.joints, dtype=np.float64)
        if j.shape != (21, 3):
            raise ValueError(f"expected 21x3 joints, got shape {j.shape}")
        object.__setattr__(self, "joints", j)

    @property
    def wrist(self) -> np.ndarray:
        return self.joints[WRIST]


@dataclass(frozen=True)
class PalmFrame:
    """Wrist-to-MCP vectors of the index, middle and little finger."""

    v5: np.ndarray
    v9: np.ndarray
    v17: np.ndarray


def v9_of(p: HandPose) -> np.ndarray:
    """Wrist-to-palm vector (wrist to middle-finger MCP)."""
    return p.joints[MIDDLE_MCP] - p.joints[WRIST]


def palm_frame(p: HandPose) -> PalmFrame:
    """Extract (v5, v9, v17); rejects collinear or tiny palms."""
    w = p.joints[WRIST]
    v5 = p.joints[INDEX_MCP] - w
    v9 = p.joints[MIDDLE_MCP] - w
    v17 = p.joints[PINKY_MCP] - w
    n17 = np.linalg.norm(v17)
    n5 = np.linalg.norm(v5)
    if n17 < _MIN_V17_M or n5 == 0.0:
        raise DegeneratePalmError(f"palm vectors too short (|v17| = {n17:.2e} m)")
    if np.linalg.norm(np.cross(v5, v17)) <= _COLLINEAR_TOL * n5 * n17:
        raise DegeneratePalmError("v5 and v17 are collinear")
    return PalmFrame(v5=v5, v9=v9, v17=v17)


def _palm_basis(frame: PalmFrame) -> np.ndarray:
    """Orthonormal basis (columns) anchored on the palm: v17 direction,
    the in-plane component of v5, and their cross product."""
    e1 = frame.v17 / np.linalg.norm(frame.v17)
    u = frame.v5 - (frame.v5 @ e1) * e1
    e2 = u / np.linalg.norm(u)
    e3 = np.cross(e1, e2)
    return np.column_stack([e1, e2, e3])


@dataclass(frozen=True)
class ReferencePose:
    """Stored pose whose palm plane defines the normalization target."""

    pose: HandPose

    @property
    def basis(self) -> np.ndarray:
        return _palm_basis(palm_frame(self.pose))


def normalize(p: HandPose, ref: ReferencePose, measured_v17_m: float) -> HandPose:
    """Move the wrist to the origin, rotate the palm plane onto the
    reference plane, and scale so |v17| equals the measured hand length.

    The rotation maps the palm-anchored orthonormal basis of ``p`` onto
    the reference basis, which pins the one in-plane degree of freedom a
    bare plane match would leave and makes the operation idempotent.
    The output is invariant to any rigid transform plus uniform positive
    scaling of the input.
    """
    if measured_v17_m <= 0:
        raise ValueError(f"measured_v17_m must be positive, got {measured_v17_m}")
    frame = palm_frame(p)
    rot = ref.basis @ _palm_basis(frame).T
    rel = p.joints - p.joints[WRIST]
    scale = measured_v17_m / np.linalg.norm(frame.v17)
    return HandPose(joints=scale * (rel @ rot.T), timestamp=p.timestamp)


def _require_normalized(p: HandPose, name: str) -> None:
    if np.linalg.norm(p.joints[WRIST]) > _ORIGIN_TOL_M:
        raise UnnormalizedPoseError(f"{name} pose wrist is not at the origin")


def mjede(pred: HandPose, gt: HandPose) -> float:
    """Mean Euclidean distance over the 20 non-wrist joints, in meters."""
    _require_normalized(pred, "pred")
    _require_normalized(gt, "gt")
    return float(np.mean(np.linalg.norm(pred.joints[1:] - gt.joints[1:], axis=1)))


def _angle_deg(u: np.ndarray, v: np.ndarray) -> float:
    nu = np.linalg.norm(u)
    nv = np.linalg.norm(v)
    if nu < 1e-12 or nv < 1e-12:
        raise ZeroLengthBoneError("zero-length bone segment")
    return math.degrees(math.atan2(np.linalg.norm(np.cross(u, v)), float(u @ v)))


def joint_angles(p: HandPose) -> np.ndarray:
    """Interior joint angles, (5 fingers, 3 joints), in degrees.

    The angle at a joint is measured between the two adjacent bone
    direction vectors, so 0 degrees means a straight finger.  Fingertips
    carry no angle.  Invariant under similarity transforms.
    """
    out = np.empty((5, 3))
    for f, chain in enumerate(FINGER_CHAINS):
        pts = p.joints[[WRIST, *chain]]
        bones = np.diff(pts, axis=0)
        for k in range(3):
            out[f, k] = _angle_deg(bones[k], bones[k + 1])
    return out


def mjae(pred: HandPose, gt: HandPose) -> float:
    """Mean absolute joint-angle error over the 15 interior joints, degrees."""
    return float(np.mean(np.abs(joint_angles(pred) - joint_angles(gt))))


def mwae(pred_v9: np.ndarray, gt_v9: np.ndarray) -> float:
    """Angle between predicted and true wrist-to-palm vectors, degrees."""
    u = np.asarray(pred_v9, dtype=np.float64)
    v = np.asarray(gt_v9, dtype=np.float64)
    if np.linalg.norm(u) < 1e-12 or np.linalg.norm(v) < 1e-12:
        raise ZeroVectorError("wrist-to-palm vector has zero length")
    return math.degrees(math.atan2(np.linalg.norm(np.cross(u, v)), float(u @ v)))


def error_cdf(errors, thresholds=None, n_points: int = 101) -> list[tuple[float, float]]:
    """Empirical CDF sampled on a fixed grid.

    The default grid spans [0, max(errors)], so the curve is monotone
    non-decreasing and reaches 1.0 at the last point.
    """
    e = np.asarray(list(errors), dtype=np.float64)
    if e.size == 0:
        raise EmptyInputError("no errors to summarize")
    if thresholds is None:
        thresholds = np.linspace(0.0, float(e.max()), n_points)
    grid = np.asarray(thresholds, dtype=np.float64)
    return [(float(t), float(np.mean(e <= t))) for t in grid]


# -- joint records on disk ---------------------------------------------------


def read_pose_jsonl(path, scale: float = 1.0) -> list[HandPose]:
    """Read JSON Lines joint records {"t": seconds, "joints": [[x,y,z] x21]}.

    ``scale`` converts normalized-image coordinates to meters when the
    records do not already carry metric units.
    """
    poses = []
    with open(path) as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            poses.append(
                HandPose(joints=scale * np.asarray(rec["joints"], dtype=np.float64),
                         timestamp=float(rec.get("t", 0.0)))
            )
    return poses


def write_pose_jsonl(path, poses) -> None:
    lines = [
        json.dumps({"t": p.timestamp, "joints": p.joints.tolist()}) for p in poses
    ]
    atomic_write_bytes(path, ("\n".join(lines) + "\n").encode())


def load_reference(path, scale: float = 1.0) -> ReferencePose:
    """Reference pose stored as the first record of a joint JSONL file."""
    poses = read_pose_jsonl(path, scale=scale)
    if not poses:
        raise EmptyInputError(f"no pose records in {path}")
    return ReferencePose(pose=poses[0])
