"""Trajectory poses, relative-pose deltas and pose-derived loop-closure ground truth."""

from __future__ import annotations

import io
import json
import math
import os
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence, TextIO, Union

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

ORTHO_TOL = 1e-6
REPAIR_TOL = 1e-3

DEFAULT_TRANS_THRESH = 1.5
DEFAULT_ROT_THRESH = 0.3
DEFAULT_EXCLUSION_WINDOW = 100


class PoseParseError(ValueError):
    """Malformed pose line. ``lineno`` is 1-based."""

    def __init__(self, lineno: int, message: str):
        super().__init__(f"line {lineno}: {message}")
        self.lineno = lineno


class PoseValidationError(ValueError):
    pass


def _orthonormal_error(rotation: np.ndarray) -> float:
    return float(np.max(np.abs(rotation.T @ rotation - np.eye(3))))


@dataclass(frozen=True, eq=False)
class Pose:
    """Rigid camera pose: ``x_world = rotation @ x_cam + translation``."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        rotation = np.array(self.rotation, dtype=np.float64).reshape(3, 3)
        translation = np.array(self.translation, dtype=np.float64).reshape(3)
        if not np.all(np.isfinite(rotation)) or not np.all(np.isfinite(translation)):
            raise PoseValidationError("pose contains non-finite values")
        if _orthonormal_error(rotation) > ORTHO_TOL or np.linalg.det(rotation) <= 0:
            raise PoseValidationError("rotation is not a proper orthonormal matrix")
        rotation.flags.writeable = False
        translation.flags.writeable = False
        object.__setattr__(self, "rotation", rotation)
        object.__setattr__(self, "translation", translation)

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, matrix) -> "Pose":
        matrix = np.asarray(matrix, dtype=np.float64)
        return cls(matrix[:3, :3], matrix[:3, 3])

    def as_matrix(self) -> np.ndarray:
        out = np.eye(4)
        out[:3, :3] = self.rotation
        out[:3, 3] = self.translation
        return out

    def compose(self, other: "Pose") -> "Pose":
        return Pose(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )

    def inverse(self) -> "Pose":
        rt = self.rotation.T
        return Pose(rt, -rt @ self.translation)

    def __eq__(self, other):
        if not isinstance(other, Pose):
            return NotImplemented
        return np.array_equal(self.rotation, other.rotation) and np.array_equal(
            self.translation, other.translation
        )

    def __repr__(self):
        return f"Pose(t={self.translation.tolist()})"


@dataclass(frozen=True)
class RelPoseDelta:
    trans_norm: float
    rot_angle: float


def nearest_rotation(matrix: np.ndarray) -> np.ndarray:
    """Closest proper rotation in the Frobenius sense (polar factor)."""
    u, _, vt = np.linalg.svd(matrix)
    d = np.sign(np.linalg.det(u @ vt))
    return u @ np.diag([1.0, 1.0, d]) @ vt


def _rotation_from_row(values: np.ndarray, lineno: int) -> Pose:
    matrix = values.reshape(3, 4)
    rotation, translation = matrix[:, :3], matrix[:, 3]
    if not np.all(np.isfinite(matrix)):
        raise PoseParseError(lineno, "non-finite value")
    err = _orthonormal_error(rotation)
    if err > REPAIR_TOL or np.linalg.det(rotation) <= 0:
        raise PoseValidationError(
            f"line {lineno}: rotation block is {err:.3g} from orthonormal"
        )
    if err > ORTHO_TOL:
        rotation = nearest_rotation(rotation)
    return Pose(rotation, translation)


def parse_pose_file(text: Union[str, TextIO]) -> list[Pose]:
    """Parse KITTI odometry poses: 12 numbers per line, row-major upper 3x4.

    Blank lines are skipped. Rotation blocks within ``REPAIR_TOL`` of
    orthonormal are projected onto the nearest rotation.
    """
    if not isinstance(text, str):
        text = text.read()
    poses = []
    for lineno, line in enumerate(io.StringIO(text), start=1):
        tokens = line.split()
        if not tokens:
            continue
        if len(tokens) != 12:
            raise PoseParseError(lineno, f"expected 12 values, got {len(tokens)}")
        try:
            values = np.array([float(tok) for tok in tokens])
        except ValueError as exc:
            raise PoseParseError(lineno, str(exc)) from None
        poses.append(_rotation_from_row(values, lineno))
    return poses


def load_poses(path: Union[str, os.PathLike]) -> list[Pose]:
    with open(path, encoding="utf-8") as fh:
        return parse_pose_file(fh)


def format_poses(poses: Iterable[Pose]) -> str:
    lines = []
    for pose in poses:
        row = pose.as_matrix()[:3].reshape(-1)
        lines.append(" ".join(repr(float(v)) for v in row))
    return "".join(line + "\n" for line in lines)


def _rotation_angle(rel: np.ndarray) -> np.ndarray:
    # atan2 of (sin, cos) stays accurate near 0 and pi where arccos(trace) does not
    cos_part = 0.5 * (rel[..., 0, 0] + rel[..., 1, 1] + rel[..., 2, 2] - 1.0)
    axis = np.stack(
        [
            rel[..., 2, 1] - rel[..., 1, 2],
            rel[..., 0, 2] - rel[..., 2, 0],
            rel[..., 1, 0] - rel[..., 0, 1],
        ],
        axis=-1,
    )
    sin_part = 0.5 * np.linalg.norm(axis, axis=-1)
    return np.arctan2(sin_part, np.clip(cos_part, -1.0, 1.0))


def relative_delta(a: Pose, b: Pose) -> RelPoseDelta:
    """Translation norm and geodesic rotation angle of ``a^-1 b``."""
    rel_rot = a.rotation.T @ b.rotation
    rel_trans = a.rotation.T @ (b.translation - a.translation)
    return RelPoseDelta(
        trans_norm=float(np.linalg.norm(rel_trans)),
        rot_angle=float(_rotation_angle(rel_rot)),
    )


@dataclass(frozen=True)
class GroundTruth:
    """Per-frame sets of valid loop-closure partners.

    ``matches`` holds an entry for every frame id (possibly empty), each a
    sorted tuple.
    """

    matches: Mapping[int, tuple]
    trans_thresh: float
    rot_thresh: float
    exclusion_window: int

    @property
    def n_frames(self) -> int:
        return len(self.matches)

    def __getitem__(self, qid: int) -> tuple:
        return self.matches.get(qid, ())

    def pairs(self) -> list[tuple[int, int]]:
        """Unordered pairs ``(i, j)`` with ``i < j``."""
        return [(q, g) for q, gs in sorted(self.matches.items()) for g in gs if q < g]

    @property
    def pair_count(self) -> int:
        return len(self.pairs())

    def to_json(self) -> str:
        body = {
            "trans_thresh": self.trans_thresh,
            "rot_thresh": self.rot_thresh,
            "exclusion_window": self.exclusion_window,
            "matches": {str(q): list(self.matches[q]) for q in sorted(self.matches)},
        }
        return json.dumps(body)

    @classmethod
    def from_json(cls, text: str) -> "GroundTruth":
        body = json.loads(text)
        matches = {int(k): tuple(sorted(int(g) for g in v)) for k, v in body["matches"].items()}
        return cls(
            matches=matches,
            trans_thresh=float(body["trans_thresh"]),
            rot_thresh=float(body["rot_thresh"]),
            exclusion_window=int(body["exclusion_window"]),
        )


def _stack(poses: Sequence[Pose]) -> tuple[np.ndarray, np.ndarray]:
    rots = np.stack([p.rotation for p in poses])
    trans = np.stack([p.translation for p in poses])
    return rots, trans


def build_ground_truth(
    poses: Sequence[Pose],
    trans_thresh: float = DEFAULT_TRANS_THRESH,
    rot_thresh: float = DEFAULT_ROT_THRESH,
    exclusion_window: int = DEFAULT_EXCLUSION_WINDOW,
    chunk: int = 512,
) -> GroundTruth:
    """Symmetric ground truth: ``g in G(q)`` iff both pose deltas fall strictly
    below the thresholds and ``|q - g| > exclusion_window``."""
    if len(poses) == 0:
        raise ValueError("poses must be nonempty")
    if trans_thresh <= 0 or rot_thresh <= 0:
        raise ValueError("thresholds must be positive")
    if exclusion_window < 0:
        raise ValueError("exclusion_window must be >= 0")

    rots, trans = _stack(poses)
    n = len(poses)
    ids = np.arange(n)
    found: dict[int, list[int]] = {i: [] for i in range(n)}
    for start in range(0, n, chunk):
        stop = min(start + chunk, n)
        # ||a^-1 b|| translation equals ||t_b - t_a|| for rigid motions
        diff = trans[None, :, :] - trans[start:stop, None, :]
        dist = np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))
        gap = np.abs(ids[None, :] - ids[start:stop, None])
        qi, gi = np.nonzero((dist < trans_thresh) & (gap > exclusion_window))
        if qi.size == 0:
            continue
        qi = qi + start
        rel = np.einsum("nji,njk->nik", rots[qi], rots[gi])
        keep = _rotation_angle(rel) < rot_thresh
        for q, g in zip(qi[keep].tolist(), gi[keep].tolist()):
            found[q].append(g)
    matches = {q: tuple(sorted(gs)) for q, gs in found.items()}
    return GroundTruth(
        matches=matches,
        trans_thresh=float(trans_thresh),
        rot_thresh=float(rot_thresh),
        exclusion_window=int(exclusion_window),
    )


def cluster_ground_truth(gt: GroundTruth) -> list[frozenset]:
    """Connected components of the match graph, singletons dropped, ordered by
    smallest member."""
    pairs = gt.pairs()
    if not pairs:
        return []
    nodes = sorted({i for pair in pairs for i in pair})
    index = {node: k for k, node in enumerate(nodes)}
    rows = [index[a] for a, _ in pairs]
    cols = [index[b] for _, b in pairs]
    graph = coo_matrix((np.ones(len(pairs)), (rows, cols)), shape=(len(nodes), len(nodes)))
    _, labels = connected_components(graph, directed=False)
    groups: dict[int, set] = {}
    for node, label in zip(nodes, labels):
        groups.setdefault(int(label), set()).add(node)
    clusters = [frozenset(g) for g in groups.values() if len(g) > 1]
    return sorted(clusters, key=min)


def _yaw_rotation(yaw: float) -> np.ndarray:
    c, s = math.cos(yaw), math.sin(yaw)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def figure_eight_trajectory(
    n_poses: int = 500,
    laps: int = 2,
    scale: float = 20.0,
    lap_offset: float = 0.35,
) -> list[Pose]:
    """Poses along a lemniscate of Gerono driven ``laps`` times.

    Each later lap is shifted sideways by ``lap_offset`` meters so revisits
    are near but not coincident. Heading follows the path tangent; the two
    passes through the crossing point differ by 90 degrees of yaw.
    """
    poses = []
    for i in range(n_poses):
        t = 2.0 * math.pi * laps * i / n_poses
        lap = int(laps * i // n_poses)
        dx, dy = scale * math.cos(t), scale * math.cos(2.0 * t)
        yaw = math.atan2(dy, dx)
        normal = np.array([-math.sin(yaw), math.cos(yaw), 0.0])
        pos = np.array([scale * math.sin(t), 0.5 * scale * math.sin(2.0 * t), 0.0])
        poses.append(Pose(_yaw_rotation(yaw), pos + lap * lap_offset * normal))
    return poses


def straight_trajectory(n_poses: int, spacing: float = 2.0) -> list[Pose]:
    return [Pose(np.eye(3), np.array([i * spacing, 0.0, 0.0])) for i in range(n_poses)]
