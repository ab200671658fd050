"""4D observation processing: frame buffering, rigid registration, and
per-point flow features.

Each policy input point carries its current egocentric coordinates, a one-hot
hand/object label, and its estimated coordinates in the previous ``n`` frames.
The historical coordinates come from chained point-to-point ICP between the
current world-frame cloud and buffered past clouds, applied per label class.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .geom import Label, PointCloud, Pose, pose_distance

FEATURE_BASE = 5  # xyz + one-hot(hand, object)


class DegenerateCloudError(ValueError):
    """Raised when the correspondence cross-covariance has rank < 3."""


@dataclass
class IcpResult:
    pose: Pose              # maps source coordinates into the target's frame
    residual: float         # RMS distance over all correspondences
    residuals: list         # per-iteration RMS history
    iterations: int
    converged: bool


def _rigid_fit(src, dst):
    """Least-squares rigid transform src -> dst (SVD, reflection-corrected)."""
    mu_s, mu_d = src.mean(axis=0), dst.mean(axis=0)
    h = (src - mu_s).T @ (dst - mu_d) / len(src)
    u, s, vt = np.linalg.svd(h)
    if s[2] <= 1e-9 * max(s[0], 1e-30):
        raise DegenerateCloudError("rank-deficient cross-covariance")
    d = np.sign(np.linalg.det(vt.T @ u.T))
    r = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    t = mu_d - r @ mu_s
    m = np.eye(4)
    m[:3, :3] = r
    m[:3, 3] = t
    return Pose.from_matrix(m)


def icp_register(source, target, init: Pose | None = None, max_iters: int = 50,
                 tol: float = 1e-8, corr_gate: float = 0.1) -> IcpResult:
    """Point-to-point ICP aligning ``source`` onto ``target``.

    Correspondences are target nearest neighbors; pairs farther than
    ``corr_gate`` are excluded from the fit (all pairs still count toward the
    reported residual). Iterations stop when the incremental pose change
    drops below ``tol`` (combined translation + 0.1 * rotation metric).
    """
    src = np.asarray(getattr(source, "points", source), dtype=float)
    dst = np.asarray(getattr(target, "points", target), dtype=float)
    if len(src) < 3 or len(dst) < 3:
        raise DegenerateCloudError("registration needs at least 3 points per cloud")
    pose = Pose.identity() if init is None else init
    tree = cKDTree(dst)
    residuals = []
    converged = False
    it = 0
    for it in range(1, max_iters + 1):
        moved = pose.transform(src)
        dist, idx = tree.query(moved)
        sel = dist <= corr_gate
        if sel.sum() < 3:
            sel = np.ones(len(src), dtype=bool)
        delta = _rigid_fit(moved[sel], dst[idx[sel]])
        pose = delta.compose(pose)
        moved = pose.transform(src)
        dist, idx = tree.query(moved)
        residuals.append(float(np.sqrt(np.mean(dist ** 2))))
        if pose_distance(delta, Pose.identity()) < tol:
            converged = True
            break
    return IcpResult(pose=pose, residual=residuals[-1], residuals=residuals,
                     iterations=it, converged=converged)


class FrameBuffer:
    """Ring of recent world-frame labeled clouds with cached per-class kd-trees."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self._entries = deque(maxlen=capacity)

    def push(self, frame: int, cloud: PointCloud):
        if self._entries and frame <= self._entries[-1][0]:
            raise ValueError("frames must be pushed in increasing order")
        split = {}
        for lab in (Label.HAND, Label.OBJECT):
            pts = cloud.points[cloud.labels == lab] if cloud.labels is not None else cloud.points
            split[int(lab)] = np.asarray(pts, dtype=float)
        self._entries.append((frame, split))

    def __len__(self):
        return len(self._entries)

    def past(self, i: int):
        """Class-split cloud of the i-th most recent entry (1 = previous frame)."""
        if i < 1 or i > len(self._entries):
            return None
        return self._entries[-i][1]


@dataclass
class FlowFeatures:
    """Per-point feature matrix of width 3 + 2 + 3n (coords, one-hot, history)."""

    features: np.ndarray        # (N, 5 + 3n) float64, camera frame
    n_history: int
    degenerate: dict            # {label: True} where ICP fell back to identity

    @property
    def width(self):
        return FEATURE_BASE + 3 * self.n_history


def base_features(points, labels):
    """Current coordinates plus one-hot labels (no history)."""
    n = len(points)
    onehot = np.zeros((n, 2))
    if n:
        onehot[np.arange(n), np.asarray(labels, dtype=int)] = 1.0
    return np.concatenate([np.asarray(points, dtype=float), onehot], axis=1)


def compute_flow_features(buffer: FrameBuffer, obs, l1: int,
                          cam_pose: Pose, icp_max_iters: int = 30) -> FlowFeatures:
    """Estimate each point's coordinates in the previous ``l1`` frames.

    Registration runs per label class in the world frame, chained backwards
    from the previous frame so each hop starts near alignment. Missing
    history at episode start repeats the oldest available coordinates; a
    degenerate class keeps identity flow and is flagged.
    """
    if len(obs) == 0:
        return FlowFeatures(np.zeros((0, FEATURE_BASE + 3 * l1)), l1, {})
    world = cam_pose.transform(obs.points)
    inv = cam_pose.inverse()
    cur_cam = np.asarray(obs.points, dtype=float)
    history = [cur_cam.copy() for _ in range(l1)]  # default: no-motion padding
    degenerate = {}
    for lab in (Label.HAND, Label.OBJECT):
        mask = obs.labels == lab
        if not mask.any():
            continue
        cur = world[mask]
        chain = Pose.identity()
        last_cam = None  # newest successful estimate; reused to pad older slots
        for i in range(1, l1 + 1):
            past = buffer.past(i)
            past_pts = None if past is None else past.get(int(lab))
            if past_pts is not None:
                if len(past_pts) >= 3 and len(cur) >= 3:
                    try:
                        chain = icp_register(cur, past_pts, init=chain,
                                             max_iters=icp_max_iters).pose
                    except DegenerateCloudError:
                        degenerate[int(lab)] = True  # keep the current chain
                else:
                    degenerate[int(lab)] = True
                last_cam = inv.transform(chain.transform(cur))
            if last_cam is not None:
                history[i - 1][mask] = last_cam
    feats = np.concatenate([base_features(obs.points, obs.labels)] + history, axis=1)
    return FlowFeatures(feats, l1, degenerate)


def make_feature_fn(camera_pose_fn, mode: str, l1: int):
    """Per-frame feature pipeline shared by demonstration recording and policies.

    ``camera_pose_fn(ee_pose) -> Pose`` supplies the egocentric frame. Modes:
    ``flow`` (ICP history features), ``current`` (coords + one-hot only), and
    ``stack`` (raw past clouds as extra points). Returns ``fn(obs) -> (N, F)``.
    """
    if mode == "current":
        return lambda obs: base_features(obs.points, obs.labels)
    buffer = FrameBuffer(max(1, l1))
    if mode == "flow":
        def fn(obs):
            cam = camera_pose_fn(obs.ee_pose)
            feats = compute_flow_features(buffer, obs, l1, cam)
            buffer.push(obs.frame, PointCloud(cam.transform(obs.points), obs.labels))
            return feats.features
    elif mode == "stack":
        def fn(obs):
            cam = camera_pose_fn(obs.ee_pose)
            feats = frame_stack_features(buffer, obs, l1, cam)
            buffer.push(obs.frame, PointCloud(cam.transform(obs.points), obs.labels))
            return feats
    else:
        raise ValueError(f"unknown feature mode {mode!r}")
    return fn


def feature_width(mode: str, l1: int) -> int:
    if mode == "flow":
        return FEATURE_BASE + 3 * l1
    if mode == "current":
        return FEATURE_BASE
    if mode == "stack":
        return FEATURE_BASE + l1 + 1
    raise ValueError(f"unknown feature mode {mode!r}")


def frame_stack_features(buffer: FrameBuffer, obs, l1: int, cam_pose: Pose):
    """Raw stacking baseline: union of current + past clouds, age one-hot tagged.

    Feature layout per point: camera-frame xyz, hand/object one-hot, then a
    one-hot age slot over {current, 1, ..., l1} frames back.
    """
    inv = cam_pose.inverse()
    rows = [np.concatenate([base_features(obs.points, obs.labels),
                            np.tile(np.eye(l1 + 1)[0], (len(obs), 1))], axis=1)] if len(obs) else []
    for i in range(1, l1 + 1):
        past = buffer.past(i)
        if past is None:
            continue
        for lab in (Label.HAND, Label.OBJECT):
            pts = past.get(int(lab))
            if pts is None or len(pts) == 0:
                continue
            cam_pts = inv.transform(pts)
            labels = np.full(len(pts), int(lab))
            age = np.tile(np.eye(l1 + 1)[i], (len(pts), 1))
            rows.append(np.concatenate([base_features(cam_pts, labels), age], axis=1))
    if not rows:
        return np.zeros((0, FEATURE_BASE + l1 + 1))
    return np.concatenate(rows, axis=0)
