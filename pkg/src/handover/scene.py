"""Procedural handover scene synthesis and dataset persistence.

A scene is an object shape with surface cloud and antipodal grasp candidates,
a rigid hand proxy holding it, and a timed object trajectory built from
chained quadratic Bezier segments with per-segment constant rotation. The
hand trajectory is the object trajectory composed with the fixed
hand-in-object pose.
"""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field, asdict

import numpy as np
from scipy.spatial import cKDTree

from . import primitives
from .dataio import BlobReader, BlobWriter, read_jsonl, write_jsonl, write_manifest
from .geom import (BezierSegment, PointCloud, Pose, bezier_arclength_table,
                   bezier_eval, quat_from_rotvec, quat_mul, random_quat)

log = logging.getLogger(__name__)

SCENES_SCHEMA = "scenes/1"
SCENES_JSONL = "scenes.jsonl"
CLOUDS_BIN = "clouds.bin"

# default gripper body proxy for hand-clearance checks: fingertip midpoint,
# finger pads, palm and laterals (matches the bundled arm description)
DEFAULT_GRIPPER_POINTS = np.array([
    [0.0, 0.0, 0.1], [0.04, 0.0, 0.1], [-0.04, 0.0, 0.1],
    [0.0, 0.0, 0.02], [0.0, 0.05, 0.02], [0.0, -0.05, 0.02],
])
SWEEP_OFFSETS = np.array([0.0, -0.025, -0.05, -0.075, -0.1])


class SceneGenerationError(RuntimeError):
    pass


@dataclass
class SceneGenConfig:
    """Scene synthesis parameters; region defaults derive from the table height."""

    table_height: float = 0.92
    start_region: tuple | None = None          # ((lo3), (hi3)); default from table
    activity_region: tuple | None = None
    keypoint_sigma: float = 0.2
    speed_range: tuple = (0.1, 0.2)
    angular_speed_range: tuple = (0.5, 1.0)
    n_segments_range: tuple = (1, 4)
    frame_rate: float = 20.0
    max_duration: float = 8.0
    robot_base: tuple = (0.61, -0.50, 0.875)
    seed: int = 0
    n_object_points: int = 512
    n_hand_points: int = 150
    n_grasps: int = 64
    grasp_max_opening: float = 0.08
    grasp_standoff: float = 0.10
    hand_clearance: float = 0.02
    hand_offset: float = 0.05
    # delivery target relative to the robot base; directly above the base is
    # on the joint-1 axis and IK-infeasible, so the default leans into the
    # workspace
    goal_offset: tuple = (0.3, 0.0, 0.3)
    min_segment_span: float = 0.1

    def __post_init__(self):
        h = self.table_height
        if self.start_region is None:
            self.start_region = ((0.3, 0.0, h + 0.1), (0.9, 0.2, h + 0.3))
        if self.activity_region is None:
            self.activity_region = ((0.1, -0.3, h + 0.1), (1.1, 0.1, h + 0.7))
        for name in ("start_region", "activity_region"):
            lo, hi = np.asarray(getattr(self, name), dtype=float)
            if np.any(lo >= hi):
                raise ValueError(f"{name} must be a non-degenerate box")
        if not (self.speed_range[0] > 0 and self.angular_speed_range[0] > 0
                and self.frame_rate > 0):
            raise ValueError("speed ranges and frame rate must be positive")

    def to_dict(self):
        d = asdict(self)
        d["start_region"] = np.asarray(self.start_region).tolist()
        d["activity_region"] = np.asarray(self.activity_region).tolist()
        return d

    @staticmethod
    def from_dict(doc) -> "SceneGenConfig":
        kwargs = dict(doc)
        for key in ("start_region", "activity_region"):
            if kwargs.get(key) is not None:
                kwargs[key] = tuple(map(tuple, kwargs[key]))
        for key in ("speed_range", "angular_speed_range", "n_segments_range",
                    "robot_base", "goal_offset"):
            if key in kwargs:
                kwargs[key] = tuple(kwargs[key])
        return SceneGenConfig(**kwargs)

    @property
    def robot_base_pose(self) -> Pose:
        return Pose(np.array([1.0, 0.0, 0.0, 0.0]), np.asarray(self.robot_base, dtype=float))

    @property
    def goal_pose(self) -> Pose:
        t = np.asarray(self.robot_base, dtype=float) + np.asarray(self.goal_offset, dtype=float)
        return Pose(np.array([1.0, 0.0, 0.0, 0.0]), t)


@dataclass
class HandoverScene:
    """Object/hand geometry, grasp candidates, and the timed object trajectory."""

    scene_id: str
    shape: dict
    object_points: PointCloud             # object frame, float32
    hand_points: PointCloud               # hand frame, float32
    hand_in_object: Pose
    trajectory: list                      # [(time_s, Pose), ...]
    grasp_candidates: list                # [Pose, ...] in the object frame
    goal_pose: Pose
    frame_rate: float

    @property
    def n_frames(self):
        return len(self.trajectory)

    def pose_at(self, frame: int) -> Pose:
        return self.trajectory[min(frame, self.n_frames - 1)][1]

    def hand_pose_at(self, frame: int) -> Pose:
        return self.pose_at(frame).compose(self.hand_in_object)

    def validate(self, cfg: SceneGenConfig | None = None):
        """Raise if any structural invariant is violated."""
        times = np.array([t for t, _ in self.trajectory])
        if times[0] != 0.0 or np.any(np.diff(times) <= 0):
            raise ValueError("timestamps must start at 0 and strictly increase")
        if not self.grasp_candidates:
            raise ValueError("no grasp candidates survived filtering")
        poses = [p for _, p in self.trajectory]
        trans = np.array([p.t for p in poses])
        jumps = np.linalg.norm(np.diff(trans, axis=0), axis=1)
        rots = [2 * np.arccos(min(1.0, abs(float(np.dot(poses[i].q, poses[i + 1].q)))))
                for i in range(len(poses) - 1)]
        if cfg is not None:
            if np.any(jumps > cfg.speed_range[1] / cfg.frame_rate + 1e-6):
                raise ValueError("translation jump exceeds the per-frame speed bound")
            if np.any(np.array(rots) > cfg.angular_speed_range[1] / cfg.frame_rate + 1e-6):
                raise ValueError("rotation jump exceeds the per-frame bound")
        for g in self.grasp_candidates:
            if not np.all(np.isfinite(poses[-1].compose(g).to_array())):
                raise ValueError("grasp candidate produces non-finite pose")


# ---------------------------------------------------------------------------
# trajectory synthesis
# ---------------------------------------------------------------------------

def _uniform_in_box(rng, box):
    lo, hi = np.asarray(box, dtype=float)
    return rng.uniform(lo, hi)


def synthesize_trajectory(cfg: SceneGenConfig, rng) -> list:
    """Chain quadratic Bezier segments into a timed (time, Pose) trajectory.

    Translation moves at a per-segment constant speed via a numeric arc-length
    table; segment durations snap to whole frames so every sampled step stays
    inside one segment. Rotation spins about a fresh random axis per segment
    at a constant angular rate, so per-frame rotation magnitude is exact.
    """
    start = _uniform_in_box(rng, cfg.start_region)
    n_seg = int(rng.integers(cfg.n_segments_range[0], cfg.n_segments_range[1] + 1))
    max_frames = int(round(cfg.max_duration * cfg.frame_rate))

    q = random_quat(rng)
    poses = [Pose(q, start)]
    cur = start
    for _ in range(n_seg):
        end = _uniform_in_box(rng, cfg.activity_region)
        for _ in range(100):
            if np.linalg.norm(end - cur) >= cfg.min_segment_span:
                break
            end = _uniform_in_box(rng, cfg.activity_region)
        mid = rng.normal((cur + end) / 2.0, cfg.keypoint_sigma)
        speed = rng.uniform(*cfg.speed_range)
        omega = rng.uniform(*cfg.angular_speed_range)
        axis = _unit_vector(rng)

        seg = BezierSegment(np.array([cur, mid, end]), duration=1.0)
        us, arcs = bezier_arclength_table(seg, samples=256)
        length = arcs[-1]
        n_frames = max(1, int(np.ceil(length * cfg.frame_rate / speed)))
        dq = quat_from_rotvec(axis * (omega / cfg.frame_rate))
        for j in range(1, n_frames + 1):
            if len(poses) > max_frames:
                break
            s = length * j / n_frames
            u = float(np.interp(s, arcs, us))
            p = bezier_eval(seg, u) if j < n_frames else end
            q = quat_mul(dq, q)  # world-frame increment
            poses.append(Pose(q, p))
        if len(poses) > max_frames:
            break
        cur = end
    dt = 1.0 / cfg.frame_rate
    return [(i * dt, pose) for i, pose in enumerate(poses[:max_frames + 1])]


def _unit_vector(rng):
    while True:
        v = rng.normal(size=3)
        n = np.linalg.norm(v)
        if n > 1e-6:
            return v / n


# ---------------------------------------------------------------------------
# grasp sampling and filtering
# ---------------------------------------------------------------------------

class GraspSamplingError(RuntimeError):
    pass


def sample_grasps(shape, n: int, rng, max_opening: float = 0.08,
                  standoff: float = 0.10, antipodal_tol: float = 0.01):
    """Sample parallel-jaw antipodal grasps on a primitive surface.

    For a surface point with outward normal, the ray cast into the body must
    exit at a point whose normal is antiparallel within ``antipodal_tol`` rad
    and whose span fits the gripper opening. The grasp frame closes along +x,
    approaches along +z, with the origin ``standoff`` behind the contact
    midpoint. Returns up to ``n`` poses (fewer if attempts run out; zero is
    an error).
    """
    grasps = []
    budget = 60 * n
    cos_tol = -np.cos(antipodal_tol)
    for _ in range(budget):
        if len(grasps) >= n:
            break
        p1, n1 = shape.surface(1, rng)
        p1, n1 = p1[0], n1[0]
        hit = shape.ray_exit(p1, -n1)
        if hit is None:
            continue
        p2, n2 = hit
        if np.dot(n1, n2) > cos_tol:
            continue
        width = np.linalg.norm(p2 - p1)
        if width > max_opening or width < 1e-6:
            continue
        x_axis = (p2 - p1) / width
        ref = np.array([0.0, 0.0, 1.0])
        if abs(x_axis @ ref) > 0.99:
            ref = np.array([1.0, 0.0, 0.0])
        b1 = np.cross(x_axis, ref)
        b1 /= np.linalg.norm(b1)
        b2 = np.cross(x_axis, b1)
        psi = rng.uniform(0.0, 2.0 * np.pi)
        z_axis = np.cos(psi) * b1 + np.sin(psi) * b2
        y_axis = np.cross(z_axis, x_axis)
        rot = np.column_stack([x_axis, y_axis, z_axis])
        origin = (p1 + p2) / 2.0 - standoff * z_axis
        grasps.append(Pose.from_matrix(np.block([[rot, origin[:, None]],
                                                 [np.zeros((1, 3)), np.ones((1, 1))]])))
    if not grasps:
        raise GraspSamplingError(f"no antipodal grasp found on {shape!r}")
    return grasps


def gripper_proxy_points(grasp: Pose, gripper_points=None):
    """Gripper body proxy in the grasp's parent frame: keypoints swept along -z."""
    kp = DEFAULT_GRIPPER_POINTS if gripper_points is None else np.asarray(gripper_points)
    swept = np.concatenate([kp + np.array([0.0, 0.0, s]) for s in SWEEP_OFFSETS])
    return grasp.transform(swept)


def filter_grasps_by_hand(grasps, hand_points: PointCloud, hand_in_object: Pose,
                          clearance: float = 0.02, gripper_points=None):
    """Keep grasps whose swept gripper proxy stays ``clearance`` from the hand.

    Both grasps and the hand ride rigidly on the object, so the test is done
    once in the object frame and remains valid along the whole trajectory.
    Order is preserved.
    """
    if clearance <= 0:
        raise ValueError("clearance must be positive")
    if len(hand_points) == 0:
        return list(grasps)
    tree = cKDTree(hand_in_object.transform(np.asarray(hand_points.points, dtype=float)))
    kept = []
    for g in grasps:
        proxy = gripper_proxy_points(g, gripper_points)
        d, _ = tree.query(proxy)
        if np.min(d) >= clearance:
            kept.append(g)
    return kept


def ellipsoid_shell(half_axes, n, rng):
    """Point shell of an axis-aligned ellipsoid (the rigid hand proxy)."""
    dirs = primitives._sample_sphere_dirs(rng, n)
    return dirs * np.asarray(half_axes, dtype=float)


def place_hand_behind_grasp(grasp: Pose, standoff: float, offset: float) -> Pose:
    """Hand frame riding on the far side of a grasp's approach axis.

    The hand's short axis (z) aligns with the approach; its center sits
    ``offset`` past the fingertip contact midpoint, emulating a grip on the
    opposite side of the object.
    """
    center_local = np.array([0.0, 0.0, standoff + offset])
    return Pose(grasp.q, grasp.transform(center_local))


# ---------------------------------------------------------------------------
# scene and dataset generation
# ---------------------------------------------------------------------------

def generate_scene(cfg: SceneGenConfig, index: int) -> HandoverScene:
    """Deterministically build one scene from the stream ``seed ^ index``."""
    rng = np.random.default_rng(cfg.seed ^ index)
    for attempt in range(20):
        shape = primitives.random_primitive(rng, cfg.grasp_max_opening)
        obj_pts, _ = shape.surface(cfg.n_object_points, rng)
        try:
            grasps = sample_grasps(shape, cfg.n_grasps, rng,
                                   cfg.grasp_max_opening, cfg.grasp_standoff)
        except GraspSamplingError:
            log.warning("scene %d attempt %d: no grasps on %r, regenerating", index, attempt, shape)
            continue
        hand_pts = ellipsoid_shell((0.09, 0.05, 0.03), cfg.n_hand_points, rng)
        hand_in_object = place_hand_behind_grasp(grasps[0], cfg.grasp_standoff, cfg.hand_offset)
        kept = filter_grasps_by_hand(grasps, PointCloud(hand_pts), hand_in_object,
                                     cfg.hand_clearance)
        if not kept:
            log.warning("scene %d attempt %d: hand filtered every grasp, regenerating",
                        index, attempt)
            continue
        trajectory = synthesize_trajectory(cfg, rng)
        return HandoverScene(
            scene_id=f"s{index:06d}",
            shape=shape.to_dict(),
            object_points=PointCloud(obj_pts.astype(np.float32)),
            hand_points=PointCloud(hand_pts.astype(np.float32)),
            hand_in_object=hand_in_object,
            trajectory=trajectory,
            grasp_candidates=kept,
            goal_pose=cfg.goal_pose,
            frame_rate=cfg.frame_rate,
        )
    raise SceneGenerationError(f"scene {index}: no valid scene in 20 attempts")


def scene_to_record(scene: HandoverScene, blobs: BlobWriter) -> dict:
    traj = np.array([pose.to_array() for _, pose in scene.trajectory])
    grasps = np.array([g.to_array() for g in scene.grasp_candidates])
    return {
        "scene_id": scene.scene_id,
        "shape": scene.shape,
        "frame_rate": scene.frame_rate,
        "n_frames": scene.n_frames,
        "hand_in_object": scene.hand_in_object.to_array().tolist(),
        "goal_pose": scene.goal_pose.to_array().tolist(),
        "blobs": {
            "object_points": blobs.put(scene.object_points.points, np.float32),
            "hand_points": blobs.put(scene.hand_points.points, np.float32),
            "trajectory": blobs.put(traj, np.float64),
            "grasps": blobs.put(grasps, np.float64),
        },
    }


def scene_from_record(rec: dict, blobs: BlobReader) -> HandoverScene:
    n = rec["n_frames"]
    traj = blobs.get(rec["blobs"]["trajectory"], np.float64, (n, 7))
    grasps = blobs.get(rec["blobs"]["grasps"], np.float64, (-1, 7))
    dt = 1.0 / rec["frame_rate"]
    return HandoverScene(
        scene_id=rec["scene_id"],
        shape=rec["shape"],
        object_points=PointCloud(blobs.get(rec["blobs"]["object_points"], np.float32, (-1, 3))),
        hand_points=PointCloud(blobs.get(rec["blobs"]["hand_points"], np.float32, (-1, 3))),
        hand_in_object=Pose.from_array(rec["hand_in_object"]),
        trajectory=[(i * dt, Pose.from_array(row)) for i, row in enumerate(traj)],
        grasp_candidates=[Pose.from_array(row) for row in grasps],
        goal_pose=Pose.from_array(rec["goal_pose"]),
        frame_rate=rec["frame_rate"],
    )


def generate_dataset(cfg: SceneGenConfig, n_scenes: int, out_dir, workers: int = 1):
    """Write ``n_scenes`` scene records; bit-identical under a fixed seed.

    Scenes draw from independent per-index streams, so parallel and serial
    generation produce the same bytes.
    """
    if n_scenes < 1:
        raise ValueError("n_scenes must be >= 1")
    os.makedirs(out_dir, exist_ok=True)
    if workers > 1:
        import multiprocessing as mp
        with mp.get_context("fork").Pool(workers) as pool:
            scenes = pool.starmap(generate_scene, [(cfg, i) for i in range(n_scenes)])
    else:
        scenes = (generate_scene(cfg, i) for i in range(n_scenes))
    records = []
    with BlobWriter(os.path.join(out_dir, CLOUDS_BIN)) as blobs:
        for i, scene in enumerate(scenes):
            try:
                records.append(scene_to_record(scene, blobs))
            except OSError as e:
                raise OSError(f"scene {i}: {e}") from e
    write_jsonl(os.path.join(out_dir, SCENES_JSONL), records)
    write_manifest(out_dir, {
        "schema": SCENES_SCHEMA,
        "seed": cfg.seed,
        "count": n_scenes,
        "config": cfg.to_dict(),
    })
    return out_dir


class SceneDataset:
    """Random-access reader over a generated scene directory."""

    def __init__(self, path):
        self.path = path
        self.records = read_jsonl(os.path.join(path, SCENES_JSONL))
        self._blobs = BlobReader(os.path.join(path, CLOUDS_BIN))

    def __len__(self):
        return len(self.records)

    def __getitem__(self, i) -> HandoverScene:
        return scene_from_record(self.records[i], self._blobs)

    def __iter__(self):
        for i in range(len(self)):
            yield self[i]
