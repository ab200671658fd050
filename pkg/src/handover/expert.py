"""Expert demonstration generation.

Three privileged planners drive the episode engine: DESTINATION plans once
toward the trajectory's final pose, DENSE replans periodically toward the
current pose, LANDMARK replans toward a bounded future pose. The landmark
frame is min(t + period, next_endpoint), where endpoints mark frames whose
future a simple forecaster cannot predict (sharp trajectory junctions).

Each plan is a straight joint-space path to the first IK-solvable grasp
(candidates sorted by pose distance to the end effector, IK seeded from the
current configuration), resampled to a constant joint step so the recorded
actions have a uniform magnitude regardless of target distance.
"""

from __future__ import annotations

import json
import os
from bisect import bisect_right
from collections import deque
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .dataio import BlobReader, BlobWriter, read_jsonl, write_jsonl, write_manifest
from .geom import (Pose, pose_distance, quat_from_rotvec, quat_mul,
                   quat_conjugate, rotvec_from_quat)
from .kin import forward_kinematics, resample_joint_trajectory, solve_ik
from .percept import make_feature_fn
from .sim import (Action, EpisodeResult, SceneRuntime, action_from_target,
                  run_episode)

DEMOS_SCHEMA = "demos/1"
DEMOS_JSONL = "demos.jsonl"
DEMOS_BIN = "demo_blobs.bin"


class Strategy(Enum):
    DESTINATION = "destination"
    DENSE = "dense"
    LANDMARK = "landmark"


# ---------------------------------------------------------------------------
# forecasting and trajectory segmentation
# ---------------------------------------------------------------------------

@dataclass
class Forecaster:
    """Object-pose extrapolator standing in for a learned forecast model."""

    mode: str = "constant_velocity"   # or "polynomial_fit"
    history_window: int = 5
    horizon: int = 10

    def __post_init__(self):
        if self.horizon < 1 or self.history_window < 2:
            raise ValueError("horizon >= 1 and history_window >= 2 required")
        if self.mode not in ("constant_velocity", "polynomial_fit"):
            raise ValueError(f"unknown forecaster mode {self.mode!r}")


def _mean_world_twist(history):
    """Average per-frame world-frame delta: (rotvec, translation)."""
    dts = np.diff(np.array([p.t for p in history]), axis=0)
    drs = np.array([rotvec_from_quat(quat_mul(history[i + 1].q, quat_conjugate(history[i].q)))
                    for i in range(len(history) - 1)])
    return drs.mean(axis=0), dts.mean(axis=0)


def forecast(f: Forecaster, history) -> list:
    """Extrapolate the next ``f.horizon`` poses from recent history."""
    if len(history) < 2:
        raise ValueError("forecast needs at least 2 past poses")
    window = list(history[-f.history_window:])
    last = window[-1]
    w, v = _mean_world_twist(window)
    out = []
    if f.mode == "constant_velocity":
        for j in range(1, f.horizon + 1):
            q = quat_mul(quat_from_rotvec(w * j), last.q)
            out.append(Pose(q, last.t + v * j))
    else:
        ts = np.arange(-len(window) + 1, 1, dtype=float)
        coeffs = [np.polyfit(ts, [p.t[k] for p in window], deg=min(2, len(window) - 1))
                  for k in range(3)]
        for j in range(1, f.horizon + 1):
            t = np.array([np.polyval(c, j) for c in coeffs])
            q = quat_mul(quat_from_rotvec(w * j), last.q)
            out.append(Pose(q, t))
    return out


def forecast_errors(f: Forecaster, poses, rot_weight: float = 0.1) -> np.ndarray:
    """Mean pose distance between forecast and ground truth per frame.

    Frames without enough history (or with no future) score zero.
    """
    n = len(poses)
    errors = np.zeros(n)
    for t in range(1, n - 1):
        history = poses[max(0, t - f.history_window + 1):t + 1]
        if len(history) < 2:
            continue
        future = poses[t + 1:min(t + f.horizon, n - 1) + 1]
        if not future:
            continue
        pred = forecast(f, history)[:len(future)]
        errors[t] = np.mean([pose_distance(a, b, rot_weight)
                             for a, b in zip(pred, future)])
    return errors


@dataclass
class SegmentedTrajectory:
    """Endpoint frames 0 = l_0 < l_1 < ... < l_k = T plus per-frame errors."""

    endpoints: list
    forecast_error: np.ndarray

    def __post_init__(self):
        e = list(self.endpoints)
        if e[0] != 0 or any(b <= a for a, b in zip(e, e[1:])):
            raise ValueError("endpoints must start at 0 and strictly increase")
        self.endpoints = e


def segment_trajectory(f: Forecaster, poses, threshold: float,
                       rot_weight: float = 0.1) -> SegmentedTrajectory:
    """Split a trajectory at frames whose future defeats the forecaster.

    Frames with error above threshold are clustered (gaps below the horizon
    merge), each cluster keeps its maximum-error frame, and interior
    endpoints closer than one horizon to either boundary or to each other
    are dropped.
    """
    errors = forecast_errors(f, poses, rot_weight)
    t_end = len(poses)
    candidates = [t for t in range(1, t_end) if errors[t] > threshold]
    reps = []
    cluster = []
    for c in candidates + [None]:
        if cluster and (c is None or c - cluster[-1] >= f.horizon):
            best = max(cluster, key=lambda t: (errors[t], -t))
            reps.append(best)
            cluster = []
        if c is not None:
            cluster.append(c)
    kept = [0]
    for r in reps:
        if r - kept[-1] >= f.horizon and t_end - r >= f.horizon:
            kept.append(r)
    return SegmentedTrajectory(kept + [t_end], errors)


def select_landmark(seg: SegmentedTrajectory, t: int, period: int) -> int:
    """Landmark frame min(t + period, next endpoint) for planning frame t."""
    t_end = seg.endpoints[-1]
    if not 0 <= t < t_end:
        raise ValueError(f"frame {t} outside [0, {t_end})")
    i = bisect_right(seg.endpoints, t) - 1
    return min(t + period, seg.endpoints[i + 1])


# ---------------------------------------------------------------------------
# planning
# ---------------------------------------------------------------------------

@dataclass
class PlannerConfig:
    strategy: Strategy
    replan_period: int = 8
    error_threshold: float = 0.05
    step_length: float = 0.03        # joint rad per executed frame
    grasp_rot_weight: float = 0.1
    ik_max_iters: int = 100
    forecaster: Forecaster | None = None

    def __post_init__(self):
        if isinstance(self.strategy, str):
            self.strategy = Strategy(self.strategy)
        if self.replan_period < 1 or self.error_threshold <= 0 or self.step_length <= 0:
            raise ValueError("replan_period >= 1, threshold > 0, step_length > 0")
        if self.forecaster is None:
            self.forecaster = Forecaster()


def planning_pose(rt: SceneRuntime, state, cfg: PlannerConfig,
                  seg: SegmentedTrajectory | None) -> Pose:
    """Object pose each strategy plans against."""
    scene = rt.scene
    if state.hand_frozen:
        return state.object_pose  # motion has stopped; all strategies converge
    if cfg.strategy is Strategy.DESTINATION:
        return scene.pose_at(scene.n_frames - 1)
    if cfg.strategy is Strategy.DENSE:
        return state.object_pose
    t = state.frame
    if t >= scene.n_frames - 1:
        return state.object_pose
    t_hat = select_landmark(seg, t, cfg.replan_period)
    return scene.pose_at(min(t_hat, scene.n_frames - 1))


def plan_step(rt: SceneRuntime, state, cfg: PlannerConfig,
              seg: SegmentedTrajectory | None = None):
    """Pick a grasp and build a constant-step joint path toward it.

    Candidates (already hand-filtered at scene build; the hand rides rigidly
    on the object so the filter is pose-invariant) compose with the planning
    pose, sort by pose distance to the end effector, and the first candidate
    IK solves from the current configuration wins. Returns (grasp_world,
    joint_path) or (None, None) when every candidate fails IK.
    """
    pose = planning_pose(rt, state, cfg, seg)
    ee = forward_kinematics(rt.arm, state.arm_q)
    world = [pose.compose(g) for g in rt.scene.grasp_candidates]
    dists = np.array([pose_distance(g, ee, cfg.grasp_rot_weight) for g in world])
    for idx in np.argsort(dists, kind="stable"):
        q_sol = solve_ik(rt.arm, world[idx], state.arm_q, tol_t=rt.cfg.ik_tol_t,
                         tol_r=rt.cfg.ik_tol_r, max_iters=cfg.ik_max_iters)
        if q_sol is not None:
            path = resample_joint_trajectory(np.array([state.arm_q, q_sol]),
                                             cfg.step_length)
            return world[idx], path
    return None, None


class ExpertController:
    """Closed-loop expert: replans per strategy, emits one joint step per frame.

    Besides the periodic schedule, DENSE and LANDMARK replan once when the
    hand freezes: the pre-freeze plan aims at a pose the object will now
    never reach, and holding it would poison the final approach.
    """

    def __init__(self, rt: SceneRuntime, cfg: PlannerConfig,
                 seg: SegmentedTrajectory | None = None):
        self.rt = rt
        self.cfg = cfg
        self.seg = seg
        self.queue = deque()
        self.plan_frames = []
        self._freeze_handled = False

    def _should_replan(self, state) -> bool:
        if self.cfg.strategy is Strategy.DESTINATION:
            return state.frame == 0
        if state.hand_frozen and not self._freeze_handled:
            self._freeze_handled = True
            return True
        return state.frame % self.cfg.replan_period == 0

    def __call__(self, obs, state, feats) -> Action:
        if self._should_replan(state):
            grasp, path = plan_step(self.rt, state, self.cfg, self.seg)
            self.plan_frames.append((state.frame, grasp))
            self.queue = deque(path[1:]) if path is not None else deque()
        if not self.queue:
            return Action.zero()
        q_next = self.queue.popleft()
        target = forward_kinematics(self.rt.arm, q_next)
        return action_from_target(obs.ee_pose, target, self.rt.cam_in_ee)


# ---------------------------------------------------------------------------
# demonstration recording
# ---------------------------------------------------------------------------

@dataclass
class Demonstration:
    """Successful episode with paired observation/action frames."""

    scene_id: str
    strategy: str
    replan_period: int
    frames: list            # (Observation, FlowFeatures, Action, object_pose, ee_pose)
    result: EpisodeResult


def generate_demonstration(scene, cfg: PlannerConfig, sim_cfg, arm, trigger,
                           seed: int = 0, record: bool = True, l1: int = 3):
    """Run the expert on one scene; keep the recording only on success.

    Returns (EpisodeResult, Demonstration | None). Flow features are computed
    online while recording so demonstrations carry exactly what a policy
    would see.
    """
    rt = SceneRuntime(scene, arm, sim_cfg)
    seg = None
    if cfg.strategy is Strategy.LANDMARK:
        poses = [p for _, p in scene.trajectory]
        seg = segment_trajectory(cfg.forecaster, poses, cfg.error_threshold,
                                 cfg.grasp_rot_weight)
    controller = ExpertController(rt, cfg, seg)
    feature_fn = make_feature_fn(rt.camera_pose, "flow", l1) if record else None
    result, frames = run_episode(rt, controller, trigger, seed=seed, record=record,
                                 feature_fn=feature_fn)
    if not (record and result.success):
        return result, None
    demo = Demonstration(scene_id=scene.scene_id, strategy=cfg.strategy.value,
                         replan_period=cfg.replan_period, frames=frames, result=result)
    return result, demo


# ---------------------------------------------------------------------------
# demonstration dataset
# ---------------------------------------------------------------------------

def write_demos(demos, out_dir, sim_cfg, planner_cfg: PlannerConfig, arm,
                seed: int, n_scenes: int, results=None):
    """Persist demonstrations: JSONL index + binary blobs + manifest."""
    os.makedirs(out_dir, exist_ok=True)
    records = []
    with BlobWriter(os.path.join(out_dir, DEMOS_BIN)) as blobs:
        for demo in demos:
            counts = [len(obs) for obs, *_ in demo.frames]
            pts = np.concatenate([obs.points for obs, *_ in demo.frames]) \
                if counts and sum(counts) else np.zeros((0, 3))
            labels = np.concatenate([obs.labels for obs, *_ in demo.frames]) \
                if counts and sum(counts) else np.zeros(0, dtype=np.int8)
            feats = np.concatenate([f for _, f, *_ in demo.frames]) \
                if counts and sum(counts) else np.zeros((0, 0))
            actions = np.array([a.to_array() for _, _, a, _, _ in demo.frames])
            obj_poses = np.array([p.to_array() for *_, p, _ in demo.frames])
            ee_poses = np.array([p.to_array() for *_, p in demo.frames])
            records.append({
                "scene_id": demo.scene_id,
                "strategy": demo.strategy,
                "replan_period": demo.replan_period,
                "n_frames": len(demo.frames),
                "success_time": demo.result.success_time,
                "frame_points": counts,
                "feature_width": int(feats.shape[1]) if feats.size else 0,
                "blobs": {
                    "points": blobs.put(pts, np.float32),
                    "labels": blobs.put(labels, np.int8),
                    "features": blobs.put(feats, np.float32),
                    "actions": blobs.put(actions, np.float64),
                    "object_poses": blobs.put(obj_poses, np.float64),
                    "ee_poses": blobs.put(ee_poses, np.float64),
                },
            })
    write_jsonl(os.path.join(out_dir, DEMOS_JSONL), records)
    header = {
        "schema": DEMOS_SCHEMA,
        "strategy": planner_cfg.strategy.value,
        "replan_period": planner_cfg.replan_period,
        "step_length": planner_cfg.step_length,
        "seed": seed,
        "n_scenes": n_scenes,
        "n_success": len(records),
        "sim_config": {k: (list(v) if isinstance(v, tuple) else v)
                       for k, v in vars(sim_cfg).items()},
        "gripper_keypoints": np.asarray(arm.gripper_keypoints).tolist(),
        "tip_point": np.asarray(arm.tip_point).tolist(),
    }
    if results is not None:
        hist = {}
        for r in results:
            hist[r.outcome.value] = hist.get(r.outcome.value, 0) + 1
        header["outcomes"] = hist
    write_manifest(out_dir, header)
    return out_dir


class DemoFrameView:
    """One stored frame, decoded lazily from the blob arrays."""

    __slots__ = ("points", "labels", "features", "action", "object_pose", "ee_pose")

    def __init__(self, points, labels, features, action, object_pose, ee_pose):
        self.points = points
        self.labels = labels
        self.features = features
        self.action = action
        self.object_pose = object_pose
        self.ee_pose = ee_pose


class DemoDataset:
    """Reader for a demonstration directory."""

    def __init__(self, path):
        self.path = path
        self.records = read_jsonl(os.path.join(path, DEMOS_JSONL))
        self._blobs = BlobReader(os.path.join(path, DEMOS_BIN))
        with open(os.path.join(path, "manifest.json")) as f:
            self.manifest = json.load(f)

    def __len__(self):
        return len(self.records)

    def demo_arrays(self, i):
        """Raw per-demo arrays: points, labels, features, actions, poses."""
        rec = self.records[i]
        n = rec["n_frames"]
        total = int(np.sum(rec["frame_points"]))
        fw = rec["feature_width"]
        return {
            "record": rec,
            "counts": np.array(rec["frame_points"], dtype=int),
            "points": self._blobs.get(rec["blobs"]["points"], np.float32, (total, 3)),
            "labels": self._blobs.get(rec["blobs"]["labels"], np.int8, (total,)),
            "features": self._blobs.get(rec["blobs"]["features"], np.float32, (total, fw) if fw else (0, 0)),
            "actions": self._blobs.get(rec["blobs"]["actions"], np.float64, (n, 6)),
            "object_poses": self._blobs.get(rec["blobs"]["object_poses"], np.float64, (n, 7)),
            "ee_poses": self._blobs.get(rec["blobs"]["ee_poses"], np.float64, (n, 7)),
        }
