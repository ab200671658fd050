"""Desk-scale human-to-robot handover pipeline: procedural scenes, expert
demonstration planners, and point-cloud imitation policies in a kinematic
simulator."""

__version__ = "0.1.0"

from .geom import BezierSegment, Label, PointCloud, Pose, Twist, pose_distance
from .kin import ArmModel, default_arm, forward_kinematics, resample_joint_trajectory, solve_ik
from .scene import HandoverScene, SceneDataset, SceneGenConfig, generate_dataset
from .sim import (Action, EpisodeResult, EpisodeState, MetricsReport, Observation,
                  Outcome, SimConfig, compute_metrics)
from .expert import Demonstration, Forecaster, PlannerConfig, SegmentedTrajectory, Strategy
from .percept import FlowFeatures, FrameBuffer, icp_register
from .learn import GraspTrigger, PolicyNetwork, TrainConfig, run_policy, train

__all__ = [
    "Action", "ArmModel", "BezierSegment", "Demonstration", "EpisodeResult",
    "EpisodeState", "FlowFeatures", "Forecaster", "FrameBuffer", "GraspTrigger",
    "HandoverScene", "Label", "MetricsReport", "Observation", "Outcome",
    "PlannerConfig", "PointCloud", "PolicyNetwork", "Pose", "SceneDataset",
    "SceneGenConfig", "SegmentedTrajectory", "SimConfig", "Strategy", "Twist",
    "TrainConfig", "compute_metrics", "default_arm", "forward_kinematics",
    "generate_dataset", "icp_register", "pose_distance",
    "resample_joint_trajectory", "run_policy", "solve_ik", "train",
]
