"""Geometric stereo 3D box estimation."""
from .alignment import adaptive_refine, build_patch, classify_occlusion, refine_depth
from .evaluation import EvalConfig, EvalObject, average_precision, evaluate, iou_2d, iou_3d, iou_bev
from .geometry import (Box3D, ObservationVector, StereoCalibration, corners_of,
                       perspective_vertex_index, project_observations)
from .kitti import read_calib, read_labels, write_labels
from .pipeline import estimate_frame
from .solver import PoseEstimate, SolverConfig, solve_pose
from .synth import generate_scene, render_scene

__version__ = "0.1.0"
