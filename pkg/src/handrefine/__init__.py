"""Differentiable hand mesh reconstruction with hand-written gradients.

Stage one regresses pose and shape parameters of a skinned hand model from 2D
joints; stage two refines the resulting mesh and joints with graph layers and
joint/vertex mutual attention.
"""

from __future__ import annotations

from .archive import ArchiveError, load_archive, save_archive
from .config import ABLATIONS, ConfigError, PipelineConfig, toy_config
from .export import read_obj, write_obj
from .graphs import Graph, adjacency_from_faces, adjacency_from_parents, hand_joint_graph
from .losses import LossWeights, edge_loss, mano_loss, normal_loss, refinement_loss, total_loss
from .mano import ManoModel, make_toy_model, mano_backward, mano_forward, rodrigues, rodrigues_backward
from .metrics import MetricReport, evaluate_samples, f_score, pck_curve, procrustes_align
from .numeric import finite_diff_grad_check, make_rng
from .pipeline import HandReconNet, infer, load_network, save_network, train_toy
from .refiner import RefinerStack, cross_attention, fuse, refine_forward
from .semgcn import GConv, SemGConv, soft_argmax
from .synth import synth_dataset

__version__ = "0.1.0"

__all__ = [
    "ABLATIONS", "ArchiveError", "ConfigError", "GConv", "Graph", "HandReconNet", "LossWeights", "ManoModel",
    "MetricReport", "PipelineConfig", "RefinerStack", "SemGConv", "adjacency_from_faces", "adjacency_from_parents",
    "cross_attention", "edge_loss", "evaluate_samples", "f_score", "finite_diff_grad_check", "fuse",
    "hand_joint_graph", "infer", "load_archive", "load_network", "make_rng", "make_toy_model", "mano_backward",
    "mano_forward", "mano_loss", "normal_loss", "pck_curve", "procrustes_align", "read_obj", "refine_forward",
    "refinement_loss", "rodrigues", "rodrigues_backward", "save_archive", "save_network", "soft_argmax",
    "synth_dataset", "toy_config", "total_loss", "train_toy", "write_obj",
]
