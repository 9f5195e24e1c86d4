"""Hierarchical reinforcement-learning proofreading of cell segmentations.

Four agents cooperate: a locator picks erroneous 128 px patches of a 512 px
sub-image, a selector chooses between correctors, and a splitter (seeded
watershed) and merger (segment fusion) edit the labels. Ground-truth
oracles stand in for trained policies wherever desk-scale verification
needs them.
"""
from .core import FreshLabels, GridSpec, PatchRef, blit, crop, grid_point_to_pixel
from .env import AgentKind, EnvConfig, Hierarchy
from .estimator import Proofreader
from .exceptions import ProofreadError
from .metrics import MetricReport, cremi_score, patch_cremi
from .pipeline import PipelineConfig, RunReport, run_pipeline, tile_image

__all__ = [
    "AgentKind", "EnvConfig", "FreshLabels", "GridSpec", "Hierarchy", "MetricReport",
    "PatchRef", "PipelineConfig", "ProofreadError", "Proofreader", "RunReport", "blit",
    "cremi_score", "crop", "grid_point_to_pixel", "patch_cremi", "run_pipeline", "tile_image",
]
