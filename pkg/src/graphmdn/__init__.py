"""Graph mixture density networks for multi-hypothesis 2D-to-3D pose lifting."""

from .errors import (
    DataError,
    DegenerateAlignmentError,
    GraphMDNError,
    IncompatibleError,
    JoinError,
    NumericError,
    ParseError,
)
from .graph import SkeletonGraph, human_skeleton, path_graph
from .mdn import PoseMixture, node_nll, pose_nll
from .network import BackboneConfig, GraphMDN
from .training import TrainConfig, fit

__version__ = "0.1.0"
