"""partrf: dynamic radiance fields with rigid-part discovery.

A desk-scale laboratory that reconstructs a monocular dynamic scene as a
canonical voxel radiance field plus two grid-based rigid-motion fields
(world-to-canonical and canonical-to-world), discovers rigid parts by hard
motion grouping with trajectory-based merging, and uses the parts for
segmentation, tracking, and declarative editing.
"""

from .engine import AdamState, Value, adam_step, backward, no_grad, set_default_dtype
from .grids import FeatureGrid3D, MultiDistanceConfig, multi_distance_interp, positional_encoding, trilinear, tv_loss, upsample_grid
from .model import GroupAssignment, ModelConfig, SceneModel
from .rigid import PoseSequence, RigidTransform, ape, eulerian_map, lagrangian_map, rotation_from_6d
from .train import TrainConfig, Trainer, load_model, total_loss

__version__ = "0.1.0"

__all__ = [
    "AdamState", "Value", "adam_step", "backward", "no_grad", "set_default_dtype",
    "FeatureGrid3D", "MultiDistanceConfig", "multi_distance_interp",
    "positional_encoding", "trilinear", "tv_loss", "upsample_grid",
    "GroupAssignment", "ModelConfig", "SceneModel",
    "PoseSequence", "RigidTransform", "ape", "eulerian_map", "lagrangian_map",
    "rotation_from_6d",
    "TrainConfig", "Trainer", "load_model", "total_loss",
]
