"""Differentiable inverse rendering with latent-conditioned implicit sphere meshes."""

from .camera import WeakPerspectiveCamera, geodesic_error, project, quat_from_view
from .errors import ContractError, DataError, DimensionError, GeometryError, NumericError, ParseError
from .evaluation import (EvalReport, FittedView, pck_reproject, pck_transfer, reconstruction_iou,
                         transfer_keypoints)
from .geometry import SphereAtlas, TriMesh, icosphere, mesh_iou
from .losses import KeypointSet, LossWeights
from .pipeline import FitConfig, FitResult, FitState, fit_collection, fit_instance
from .shape_space import ShapeSpace, TemplateFitConfig, build_shape_space, fit_template
from .synthetic import Instance, generate_synthetic
from .texture import TextureSpace, build_texture_space

__version__ = "0.1.0"

__all__ = [
    "ContractError", "DataError", "DimensionError", "EvalReport", "FitConfig", "FitResult", "FitState",
    "FittedView", "GeometryError", "Instance", "KeypointSet", "LossWeights", "NumericError", "ParseError",
    "ShapeSpace", "SphereAtlas", "TemplateFitConfig", "TextureSpace", "TriMesh", "WeakPerspectiveCamera",
    "build_shape_space", "build_texture_space", "fit_collection", "fit_instance", "fit_template",
    "generate_synthetic", "geodesic_error", "icosphere", "mesh_iou", "pck_reproject", "pck_transfer",
    "project", "quat_from_view", "reconstruction_iou", "transfer_keypoints",
]
