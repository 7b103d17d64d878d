"""Deformable image registration by attention over a displacement value field.

A from-scratch reverse-mode autodiff core (numpy with optional numba
kernels) powers a multi-resolution registration model: a U-shaped
feature extractor feeds a parameter-free attention step whose value
matrix holds window offset vectors, so matching scores turn directly
into sub-voxel displacements.
"""

from .attention import AttentionConfig, field_attention, value_matrix
from .autodiff import Var, as_var, constant
from .dataio import SynthSpec, gen_synthetic_pair, read_volume, write_volume
from .errors import (
    AttnregError,
    FileFormatError,
    InputError,
    ParamError,
    ShapeError,
    UsageError,
)
from .extractor import ExtractorConfig
from .geometry import (
    TransformGrid,
    compose,
    identity_grid,
    scaling_and_squaring,
    to_displacement,
    to_transform,
    upsample_transform,
    warp,
)
from .kernels import available_backends, backend_name, set_backend
from .metrics import KeypointSet
from .pipeline import (
    LOSS_PRESETS,
    ModelConfig,
    RegistrationModel,
    TrainConfig,
    fit,
    load_model,
    register,
    save_model,
    search_region,
)

__version__ = "0.1.0"

__all__ = [
    "AttentionConfig",
    "AttnregError",
    "ExtractorConfig",
    "FileFormatError",
    "InputError",
    "KeypointSet",
    "LOSS_PRESETS",
    "ModelConfig",
    "ParamError",
    "RegistrationModel",
    "ShapeError",
    "SynthSpec",
    "TrainConfig",
    "TransformGrid",
    "UsageError",
    "Var",
    "as_var",
    "available_backends",
    "backend_name",
    "compose",
    "constant",
    "field_attention",
    "fit",
    "gen_synthetic_pair",
    "identity_grid",
    "load_model",
    "read_volume",
    "register",
    "save_model",
    "scaling_and_squaring",
    "search_region",
    "set_backend",
    "to_displacement",
    "to_transform",
    "upsample_transform",
    "value_matrix",
    "warp",
    "write_volume",
]
