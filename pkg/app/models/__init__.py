from app.models.bundle import LogitBundle, PatchGrid, WeightSource
from app.models.params import (
    AdamState,
    EpochRecord,
    Linear,
    LossKind,
    ModelParams,
    Network,
    TrainHistory,
    TrainMode,
)
from app.models.scene import Dataset, GlyphAtlas, Placement, SceneExample
from app.models.scm import DiscreteScm, TdeReport

__all__ = [
    "AdamState",
    "Dataset",
    "DiscreteScm",
    "EpochRecord",
    "GlyphAtlas",
    "Linear",
    "LogitBundle",
    "LossKind",
    "ModelParams",
    "Network",
    "PatchGrid",
    "Placement",
    "SceneExample",
    "TdeReport",
    "TrainHistory",
    "TrainMode",
    "WeightSource",
]
