from dataclasses import dataclass, field
from typing import Dict, Optional

from app.models.params import AdamState, ModelParams, TrainHistory, TrainMode
from app.schemas import TrainConfig


@dataclass
class Checkpoint:
    params: ModelParams
    config: TrainConfig
    mode: TrainMode
    epoch: int
    metrics: Dict[str, float] = field(default_factory=dict)
    ema_params: Optional[ModelParams] = None
    # set for the per-class models of independent training
    class_index: Optional[int] = None
    # Adam moments and step count after the last update
    optimizer: Optional[AdamState] = None
    # per-epoch records of the run that produced it; not persisted
    history: Optional[TrainHistory] = None

    @property
    def eval_params(self) -> ModelParams:
        """EMA parameters when averaging was enabled, raw parameters otherwise."""
        return self.ema_params if self.ema_params is not None else self.params
