from typing import Any, Dict, List, Optional, Set

import networkx as nx
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator
from typing_extensions import Annotated

from app.models.bundle import WeightSource
from app.models.params import LossKind, TrainMode

Probability = Annotated[float, Field(ge=0.0, le=1.0)]


def format_value(value: Any) -> str:
    if value is None:
        return "none"
    if hasattr(value, "value"):
        return str(value.value)
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", populate_by_name=True)

    def flatten(self, prefix: str, skip: Set[str] = frozenset()) -> Dict[str, str]:
        data = self.model_dump(by_alias=True, exclude=skip)
        return {f"{prefix}.{key}": format_value(getattr(self, self._attr(key)))
                for key in data}

    @classmethod
    def _attr(cls, alias: str) -> str:
        for name, info in cls.model_fields.items():
            if (info.alias or name) == alias:
                return name
        return alias


# ============= Model configuration =============
class LossConfig(_Section):
    kind: LossKind = LossKind.ASL
    gamma_pos: float = Field(0.0, ge=0)
    gamma_neg: float = Field(4.0, ge=0)
    clip: float = Field(0.05, ge=0, lt=1)
    eps_log: float = Field(1e-12, gt=0)


class FusionConfig(_Section):
    tau: float = Field(1.0, gt=0)
    lam: float = Field(1.0, ge=0, alias="lambda")
    weight_source: WeightSource = WeightSource.SHARED


class TrainConfig(_Section):
    learning_rate: float = Field(1e-4, gt=0, alias="lr")
    epochs: int = Field(10, ge=1)
    batch_size: int = Field(32, ge=1, alias="batch")
    seed: int = Field(0, ge=0)
    ema_decay: Optional[float] = Field(None, ge=0, lt=1, alias="ema")
    warmup_steps: int = Field(0, ge=0, alias="warmup")
    hidden_size: int = Field(256, ge=1, alias="hidden")
    aux_weight_loss: bool = False
    loss: LossConfig = Field(default_factory=LossConfig)
    fusion: FusionConfig = Field(default_factory=FusionConfig)

    @field_validator("ema_decay", mode="before")
    @classmethod
    def parse_disabled_ema(cls, v):
        if isinstance(v, str) and v.strip().lower() in ("", "none", "off", "disabled"):
            return None
        return v


class SynthConfig(_Section):
    n_train: int = Field(2000, ge=1)
    n_test: int = Field(2000, ge=1)
    image_side: int = Field(64, ge=2)
    glyph_side: int = Field(16, ge=1)
    noise_sd: float = Field(0.05, ge=0)
    num_classes: int = Field(10, ge=6)
    rho: Probability = 0.9
    hard_contrast: float = Field(0.15, gt=0, le=1)
    max_objects: int = Field(4, ge=1)

    @model_validator(mode="after")
    def check_geometry(self):
        if self.image_side % 2:
            raise ValueError("image_side must be even")
        if self.glyph_side > self.image_side // 2:
            raise ValueError("glyph must fit inside a quadrant")
        return self


class MetricsConfig(_Section):
    threshold: float = Field(0.5, gt=0, lt=1)
    co_threshold: Probability = 0.2


class RunConfig(BaseModel):
    """Resolved configuration of one CLI run."""

    model_config = ConfigDict(extra="forbid")

    mode: TrainMode = TrainMode.DET
    seed: int = Field(0, ge=0)
    loss: LossConfig = Field(default_factory=LossConfig)
    fusion: FusionConfig = Field(default_factory=FusionConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    synth: SynthConfig = Field(default_factory=SynthConfig)
    metrics: MetricsConfig = Field(default_factory=MetricsConfig)

    def flatten(self) -> Dict[str, str]:
        flat = {"mode": format_value(self.mode), "seed": format_value(self.seed)}
        flat.update(self.loss.flatten("loss"))
        flat.update(self.fusion.flatten("fusion"))
        # train.seed holds the effective training seed
        flat.update(self.training().flatten("train", skip={"loss", "fusion"}))
        flat.update(self.synth.flatten("synth"))
        flat.update(self.metrics.flatten("metrics"))
        return flat

    @classmethod
    def known_keys(cls) -> Set[str]:
        return set(cls().flatten())

    def training(self) -> TrainConfig:
        """TrainConfig with the run's loss/fusion sections and seed folded in."""
        seed = self.train.seed if "seed" in self.train.model_fields_set else self.seed
        return self.train.model_copy(update={"loss": self.loss, "fusion": self.fusion, "seed": seed})


# ============= Co-occurrence specification =============
class Coupling(BaseModel):
    """If `source` is present, `target` is present with probability `rho`."""

    source: int = Field(..., ge=0)
    target: int = Field(..., ge=0)
    rho: Probability


class CooccurrenceSpec(BaseModel):
    model_config = ConfigDict(extra="forbid")

    num_classes: int = Field(..., ge=1)
    anchor_probs: List[Probability]
    solo_probs: List[Probability]
    couplings: List[Coupling] = Field(default_factory=list)
    max_objects: int = Field(4, ge=1)

    @model_validator(mode="after")
    def check_structure(self):
        q = self.num_classes
        if len(self.anchor_probs) != q or len(self.solo_probs) != q:
            raise ValueError("anchor_probs and solo_probs need one entry per class")
        for c in self.couplings:
            if c.source >= q or c.target >= q:
                raise ValueError(f"coupling {c.source}->{c.target} references an unknown class")
            if c.source == c.target:
                raise ValueError("a class cannot be coupled to itself")
        if not nx.is_directed_acyclic_graph(self.coupling_graph()):
            raise ValueError("coupling graph must be acyclic")
        return self

    def coupling_graph(self) -> nx.DiGraph:
        graph = nx.DiGraph()
        graph.add_nodes_from(range(self.num_classes))
        graph.add_edges_from((c.source, c.target) for c in self.couplings)
        return graph

    @property
    def partners(self) -> List[int]:
        return sorted({c.target for c in self.couplings})


# ============= HTTP request / response bodies =============
class CausalCheckRequest(BaseModel):
    trials: int = Field(20, ge=0, le=100000)
    constructed: int = Field(20, ge=0, le=100000)
    seed: int = Field(0, ge=0)


class TdeReportRow(BaseModel):
    kind: str
    index: int
    tde_eq2: float
    term1: float
    term2: float
    alpha: float
    beta: float
    lam: Optional[float] = None
    premise_residual: float
    chain_residual: Optional[float] = None
    degenerate: bool
    denominator_sign: int


class CausalCheckResponse(BaseModel):
    rows: List[TdeReportRow]
    failures: int


class MetricsRequest(BaseModel):
    scores: List[List[float]]
    labels: List[List[int]]
    threshold: float = Field(0.5, gt=0, lt=1)
    co_threshold: Probability = 0.2
    scores_are_logits: bool = False


class PairRow(BaseModel):
    a: int
    b: int
    p_b_given_a: float
    ctpr: Optional[float] = None
    cfpr: Optional[float] = None
    support_tp: int
    support_fp: int


class MetricsResponse(BaseModel):
    mAP: float
    per_class_ap: Dict[int, float]
    OP: float
    OR: float
    OF1: float
    CP: float
    CR: float
    CF1: float
    pairs: List[PairRow]


class FuseRequest(BaseModel):
    image_logits: List[float]
    patch_logits: List[List[float]]
    weight_logits: Optional[List[List[float]]] = None
    tau: float = Field(1.0, gt=0)
    lam: float = Field(1.0, ge=0, alias="lambda")

    model_config = ConfigDict(populate_by_name=True)


class FuseResponse(BaseModel):
    weights: List[List[float]]
    aggregated: List[float]
    tde: List[float]


class PredictRequest(BaseModel):
    checkpoint: str
    images: List[List[List[float]]]
    mode: str = Field("pat-i", pattern="^(plain|pat-i)$")
    tau: float = Field(1.0, gt=0)
    lam: float = Field(1.0, ge=0, alias="lambda")

    model_config = ConfigDict(populate_by_name=True)


class PredictRow(BaseModel):
    image_logits: List[float]
    aggregated: Optional[List[float]] = None
    tde: Optional[List[float]] = None
    weights: Optional[List[List[float]]] = None


class PredictResponse(BaseModel):
    mode: str
    rows: List[PredictRow]
