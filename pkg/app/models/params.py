from dataclasses import dataclass, field
from typing import Callable, Dict, List, Tuple
import enum

import numpy as np


class TrainMode(str, enum.Enum):
    DET = "det"
    INT = "int"
    PAT_T = "pat-t"
    PATCH_ONLY = "patch-only"


class LossKind(str, enum.Enum):
    BCE = "bce"
    ASL = "asl"


# Declared order of heads inside a network (checkpoint layout depends on it)
HEAD_ORDER: Tuple[str, ...] = ("phi", "psi", "theta")

MODE_HEADS: Dict[TrainMode, Tuple[str, ...]] = {
    TrainMode.DET: ("phi",),
    TrainMode.INT: ("phi",),
    TrainMode.PAT_T: ("phi", "psi", "theta"),
    TrainMode.PATCH_ONLY: ("psi", "theta"),
}

# Stable integer codes used by the checkpoint header
MODE_CODES: Dict[TrainMode, int] = {
    TrainMode.DET: 0,
    TrainMode.INT: 1,
    TrainMode.PAT_T: 2,
    TrainMode.PATCH_ONLY: 3,
}


@dataclass
class Linear:
    """Affine map: weight (out, in), bias (out,)."""

    weight: np.ndarray
    bias: np.ndarray

    @property
    def in_features(self) -> int:
        return self.weight.shape[1]

    @property
    def out_features(self) -> int:
        return self.weight.shape[0]


@dataclass
class Network:
    """One backbone g with its classification heads."""

    backbone: Linear
    heads: Dict[str, Linear]

    def arrays(self) -> List[np.ndarray]:
        out = [self.backbone.weight, self.backbone.bias]
        for name in HEAD_ORDER:
            if name in self.heads:
                out.extend([self.heads[name].weight, self.heads[name].bias])
        return out


@dataclass
class ModelParams:
    """
    Parameters of a predictor.

    DeT / PAT-T / patch-only: a single network whose heads share one backbone.
    InT: one network per class, each with a scalar `phi` head.
    """

    mode: TrainMode
    networks: List[Network]
    image_side: int

    @property
    def input_size(self) -> int:
        return self.image_side * self.image_side

    @property
    def hidden_size(self) -> int:
        return self.networks[0].backbone.out_features

    @property
    def num_classes(self) -> int:
        if self.mode == TrainMode.INT:
            return sum(net.heads["phi"].out_features for net in self.networks)
        head = next(iter(self.networks[0].heads.values()))
        return head.out_features

    def arrays(self) -> List[np.ndarray]:
        out: List[np.ndarray] = []
        for net in self.networks:
            out.extend(net.arrays())
        return out

    def map_arrays(self, fn: Callable[..., np.ndarray], *others: "ModelParams") -> "ModelParams":
        """Apply `fn` array-wise across this and structurally identical params."""

        def linear(lin: Linear, peers: List[Linear]) -> Linear:
            return Linear(
                fn(lin.weight, *[p.weight for p in peers]),
                fn(lin.bias, *[p.bias for p in peers]),
            )

        networks = []
        for i, net in enumerate(self.networks):
            peer_nets = [o.networks[i] for o in others]
            networks.append(Network(
                backbone=linear(net.backbone, [p.backbone for p in peer_nets]),
                heads={
                    name: linear(head, [p.heads[name] for p in peer_nets])
                    for name, head in net.heads.items()
                },
            ))
        return ModelParams(mode=self.mode, networks=networks, image_side=self.image_side)

    def copy(self) -> "ModelParams":
        return self.map_arrays(np.copy)

    def zeros_like(self) -> "ModelParams":
        return self.map_arrays(np.zeros_like)


@dataclass
class AdamState:
    first_moment: ModelParams
    second_moment: ModelParams
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: ModelParams, **hyper) -> "AdamState":
        return cls(first_moment=params.zeros_like(), second_moment=params.zeros_like(), **hyper)


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    image_loss: float = 0.0
    patch_loss: float = 0.0
    weight_loss: float = 0.0
    test_map: float = float("nan")


@dataclass
class TrainHistory:
    records: List[EpochRecord] = field(default_factory=list)

    @property
    def final_loss(self) -> float:
        return self.records[-1].loss if self.records else float("nan")
