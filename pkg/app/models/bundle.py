from dataclasses import dataclass
from typing import Tuple
import enum

import numpy as np

NUM_PATCHES = 4


class WeightSource(str, enum.Enum):
    PSI_HEAD = "psi_head"
    THETA_HEAD = "theta_head"
    SHARED = "shared"


@dataclass
class PatchGrid:
    """Four quadrant crops (TL, TR, BL, BR), each resized back to S x S."""

    patches: np.ndarray
    # (row, col, side) of each source quadrant
    provenance: Tuple[Tuple[int, int, int], ...]


@dataclass
class LogitBundle:
    """
    Everything PAT-I / PAT-T inference computes, batched over n images.

    image_logits (n, q); patch_logits, weight_logits, weights (n, 4, q);
    aggregated (n, q); tde (n, q) fused probabilities.
    """

    image_logits: np.ndarray
    patch_logits: np.ndarray
    weight_logits: np.ndarray
    weights: np.ndarray
    aggregated: np.ndarray
    tde: np.ndarray
    lam: float

    @property
    def tde_logits(self) -> np.ndarray:
        return self.image_logits + self.lam * self.aggregated
