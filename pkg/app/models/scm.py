from dataclasses import dataclass
from typing import Optional

import numpy as np

# Row/column index of the factual and the masked value of X and Z
PRESENT = 0
MASKED = 1


@dataclass
class DiscreteScm:
    """
    Finite causal model over target object X, co-occurring object Z,
    correlative features O and predictions Y^k.

    joint:    (2, 2) table P(X, Z); index 0 = x / z, index 1 = x0 / z0.
    mediator: (2, 2) integer table o(X, Z) into {0, ..., n_o - 1}.
    outcome:  (K, 2, n_o) table P(Y^k = 1 | X, O).
    """

    joint: np.ndarray
    mediator: np.ndarray
    outcome: np.ndarray

    @property
    def num_mediator_values(self) -> int:
        return self.outcome.shape[2]

    @property
    def num_classes(self) -> int:
        return self.outcome.shape[0]


@dataclass
class TdeReport:
    tde_eq2: float
    term1: float
    term2: float
    alpha: float
    beta: float
    lam: Optional[float]
    premise_residual: float
    chain_residual: Optional[float]
    degenerate: bool = False
    # sign of (1 - alpha); the additive form ranks examples identically only when positive
    denominator_sign: int = 0
