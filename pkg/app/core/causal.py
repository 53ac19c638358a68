"""
Exact discrete oracle for the total-direct-effect algebra.

Terms are read from finite tables. The mediator is a deterministic function
o(X, Z); "Y_o" means the outcome with O held at the factual value o(x, z).
"""
import logging
from itertools import product
from typing import Iterator, List, Optional, Tuple

import numpy as np

from app.core.errors import ModelError
from app.core.seeding import substream
from app.models.scm import MASKED, PRESENT, DiscreteScm, TdeReport

logger = logging.getLogger(__name__)

DEGENERATE_TOL = 1e-15
MAX_CONSTRUCTION_ATTEMPTS = 10_000


def validate_scm(scm: DiscreteScm) -> None:
    joint = np.asarray(scm.joint, dtype=np.float64)
    if joint.shape != (2, 2):
        raise ModelError("P(X, Z) must be a 2 x 2 table")
    if np.any(joint < 0) or not np.isclose(joint.sum(), 1.0, atol=1e-12):
        raise ModelError("P(X, Z) entries must be non-negative and sum to 1")
    mediator = np.asarray(scm.mediator)
    if mediator.shape != (2, 2):
        raise ModelError("mediator map o(X, Z) must be a 2 x 2 table")
    outcome = np.asarray(scm.outcome, dtype=np.float64)
    if outcome.ndim != 3 or outcome.shape[1] != 2:
        raise ModelError("outcome table must have shape (K, 2, n_o)")
    if np.any(mediator < 0) or np.any(mediator >= outcome.shape[2]):
        raise ModelError("mediator map points outside the outcome table")
    if np.any(outcome < 0) or np.any(outcome > 1):
        raise ModelError("outcome probabilities must lie in [0, 1]")


def _outcome(scm: DiscreteScm, k: int, x: int, o: int) -> float:
    if not 0 <= k < scm.num_classes:
        raise ModelError(f"no outcome table for class {k}")
    return float(scm.outcome[k, x, o])


def factual_mediator(scm: DiscreteScm) -> int:
    return int(scm.mediator[PRESENT, PRESENT])


def tde_exact(scm: DiscreteScm, k: int) -> float:
    """P(Y^k_o = 1 | x, z) - P(Y^k_o = 1 | x0, z) with O held at o(x, z)."""
    validate_scm(scm)
    o = factual_mediator(scm)
    return _outcome(scm, k, PRESENT, o) - _outcome(scm, k, MASKED, o)


def transformed_terms(scm: DiscreteScm, k: int) -> Tuple[float, float]:
    """(P(Y^k=1 | x, z) with O = o(x, z), P(Y^k=1 | x, z0) with O = o(x, z0))."""
    validate_scm(scm)
    term1 = _outcome(scm, k, PRESENT, factual_mediator(scm))
    term2 = _outcome(scm, k, PRESENT, int(scm.mediator[PRESENT, MASKED]))
    return term1, term2


def tde_transformed(scm: DiscreteScm, k: int, lam: float) -> float:
    term1, term2 = transformed_terms(scm, k)
    return term1 + lam * term2


def appendix_chain_check(scm: DiscreteScm, k: int) -> TdeReport:
    """
    Measure how far the additive form is from the subtraction form.

    premise: P(Y|x0,z) P(x0,z) = P(Y|x,z) P(x,z) - P(Y|x,z0) P(x,z0)
    chain:   TDE = (1 - alpha) (term1 + lambda term2), lambda = beta / (1 - alpha)
    The chain holds exactly whenever the premise does; the premise itself is
    not implied by total probability and is reported, not assumed.
    """
    validate_scm(scm)
    p_xz = float(scm.joint[PRESENT, PRESENT])
    p_xz0 = float(scm.joint[PRESENT, MASKED])
    p_x0z = float(scm.joint[MASKED, PRESENT])
    if p_x0z <= 0.0:
        raise ModelError("P(X=x0, Z=z) must be positive")

    alpha = p_xz / p_x0z
    beta = p_xz0 / p_x0z
    term1, term2 = transformed_terms(scm, k)
    tde = tde_exact(scm, k)
    masked_term = _outcome(scm, k, MASKED, factual_mediator(scm))
    premise_residual = abs(masked_term * p_x0z - (term1 * p_xz - term2 * p_xz0))

    if abs(1.0 - alpha) <= DEGENERATE_TOL:
        return TdeReport(tde, term1, term2, alpha, beta, None, premise_residual, None,
                         degenerate=True, denominator_sign=0)

    lam = beta / (1.0 - alpha)
    chain_residual = abs(tde - (1.0 - alpha) * (term1 + lam * term2))
    return TdeReport(tde, term1, term2, alpha, beta, lam, premise_residual, chain_residual,
                     degenerate=False, denominator_sign=int(np.sign(1.0 - alpha)))


# ============= Model construction =============

def random_scm(rng: np.random.Generator, num_mediator_values: int = 3,
               num_classes: int = 1) -> DiscreteScm:
    joint = rng.dirichlet(np.ones(4)).reshape(2, 2)
    mediator = rng.integers(0, num_mediator_values, size=(2, 2))
    outcome = rng.random((num_classes, 2, num_mediator_values))
    return DiscreteScm(joint=joint, mediator=mediator, outcome=outcome)


def construct_premise_scm(rng: np.random.Generator, num_mediator_values: int = 3,
                          k: int = 0) -> DiscreteScm:
    """
    Random SCM whose entry P(Y | x0, o(x, z)) is solved from the premise.

    Solutions outside [0, 1] are rejected and the model is redrawn.
    """
    for _ in range(MAX_CONSTRUCTION_ATTEMPTS):
        scm = random_scm(rng, num_mediator_values, k + 1)
        o_factual = factual_mediator(scm)
        p_xz, p_xz0 = scm.joint[PRESENT]
        p_x0z = scm.joint[MASKED, PRESENT]
        term1 = scm.outcome[k, PRESENT, o_factual]
        term2 = scm.outcome[k, PRESENT, scm.mediator[PRESENT, MASKED]]
        solved = (term1 * p_xz - term2 * p_xz0) / p_x0z
        if 0.0 <= solved <= 1.0:
            scm.outcome[k, MASKED, o_factual] = solved
            return scm
    raise ModelError("could not construct a premise-satisfying SCM")


def symmetric_scm(outcome: Optional[np.ndarray] = None) -> DiscreteScm:
    """P(x, z) = P(x0, z), so alpha = 1."""
    joint = np.array([[0.3, 0.2], [0.3, 0.2]])
    mediator = np.array([[0, 1], [2, 2]])
    if outcome is None:
        outcome = np.array([[[0.8, 0.4, 0.5], [0.3, 0.2, 0.1]]])
    return DiscreteScm(joint=joint, mediator=mediator, outcome=outcome)


def enumerate_assignments(scm: DiscreteScm, k: int) -> Iterator[Tuple[int, int, int, int, float]]:
    """Factual joint P(X, Z, O, Y^k) over every assignment (zero-mass rows included)."""
    for x, z, o, y in product(range(2), range(2), range(scm.num_mediator_values), range(2)):
        p_y = scm.outcome[k, x, o] if y else 1.0 - scm.outcome[k, x, o]
        mass = scm.joint[x, z] * (1.0 if scm.mediator[x, z] == o else 0.0) * p_y
        yield x, z, o, y, float(mass)


def causal_check(trials: int, constructed: int, seed: int,
                 num_mediator_values: int = 3) -> List[Tuple[str, int, TdeReport]]:
    """Reports for `trials` random SCMs followed by `constructed` premise-satisfying ones."""
    rows: List[Tuple[str, int, TdeReport]] = []
    for i in range(trials):
        rng = substream(seed, "causal-random", i)
        scm = random_scm(rng, num_mediator_values)
        while scm.joint[MASKED, PRESENT] <= 0.0:
            scm = random_scm(rng, num_mediator_values)
        rows.append(("random", i, appendix_chain_check(scm, 0)))
    for i in range(constructed):
        scm = construct_premise_scm(substream(seed, "causal-constructed", i), num_mediator_values)
        rows.append(("constructed", i, appendix_chain_check(scm, 0)))
    return rows


def count_failures(rows: List[Tuple[str, int, TdeReport]], tolerance: float = 1e-10) -> int:
    """Constructed, non-degenerate models whose chain residual exceeds `tolerance`."""
    return sum(
        1 for kind, _, report in rows
        if kind == "constructed" and not report.degenerate and report.chain_residual > tolerance
    )
