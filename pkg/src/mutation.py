"""
Offspring generators: uniform single-point mutation and model-guided mutation.

Both change exactly one gene of one active node and always pick a value
different from the current one, so every offspring stays feed-forward and
differs from its parent in a single gene.
"""

import logging
from dataclasses import dataclass

import numpy as np

from src.cgp import N_FUNCS, Chromosome

logger = logging.getLogger(__name__)

IN1, IN2, FUNC = 0, 1, 2


@dataclass(frozen=True)
class MutationDistribution:
    """
    Sampling plan produced by the model for one chromosome.

    location_probs  (n_c,)          mass on active positions only
    function_probs  (n_c, |Γ|)      per-node distribution over gate functions
    input_probs     (n_c, n_ids)    per-node distribution over source IDs,
                                    shared by both inputs, 0 on forward references
    """
    location_probs: np.ndarray
    function_probs: np.ndarray
    input_probs: np.ndarray


def _uniform_other(rng: np.random.Generator, size: int, current: int) -> int:
    """Uniform draw from range(size) without `current`."""
    value = int(rng.integers(size - 1))
    return value + 1 if value >= current else value


def _mutation_positions(c: Chromosome) -> tuple[int, ...]:
    if c.active:
        return c.active
    logger.warning("Chromosome has no active nodes; mutating among all %d nodes", c.params.n_c)
    return tuple(range(c.params.n_c))


def mutate_node_uniform(parent: Chromosome, position: int, rng: np.random.Generator) -> Chromosome:
    """Replace one uniformly chosen gene of the node at `position`."""
    slot = int(rng.integers(3))
    current = parent.rows[position][slot]
    if slot == FUNC:
        return parent.replace_gene(position, slot, _uniform_other(rng, N_FUNCS, current))
    limit = parent.params.n_i + position
    if limit < 2:
        # node 0 of a single-input circuit has no alternative source
        return parent.replace_gene(position, FUNC, _uniform_other(rng, N_FUNCS, parent.rows[position][FUNC]))
    return parent.replace_gene(position, slot, _uniform_other(rng, limit, current))


def mutate_uniform(parent: Chromosome, rng: np.random.Generator) -> Chromosome:
    positions = _mutation_positions(parent)
    position = positions[int(rng.integers(len(positions)))]
    return mutate_node_uniform(parent, position, rng)


def _sample_excluding(
    rng: np.random.Generator,
    probs: np.ndarray,
    current: int,
    what: str,
    position: int,
) -> int:
    weights = np.clip(np.asarray(probs, dtype=np.float64), 0.0, None).copy()
    weights[current] = 0.0
    total = weights.sum()
    if not np.isfinite(total) or total <= 0.0:
        logger.warning("Degenerate %s distribution at node %d; sampling uniformly", what, position)
        return _uniform_other(rng, weights.size, current)
    return int(rng.choice(weights.size, p=weights / total))


def mutate_guided(parent: Chromosome, d: MutationDistribution, rng: np.random.Generator) -> Chromosome:
    """
    Position from d.location_probs, gene uniformly among (in1, in2, func),
    replacement from the node's function or input distribution restricted to
    permissible values other than the current one.
    """
    n_i = parent.params.n_i
    positions = np.asarray(_mutation_positions(parent), dtype=np.int64)
    # a cached distribution may predate a neutral replacement; only the
    # parent's current active nodes are eligible
    loc = np.clip(np.asarray(d.location_probs, dtype=np.float64)[positions], 0.0, None)
    total = loc.sum()
    if not np.isfinite(total) or total <= 0.0:
        logger.warning("Degenerate location distribution; choosing an active node uniformly")
        position = int(positions[rng.integers(positions.size)])
    else:
        position = int(positions[rng.choice(positions.size, p=loc / total)])

    slot = int(rng.integers(3))
    current = parent.rows[position][slot]
    if slot == FUNC:
        value = _sample_excluding(rng, d.function_probs[position][:N_FUNCS], current, "function", position)
        return parent.replace_gene(position, slot, value)

    limit = n_i + position
    if limit < 2:
        value = _uniform_other(rng, N_FUNCS, parent.rows[position][FUNC])
        return parent.replace_gene(position, FUNC, value)
    value = _sample_excluding(rng, d.input_probs[position][:limit], current, "input", position)
    return parent.replace_gene(position, slot, value)
