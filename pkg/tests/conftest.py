"""Shared fixtures: rngs, random circuits and a per-vector reference interpreter."""

import numpy as np
import pytest

from src.cgp import CircuitParams, Chromosome, Gate, random_chromosome

_NAIVE = {
    Gate.INV: lambda x, y: 1 - x,
    Gate.AND: lambda x, y: x & y,
    Gate.OR: lambda x, y: x | y,
    Gate.XOR: lambda x, y: x ^ y,
    Gate.NAND: lambda x, y: 1 - (x & y),
    Gate.NOR: lambda x, y: 1 - (x | y),
    Gate.XNOR: lambda x, y: 1 - (x ^ y),
}


def naive_eval(c: Chromosome, assignment: int) -> int:
    """Evaluate every node (active or not) for one input assignment."""
    values = [(assignment >> j) & 1 for j in range(c.params.n_i)]
    for in1, in2, func in c.rows:
        values.append(_NAIVE[Gate(func)](values[in1], values[in2]))
    return sum(values[o] << i for i, o in enumerate(c.output_ids()))


def naive_table(c: Chromosome) -> list[int]:
    return [naive_eval(c, i) for i in range(1 << c.params.n_i)]


def naive_active(c: Chromosome) -> set[int]:
    """Fixed point of adding predecessors, starting from the output nodes."""
    n_i = c.params.n_i
    active = {o - n_i for o in c.output_ids() if o >= n_i}
    while True:
        grown = set(active)
        for p in active:
            in1, in2, func = c.rows[p]
            srcs = (in1,) if func == Gate.INV else (in1, in2)
            grown |= {s - n_i for s in srcs if s >= n_i}
        if grown == active:
            return active
        active = grown


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def params4():
    return CircuitParams.multiplier(4, 40)


@pytest.fixture
def make_random(params4):
    def factory(rng, transformer_form=False, params=None):
        return random_chromosome(params or params4, rng, transformer_form=transformer_form)
    return factory


def fig1_chromosome() -> Chromosome:
    """A small two-input, three-output circuit with two inactive nodes."""
    params = CircuitParams(n_i=2, n_o=3, n_c=6)
    genes = [
        (0, 1, Gate.AND),   # 2
        (0, 1, Gate.XOR),   # 3  inactive
        (2, 1, Gate.OR),    # 4
        (4, 0, Gate.NAND),  # 5
        (3, 3, Gate.INV),   # 6  inactive
        (5, 2, Gate.XOR),   # 7
    ]
    return Chromosome(params, genes, (7, 4, 2))
