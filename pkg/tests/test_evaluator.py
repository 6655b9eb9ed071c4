import math

import numpy as np
import pytest

from src.cgp import CircuitParams, Chromosome, Gate, circuit_area, random_chromosome
from src.evaluator import (
    MultiplierEvaluator,
    epsilon_abs,
    error_metrics,
    exhaustive_lanes,
    golden_products,
    nonzero_rows,
    pack_rows,
    simulate_exhaustive,
    simulate_rows,
    unpack_outputs,
    zero_rows,
)
from src.seeds import seed_multiplier
from tests.conftest import naive_eval, naive_table


def test_golden_table_layout():
    g = golden_products(4)
    assert g.size == 256
    a, b = 13, 11
    assert g[(b << 4) | a] == 143
    with pytest.raises(ValueError):
        golden_products(9)


def test_zero_row_partition():
    zr, nz = zero_rows(4), nonzero_rows(4)
    assert zr.size == 2 * 16 - 1
    assert zr.size + nz.size == 256
    assert set(zr) | set(nz) == set(range(256))
    assert np.all(golden_products(4)[zr] == 0)


def test_pack_unpack_counting_pattern():
    lanes = exhaustive_lanes(3)
    assert lanes.shape == (3, 1)
    assert list(unpack_outputs(lanes, 8)) == list(range(8))
    rows = np.array([5, 0, 7, 2])
    assert list(unpack_outputs(pack_rows(rows, 3), 4)) == [5, 0, 7, 2]


def test_simulator_matches_naive_interpreter(rng):
    params = CircuitParams.multiplier(4, 40)
    for _ in range(1000):
        c = random_chromosome(params, rng)
        assert list(simulate_exhaustive(c)) == naive_table(c)


def test_simulate_rows_subset(rng):
    c = random_chromosome(CircuitParams.multiplier(4, 40), rng)
    rows = np.array([3, 77, 200, 255])
    full = simulate_exhaustive(c)
    assert list(simulate_rows(c, rows)) == list(full[rows])


def test_inv_ignores_second_input():
    params = CircuitParams(n_i=2, n_o=1, n_c=2)
    a = Chromosome(params, [(0, 0, Gate.INV), (0, 1, Gate.AND)], (2,))
    b = Chromosome(params, [(0, 1, Gate.INV), (0, 1, Gate.AND)], (2,))
    assert list(simulate_exhaustive(a)) == list(simulate_exhaustive(b)) == [1, 0, 1, 0]


def test_error_metrics_on_hand_example():
    golden = golden_products(2)
    outputs = golden.copy()
    outputs[(3 << 2) | 3] = 5        # 3*3 = 9, off by 4
    outputs[(2 << 2) | 1] = 3        # 1*2 = 2, off by 1
    m = error_metrics(outputs, golden, 2)
    assert m.wce == 4
    assert m.mae == pytest.approx(5 / 16)
    assert m.wce_zr == 0
    outputs[(1 << 2) | 0] = 1        # zero operand
    assert error_metrics(outputs, golden, 2).wce_zr == 1


def test_epsilon_abs():
    assert epsilon_abs(5, 8) == 3276            # floor(0.05 · 65535)
    assert epsilon_abs(2.5, 8) == 1638
    assert epsilon_abs(100, 4) == 255
    assert epsilon_abs(5, 4) == 12
    with pytest.raises(ValueError):
        epsilon_abs(0, 4)


def test_exact_seed_fitness_is_its_area():
    ev = MultiplierEvaluator(4)
    seed = seed_multiplier("ripple-carry-array", 4)
    assert ev.fitness(seed, 0) == circuit_area(seed)


def test_zero_row_error_is_always_infinite():
    ev = MultiplierEvaluator(2)
    seed = seed_multiplier("ripple-carry-array", 2)
    # drive product bit 0 from a constant-one node in a filler slot
    last = seed.params.n_c - 1
    assert last not in seed.active
    const_one = seed.replace_gene(last, 2, Gate.XNOR).replace_gene(last, 0, 0).replace_gene(last, 1, 0)
    const_one = Chromosome(seed.params, const_one.genes, (seed.params.n_i + last,) + seed.outputs[1:])
    assert ev.metrics(const_one).wce_zr > 0
    assert ev.fitness(const_one, 100) == math.inf


@pytest.mark.parametrize("pct", [0, 1, 5])
def test_staged_equals_unstaged(rng, pct):
    ev = MultiplierEvaluator(4)
    eps = epsilon_abs(pct, 4) if pct else 0
    params = CircuitParams.multiplier(4, 40)
    for _ in range(1000):
        c = random_chromosome(params, rng)
        assert ev.fitness(c, eps) == ev.fitness_unstaged(c, eps)


def test_area_stage_rejects_larger_circuits_early():
    ev = MultiplierEvaluator(4)
    seed = seed_multiplier("ripple-carry-array", 4)
    before = ev.rows_simulated
    assert ev.fitness(seed, 0, parent_area=circuit_area(seed) - 1) == math.inf
    assert ev.rows_simulated == before
    assert ev.fitness(seed, 0, parent_area=circuit_area(seed)) == circuit_area(seed)
    assert ev.rows_simulated == before + 256


def test_zero_stage_skips_remaining_rows():
    ev = MultiplierEvaluator(4)
    params = CircuitParams.multiplier(4, 8)
    # every output is NOT(a0): wrong on the a = 0 rows
    c = Chromosome(params, [(0, 0, Gate.INV)] * 8, (8,) * 8)
    assert ev.fitness(c, 255) == math.inf
    assert ev.rows_simulated == zero_rows(4).size


@pytest.mark.slow
def test_eight_bit_simulator_matches_naive_on_sampled_vectors(rng):
    rows = rng.choice(1 << 16, size=10_000, replace=False)
    seed = seed_multiplier("wallace-1", 8)
    assert list(simulate_rows(seed, rows)) == [naive_eval(seed, int(r)) for r in rows]
    c = random_chromosome(CircuitParams.multiplier(8), rng)
    assert list(simulate_rows(c, rows)) == [naive_eval(c, int(r)) for r in rows]
