import math
from dataclasses import replace

import numpy as np
import pytest

from src import search
from src.cgp import N_FUNCS, canonicalize_outputs, circuit_area
from src.evaluator import epsilon_abs, evaluator_for
from src.models import ModelMismatch
from src.mutation import MutationDistribution, mutate_guided
from src.report import utest_rows
from src.search import (
    Candidate,
    SearchConfig,
    StepClock,
    evolve,
    evolve_hybrid,
    evolve_standard,
    make_clock,
    run_batch,
    run_seeds,
    select_best,
)
from src.seeds import seed_multiplier


class UniformModel:
    """Stand-in mutation model: uniform plan over the active nodes."""

    def __init__(self):
        self.inferences = 0

    def check_compatible(self, c):
        pass

    def distribution(self, c):
        self.inferences += 1
        n_c, n_ids = c.params.n_c, c.params.n_i + c.params.n_c
        loc = np.zeros(n_c)
        loc[list(c.active)] = 1.0 / len(c.active)
        inputs = np.tril(np.ones((n_c, n_ids)), k=c.params.n_i - 1)
        return MutationDistribution(
            loc,
            np.full((n_c, N_FUNCS), 1.0 / N_FUNCS),
            inputs / inputs.sum(axis=1, keepdims=True),
        )


@pytest.fixture
def seed3():
    return canonicalize_outputs(seed_multiplier("ripple-carry-array", 3))


def _cand(f):
    return Candidate(chromosome=None, fitness=f)


# ── Selection ─────────────────────────────────────────────────────────────────

def test_select_best_prefers_lowest_strict_improvement():
    parent = _cand(10.0)
    kids = [_cand(9.0), _cand(7.0), _cand(7.0), _cand(10.0)]
    assert select_best(parent, kids) is kids[1]


def test_select_best_neutral_replacement_takes_first_tie():
    parent = _cand(10.0)
    kids = [_cand(12.0), _cand(10.0), _cand(10.0)]
    assert select_best(parent, kids) is kids[1]


def test_select_best_keeps_parent_when_all_worse():
    parent = _cand(10.0)
    assert select_best(parent, [_cand(11.0), _cand(math.inf)]) is parent


def test_select_best_infinite_parent_accepts_infinite_child():
    parent = _cand(math.inf)
    kids = [_cand(math.inf)]
    assert select_best(parent, kids) is kids[0]


# ── Clocks and configuration ──────────────────────────────────────────────────

def test_step_clock():
    clock = StepClock(0.5)
    clock.tick(4)
    assert clock.elapsed() == pytest.approx(2.0)
    with pytest.raises(ValueError):
        make_clock("sundial")


def test_search_config_validation():
    with pytest.raises(ValueError):
        SearchConfig(eps_abs=0, lam=0)
    with pytest.raises(ValueError):
        SearchConfig(eps_abs=0, mode="greedy")


# ── Evolution ─────────────────────────────────────────────────────────────────

def test_zero_generations_return_the_seed(seed3):
    best, log = evolve_standard(seed3, SearchConfig(eps_abs=0, max_gens=0))
    assert best == seed3
    assert [r.event for r in log.records] == ["start", "end"]
    assert log.final.fitness == circuit_area(seed3)


def test_best_fitness_never_gets_worse(seed3):
    cfg = SearchConfig(eps_abs=epsilon_abs(5, 3), max_gens=400, clock="step", rng_seed=4)
    best, log = evolve_standard(seed3, cfg)
    fits = [r.fitness for r in log.records]
    assert all(b <= a for a, b in zip(fits, fits[1:]))
    assert circuit_area(best) == log.final.fitness <= circuit_area(seed3)


def test_runs_are_reproducible(seed3):
    cfg = SearchConfig(eps_abs=epsilon_abs(5, 3), max_gens=200, clock="step", rng_seed=8)
    a_best, a_log = evolve_standard(seed3, cfg)
    b_best, b_log = evolve_standard(seed3, cfg)
    assert a_best == b_best
    assert [r.csv_row() for r in a_log.records] == [r.csv_row() for r in b_log.records]


def test_time_budget_with_step_clock(seed3):
    cfg = SearchConfig(eps_abs=0, lam=4, max_gens=1000, time_sec=10, clock="step", seconds_per_eval=1.0)
    _, log = evolve_standard(seed3, cfg)
    assert log.final.gen == 3
    assert log.final.t_sec == pytest.approx(12.0)


def test_hybrid_without_model_raises(seed3):
    with pytest.raises(ModelMismatch):
        evolve(seed3, SearchConfig(eps_abs=0, mode="hybrid", max_gens=5))


def test_stagnation_switches_to_uniform_mutation(seed3):
    model = UniformModel()
    cfg = SearchConfig(eps_abs=0, max_gens=30, stag_max=10, trace_operators=True, clock="step")
    _, log = evolve_hybrid(seed3, cfg, model, fitness_fn=lambda c, bound: 5.0)
    assert log.operator_trace[:10] == ["guided"] * 10
    assert log.operator_trace[10:] == ["uniform"] * 20
    switches = [r for r in log.records if r.event == "switch"]
    assert [(r.gen, r.operator) for r in switches] == [(11, "uniform")]
    assert model.inferences == 1 == log.inferences
    assert log.neutral_replacements == 30


def test_model_is_queried_once_per_strict_improvement(seed3):
    model = UniformModel()
    cfg = SearchConfig(eps_abs=epsilon_abs(5, 3), max_gens=300, stag_max=5, clock="step", rng_seed=3)
    _, log = evolve_hybrid(seed3, cfg, model)
    improvements = sum(1 for r in log.records if r.event == "improve")
    assert model.inferences == 1 + improvements == log.inferences


def test_improvement_restores_guided_mutation(seed3):
    model = UniformModel()
    calls = {"n": 0}

    def fitness(c, bound):
        calls["n"] += 1
        # call 30 is the first offspring of generation 8
        return 5.0 if calls["n"] < 30 else 4.0

    cfg = SearchConfig(eps_abs=0, max_gens=10, stag_max=3, lam=4, trace_operators=True, clock="step")
    _, log = evolve_hybrid(seed3, cfg, model, fitness_fn=fitness)
    assert log.operator_trace[:3] == ["guided"] * 3
    assert log.operator_trace[3:8] == ["uniform"] * 5
    assert log.operator_trace[8] == "guided"
    assert model.inferences == 2


# ── Batches ───────────────────────────────────────────────────────────────────

def test_run_seeds_are_stable_and_distinct():
    assert run_seeds(1, 5) == run_seeds(1, 5)
    assert len(set(run_seeds(1, 5))) == 5
    assert run_seeds(1, 3) == run_seeds(1, 5)[:3]


def test_batch_pairs_runs_across_labels(seed3):
    base = SearchConfig(eps_abs=epsilon_abs(5, 3), max_gens=50, clock="step")
    result = run_batch({"a": base, "b": base}, [seed3], runs=3, rng_seed=2, threads=2)
    assert set(result.logs) == {"a", "b"}
    for la, lb in zip(result.logs["a"], result.logs["b"]):
        assert [r.csv_row() for r in la.records] == [r.csv_row() for r in lb.records]
    assert result.best["a"] == result.best["b"]


def test_batch_rejects_empty_inputs(seed3):
    with pytest.raises(ValueError):
        run_batch({"a": SearchConfig(eps_abs=0)}, [seed3], runs=0)
    with pytest.raises(ValueError):
        run_batch({"a": SearchConfig(eps_abs=0)}, [], runs=1)


def test_zero_tolerance_keeps_the_circuit_exact(seed3):
    best, _ = evolve_standard(seed3, SearchConfig(eps_abs=0, max_gens=300, clock="step", rng_seed=6))
    m = evaluator_for(3).metrics(best)
    assert (m.wce, m.wce_zr) == (0, 0)
    assert circuit_area(best) <= circuit_area(seed3)


def test_identical_labels_are_not_significantly_different(seed3):
    base = SearchConfig(eps_abs=epsilon_abs(5, 3), max_gens=40, clock="step")
    result = run_batch({"standard": base, "copy": base}, [seed3], runs=6, rng_seed=5)
    rows = utest_rows(result.logs, [0.04, 0.16], "standard")
    assert all(float(r[6]) > 0.05 for r in rows)


def test_cached_distribution_only_mutates_active_nodes(seed3, monkeypatch):
    positions = []

    def recording(parent, d, rng):
        child = mutate_guided(parent, d, rng)
        changed = np.argwhere(parent.genes != child.genes)
        positions.append((int(changed[0][0]), parent.active))
        return child

    monkeypatch.setattr(search, "mutate_guided", recording)
    model = UniformModel()
    cfg = SearchConfig(eps_abs=0, max_gens=500, stag_max=10**6, clock="step", rng_seed=2)
    _, log = evolve_hybrid(seed3, cfg, model, fitness_fn=lambda c, bound: 5.0)
    assert model.inferences == 1
    assert log.neutral_replacements == 500
    assert len(positions) == 500 * cfg.lam
    assert all(p in active for p, active in positions)


@pytest.mark.slow
def test_uniform_model_hybrid_matches_standard_statistically(seed3):
    base = SearchConfig(eps_abs=epsilon_abs(5, 3), max_gens=300, clock="step")
    configs = {"standard": base, "hybrid": replace(base, mode="hybrid")}
    result = run_batch(configs, [seed3], runs=30, model=UniformModel(), rng_seed=9)
    finals = {label: [log.final.fitness for log in logs] for label, logs in result.logs.items()}
    if len(set(finals["standard"] + finals["hybrid"])) > 1:
        assert mannwhitneyu(finals["standard"], finals["hybrid"], alternative="two-sided").pvalue > 0.01
