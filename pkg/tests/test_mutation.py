import numpy as np
import pytest
from scipy.stats import chisquare

from src.cgp import N_FUNCS, CircuitParams, Chromosome, Gate, canonicalize_outputs, validate
from src.mutation import FUNC, MutationDistribution, mutate_guided, mutate_node_uniform, mutate_uniform
from src.seeds import seed_multiplier


def _changed(parent: Chromosome, child: Chromosome) -> list[tuple[int, int]]:
    return [tuple(ix) for ix in np.argwhere(parent.genes != child.genes)]


def test_uniform_changes_exactly_one_active_gene(rng, make_random):
    for _ in range(500):
        parent = make_random(rng, transformer_form=True)
        child = mutate_uniform(parent, rng)
        changed = _changed(parent, child)
        assert len(changed) == 1
        assert changed[0][0] in parent.active
        assert validate(child).ok


def test_uniform_never_touches_output_genes(rng):
    parent = seed_multiplier("wallace-1", 4)
    for _ in range(100):
        child = mutate_uniform(parent, rng)
        assert child.outputs == parent.outputs


def test_node_zero_of_single_input_circuit_mutates_function(rng):
    params = CircuitParams(n_i=1, n_o=1, n_c=1)
    parent = Chromosome(params, [(0, 0, Gate.INV)], None)
    for _ in range(20):
        child = mutate_node_uniform(parent, 0, rng)
        assert _changed(parent, child) == [(0, FUNC)]


def test_no_active_nodes_falls_back_to_all_nodes(rng, caplog):
    params = CircuitParams(n_i=2, n_o=1, n_c=3)
    parent = Chromosome(params, [(0, 1, 1)] * 3, (0,))
    child = mutate_uniform(parent, rng)
    assert len(_changed(parent, child)) == 1
    assert "no active nodes" in caplog.text


def _dist(n_c, n_ids, location=None):
    loc = np.zeros(n_c) if location is None else location
    return MutationDistribution(
        location_probs=loc,
        function_probs=np.full((n_c, N_FUNCS), 1.0 / N_FUNCS),
        input_probs=np.full((n_c, n_ids), 1.0 / n_ids),
    )


def test_guided_follows_location_distribution(rng):
    parent = seed_multiplier("ripple-carry-array", 4)
    n_c = parent.params.n_c
    target = parent.active[3]
    loc = np.zeros(n_c)
    loc[target] = 1.0
    d = _dist(n_c, parent.params.n_ids, loc)
    for _ in range(50):
        child = mutate_guided(parent, d, rng)
        changed = _changed(parent, child)
        assert len(changed) == 1 and changed[0][0] == target
        assert validate(child).ok


def test_guided_respects_permissible_inputs(rng):
    parent = seed_multiplier("ripple-carry-array", 4)
    d = _dist(parent.params.n_c, parent.params.n_ids, np.ones(parent.params.n_c))
    for _ in range(300):
        assert validate(mutate_guided(parent, d, rng)).ok


def test_guided_picks_the_only_alternative(rng):
    params = CircuitParams(n_i=2, n_o=1, n_c=1)
    parent = Chromosome(params, [(0, 1, Gate.AND)], None)
    func = np.zeros((1, N_FUNCS))
    func[0, Gate.XOR] = 1.0
    func[0, Gate.AND] = 5.0      # current value is excluded
    d = MutationDistribution(np.ones(1), func, np.array([[0.5, 0.5, 0.0]]))
    for _ in range(30):
        child = mutate_guided(parent, d, rng)
        slot = _changed(parent, child)[0][1]
        if slot == FUNC:
            assert child.rows[0][2] == Gate.XOR
        else:
            assert child.rows[0][slot] == 1 - parent.rows[0][slot]


def test_degenerate_distributions_fall_back_to_uniform(rng, caplog):
    parent = seed_multiplier("wallace-2", 4)
    n_c, n_ids = parent.params.n_c, parent.params.n_ids
    d = MutationDistribution(np.zeros(n_c), np.zeros((n_c, N_FUNCS)), np.zeros((n_c, n_ids)))
    for _ in range(50):
        child = mutate_guided(parent, d, rng)
        changed = _changed(parent, child)
        assert len(changed) == 1 and changed[0][0] in parent.active
    assert "Degenerate" in caplog.text


def test_guided_is_reproducible():
    parent = seed_multiplier("wallace-3", 4)
    d = _dist(parent.params.n_c, parent.params.n_ids, np.ones(parent.params.n_c))
    a = [mutate_guided(parent, d, np.random.default_rng(5)) for _ in range(3)]
    b = [mutate_guided(parent, d, np.random.default_rng(5)) for _ in range(3)]
    assert a == b


@pytest.mark.parametrize("op", ["uniform", "guided"])
def test_mutation_returns_new_object(rng, op):
    parent = seed_multiplier("wallace-1", 4)
    d = _dist(parent.params.n_c, parent.params.n_ids, np.ones(parent.params.n_c))
    child = mutate_uniform(parent, rng) if op == "uniform" else mutate_guided(parent, d, rng)
    assert child is not parent and child != parent


def test_guided_ignores_mass_on_inactive_nodes(rng):
    parent = seed_multiplier("ripple-carry-array", 4)
    n_c = parent.params.n_c
    inactive = [p for p in range(n_c) if p not in set(parent.active)]
    loc = np.zeros(n_c)
    loc[inactive] = 1.0
    loc[parent.active[0]] = 1e-3
    d = _dist(n_c, parent.params.n_ids, loc)
    for _ in range(50):
        child = mutate_guided(parent, d, rng)
        assert _changed(parent, child)[0][0] == parent.active[0]


def test_uniform_is_uniform_over_active_node_genes():
    rng = np.random.default_rng(2024)
    parent = canonicalize_outputs(seed_multiplier("ripple-carry-array", 4))
    cells = {(p, slot): 0 for p in parent.active for slot in range(3)}
    for _ in range(10_000):
        (changed,) = _changed(parent, mutate_uniform(parent, rng))
        cells[changed] += 1
    assert chisquare(list(cells.values())).pvalue > 1e-3


def test_uniform_function_plan_matches_uniform_function_branch():
    rng = np.random.default_rng(77)
    parent = canonicalize_outputs(seed_multiplier("ripple-carry-array", 4))
    n_c = parent.params.n_c
    target = parent.active[-1]
    loc = np.zeros(n_c)
    loc[target] = 1.0
    d = _dist(n_c, parent.params.n_ids, loc)
    counts = {"guided": np.zeros(N_FUNCS), "uniform": np.zeros(N_FUNCS)}
    while counts["guided"].sum() < 10_000:
        child = mutate_guided(parent, d, rng)
        if _changed(parent, child)[0][1] == FUNC:
            counts["guided"][child.rows[target][2]] += 1
    while counts["uniform"].sum() < 10_000:
        child = mutate_node_uniform(parent, target, rng)
        if _changed(parent, child)[0][1] == FUNC:
            counts["uniform"][child.rows[target][2]] += 1
    current = parent.rows[target][2]
    for name, c in counts.items():
        assert c[current] == 0
        assert chisquare(np.delete(c, current)).pvalue > 1e-3, name
