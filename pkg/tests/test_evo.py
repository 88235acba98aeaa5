from importlib import resources

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from rowmix.evo import (Candidate, ConstraintTooTight, EvoParams, HwConstraint, crossover, evolve, init_population,
                        mutate)
from rowmix.hw import CostTable, HardwareProfile
from rowmix.space import SearchSpace, SubnetConfig, enumerate_space, sample_subnet

TOY = SearchSpace.load(resources.files("rowmix").joinpath("data/space_toy.json"))
PROFILE = HardwareProfile.load(resources.files("rowmix").joinpath("data/profile_toy.json"))
ALL = list(enumerate_space(TOY))


def neg_params(c):
    return -float(c.param_count(TOY.geometry))


@pytest.fixture(scope="module")
def hw():
    base = HwConstraint(PROFILE, CostTable.default(), 0.0, TOY.geometry)
    fps = sorted(base.check(c)[0] for c in ALL)
    return HwConstraint(PROFILE, CostTable.default(), fps[len(fps) // 2], TOY.geometry)


def test_params_validation():
    with pytest.raises(ValueError):
        EvoParams(p_d=1.5)
    with pytest.raises(ValueError):
        EvoParams(top_k=60, population_size=50)
    p = EvoParams()
    assert (p.p_d, p.p_m, p.population_size, p.generations, p.top_k) == (0.2, 0.4, 50, 20, 10)


def test_zero_target_accepts_first_samples():
    params = EvoParams(population_size=12, seed=3)
    pop = init_population(TOY, params, neg_params)
    rng = np.random.default_rng(3)
    assert [c.config for c in pop] == [sample_subnet(TOY, rng) for _ in range(12)]
    assert all(c.feasible for c in pop)


def test_impossible_target_raises():
    with pytest.raises(ConstraintTooTight, match="constraint too tight"):
        init_population(TOY, EvoParams(population_size=5, top_k=2), neg_params, lambda c: (0.0, False))


def test_population_is_seeded(hw):
    a = init_population(TOY, EvoParams(population_size=10, seed=9), neg_params, hw.check)
    b = init_population(TOY, EvoParams(population_size=10, seed=9), neg_params, hw.check)
    assert [c.config for c in a] == [c.config for c in b]
    assert all(hw.check(c.config)[1] for c in a)


def test_crossover_identical_parents():
    c = sample_subnet(TOY, 1)
    assert crossover(c, c, np.random.default_rng(0)) == c


@given(st.integers(0, 10 ** 6), st.integers(0, 10 ** 6), st.integers(0, 10 ** 6))
def test_crossover_genes_come_from_parents(s1, s2, s3):
    a, b = sample_subnet(TOY, s1), sample_subnet(TOY, s2)
    child = crossover(a, b, np.random.default_rng(s3))
    assert child.depth in (a.depth, b.depth)
    assert child.embed_dim in (a.embed_dim, b.embed_dim)
    for i in range(child.depth):
        options = [p.layer_genes(i) for p in (a, b) if i < p.depth]
        assert child.layer_genes(i) in options
    child.check_in(TOY)


def test_crossover_snapshot():
    a = SubnetConfig(16, 1, (16,), (2.0,), (0.0,))
    b = SubnetConfig(32, 2, (32, 16), (3.0, 2.0), (0.5, 0.25))
    child = crossover(a, b, np.random.default_rng(2024))
    assert child == CROSSOVER_CHILD


CROSSOVER_CHILD = SubnetConfig(16, 2, (16, 16), (2.0, 2.0), (0.0, 0.25))


def test_mutation_extremes():
    c = sample_subnet(TOY, 4)
    rng = np.random.default_rng(0)
    assert mutate(c, TOY, EvoParams(p_d=0.0, p_m=0.0), rng) == c
    for _ in range(50):
        mutate(c, TOY, EvoParams(p_d=1.0, p_m=1.0), rng).check_in(TOY)


def test_mutation_rate():
    rng = np.random.default_rng(1)
    params = EvoParams(p_d=0.0, p_m=0.5)
    c = SubnetConfig(16, 2, (16, 16), (2.0, 2.0), (0.0, 0.0))
    changed = 0
    trials = 10_000
    for _ in range(trials):
        changed += mutate(c, TOY, params, rng).layer_genes(0) != c.layer_genes(0)
    expected = 0.5 * (1 - 1 / len(TOY.layer_choices()))
    assert abs(changed / trials - expected) <= 0.02


def test_evolve_is_elitist_feasible_and_optimal(hw):
    feasible = [c for c in ALL if hw.check(c)[1]]
    best = max(neg_params(c) for c in feasible)
    res = evolve(TOY, EvoParams(population_size=20, generations=10, top_k=5, seed=0,
                                target_fps=hw.target_fps), neg_params, hw.check)
    assert all(b2 >= b1 for b1, b2 in zip(res.best_per_generation, res.best_per_generation[1:]))
    assert all(c.feasible and c.fps >= hw.target_fps for c in res.population)
    fresh = HwConstraint(PROFILE, CostTable.default(), hw.target_fps, TOY.geometry)
    assert all(fresh.check(c.config)[1] for c in res.population)
    assert res.best.fitness == best
    fits = [c.fitness for c in res.population]
    assert fits == sorted(fits, reverse=True)


def test_evolve_is_deterministic(hw):
    p = EvoParams(population_size=10, generations=4, top_k=3, seed=5, target_fps=hw.target_fps)
    a = evolve(TOY, p, neg_params, hw.check)
    b = evolve(TOY, p, neg_params, hw.check, jobs=2)
    assert [(c.config, c.fitness) for c in a.population] == [(c.config, c.fitness) for c in b.population]


def test_infeasible_children_never_evaluated(hw):
    seen = []

    def fit(c):
        seen.append(c)
        return neg_params(c)

    evolve(TOY, EvoParams(population_size=10, generations=3, top_k=3, seed=1, target_fps=hw.target_fps),
           fit, hw.check)
    assert all(hw.check(c)[1] for c in seen)


def test_candidate_sort_key_breaks_ties_deterministically():
    a = Candidate(SubnetConfig(16, 1, (16,), (2.0,), (0.0,)), 0.5, 1.0, True)
    b = Candidate(SubnetConfig(24, 1, (16,), (2.0,), (0.0,)), 0.5, 1.0, True)
    assert sorted([b, a], key=Candidate.sort_key) == [a, b]
