import math

import numpy as np
import pytest

from constraints import FREE2D, RESTRICTED1D, Constraints, InfeasibleProblemError
from optimizer import (
    PENALTY_WEIGHT,
    DeSettings,
    DifferentialEvolution,
    OracleRefusedError,
    Problem,
    de_generation,
    decode,
    draw_generation,
    encode,
    feasibility,
    grid_oracle,
    make_trial,
    objective,
    run_de,
)
from physics import EmitterConfiguration, Polarization, min_decay, pair_decays

SIGMA_Z = Polarization.SIGMA_Z


def _quick(**kw) -> DeSettings:
    base = dict(max_generations=30, restarts=2, seed=7)
    base.update(kw)
    return DeSettings(**base)


def test_decode_places_gauge_atoms():
    cfg = decode([0.4, 1.0, math.pi / 2, 2.0, math.pi])
    assert cfg.n == 4
    assert cfg.positions[0] == pytest.approx([0.0, 0.0])
    assert cfg.positions[1] == pytest.approx([0.4, 0.0])
    assert cfg.positions[2] == pytest.approx([0.0, 1.0], abs=1e-15)
    assert cfg.positions[3] == pytest.approx([-2.0, 0.0], abs=1e-15)


def test_decode_rejects_even_length():
    with pytest.raises(ValueError):
        decode([0.3, 0.4])


def test_encode_recovers_gauge_vector():
    v = np.array([0.7, 1.2, 0.3, 2.5, 4.0])
    assert encode(decode(v)) == pytest.approx(v, abs=1e-12)


def test_encode_preserves_distances(rng):
    cfg = EmitterConfiguration(rng.uniform(-2.0, 2.0, size=(6, 2)))
    back = decode(encode(cfg))
    assert np.sort(back.pairwise_distances()) == pytest.approx(np.sort(cfg.pairwise_distances()), abs=1e-12)


def test_feasibility_reports_violation():
    c = Constraints.free2d(0.1)
    ok = feasibility([0.1], c)
    assert ok.feasible and ok.violation == 0.0
    bad = feasibility([0.05], c)
    assert not bad.feasible
    assert bad.violation == pytest.approx(0.05)
    far = feasibility([6.0], c)
    assert far.violation == pytest.approx(1.0)


def test_objective_penalizes_infeasible_vectors():
    c = Constraints.free2d(0.3)
    assert objective([0.2], c, SIGMA_Z) == pytest.approx(2 + PENALTY_WEIGHT * 0.1)
    assert objective([0.4], c, SIGMA_Z) == pytest.approx(pair_decays(0.4)[0], abs=1e-12)


def test_problem_dimensions_and_repair():
    c = Constraints.free2d(0.2)
    p = Problem(4, c, SIGMA_Z, FREE2D)
    assert p.dimension == 5
    fixed = p.repair(np.array([-1.0, 7.0, -0.5, 1.0, 7.0]))
    assert fixed[0] == 0.2
    assert fixed[1] == c.confinement_radius
    assert fixed[2] == pytest.approx(2 * math.pi - 0.5)
    assert fixed[4] == pytest.approx(7.0 - 2 * math.pi)
    chain = Problem(5, Constraints.restricted1d(5, 0.2), SIGMA_Z, RESTRICTED1D)
    assert chain.dimension == 4
    assert chain.radial_upper == pytest.approx(2 * chain.constraints.confinement_radius)


def test_restricted_samples_are_feasible(rng):
    p = Problem(14, Constraints.restricted1d(14, 0.2), SIGMA_Z, RESTRICTED1D)
    for _ in range(20):
        v = p.sample(rng)
        assert v.min() >= 0.2 and v.max() <= 1.2
        assert p.violation(v) == 0.0


def test_problem_rejects_bad_inputs():
    with pytest.raises(ValueError):
        Problem(1, Constraints.free2d(0.2))
    with pytest.raises(ValueError):
        Problem(3, Constraints.free2d(0.2), layout="ring")
    with pytest.raises(ValueError):
        Problem(3, Constraints.free2d(0.2)).decode([0.3])


def test_settings_validation():
    assert DeSettings().population_for(3) == 10
    assert DeSettings().population_for(13) == 26
    assert DeSettings(population_size=12).population_for(13) == 12
    with pytest.raises(ValueError):
        DeSettings(f_range=(1.0, 0.5))
    with pytest.raises(ValueError):
        DeSettings(crossover_rate=0.0)
    with pytest.raises(ValueError):
        DeSettings(crossover_base="random")
    with pytest.raises(ValueError):
        DeSettings(seed=-1)


def test_generation_draws_have_forced_component():
    settings = DeSettings(crossover_rate=0.05)
    draws = draw_generation(np.random.default_rng(1), 12, 5, settings)
    assert 0.5 <= draws.f <= 1.0
    assert draws.masks.any(axis=1).all()
    for perm in draws.permutations:
        assert sorted(perm) == list(range(12))


def _population(problem: Problem, rng, size: int = 10):
    pop = np.array([problem.sample(rng) for _ in range(size)])
    energies = np.array([problem.objective(v) for v in pop])
    return pop, energies


@pytest.mark.parametrize("base", ["candidate", "best"])
def test_de_generation_never_worsens_members(base):
    problem = Problem(4, Constraints.free2d(0.3), SIGMA_Z)
    settings = DeSettings(crossover_base=base)
    pop, energies = _population(problem, np.random.default_rng(3))
    best = int(np.argmin(energies))
    step = de_generation(pop, energies, best, problem, settings, np.random.default_rng(4))
    assert np.all(step.energies <= energies)
    assert step.energies[step.best_index] == step.energies.min()
    assert step.evaluations == len(pop)
    for v, e in zip(step.population, step.energies):
        assert problem.objective(v) == pytest.approx(e, abs=0.0)


def test_de_generation_is_reproducible():
    problem = Problem(3, Constraints.free2d(0.3), SIGMA_Z)
    pop, energies = _population(problem, np.random.default_rng(5))
    best = int(np.argmin(energies))
    a = de_generation(pop, energies, best, problem, DeSettings(), np.random.default_rng(9))
    b = de_generation(pop, energies, best, problem, DeSettings(), np.random.default_rng(9))
    assert np.array_equal(a.population, b.population)
    assert a.best_index == b.best_index


def test_identical_population_is_a_fixed_point():
    problem = Problem(3, Constraints.free2d(0.4), SIGMA_Z)
    v = problem.sample(np.random.default_rng(8))
    pop = np.tile(v, (10, 1))
    energies = np.full(10, problem.objective(v))
    step = de_generation(pop, energies, 0, problem, DeSettings(), np.random.default_rng(2))
    assert np.array_equal(step.population, pop)
    assert np.array_equal(step.energies, energies)


@pytest.mark.parametrize("base", ["candidate", "best"])
def test_full_crossover_takes_the_mutant(base):
    problem = Problem(4, Constraints.free2d(0.3), SIGMA_Z)
    settings = DeSettings(crossover_rate=1.0, crossover_base=base)
    pop, energies = _population(problem, np.random.default_rng(6))
    best = int(np.argmin(energies))
    draws = draw_generation(np.random.default_rng(7), len(pop), problem.dimension, settings)
    assert draws.masks.all()
    for i in range(len(pop)):
        j, k = [int(c) for c in draws.permutations[i] if c != i and c != best][:2]
        mutant = pop[best] + draws.f * (pop[j] - pop[k])
        trial = make_trial(pop, i, best, draws, problem, settings)
        assert np.array_equal(trial, problem.repair(mutant))


def test_repair_keeps_radial_components_feasible():
    problem = Problem(3, Constraints.free2d(0.5), SIGMA_Z)
    fixed = problem.repair(np.array([0.1, -2.0, 1.0]))
    assert fixed[0] == 0.5 and fixed[1] == 0.5


def test_spread_measures_parameter_collapse():
    problem = Problem(3, Constraints.free2d(0.5), SIGMA_Z)
    v = np.array([0.6, 0.8, 1.5])
    assert problem.spread(np.tile(v, (6, 1))) < 1e-6
    wrapped = np.array([[0.6, 0.8, 0.001], [0.6, 0.8, 2 * math.pi - 0.001]])
    assert problem.spread(wrapped) < 1e-3
    scattered = np.array([[0.6, 0.8, 1.5], [2.0, 0.8, 1.5]])
    assert problem.spread(scattered) > 0.05


def test_equal_energies_alone_do_not_stop_a_run():
    problem = Problem(3, Constraints.free2d(0.5), SIGMA_Z)
    de = DifferentialEvolution(problem, DeSettings(), seed=0)
    de.population = np.array([[0.6, 0.8, 1.5], [1.4, 2.0, 4.0], [0.9, 1.1, 3.0]])
    de.energies = np.full(3, 0.25)
    assert de.convergence == 0.0
    assert not de.converged()
    de.population = np.tile(de.population[0], (3, 1))
    assert de.converged()


def test_converged_run_has_collapsed_population():
    problem = Problem(2, Constraints.free2d(0.1), SIGMA_Z)
    settings = DeSettings(seed=11)
    de = DifferentialEvolution(problem, settings, seed=11)
    result = de.solve()
    assert result.converged
    assert result.generations < settings.max_generations
    assert problem.spread(de.population) <= settings.stop_spread
    assert result.best_vector[0] == pytest.approx(0.1, abs=1e-4)


@pytest.mark.parametrize("seed", [1, 2, 3, 4, 5])
def test_run_ignores_gauge_of_seed_configuration(seed):
    problem = Problem(3, Constraints.free2d(0.5), SIGMA_Z)
    cfg = EmitterConfiguration.from_list([[0.0, 0.0], [0.7, 0.0], [0.2, 0.9]])
    moved = cfg.transformed(angle=0.3 * seed, shift=(1.5 * seed, -0.7))
    settings = DeSettings(max_generations=40, restarts=1, seed=seed)
    a = run_de(problem, settings, initial=[np.round(problem.encode(cfg), 10)])
    b = run_de(problem, settings, initial=[np.round(problem.encode(moved), 10)])
    assert abs(a.best_gamma - b.best_gamma) <= 1e-4


def test_pair_optimum_sits_at_minimum_spacing():
    problem = Problem(2, Constraints.free2d(0.1), SIGMA_Z)
    settings = DeSettings(seed=11)
    run = run_de(problem, settings)
    grid = np.arange(0.1, 5.0, 1e-4)
    reference = min(pair_decays(r)[0] for r in grid)
    assert run.best_gamma <= reference + 1e-6
    sep = run.best_configuration.pairwise_distances()[0]
    assert sep == pytest.approx(0.1, abs=1e-4)


def test_run_de_is_deterministic():
    problem = Problem(3, Constraints.free2d(0.5), SIGMA_Z)
    first = run_de(problem, _quick()).to_dict()
    second = run_de(problem, _quick()).to_dict()
    assert first == second
    assert first["seeds"] == [7, 8]


def test_run_de_matches_across_worker_counts():
    problem = Problem(3, Constraints.free2d(0.5), SIGMA_Z)
    inline = run_de(problem, _quick(), jobs=1).to_dict()
    pooled = run_de(problem, _quick(), jobs=2).to_dict()
    assert inline == pooled


def test_run_de_result_is_feasible_and_consistent():
    problem = Problem(4, Constraints.free2d(0.4), SIGMA_Z)
    run = run_de(problem, _quick())
    assert problem.violation(run.best_vector) == 0.0
    assert min_decay(run.best_configuration, SIGMA_Z).gamma_min == pytest.approx(run.best_gamma, abs=1e-12)
    assert run.objective_evaluations > 0
    assert run.convergence_trace[0][0] == 0
    bests = [b for _, b, _ in run.convergence_trace]
    assert all(b2 <= b1 for b1, b2 in zip(bests, bests[1:]))


def test_seeded_population_keeps_seed_quality():
    c = Constraints.free2d(0.5)
    problem = Problem(3, c, SIGMA_Z)
    seed_cfg = EmitterConfiguration.from_list([[0.0, 0.0], [0.5, 0.0], [1.0, 0.0]])
    seed_gamma = min_decay(seed_cfg, SIGMA_Z).gamma_min
    run = run_de(problem, _quick(max_generations=0, restarts=1), initial=[problem.encode(seed_cfg)])
    assert run.best_gamma <= seed_gamma + 1e-12


def test_infeasible_problem_raises():
    problem = Problem(8, Constraints(1.0, 1.0), SIGMA_Z)
    with pytest.raises(InfeasibleProblemError):
        run_de(problem, _quick(max_generations=20, init_tries=50))


def test_grid_oracle_pair_matches_formula():
    problem = Problem(2, Constraints.free2d(0.1), SIGMA_Z)
    result = grid_oracle(problem, radial_step=0.001, r_max=3.0)
    assert result.feasible
    grid = np.arange(0.1, 3.0 + 0.0005, 0.001)
    assert result.gamma_min == pytest.approx(min(pair_decays(r)[0] for r in grid), abs=1e-12)


@pytest.mark.filterwarnings("error::RuntimeWarning")
def test_grid_oracle_three_atoms_bounds_candidates():
    problem = Problem(3, Constraints.free2d(0.5), SIGMA_Z)
    result = grid_oracle(problem, radial_step=0.05, angle_step=0.05, r_max=2.0)
    assert result.feasible
    assert problem.violation(result.vector) == 0.0
    assert min_decay(problem.decode(result.vector), SIGMA_Z).gamma_min == pytest.approx(result.gamma_min, abs=1e-10)


def test_grid_oracle_refuses_large_n():
    with pytest.raises(OracleRefusedError):
        grid_oracle(Problem(4, Constraints.free2d(0.3), SIGMA_Z), radial_step=0.1)


def test_grid_oracle_reports_empty_grid():
    result = grid_oracle(Problem(3, Constraints.free2d(0.8), SIGMA_Z), radial_step=0.01, r_max=0.5)
    assert not result.feasible
    assert result.gamma_min is None


@pytest.mark.slow
@pytest.mark.parametrize("r_min", [0.3, 0.5, 0.8])
def test_de_reaches_brute_force_minimum(r_min):
    problem = Problem(3, Constraints.free2d(r_min), SIGMA_Z)
    oracle = grid_oracle(problem, radial_step=0.01, angle_step=0.01)
    run = run_de(problem, DeSettings(seed=2024))
    assert run.best_gamma <= oracle.gamma_min + 1e-4
