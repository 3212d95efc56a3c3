import math
import pickle

import numpy as np
import pytest

from physics import (
    K0,
    CoincidentEmittersError,
    EigensolverError,
    EmitterConfiguration,
    Polarization,
    build_hamiltonian,
    collective_modes,
    decay_rates,
    dyadic_coupling,
    green_coupling,
    min_decay,
    mode_character,
    mode_report,
    pair_decays,
)

POLS = (Polarization.SIGMA_Z, Polarization.SIGMA_PLUS)


def _random_config(rng, n: int, box: float = 3.0, min_dist: float = 0.05) -> EmitterConfiguration:
    while True:
        cfg = EmitterConfiguration(rng.uniform(0.0, box, size=(n, 2)))
        if n < 2 or cfg.pairwise_distances().min() >= min_dist:
            return cfg


def _pair_delta(x: np.ndarray) -> np.ndarray:
    return 1.5 * (np.sin(x) / x + np.cos(x) / x**2 - np.sin(x) / x**3)


def test_polarization_parse_aliases():
    assert Polarization.parse("z") is Polarization.SIGMA_Z
    assert Polarization.parse("sigma+") is Polarization.SIGMA_PLUS
    assert Polarization.parse(" Minus ") is Polarization.SIGMA_MINUS
    assert Polarization.parse(Polarization.SIGMA_Z) is Polarization.SIGMA_Z
    with pytest.raises(ValueError):
        Polarization.parse("sigma_x")


def test_single_atom_decays_at_unit_rate():
    modes = collective_modes(build_hamiltonian(EmitterConfiguration.from_list([[0.0, 0.0]]), Polarization.SIGMA_Z))
    assert len(modes) == 1
    assert modes[0].decay == pytest.approx(1.0, abs=1e-15)
    assert modes[0].shift == pytest.approx(0.0, abs=1e-15)


def test_hamiltonian_is_complex_symmetric_with_fixed_diagonal(rng):
    cfg = _random_config(rng, 7)
    h = build_hamiltonian(cfg, Polarization.SIGMA_Z).matrix
    assert np.array_equal(h, h.T)
    assert np.all(np.diag(h) == -0.5j)


def test_green_coupling_rejects_non_positive_separation():
    with pytest.raises(ValueError):
        green_coupling(0.0, Polarization.SIGMA_Z)
    with pytest.raises(ValueError):
        green_coupling(np.array([1.0, -0.1]), Polarization.SIGMA_Z)


def test_coincident_emitters_rejected():
    cfg = EmitterConfiguration.from_list([[0.0, 0.0], [1.0, 0.0], [0.0, 0.0]])
    with pytest.raises(CoincidentEmittersError) as err:
        build_hamiltonian(cfg, Polarization.SIGMA_Z)
    assert err.value.pair == (0, 2)


def test_exceptions_survive_pickling():
    exc = pickle.loads(pickle.dumps(CoincidentEmittersError(1, 3, 0.0)))
    assert exc.pair == (1, 3)
    eig = pickle.loads(pickle.dumps(EigensolverError("boom", "abc123")))
    assert eig.config_hash == "abc123"
    assert "boom" in str(eig)


def test_pair_spectrum_matches_analytic_formula(rng):
    rs = rng.uniform(0.05, 3.0, size=1000)
    for r in rs:
        cfg = EmitterConfiguration.from_list([[0.0, 0.0], [r, 0.0]])
        got = np.sort(decay_rates(cfg, Polarization.SIGMA_Z))
        delta = _pair_delta(K0 * r)
        want = np.sort([1.0 - delta, 1.0 + delta])
        assert got == pytest.approx(want, abs=1e-12)


def test_pair_decays_helper_matches_eigenvalues():
    sub, sup = pair_decays(0.2)
    decays = decay_rates(EmitterConfiguration.from_list([[0.0, 0.0], [0.2, 0.0]]), Polarization.SIGMA_Z)
    assert sorted(decays) == pytest.approx([sub, sup], abs=1e-12)


@pytest.mark.parametrize("pol", [Polarization.SIGMA_Z, Polarization.SIGMA_PLUS, Polarization.SIGMA_MINUS])
def test_scalar_coupling_matches_dyadic_tensor(pol, rng):
    for _ in range(200):
        r = rng.uniform(0.05, 3.0)
        theta = rng.uniform(0.0, 2.0 * math.pi)
        vec = np.array([r * math.cos(theta), r * math.sin(theta)])
        want = dyadic_coupling(vec, pol)
        got = green_coupling(K0 * r, pol)
        assert abs(got - want) <= 1e-12 * max(1.0, abs(want))


def test_sigma_plus_and_minus_give_identical_modes(rng):
    for _ in range(100):
        cfg = _random_config(rng, int(rng.integers(2, 9)))
        hp = build_hamiltonian(cfg, Polarization.SIGMA_PLUS)
        hm = build_hamiltonian(cfg, Polarization.SIGMA_MINUS)
        assert np.array_equal(hp.matrix, hm.matrix)
        mp, mm = collective_modes(hp), collective_modes(hm)
        assert mp.decays == pytest.approx(mm.decays, abs=1e-12)
        assert mp.shifts == pytest.approx(mm.shifts, abs=1e-12)


def test_decay_sum_rule(rng):
    for k in range(200):
        n = int(rng.integers(2, 11))
        pol = POLS[k % 2]
        total = decay_rates(_random_config(rng, n), pol).sum()
        assert total == pytest.approx(float(n), rel=1e-9)


def test_decays_are_non_negative(rng):
    for k in range(100):
        decays = decay_rates(_random_config(rng, int(rng.integers(2, 11))), POLS[k % 2])
        assert decays.min() >= -1e-10


@pytest.mark.parametrize("n", [2, 3])
def test_dicke_limit_has_dark_mode(n):
    pts = [[0.0, 0.0], [1e-3, 0.0], [5e-4, 1e-3 * math.sqrt(3.0) / 2.0]][:n]
    assert min_decay(EmitterConfiguration.from_list(pts), Polarization.SIGMA_Z).gamma_min < 1e-4


def test_min_decay_index_points_into_collective_modes(rng):
    for k in range(50):
        cfg = _random_config(rng, int(rng.integers(2, 9)))
        pol = POLS[k % 2]
        md = min_decay(cfg, pol)
        modes = collective_modes(build_hamiltonian(cfg, pol))
        assert modes[md.mode_index].decay == pytest.approx(md.gamma_min, abs=1e-10)


def test_min_decay_invariant_under_isometries(rng):
    for k in range(100):
        cfg = _random_config(rng, int(rng.integers(2, 9)))
        pol = POLS[k % 2]
        moved = cfg.transformed(
            angle=rng.uniform(0.0, 2.0 * math.pi),
            shift=rng.uniform(-10.0, 10.0, size=2),
            reflect=bool(rng.integers(0, 2)),
        )
        assert min_decay(moved, pol).gamma_min == pytest.approx(min_decay(cfg, pol).gamma_min, abs=1e-10)


def test_modes_sorted_by_decay(rng):
    modes = collective_modes(build_hamiltonian(_random_config(rng, 6), Polarization.SIGMA_Z))
    assert np.all(np.diff(modes.decays) >= -1e-12)
    for mode in modes:
        assert np.linalg.norm(mode.wavefunction) == pytest.approx(1.0)


def test_mode_report_fixes_global_phase(rng):
    cfg = _random_config(rng, 5)
    modes = collective_modes(build_hamiltonian(cfg, Polarization.SIGMA_Z))
    rows = mode_report(modes, cfg)
    assert len(rows) == 25
    for j in range(5):
        mine = [r for r in rows if r.mode_index == j]
        assert sum(r.weight for r in mine) == pytest.approx(1.0)
        assert all(-math.pi < r.phase <= math.pi for r in mine)
        anchor = max(mine, key=lambda r: r.weight)
        assert anchor.phase == pytest.approx(0.0, abs=1e-12)


def test_mode_report_selected_modes_only(rng):
    cfg = _random_config(rng, 4)
    modes = collective_modes(build_hamiltonian(cfg, Polarization.SIGMA_Z))
    rows = mode_report(modes, cfg, mode_indices=[0])
    assert {r.mode_index for r in rows} == {0}
    assert [r.atom for r in rows] == [0, 1, 2, 3]


def test_close_pair_subradiant_mode_is_staggered():
    cfg = EmitterConfiguration.from_list([[0.0, 0.0], [0.1, 0.0]])
    modes = collective_modes(build_hamiltonian(cfg, Polarization.SIGMA_Z))
    character, spread = mode_character(modes, cfg, 0)
    assert character == "staggered"
    assert spread == pytest.approx(math.pi, abs=1e-9)
    assert mode_character(modes, cfg, 1)[0] == "in_phase"


def test_config_hash_tracks_positions():
    cfg = EmitterConfiguration.from_list([[0.0, 0.0], [0.5, 0.0]])
    same = EmitterConfiguration.from_list([[0.0, 0.0], [0.5, 0.0]])
    assert cfg.config_hash() == same.config_hash()
    assert cfg.config_hash() != cfg.transformed(shift=(1.0, 0.0)).config_hash()


def test_configuration_validation():
    with pytest.raises(ValueError):
        EmitterConfiguration(np.zeros((0, 2)))
    with pytest.raises(ValueError):
        EmitterConfiguration.from_list([[0.0, float("nan")]])
