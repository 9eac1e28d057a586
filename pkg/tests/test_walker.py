import math

import numpy as np
import pytest

from rwre.environment import Environment, EnvironmentLaw
from rwre.geometry import BoxSpec, Direction, Rotation, Slab, build_box
from rwre.walker import (Path, StopRule, annealed_batch, annealed_counts, asymptotic_direction,
                         projection_sup, regeneration_times, simulate_annealed,
                         simulate_quenched, walk_seeds)

E1 = Direction.axis(2)


def line(points):
    return Path(np.array(points, dtype=np.int64), 0, "step_cap")


def test_fixed_step_count(srw2):
    p = simulate_quenched(Environment(srw2, 0), (0, 0), StopRule.for_steps(5), seed=3)
    assert len(p.sites) == 6
    assert p.stop_reason == "step_cap"
    assert np.all(np.abs(np.diff(p.sites, axis=0)).sum(axis=1) == 1)


def test_quenched_walk_is_reproducible():
    env = Environment(EnvironmentLaw.symmetric_dirichlet(2, 0.01), 1)
    stop = StopRule.for_slab(Slab(E1, 1.0, 8.0))
    a = simulate_quenched(env, (0, 0), stop, seed=42)
    b = simulate_quenched(Environment(env.law, 1), (0, 0), stop, seed=42)
    assert np.array_equal(a.sites, b.sites)
    assert a.stop_reason == b.stop_reason


def test_annealed_walk_is_reproducible():
    law = EnvironmentLaw.symmetric_dirichlet(2, 0.01)
    stop = StopRule.for_slab(Slab(E1, 1.0, 8.0))
    a = simulate_annealed(law, (0, 0), stop, 5)
    assert np.array_equal(a.sites, simulate_annealed(law, (0, 0), stop, 5).sites)


def test_batch_matches_single_walks():
    law = EnvironmentLaw.symmetric_dirichlet(2, 0.01)
    stop = StopRule.for_slab(Slab(E1, 1.0, 5.0))
    seeds = walk_seeds(3, np.arange(20))
    batch = annealed_batch(law, (0, 0), stop, seeds, record=True)
    for i, s in enumerate(seeds):
        single = simulate_annealed(law, (0, 0), stop, int(s))
        assert np.array_equal(batch.paths[i], single.sites)


def test_strong_drift_reaches_level_straight():
    law = EnvironmentLaw.deterministic_drift(2, 0.001)
    stop = StopRule.for_level(E1, 10.0, 0.0)
    n = 10_000
    batch = annealed_batch(law, (0, 0), stop, walk_seeds(0, np.arange(n)))
    assert batch.count("level_reached") == n
    freq = float(np.mean(batch.n_steps == 10))
    p = 0.997 ** 10
    assert abs(freq - p) < 4 * math.sqrt(p * (1 - p) / n)


def test_symmetric_slab_exit_is_fair():
    law = EnvironmentLaw.symmetric_dirichlet(2, 0.01)
    n = 20_000
    c = annealed_counts(law, StopRule.for_slab(Slab(E1, 1.0, 10.0)), n, 0)
    assert c["slab_front"] + c["slab_back"] == n
    assert abs(c["slab_back"] / n - 0.5) < 5 * math.sqrt(0.25 / n)


def test_drift_rarely_exits_back(drift2):
    c = annealed_counts(drift2, StopRule.for_slab(Slab(E1, 1.0, 10.0)), 100_000, 0)
    assert c["slab_back"] / 100_000 < 1e-3


def test_box_stop_agrees_with_solver(srw2):
    box = build_box(BoxSpec(Rotation.identity(2), 1, 2, 1))
    n = 30_000
    batch = annealed_batch(srw2, (0, 0), StopRule.for_box(box), walk_seeds(1, np.arange(n)))
    assert abs(batch.count("box_plus") / n - 1 / 15) < 4 * math.sqrt(1 / 15 * 14 / 15 / n)


def test_start_outside_slab_rejected(srw2):
    with pytest.raises(ValueError):
        simulate_annealed(srw2, (20, 0), StopRule.for_slab(Slab(E1, 1.0, 10.0)), 0)


def test_straight_path_regenerations():
    N = 12
    rec = regeneration_times(line([(k, 0) for k in range(N + 1)]), E1, M=1)
    assert rec.confirmed_times == tuple(range(1, N))
    assert rec.provisional_time == N


def test_backtracking_path_regenerations():
    rec = regeneration_times(line([(0, 0), (1, 0), (0, 0), (1, 0), (2, 0)]), E1, M=0)
    # time 3 repeats the earlier maximum 1, so it is not a strict new maximum
    assert rec.confirmed_times == (4,)


def test_fresh_maximum_at_end_is_provisional():
    rec = regeneration_times(line([(0, 0), (0, 1), (1, 1)]), E1, M=2)
    assert rec.confirmed_times == ()
    assert rec.provisional_time == 2


def test_default_margin_uses_largest_jump():
    rec = regeneration_times(line([(k, 0) for k in range(6)]), E1)
    assert rec.confirmation_margin == pytest.approx(2 * math.sqrt(2))


def test_direction_of_straight_paths():
    est = asymptotic_direction(np.array([[10, 0]] * 5))
    assert np.allclose(est.direction, [1, 0])
    assert est.dispersion == 0.0


def test_direction_is_symmetric_average():
    est = asymptotic_direction(np.array([[7, 0], [0, 7]] * 3))
    assert np.allclose(est.direction, [1 / math.sqrt(2)] * 2)


def test_drift_direction(drift2):
    batch = annealed_batch(drift2, (0, 0), StopRule.for_steps(10_000),
                           walk_seeds(2, np.arange(1000)))
    assert asymptotic_direction(batch.terminal).direction[0] > 0.99


def test_projection_sup_examples():
    assert projection_sup(line([(k, 0) for k in range(10)]), E1, E1, 5.0) == (0.0, False)
    path = line([(0, 0)] + [(k, 1) for k in range(11)])
    assert projection_sup(path, E1, E1, 5.0)[0] == 1.0


def _sup_tail(law, u, n=10_000):
    batch = annealed_batch(law, (0, 0), StopRule.for_level(E1, u, 20.0),
                           walk_seeds(6, np.arange(n)), record=True)
    sups = np.array([projection_sup(Path(p, 0, ""), E1, E1, u, 20.0)[0] for p in batch.paths])
    return float(np.mean(sups >= u ** 0.75))


def test_projection_sup_tail_decreases(drift2):
    assert _sup_tail(drift2, 50.0) <= _sup_tail(drift2, 25.0)
    weak = EnvironmentLaw.epsilon_biased(2, 0.2, 0.05)
    hi, lo = _sup_tail(weak, 25.0), _sup_tail(weak, 50.0)
    n = 10_000
    assert hi - lo > 3 * math.sqrt((hi * (1 - hi) + lo * (1 - lo)) / n)
