import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rwre.environment import (Environment, EnvironmentLaw, LawError, SnapshotError,
                              ellipticity_check, kernels_for_keys, load_environment,
                              sample_site_kernels, save_environment)
from rwre.geometry import BoxSpec, Rotation, build_box
from rwre.rng import derive_seeds


def test_drift_kernel():
    env = Environment(EnvironmentLaw.deterministic_drift(2, 0.05), 0)
    assert np.allclose(env.kernel((7, -3)), [0.85, 0.05, 0.05, 0.05])


def test_eps_kernel():
    env = Environment(EnvironmentLaw.epsilon_biased(2, 0.1, 0.1), 0)
    assert np.allclose(env.kernel((0, 0)), [0.35, 0.65 / 3, 0.65 / 3, 0.65 / 3])


def test_dirichlet_mean_is_uniform():
    law = EnvironmentLaw.symmetric_dirichlet(2, 0.01)
    k = kernels_for_keys(law, derive_seeds(11, np.arange(100_000)))
    assert np.allclose(k.mean(axis=0), 0.25, atol=0.005)
    assert k.min() >= 0.01
    assert np.allclose(k.sum(axis=1), 1.0)


def test_law_validation():
    with pytest.raises(LawError):
        EnvironmentLaw.deterministic_drift(2, 0.3)
    with pytest.raises(LawError):
        EnvironmentLaw.dirichlet((1, 1, 1), 0.01)
    with pytest.raises(LawError):
        EnvironmentLaw.epsilon_biased(2, 0.5, 0.1)


def test_repeat_query_is_identical():
    env = Environment(EnvironmentLaw.symmetric_dirichlet(2, 0.01), 5)
    a = env.kernel((3, 4)).copy()
    assert np.array_equal(env.kernel((3, 4)), a)
    assert np.array_equal(Environment(env.law, 5).kernel((3, 4)), a)


def test_seeds_give_different_environments():
    law = EnvironmentLaw.symmetric_dirichlet(2, 0.01)
    assert not np.array_equal(Environment(law, 1).kernel((0, 0)),
                              Environment(law, 2).kernel((0, 0)))


@given(st.lists(st.tuples(st.integers(-50, 50), st.integers(-50, 50)),
                min_size=1, max_size=30), st.randoms())
@settings(max_examples=50, deadline=None)
def test_query_order_does_not_matter(sites, rnd):
    law = EnvironmentLaw.dirichlet((0.5, 1, 2, 1), 0.02)
    env = Environment(law, 9)
    shuffled = list(sites)
    rnd.shuffle(shuffled)
    first = {s: env.kernel(s) for s in sites}
    other = Environment(law, 9)
    for s in shuffled:
        assert np.array_equal(other.kernel(s), first[s])
    batch = sample_site_kernels(law, np.array(shuffled), 9)
    assert all(np.array_equal(batch[i], first[s]) for i, s in enumerate(shuffled))


def test_ellipticity_minimum():
    box = np.array([[x, y] for x in range(40) for y in range(25)])
    assert ellipticity_check(Environment(EnvironmentLaw.deterministic_drift(2, 0.05), 0),
                             box[:5]) == pytest.approx(0.05)
    assert ellipticity_check(Environment(EnvironmentLaw.epsilon_biased(2, 0.1, 0.1), 0),
                             box[:5]) == pytest.approx(0.65 / 3)
    m = ellipticity_check(Environment(EnvironmentLaw.symmetric_dirichlet(2, 0.01), 3), box)
    assert 0.01 <= m <= 0.25


def test_snapshot_roundtrip(tmp_path):
    box = build_box(BoxSpec.criterion(Rotation.identity(2), 6, 18))
    env = Environment(EnvironmentLaw.symmetric_dirichlet(2, 0.01), 4)
    both = np.concatenate([box.interior, box.boundary])
    save_environment(env, box.interior, tmp_path / "a.csv")
    save_environment(env, both, tmp_path / "b.csv")
    a = load_environment(tmp_path / "a.csv", expected_d=2)
    b = load_environment(tmp_path / "b.csv")
    assert len(a.table) == 385
    assert len(b.table) == 385 + len(box.boundary)
    for s in both:
        assert np.array_equal(b.kernel(s), env.kernel(s))


def test_snapshot_dimension_mismatch(tmp_path):
    env = Environment(EnvironmentLaw.symmetric_dirichlet(3, 0.01), 0)
    save_environment(env, np.zeros((1, 3), dtype=int), tmp_path / "e.csv")
    with pytest.raises(SnapshotError, match="dimension"):
        load_environment(tmp_path / "e.csv", expected_d=2)


def test_snapshot_checksum(tmp_path):
    env = Environment(EnvironmentLaw.symmetric_dirichlet(2, 0.01), 0)
    p = save_environment(env, np.array([[0, 0], [1, 0]]), tmp_path / "e.csv")
    text = p.read_text().replace("\n0,0,", "\n0,0,0", 1)
    p.write_text(text)
    with pytest.raises(SnapshotError):
        load_environment(p)
