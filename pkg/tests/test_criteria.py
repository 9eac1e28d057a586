import math

import numpy as np
import pytest

from rwre import criteria as cr
from rwre import theory as th
from rwre.environment import EnvironmentLaw
from rwre.geometry import BoxSpec, Direction, Rotation

E1 = Direction.axis(2)
UNIT = BoxSpec(Rotation.identity(2), 1, 1, 1)
L6 = BoxSpec.criterion(Rotation.identity(2), 6, 18)
SYM = EnvironmentLaw.symmetric_dirichlet(2, 0.01)


def test_zero_moment_is_one():
    m = cr.estimate_rho_moment(SYM, L6, 0.0, 20, 0)
    assert m.mean == 1.0 and m.ci_half_width == 0.0


def test_drift_moment_single_site(drift2):
    m = cr.estimate_rho_moment(drift2, UNIT, 1.0, 50, 0)
    assert m.mean == pytest.approx(3 / 17, rel=1e-14)
    assert m.ci_half_width == 0.0


def test_dirichlet_moment_matches_direct_sampling():
    m = cr.estimate_rho_moment(SYM, UNIT, 0.5, 20_000, 0)
    gen = np.random.default_rng(12345)
    k = gen.dirichlet(np.ones(4), size=1_200_000)
    k = k[k.min(axis=1) >= 0.01][:1_000_000]
    vals = np.sqrt((1 - k[:, 0]) / k[:, 0])
    se_direct = vals.std(ddof=1) / math.sqrt(len(vals))
    se_est = m.ci_half_width / cr.Z95
    assert abs(m.mean - vals.mean()) < 3 * math.hypot(se_direct, se_est)


def test_moment_validation():
    with pytest.raises(ValueError):
        cr.estimate_rho_moment(SYM, UNIT, 1.5, 10, 0)
    with pytest.raises(ValueError):
        cr.estimate_rho_moment(SYM, UNIT, 0.5, 0, 0)


def test_prefactor_scaling():
    base = cr.prefactor(1.0, 0.05, 2, 6, 18)
    assert base == pytest.approx(math.log(20) ** 3 * 18 * 6 ** 4)
    # doubling (log 1/kappa)^3 doubles the prefactor
    kappa2 = math.exp(-(2 ** (1 / 3)) * math.log(20))
    assert cr.prefactor(1.0, kappa2, 2, 6, 18) == pytest.approx(2 * base, rel=1e-12)


def test_a_values_cover_endpoints():
    vals = [a for _, a in cr.a_values(10)]
    assert vals[0] == 0.0 and vals[-1] == 1.0
    assert vals[3] == pytest.approx(10 ** -0.3)


def test_drift_criterion_single_environment(drift2):
    rep = cr.effective_criterion(drift2, E1, [6, 10, 14], alphas=[0.3], n_env=1)
    best = [min(e["product"] for e in rep.entries if e["L"] == L) for L in (6, 10, 14)]
    assert best[0] > best[1] > best[2]
    assert rep.verdict == "satisfied"
    assert rep.argmin["L"] == 14


def test_criterion_skips_invalid_boxes(drift2):
    rep = cr.effective_criterion(drift2, E1, [4, 6], n_env=1)
    assert rep.skipped == [{"L": 4, "Ltilde": 12.0}]
    with pytest.raises(ValueError):
        cr.effective_criterion(drift2, E1, [4], n_env=1)


def test_fit_recovers_known_slope():
    L = np.array([4.0, 6, 8, 10])
    n = 10 ** 9
    counts = np.round(n * 0.3 * np.exp(-1.5 * L ** 0.5)).astype(int)
    fit = cr.fit_stretched_decay(L, counts, [n] * 4, 0.5)
    assert fit.fit_available
    assert fit.delta == pytest.approx(1.5, abs=1e-3)
    assert math.exp(fit.intercept) == pytest.approx(0.3, rel=1e-3)


def test_fit_flags_degenerate_levels():
    fit = cr.fit_stretched_decay([4, 6, 8], [0, 0, 0], [100] * 3, 0.5)
    assert not fit.fit_available and fit.n_zero_counts == 3
    fit = cr.fit_stretched_decay([4, 6, 8], [100] * 3, [100] * 3, 0.5)
    assert not fit.fit_available and "saturated" in fit.note
    fit = cr.fit_stretched_decay([4, 6, 8], [50, 10, 0], [100] * 3, 0.5)
    assert fit.fit_available and fit.n_zero_counts == 1
    assert fit.display_upper() == [None, None, 0.03]


def test_tgamma_validation(drift2):
    with pytest.raises(ValueError):
        cr.tgamma_backexit_fit(drift2, E1, 0.4, 1.0, [4, 6], 0, 0)


def test_tgamma_drift_decays():
    law = EnvironmentLaw.deterministic_drift(2, 0.2)
    fit = cr.tgamma_backexit_fit(law, E1, 0.4, 1.0, [4, 6, 8, 10], 20_000, 0)
    assert fit.fit_available
    assert fit.delta - fit.slope_ci > 0


def test_atypical_tail_fixture():
    fit = cr.atypical_tail(SYM, E1, 0.8, 0.5, 0.5, [4, 6, 8], 200, 3, gamma=0.45)
    assert fit.counts == [87, 14, 0]
    assert fit.extra["zeta_bound_f_beta"] == pytest.approx(0.711111, abs=1e-6)
    assert fit.extra["zeta_admissible"]


def test_atypical_tail_below_floor_is_empty():
    fit = cr.atypical_tail(SYM, E1, 0.8, 50.0, 0.5, [4, 6], 100, 3)
    assert fit.counts == [0, 0]
    assert all(fit.extra["threshold_below_floor"])


def test_seed_check_exponent_and_drift(drift2):
    fit = cr.seed_estimate_check(drift2, E1, 0.6, 0.8, 5.0, [6, 10], 3, 0, 0.45)
    assert fit.exponent == pytest.approx(0.27)
    assert fit.counts[1] <= fit.counts[0]


def test_seed_check_saturates(drift2):
    fit = cr.seed_estimate_check(drift2, E1, 0.6, 0.6, 1e-6, [6, 10], 3, 0, 0.45)
    assert fit.freqs == [1.0, 1.0]
    assert not fit.fit_available


def _betas():
    return th.build_ladder(0.45, 2).betas + [1.0]


def test_decomposition_fixture():
    dec = cr.decompose_rho_expectation(SYM, L6, 6 ** -0.3, 0.45, _betas(), [1, 1, 1], 200, 0)
    assert dec.counts == [196, 4, 0, 0]
    assert dec.total == pytest.approx(1.6762593798577308, rel=1e-12)
    mean = cr.estimate_rho_moment(SYM, L6, 6 ** -0.3, 200, 0).mean
    assert abs(math.fsum(dec.partial_sums) - mean) <= 1e-12 * mean


def test_decomposition_drift_single_band(drift2):
    dec = cr.decompose_rho_expectation(drift2, L6, 0.5, 0.45, _betas(), [0.1, 1, 1], 5, 0)
    assert dec.counts[0] == 5 and dec.partial_sums[1:] == [0.0] * 3


def test_decomposition_validation():
    with pytest.raises(ValueError):
        cr.decompose_rho_expectation(SYM, L6, 0.5, 0.45, [0.8], [1, 1], 5, 0)
    with pytest.raises(ValueError):
        cr.decompose_rho_expectation(SYM, L6, 0.5, 0.45, _betas(), [1, 1], 5, 0)


def test_workers_do_not_change_results():
    a = cr.sample_exits(SYM, cr._criterion_box(SYM, E1, 6, 18)[1], 150, 7, workers=1)
    b = cr.sample_exits(SYM, cr._criterion_box(SYM, E1, 6, 18)[1], 150, 7, workers=2)
    assert np.array_equal(a.p_plus, b.p_plus) and np.array_equal(a.p_other, b.p_other)
