"""Monte Carlo estimates of the annealed quantities behind the ballisticity conditions."""

from __future__ import annotations

import math
from collections import deque
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import rng, theory
from .environment import Environment, EnvironmentLaw
from .geometry import (BoxSpec, Direction, LatticeBox, Region, Slab, build_box,
                       build_renorm_boxes, rotation_from_direction)
from .quenched import (DEFAULT_CONFIG, SolverConfig, SolverError,
                       exit_distribution_from_kernels, hitting_probabilities)
from .walker import StopRule, annealed_counts

Z95 = 1.959963984540054
MAX_EXCLUDED_FRACTION = 0.01
CHUNK = 64
DEFAULT_ALPHAS = (0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9)


class EstimationError(RuntimeError):
    pass


# --- per-environment solves -------------------------------------------------

def env_seeds(master_seed: int, indices) -> np.ndarray:
    return rng.derive_seeds(master_seed, indices, "environment")


def _exit_chunk(law, region, start_index, lo, hi, seed, cfg):
    out = np.full((hi - lo, 2), np.nan)
    for row, s in enumerate(env_seeds(seed, np.arange(lo, hi))):
        env = Environment(law, int(s))
        try:
            ed = exit_distribution_from_kernels(region, env.kernels(region.interior),
                                                start_index, cfg)
            out[row] = ed.p_plus, ed.p_other
        except SolverError:
            pass
    return out


def _hit_chunk(law, region, start_idx, lo, hi, seed, cfg):
    out = np.full(hi - lo, np.nan)
    for row, s in enumerate(env_seeds(seed, np.arange(lo, hi))):
        env = Environment(law, int(s))
        try:
            h, _ = hitting_probabilities(region.neighbor_table, env.kernels(region.interior),
                                         region.target, cfg)
            out[row] = h[start_idx].min()
        except SolverError:
            pass
    return out


def _map_envs(fn, law, region, extra, n_env, seed, cfg, workers):
    if law.is_deterministic:
        # every index realizes the same environment
        one = fn(law, region, extra, 0, 1, seed, cfg)
        return np.repeat(one, n_env, axis=0)
    bounds = [(lo, min(lo + CHUNK, n_env)) for lo in range(0, n_env, CHUNK)]
    if workers is None or workers <= 1 or len(bounds) == 1:
        parts = [fn(law, region, extra, lo, hi, seed, cfg) for lo, hi in bounds]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futs = [pool.submit(fn, law, region, extra, lo, hi, seed, cfg) for lo, hi in bounds]
            parts = [f.result() for f in futs]
    return np.concatenate(parts, axis=0)


def _check_exclusions(bad: np.ndarray, what: str) -> int:
    n_bad = int(bad.sum())
    if n_bad > MAX_EXCLUDED_FRACTION * len(bad):
        raise EstimationError(f"{n_bad} of {len(bad)} {what} solves failed")
    return n_bad


@dataclass(frozen=True, eq=False)
class ExitSample:
    p_plus: np.ndarray
    p_other: np.ndarray
    n_excluded: int

    @property
    def log_rho(self) -> np.ndarray:
        return np.log(self.p_other) - np.log(self.p_plus)


def sample_exits(law: EnvironmentLaw, box: LatticeBox, n_env: int, seed: int,
                 cfg: SolverConfig = DEFAULT_CONFIG, workers: int = 1) -> ExitSample:
    """Exact (p_plus, p_other) from the origin for ``n_env`` environments."""
    if n_env < 1:
        raise ValueError("n_env must be positive")
    start = box.index_of(np.zeros(box.d, dtype=np.int64))
    res = _map_envs(_exit_chunk, law, box, start, n_env, seed, cfg, workers)
    bad = np.isnan(res[:, 0])
    n_bad = _check_exclusions(bad, "exit")
    return ExitSample(res[~bad, 0], res[~bad, 1], n_bad)


def _criterion_box(law: EnvironmentLaw, direction: Direction, L: float, transverse: float):
    rot = rotation_from_direction(direction)
    spec = BoxSpec.criterion(rot, L, transverse)
    return spec, build_box(spec, require_origin=True)


# --- moments and the effective criterion ------------------------------------

@dataclass(frozen=True)
class MomentEstimate:
    spec: BoxSpec
    a: float
    n_env: int
    mean: float
    ci_half_width: float
    n_excluded: int = 0
    sample_log_rhos: np.ndarray = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if not 0 <= self.a <= 1:
            raise ValueError("a must lie in [0, 1]")


def moment_from_log_rhos(log_rhos: np.ndarray, a: float) -> tuple:
    """(mean, 95% half width) of rho^a computed as exp(a log rho)."""
    vals = np.exp(a * np.asarray(log_rhos))
    mean = float(np.mean(vals))
    if len(vals) < 2 or np.all(vals == vals[0]):
        return mean, 0.0
    return mean, float(Z95 * np.std(vals, ddof=1) / math.sqrt(len(vals)))


def estimate_rho_moment(law: EnvironmentLaw, spec: BoxSpec, a: float, n_env: int, seed: int,
                        cfg: SolverConfig = DEFAULT_CONFIG, workers: int = 1,
                        keep_sample: bool = False) -> MomentEstimate:
    if not 0 <= a <= 1:
        raise ValueError("a must lie in [0, 1]")
    box = build_box(spec, require_origin=True)
    sample = sample_exits(law, box, n_env, seed, cfg, workers)
    mean, ci = moment_from_log_rhos(sample.log_rho, a)
    return MomentEstimate(spec, a, len(sample.p_plus), mean, ci, sample.n_excluded,
                          sample.log_rho if keep_sample else None)


def prefactor(c1: float, kappa: float, d: int, L: float, transverse: float) -> float:
    return (c1 * math.log(1.0 / kappa) ** (3 * (d - 1)) * transverse ** (d - 1)
            * L ** (3 * (d - 1) + 1))


def a_values(L: float, alphas=DEFAULT_ALPHAS, include_endpoints: bool = True) -> list:
    """[(label, a)] with a = L^-alpha, plus a = 0 and a = 1."""
    out = [(f"L^-{al:g}", L ** (-al)) for al in alphas]
    if include_endpoints:
        out = [("0", 0.0)] + out + [("1", 1.0)]
    return out


def transverse_for(L: float, rule) -> float:
    if callable(rule):
        return float(rule(L))
    if isinstance(rule, str) and rule.endswith("L"):
        return float(rule[:-1] or 1.0) * L
    return float(rule)


@dataclass
class CriterionReport:
    l: Direction
    kappa: float
    c1: float
    c2: float
    entries: list
    inf_product: float
    argmin: dict
    verdict: str
    skipped: list = field(default_factory=list)

    def per_L_min(self) -> dict:
        out = {}
        for e in self.entries:
            out[e["L"]] = min(out.get(e["L"], math.inf), e["product"])
        return out

    def to_record(self) -> dict:
        return {
            "l": list(self.l.coords), "kappa": self.kappa, "c1": self.c1, "c2": self.c2,
            "entries": self.entries, "inf_product": self.inf_product, "argmin": self.argmin,
            "verdict": self.verdict, "skipped": self.skipped,
        }


def effective_criterion(law: EnvironmentLaw, l: Direction, L_grid, ltilde_rule="3L",
                        alphas=DEFAULT_ALPHAS, c1: float = 1.0, c2: float = 5.0,
                        n_env: int = 1000, seed: int = 0,
                        cfg: SolverConfig = DEFAULT_CONFIG, workers: int = 1) -> CriterionReport:
    """Evaluate c1 (log 1/kappa)^(3(d-1)) Lt^(d-1) L^(3(d-1)+1) E rho^a over a grid.

    "satisfied" means the smallest product plus its CI half width is below 1.
    """
    d = law.d
    entries, skipped = [], []
    for L in L_grid:
        Lt = transverse_for(L, ltilde_rule)
        if not (L >= c2 and 3 * math.sqrt(d) <= Lt < L ** 3):
            skipped.append({"L": L, "Ltilde": Lt})
            continue
        spec, box = _criterion_box(law, l, L, Lt)
        sample = sample_exits(law, box, n_env, seed, cfg, workers)
        pre = prefactor(c1, law.kappa, d, L, Lt)
        for label, a in a_values(L, alphas):
            mean, ci = moment_from_log_rhos(sample.log_rho, a)
            entries.append({
                "L": L, "Ltilde": Lt, "a": a, "a_label": label, "n_env": len(sample.p_plus),
                "n_excluded": sample.n_excluded, "mean": mean, "ci": ci,
                "prefactor": pre, "product": pre * mean, "product_ci": pre * ci,
            })
    if not entries:
        raise ValueError("box grid is empty after constraint filtering")
    best = min(entries, key=lambda e: e["product"])
    verdict = ("satisfied" if best["product"] + best["product_ci"] < 1.0
               else "not_satisfied_at_this_scale")
    return CriterionReport(l, law.kappa, c1, c2, entries, best["product"],
                           {k: best[k] for k in ("L", "Ltilde", "a", "a_label")}, verdict, skipped)


# --- decay fits ---------------------------------------------------------------

@dataclass
class DecayFit:
    exponent: float
    levels: list
    counts: list
    n: list
    slope: float
    slope_ci: float
    intercept: float
    n_zero_counts: int
    n_saturated: int
    fit_available: bool
    note: str = ""
    extra: dict = field(default_factory=dict)

    @property
    def freqs(self) -> list:
        return [c / m if m else float("nan") for c, m in zip(self.counts, self.n)]

    @property
    def log_freqs(self) -> list:
        return [math.log(f) if f > 0 else float("-inf") for f in self.freqs]

    @property
    def delta(self) -> float:
        """Decay rate: log P ~ intercept - delta L^exponent."""
        return self.slope

    def display_upper(self) -> list:
        """3/n upper bounds shown for zero-count levels (never used in the fit)."""
        return [3.0 / m if c == 0 else None for c, m in zip(self.counts, self.n)]

    def to_record(self) -> dict:
        return {
            "exponent": self.exponent, "levels": list(self.levels), "counts": list(self.counts),
            "n": list(self.n), "freqs": self.freqs, "slope": self.slope, "slope_ci": self.slope_ci,
            "intercept": self.intercept, "n_zero_counts": self.n_zero_counts,
            "n_saturated": self.n_saturated, "fit_available": self.fit_available,
            "note": self.note, "extra": self.extra,
        }


def fit_stretched_decay(levels, counts, n, exponent: float, extra: dict | None = None) -> DecayFit:
    """Weighted least squares of log(freq) = intercept - delta L^exponent.

    Only levels with 0 < count < n enter; weights are the inverse binomial
    delta-method variances n p / (1 - p) of log(freq).
    """
    levels = [float(x) for x in levels]
    if any(b <= a for a, b in zip(levels, levels[1:])):
        raise ValueError("levels must be strictly increasing")
    counts = [int(c) for c in counts]
    n = [int(m) for m in n]
    zero = sum(1 for c in counts if c == 0)
    sat = sum(1 for c, m in zip(counts, n) if c == m and m > 0)
    use = [i for i, (c, m) in enumerate(zip(counts, n)) if 0 < c < m]
    base = dict(exponent=exponent, levels=levels, counts=counts, n=n, n_zero_counts=zero,
                n_saturated=sat, extra=extra or {})
    if len(use) < 2:
        if sat == len(levels):
            note = "every level saturated; fit refused"
        elif zero == len(levels):
            note = "no events at any level; fit unavailable"
        else:
            note = f"only {len(use)} informative level(s); fit unavailable"
        return DecayFit(slope=float("nan"), slope_ci=float("nan"), intercept=float("nan"),
                        fit_available=False, note=note, **base)
    x = np.array([levels[i] ** exponent for i in use])
    p = np.array([counts[i] / n[i] for i in use])
    y = np.log(p)
    w = np.array([counts[i] for i in use]) / (1.0 - p)
    X = np.column_stack([np.ones_like(x), -x])
    XtW = X.T * w
    cov = np.linalg.inv(XtW @ X)
    coef = cov @ (XtW @ y)
    return DecayFit(slope=float(coef[1]), slope_ci=float(Z95 * math.sqrt(cov[1, 1])),
                    intercept=float(coef[0]), fit_available=True, **base)


def tgamma_backexit_fit(law: EnvironmentLaw, l_prime: Direction, gamma: float, b: float,
                        L_grid, n_walks: int, seed: int) -> DecayFit:
    """Annealed back-exit frequency of the slab {-bL < x.l' < L}, fit against L^gamma."""
    if n_walks < 1:
        raise ValueError("n_walks must be positive")
    if not 0 < gamma <= 1:
        raise ValueError("gamma must lie in (0, 1]")
    if not b > 0:
        raise ValueError("b must be positive")
    counts, capped = [], []
    for L in L_grid:
        c = annealed_counts(law, StopRule.for_slab(Slab(l_prime, b, L)), n_walks,
                            rng.derive_seed(seed, "tgamma", repr(float(L))))
        counts.append(c["slab_back"])
        capped.append(c["step_cap"])
    return fit_stretched_decay(L_grid, counts, [n_walks] * len(counts), gamma,
                               extra={"step_capped": capped, "b": b})


def shortest_plus_path(region: Region, start_index: int) -> int:
    """Fewest steps from the start to a target boundary site through the interior."""
    nbr = region.neighbor_table
    n = len(region.interior)
    dist = np.full(n, -1, dtype=np.int64)
    dist[start_index] = 0
    q = deque([start_index])
    while q:
        i = q.popleft()
        for j in nbr[i]:
            if j >= n:
                if region.target[j - n]:
                    return int(dist[i] + 1)
            elif dist[j] < 0:
                dist[j] = dist[i] + 1
                q.append(j)
    raise ValueError("target boundary unreachable")


def atypical_tail(law: EnvironmentLaw, v_hat: Direction, beta: float, c: float, zeta: float,
                  L_grid, n_env: int, seed: int, gamma: float | None = None,
                  c_d: float | None = None, cfg: SolverConfig = DEFAULT_CONFIG,
                  workers: int = 1) -> DecayFit:
    """Frequency of {p_plus <= exp(-c L^beta)} on the 3L-transverse boxes, fit against L^zeta.

    The ellipticity floor kappa^(c(d) L) is reported per level; by default
    c(d) L is the exact shortest path length from the origin to the
    positive face, which makes it a guaranteed lower bound on p_plus.
    """
    if not (0 < beta < 1 and c > 0 and zeta > 0):
        raise ValueError("need beta in (0,1), c > 0, zeta > 0")
    counts, n_used, floors, thresholds, below = [], [], [], [], []
    for L in L_grid:
        _, box = _criterion_box(law, v_hat, L, 3.0 * L)
        threshold = math.exp(-c * L ** beta)
        path_len = shortest_plus_path(box, box.index_of(np.zeros(box.d, dtype=np.int64)))
        floor_exp = c_d * L if c_d is not None else path_len
        floor = law.kappa ** floor_exp
        sample = sample_exits(law, box, n_env, seed, cfg, workers)
        counts.append(int(np.sum(sample.p_plus <= threshold)))
        n_used.append(len(sample.p_plus))
        floors.append(floor)
        thresholds.append(threshold)
        below.append(threshold < floor)
    extra = {"thresholds": thresholds, "ellipticity_floor": floors,
             "threshold_below_floor": below, "beta": beta, "c": c}
    if gamma is not None:
        try:
            extra["zeta_bound_f_beta"] = theory.f_beta(gamma, law.d, beta)
        except theory.DomainError:
            extra["zeta_bound_f_beta"] = None
        extra["zeta_admissible"] = (extra["zeta_bound_f_beta"] is not None
                                    and zeta < extra["zeta_bound_f_beta"])
    return fit_stretched_decay(L_grid, counts, n_used, zeta, extra=extra)


def seed_estimate_check(law: EnvironmentLaw, v_hat: Direction, beta0: float, beta: float,
                        rho_coef: float, L_grid, n_env: int, seed: int, gamma: float,
                        cfg: SolverConfig = DEFAULT_CONFIG, workers: int = 1) -> DecayFit:
    """Frequency of {X_(beta0, L) >= rho_coef L^beta}, fit against L^((beta+beta0-1) ^ gamma beta0)."""
    exponent = theory.seed_exponent(gamma, beta0, beta)
    if not rho_coef > 0:
        raise ValueError("rho_coef must be positive")
    counts, n_used, thresholds = [], [], []
    for L in L_grid:
        rb = build_renorm_boxes(v_hat, beta0, L)
        start_idx = np.array([rb.b2.index_of(s) for s in rb.b1])
        pmin = _map_envs(_hit_chunk, law, rb.b2, start_idx, n_env, seed, cfg, workers)
        bad = np.isnan(pmin)
        _check_exclusions(bad, "hitting")
        xs = -np.log(pmin[~bad])
        t = rho_coef * L ** beta
        counts.append(int(np.sum(xs >= t)))
        n_used.append(len(xs))
        thresholds.append(t)
    return fit_stretched_decay(L_grid, counts, n_used, exponent,
                               extra={"thresholds": thresholds, "beta0": beta0, "beta": beta})


# --- band decomposition ------------------------------------------------------

@dataclass
class BandDecomposition:
    gamma: float
    a: float
    L: float
    ks: list
    betas: list
    thresholds: list
    names: list
    counts: list
    partial_sums: list
    total: float
    n_used: int

    def to_record(self) -> dict:
        return dict(self.__dict__)


def band_thresholds(L: float, gamma: float, betas, ks) -> list:
    """[exp(-k0 L^gamma), exp(-k1 L^beta1), ..., exp(-k_(n+1) L^beta_(n+1))]."""
    exps = [gamma] + list(betas)
    return [math.exp(-k * L ** e) for k, e in zip(ks, exps)]


def decompose_rho_expectation(law: EnvironmentLaw, spec: BoxSpec, a: float, gamma: float,
                              betas, ks, n_env: int, seed: int,
                              cfg: SolverConfig = DEFAULT_CONFIG,
                              workers: int = 1) -> BandDecomposition:
    """Split the sample mean of rho^a by the band of p_plus.

    Bands are half-open [lower, upper): (I) p >= t0, (II) t1 <= p < t0,
    (III_j) t_(j+1) <= p < t_j, and a residual band p < t_(n+1).
    """
    betas = [float(b) for b in betas]
    ks = [float(k) for k in ks]
    if not betas or abs(betas[-1] - 1.0) > 1e-15:
        raise ValueError("the last beta must equal 1")
    if not all(x < y for x, y in zip(betas, betas[1:])) or betas[0] <= theory.lower_bound(gamma):
        raise ValueError("betas must satisfy 1/(1+gamma) < beta_1 < ... < beta_(n+1) = 1")
    if len(ks) != len(betas) + 1 or min(ks) <= 0:
        raise ValueError("need positive k_0, ..., k_(n+1)")
    L = spec.scale
    t = band_thresholds(L, gamma, betas, ks)
    if not all(x > y for x, y in zip(t, t[1:])):
        raise ValueError(f"band boundaries are not strictly decreasing at L = {L}")
    box = build_box(spec, require_origin=True)
    sample = sample_exits(law, box, n_env, seed, cfg, workers)
    vals = np.exp(a * sample.log_rho)
    p = sample.p_plus
    m = len(p)
    edges = [math.inf] + t + [0.0]
    names = ["I", "II"] + [f"III_{j}" for j in range(1, len(betas))] + ["residual"]
    counts, sums = [], []
    for upper, lower in zip(edges, edges[1:]):
        if upper == math.inf:
            sel = p >= lower
        elif lower == 0.0:
            sel = p < upper
        else:
            sel = (p >= lower) & (p < upper)
        counts.append(int(sel.sum()))
        sums.append(math.fsum(vals[sel]) / m)
    return BandDecomposition(gamma, a, L, ks, betas, t, names, counts, sums,
                             math.fsum(vals) / m, m)
