"""Exact quenched exit distributions from finite lattice regions.

The walk killed on leaving a region is an absorbing chain.  Exit laws are
obtained from the occupation measure of the start site (one adjoint solve),
hitting probabilities of a target set from one forward solve over all starts.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numba
import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .geometry import BoxSpec, Region, build_box

PROB_FLOOR = 1e-300
DENSE_LIMIT = 5000


class SolverError(RuntimeError):
    def __init__(self, message, residual=float("nan")):
        super().__init__(message)
        self.residual = residual


@dataclass(frozen=True)
class SolverConfig:
    tolerance: float = 1e-12
    max_sweeps: int = 10 ** 6
    mode: str = "sweeps"  # sweeps | dense | sparse

    def __post_init__(self):
        if not self.tolerance > 0:
            raise ValueError("tolerance must be positive")
        if self.mode not in ("sweeps", "dense", "sparse"):
            raise ValueError(f"unknown solver mode {self.mode!r}")


DEFAULT_CONFIG = SolverConfig()


@numba.njit(cache=True)
def _adjoint_sweeps(nbr, P, start, tol, max_sweeps):
    n, m = nbr.shape
    g = np.zeros(n)
    for it in range(1, max_sweeps + 1):
        change = 0.0
        for i in range(n):
            acc = 1.0 if i == start else 0.0
            for k in range(m):
                j = nbr[i, k]
                if j < n:
                    acc += g[j] * P[j, k ^ 1]
            diff = abs(acc - g[i])
            if diff > change:
                change = diff
            g[i] = acc
        if change <= tol:
            res = 0.0
            for i in range(n):
                acc = 1.0 if i == start else 0.0
                for k in range(m):
                    j = nbr[i, k]
                    if j < n:
                        acc += g[j] * P[j, k ^ 1]
                r = abs(acc - g[i])
                if r > res:
                    res = r
            if res <= tol:
                return g, res, it
    return g, change, -1


@numba.njit(cache=True)
def _forward_sweeps(nbr, P, bval, tol, max_sweeps):
    n, m = nbr.shape
    h = np.zeros(n)
    for it in range(1, max_sweeps + 1):
        change = 0.0
        for i in range(n):
            acc = 0.0
            for k in range(m):
                j = nbr[i, k]
                acc += P[i, k] * (h[j] if j < n else bval[j - n])
            diff = abs(acc - h[i])
            if diff > change:
                change = diff
            h[i] = acc
        if change <= tol:
            res = 0.0
            for i in range(n):
                acc = 0.0
                for k in range(m):
                    j = nbr[i, k]
                    acc += P[i, k] * (h[j] if j < n else bval[j - n])
                r = abs(acc - h[i])
                if r > res:
                    res = r
            if res <= tol:
                return h, res, it
    return h, change, -1


@numba.njit(cache=True)
def _push_to_boundary(nbr, P, g, n_boundary):
    n, m = nbr.shape
    out = np.zeros(n_boundary)
    for i in range(n):
        for k in range(m):
            j = nbr[i, k]
            if j >= n:
                out[j - n] += g[i] * P[i, k]
    return out


def _interior_matrix(nbr, P, sparse: bool):
    n, m = nbr.shape
    rows = np.repeat(np.arange(n), m)
    cols = nbr.ravel()
    vals = P.ravel()
    keep = cols < n
    Q = sp.csr_matrix((vals[keep], (rows[keep], cols[keep])), shape=(n, n))
    A = sp.identity(n, format="csr") - Q
    return A if sparse else A.toarray()


def _check_kernels(P, n, m):
    if P.shape != (n, m):
        raise ValueError(f"kernel array has shape {P.shape}, expected {(n, m)}")


def occupation_measure(nbr, P, start, cfg=DEFAULT_CONFIG):
    """Expected visits g(x) to each interior site before exit, from ``start``."""
    n, m = nbr.shape
    P = np.ascontiguousarray(P, dtype=np.float64)
    _check_kernels(P, n, m)
    if cfg.mode == "sweeps":
        g, res, it = _adjoint_sweeps(nbr, P, int(start), cfg.tolerance, int(cfg.max_sweeps))
        if it < 0:
            raise SolverError(f"no convergence in {cfg.max_sweeps} sweeps (residual {res:.3g})", res)
    else:
        if cfg.mode == "dense" and n > DENSE_LIMIT:
            raise SolverError(f"dense mode limited to {DENSE_LIMIT} interior sites")
        A = _interior_matrix(nbr, P, sparse=cfg.mode == "sparse")
        e = np.zeros(n)
        e[start] = 1.0
        if cfg.mode == "sparse":
            g = spla.spsolve(A.T.tocsc(), e)
            res = float(np.max(np.abs(A.T @ g - e)))
        else:
            g = np.linalg.solve(A.T, e)
            res = float(np.max(np.abs(A.T @ g - e)))
    return g, res


def hitting_probabilities(nbr, P, target, cfg=DEFAULT_CONFIG):
    """h(x) = P_x(exit through the flagged boundary sites) for every interior x."""
    n, m = nbr.shape
    P = np.ascontiguousarray(P, dtype=np.float64)
    _check_kernels(P, n, m)
    bval = np.asarray(target, dtype=np.float64)
    if cfg.mode == "sweeps":
        h, res, it = _forward_sweeps(nbr, P, bval, cfg.tolerance, int(cfg.max_sweeps))
        if it < 0:
            raise SolverError(f"no convergence in {cfg.max_sweeps} sweeps (residual {res:.3g})", res)
        return h, res
    if cfg.mode == "dense" and n > DENSE_LIMIT:
        raise SolverError(f"dense mode limited to {DENSE_LIMIT} interior sites")
    A = _interior_matrix(nbr, P, sparse=cfg.mode == "sparse")
    rows = np.repeat(np.arange(n), m)
    cols = nbr.ravel()
    out = cols >= n
    rhs = np.zeros(n)
    np.add.at(rhs, rows[out], P.ravel()[out] * bval[cols[out] - n])
    h = spla.spsolve(A.tocsc(), rhs) if cfg.mode == "sparse" else np.linalg.solve(A, rhs)
    res = float(np.max(np.abs(A @ h - rhs)))
    return h, res


@dataclass(frozen=True, eq=False)
class ExitDistribution:
    """Exit law from a region; ``probs`` is aligned with ``region.boundary``."""

    region: Region
    probs: np.ndarray
    p_plus: float
    p_other: float
    solver_residual: float

    @property
    def rho(self) -> float:
        return self.p_other / self.p_plus

    @property
    def log_rho(self) -> float:
        return math.log(self.p_other) - math.log(self.p_plus)

    def as_dict(self) -> dict:
        return {tuple(int(c) for c in s): float(p) for s, p in zip(self.region.boundary, self.probs)}


@dataclass(frozen=True)
class ExitProblem:
    environment: object
    region: Region
    start: tuple = None


def exit_distribution_from_kernels(region: Region, P, start_index: int,
                                   cfg: SolverConfig = DEFAULT_CONFIG) -> ExitDistribution:
    nbr = region.neighbor_table
    g, res = occupation_measure(nbr, P, start_index, cfg)
    probs = np.maximum(_push_to_boundary(nbr, np.ascontiguousarray(P, dtype=np.float64), g,
                                         len(region.boundary)), 0.0)
    p_plus = math.fsum(probs[region.target])
    p_other = math.fsum(probs[~region.target])
    if p_plus < PROB_FLOOR:
        raise SolverError(f"exit probability through the target {p_plus:.3g} below floor", res)
    return ExitDistribution(region, probs, p_plus, p_other, res)


def exit_distribution(problem: ExitProblem, cfg: SolverConfig = DEFAULT_CONFIG) -> ExitDistribution:
    region = problem.region
    start = np.zeros(region.d, dtype=np.int64) if problem.start is None else problem.start
    if not region.contains(start)[0]:
        raise ValueError(f"start {tuple(np.asarray(start).tolist())} is not an interior site")
    P = problem.environment.kernels(region.interior)
    return exit_distribution_from_kernels(region, P, region.index_of(start), cfg)


def p_plus(env, spec: BoxSpec, start=None, cfg: SolverConfig = DEFAULT_CONFIG) -> float:
    box = build_box(spec, require_origin=start is None)
    return exit_distribution(ExitProblem(env, box, start), cfg).p_plus


def rho(env, spec: BoxSpec, cfg: SolverConfig = DEFAULT_CONFIG) -> float:
    box = build_box(spec, require_origin=True)
    return exit_distribution(ExitProblem(env, box), cfg).rho


def _min_target_probability(env, region: Region, starts, cfg) -> tuple:
    P = env.kernels(region.interior)
    h, res = hitting_probabilities(region.neighbor_table, P, region.target, cfg)
    starts = np.atleast_2d(starts)
    inside = region.contains(starts)
    if not np.all(inside):
        raise ValueError("start set is not contained in the region")
    idx = np.array([region.index_of(s) for s in starts])
    vals = h[idx]
    j = int(np.argmin(vals))
    return float(vals[j]), tuple(int(c) for c in starts[j]), res


def x_stat(env, rb, cfg: SolverConfig = DEFAULT_CONFIG, return_argmin: bool = False):
    """-log of the worst-case probability, over B1 starts, of leaving B2 via the star boundary."""
    pmin, argmin, _ = _min_target_probability(env, rb.b2, rb.b1, cfg)
    if pmin < PROB_FLOOR:
        raise SolverError(f"minimum star-exit probability {pmin:.3g} below floor")
    value = -math.log(pmin)
    return (value, argmin) if return_argmin else value


def worst_plus_probability(env, tb, cfg: SolverConfig = DEFAULT_CONFIG) -> float:
    return _min_target_probability(env, tb.b2, tb.b1, cfg)[0]


def is_bad(env, tb, cfg: SolverConfig = DEFAULT_CONFIG) -> bool:
    """A tile anchor is bad when the worst forward-exit probability is below 1/2."""
    return worst_plus_probability(env, tb, cfg) < 0.5


def exit_monte_carlo(env, region: Region, start, n_walks: int, seed: int,
                     chunk: int = 1 << 16, max_steps: int = 10 ** 7) -> np.ndarray:
    """Empirical exit counts per boundary site from ``n_walks`` direct walks.

    Independent of the solver; used as an oracle.  Chunks are seeded by
    index so results do not depend on how the work is split.
    """
    from . import rng

    nbr = region.neighbor_table
    n, m = nbr.shape
    P = env.kernels(region.interior)
    cum = np.cumsum(P, axis=1)
    cum[:, -1] = 1.0
    s = region.index_of(start)
    counts = np.zeros(len(region.boundary), dtype=np.int64)
    done = 0
    c = 0
    while done < n_walks:
        size = min(chunk, n_walks - done)
        key = rng.derive_seed(seed, "mc-chunk", c)
        state = np.full(size, s, dtype=np.int64)
        walker = np.arange(size, dtype=np.int64)
        keys = rng.derive_seeds(key, walker)
        step = 0
        active = np.arange(size)
        while len(active):
            if step >= max_steps:
                raise SolverError("monte carlo walk exceeded the step cap")
            u = rng.uniforms(keys[active], np.full(len(active), step))
            cur = state[active]
            k = (u[:, None] > cum[cur]).sum(axis=1)
            nxt = nbr[cur, k]
            state[active] = nxt
            active = active[nxt < n]
            step += 1
        np.add.at(counts, state - n, 1)
        done += size
        c += 1
    return counts
