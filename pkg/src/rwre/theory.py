"""Closed-form exponents and the beta-ladder construction."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

MAX_LADDER_STEPS = 10 ** 4


class DomainError(ValueError):
    pass


def _check_gamma(gamma: float) -> None:
    if not 0 < gamma < 1:
        raise DomainError(f"gamma must lie in (0, 1), got {gamma}")


def _check_d(d: int) -> None:
    if int(d) != d or d < 2:
        raise DomainError(f"dimension must be an integer >= 2, got {d}")


def gamma_d(d: int) -> float:
    """(sqrt(3d^2 - d) - d) / (2d - 1), the threshold above which 2 gamma exceeds x*."""
    _check_d(d)
    return (math.sqrt(3.0 * d * d - d) - d) / (2.0 * d - 1.0)


GAMMA_INFINITY = (math.sqrt(3.0) - 1.0) / 2.0


def lower_bound(gamma: float) -> float:
    return 1.0 / (1.0 + gamma)


def f_slope(gamma: float, d: int) -> float:
    return d * (1.0 + gamma) / gamma


def f_beta(gamma: float, d: int, beta: float) -> float:
    """d (beta - 1/(1+gamma)) (1+gamma)/gamma on [1/(1+gamma), 1]."""
    _check_gamma(gamma)
    _check_d(d)
    lo = lower_bound(gamma)
    if not lo - 1e-15 <= beta <= 1.0 + 1e-15:
        raise DomainError(f"beta = {beta} outside [{lo}, 1]")
    return d * (beta - lo) * (1.0 + gamma) / gamma


def big_F(gamma: float, d: int, x: float, strict: bool = True) -> float:
    """F(x) = gamma + f(x).

    With ``strict=False`` the affine formula is evaluated outside f's domain,
    which is only meant for diagnostics of infeasible ladders.
    """
    if strict:
        return gamma + f_beta(gamma, d, x)
    _check_gamma(gamma)
    _check_d(d)
    return gamma + d * (x - lower_bound(gamma)) * (1.0 + gamma) / gamma


def iterate_F(gamma: float, d: int, x0: float, j_max: int, strict: bool = True) -> list:
    """[x0, F(x0), F(F(x0)), ...] up to j_max applications.

    Stops after the first value above 1 or (when strict) below 1/(1+gamma).
    """
    lo = lower_bound(gamma)
    seq = [float(x0)]
    for _ in range(j_max):
        x = seq[-1]
        if x > 1.0 or (strict and x < lo):
            break
        seq.append(big_F(gamma, d, x, strict=False))
    return seq


def fixed_point(gamma: float, d: int) -> float:
    _check_gamma(gamma)
    _check_d(d)
    return (d - gamma ** 2) / ((1.0 + gamma) * d - gamma)


@dataclass
class LadderResult:
    gamma: float
    d: int
    beta0: float
    betas: list
    n: int | None
    iterates: list
    feasible: bool
    diagnostics: dict = field(default_factory=dict)

    def to_record(self) -> dict:
        return {
            "gamma": self.gamma, "d": self.d, "beta0": self.beta0, "betas": list(self.betas),
            "n": self.n, "iterates": list(self.iterates), "feasible": self.feasible,
            "diagnostics": self.diagnostics,
        }


def a_posteriori_checks(gamma: float, d: int, betas) -> list:
    """Each line of the ladder inequalities as (description, holds)."""
    lo = lower_bound(gamma)
    checks = []
    for j, b in enumerate(betas, start=1):
        upper = 2 * gamma if j == 1 else big_F(gamma, d, betas[j - 2], strict=False)
        label = "2*gamma" if j == 1 else f"gamma+f(beta_{j - 1})"
        checks.append((f"1/(1+gamma) < beta_{j} < {label}", lo < b < upper))
    if betas:
        checks.append((f"1 < gamma+f(beta_{len(betas)})",
                       1.0 < big_F(gamma, d, betas[-1], strict=False)))
    return checks


def literal_stop_index(gamma: float, d: int, j_max: int = MAX_LADDER_STEPS) -> int | None:
    """inf{j : F^(j)(gamma) > 1} read literally, affine F; None if never."""
    x = gamma
    for j in range(1, j_max + 1):
        x = big_F(gamma, d, x, strict=False)
        if x > 1.0:
            return j
        if x < -1e6:
            return None
    return None


def build_ladder(gamma: float, d: int, safety: float = 0.01,
                 literal_stop: bool = False) -> LadderResult:
    """Choose 1/(1+g) < beta_1 < ... < beta_n bridging from 2 gamma to 1.

    beta_1 backs off ``safety`` of the way from 2 gamma toward 1/(1+gamma);
    beta_j does the same from F(beta_(j-1)).  The ladder ends at the first
    chosen beta_n with gamma + f(beta_n) > 1.
    """
    _check_gamma(gamma)
    _check_d(d)
    if not 0 < safety < 1:
        raise DomainError("safety must lie in (0, 1)")
    lo = lower_bound(gamma)
    xs = fixed_point(gamma, d)
    beta0 = 2.0 * gamma
    diagnostics = {"x_star": xs, "lower_bound": lo, "safety": safety}
    if literal_stop:
        diagnostics["literal_n"] = literal_stop_index(gamma, d)
    trial = iterate_F(gamma, d, beta0, 8, strict=False)
    if beta0 <= lo or beta0 <= xs:
        diagnostics["reason"] = ("2*gamma <= 1/(1+gamma)" if beta0 <= lo else "2*gamma <= x*")
        diagnostics["iterates_decreasing"] = all(b < a for a, b in zip(trial, trial[1:]))
        return LadderResult(gamma, d, beta0, [], None, trial, False, diagnostics)
    if literal_stop and diagnostics["literal_n"] is None:
        diagnostics["reason"] = "literal stopping index F^(j)(gamma) > 1 never reached"
        return LadderResult(gamma, d, beta0, [], None, trial, False, diagnostics)

    betas = []
    uppers = [beta0]
    # exponents live in [1/(1+gamma), 1]; for gamma > 1/2 the bound 2 gamma exceeds 1
    upper = min(beta0, 1.0)
    n = None
    for j in range(1, MAX_LADDER_STEPS + 1):
        b = upper - safety * (upper - lo)
        betas.append(b)
        nxt = big_F(gamma, d, b)
        uppers.append(nxt)
        if nxt > 1.0:
            n = j
            break
        upper = nxt
    checks = a_posteriori_checks(gamma, d, betas) if n is not None else []
    diagnostics["checks"] = [[label, bool(ok)] for label, ok in checks]
    diagnostics["upper_bounds"] = uppers
    iterates = iterate_F(gamma, d, beta0, len(betas) + 1)
    feasible = n is not None and all(ok for _, ok in checks)
    if n is None:
        diagnostics["reason"] = "no termination within the iteration budget"
    return LadderResult(gamma, d, beta0, betas, n, iterates, feasible, diagnostics)


def seed_exponent(gamma: float, beta0: float, beta: float) -> float:
    """min(beta + beta0 - 1, gamma * beta0)."""
    if not 0.5 < beta0 <= beta < 1:
        raise DomainError("need 1/2 < beta0 <= beta < 1")
    if not 0 < gamma <= 1:
        raise DomainError("gamma must lie in (0, 1]")
    return min(beta + beta0 - 1.0, gamma * beta0)


def interpolation_f(beta0: float, f0_at_beta0: float, d: int, beta: float) -> float:
    """Line through (beta0, f0(beta0)) and (1, d)."""
    if not 0 < beta0 < 1:
        raise DomainError("beta0 must lie in (0, 1)")
    if not beta0 <= beta <= 1:
        raise DomainError(f"beta = {beta} outside [{beta0}, 1]")
    if beta == 1.0:
        return float(d)
    return f0_at_beta0 + (d - f0_at_beta0) * (beta - beta0) / (1.0 - beta0)


def f0_eps(gamma: float, beta: float) -> float:
    return beta - lower_bound(gamma)


def f_eps(gamma: float, d: int, eps: float, beta: float) -> float:
    """Interpolation between eps at 1/(1+gamma) + eps and d at 1."""
    _check_gamma(gamma)
    _check_d(d)
    lo = lower_bound(gamma) + eps
    if not eps > 0 or lo >= 1:
        raise DomainError("eps must be positive with 1/(1+gamma) + eps < 1")
    if not lo - 1e-15 <= beta <= 1.0 + 1e-15:
        raise DomainError(f"beta = {beta} outside [{lo}, 1]")
    num = (1.0 + gamma) * (1.0 - eps / d)
    den = gamma - eps - gamma * eps
    return d * (beta - lower_bound(gamma) - eps) * num / den + eps
