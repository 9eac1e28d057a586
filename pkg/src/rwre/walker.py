"""Quenched and annealed path simulation, regeneration and direction statistics.

Step i of a walk with key k uses the uniform ``rng.uniforms(k, i)`` and the
kernel of the current site.  Single walks and vectorized batches go through
the same engine, so a batch of annealed walks reproduces exactly the walks
``simulate_annealed`` would return one at a time.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from . import rng
from .environment import EnvironmentLaw, kernels_at, law_seeds
from .geometry import Direction, LatticeBox, Slab, unit_steps

DEFAULT_STEP_CAP = 10 ** 8

STOP_REASONS = ("slab_front", "slab_back", "box_plus", "box_other", "level_reached", "step_cap")
_CODE = {name: i for i, name in enumerate(STOP_REASONS)}
_RUNNING = -1


@dataclass(frozen=True)
class StopRule:
    kind: str
    slab: Slab = None
    box: LatticeBox = None
    direction: Direction = None
    level: float = 0.0
    overshoot: float = 0.0
    n_steps: int = 0
    step_cap: int = DEFAULT_STEP_CAP

    def __post_init__(self):
        if self.kind not in ("slab", "box", "level", "steps"):
            raise ValueError(f"unknown stop rule {self.kind!r}")
        if self.step_cap < 1:
            raise ValueError("step cap must be at least 1")
        need = {"slab": self.slab, "box": self.box, "level": self.direction}
        if self.kind in need and need[self.kind] is None:
            raise ValueError(f"{self.kind} stop rule is missing its parameter")
        if self.kind == "steps" and self.n_steps < 0:
            raise ValueError("n_steps must be nonnegative")

    @classmethod
    def for_slab(cls, slab: Slab, step_cap: int = DEFAULT_STEP_CAP) -> "StopRule":
        return cls("slab", slab=slab, step_cap=step_cap)

    @classmethod
    def for_box(cls, box: LatticeBox, step_cap: int = DEFAULT_STEP_CAP) -> "StopRule":
        return cls("box", box=box, step_cap=step_cap)

    @classmethod
    def for_level(cls, l: Direction, u: float, overshoot: float = 0.0,
                  step_cap: int = DEFAULT_STEP_CAP) -> "StopRule":
        return cls("level", direction=l, level=u, overshoot=overshoot, step_cap=step_cap)

    @classmethod
    def for_steps(cls, n: int) -> "StopRule":
        return cls("steps", n_steps=n, step_cap=max(n, 1))


@dataclass(frozen=True, eq=False)
class Path:
    sites: np.ndarray
    seed: int
    stop_reason: str

    def __len__(self):
        return len(self.sites)

    @property
    def terminal(self) -> np.ndarray:
        return self.sites[-1]

    def to_csv(self) -> str:
        d = self.sites.shape[1]
        lines = ["step," + ",".join(f"x{i + 1}" for i in range(d))]
        lines += [f"{n}," + ",".join(str(int(c)) for c in s) for n, s in enumerate(self.sites)]
        return "\n".join(lines) + "\n"


@dataclass(frozen=True, eq=False)
class WalkBatch:
    terminal: np.ndarray
    reasons: np.ndarray  # codes into STOP_REASONS
    n_steps: np.ndarray
    paths: list = None

    def count(self, reason: str) -> int:
        return int(np.sum(self.reasons == _CODE[reason]))


def _classify(stop: StopRule, pos: np.ndarray, t: int) -> np.ndarray:
    codes = np.full(len(pos), _RUNNING, dtype=np.int64)
    if stop.kind == "slab":
        p = pos @ stop.slab.direction.vector
        codes[p <= -stop.slab.b * stop.slab.L] = _CODE["slab_back"]
        codes[p >= stop.slab.L] = _CODE["slab_front"]
    elif stop.kind == "box":
        out = ~stop.box.contains(pos)
        if np.any(out):
            plus = np.zeros(len(pos), dtype=bool)
            if len(stop.box.boundary_plus):
                from .geometry import _contains
                plus[out] = _contains(stop.box.boundary_plus, pos[out])
            codes[out & plus] = _CODE["box_plus"]
            codes[out & ~plus] = _CODE["box_other"]
    elif stop.kind == "level":
        p = pos @ stop.direction.vector
        codes[p >= stop.level + stop.overshoot] = _CODE["level_reached"]
    if stop.kind == "steps" and t >= stop.n_steps:
        codes[:] = _CODE["step_cap"]
    elif t >= stop.step_cap:
        codes[codes == _RUNNING] = _CODE["step_cap"]
    return codes


def run_walks(kernel_fn, starts: np.ndarray, step_keys: np.ndarray, stop: StopRule,
              record: bool = False) -> WalkBatch:
    """Advance walkers until each meets the stop rule.

    ``kernel_fn(walker_ids, sites)`` returns the kernels seen by the listed
    walkers at their current sites.
    """
    pos = np.array(starts, dtype=np.int64, copy=True)
    n, d = pos.shape
    steps = unit_steps(d)
    reasons = np.full(n, _RUNNING, dtype=np.int64)
    n_steps = np.zeros(n, dtype=np.int64)
    history = [pos.copy()] if record else None
    active = np.arange(n)
    t = 0
    if stop.kind == "slab" and np.any(_classify(stop, pos, -1) != _RUNNING):
        raise ValueError("start lies outside the slab")
    if stop.kind == "box" and not np.all(stop.box.contains(pos)):
        raise ValueError("start is not an interior site of the box")
    while True:
        codes = _classify(stop, pos[active], t)
        done = codes != _RUNNING
        if np.any(done):
            reasons[active[done]] = codes[done]
            n_steps[active[done]] = t
            active = active[~done]
        if len(active) == 0:
            break
        P = kernel_fn(active, pos[active])
        cum = np.cumsum(P, axis=1)
        cum[:, -1] = 1.0
        u = rng.uniforms(step_keys[active], np.full(len(active), t, dtype=np.int64))
        k = (u[:, None] > cum).sum(axis=1)
        pos[active] += steps[k]
        t += 1
        if record:
            history.append(pos.copy())
    paths = None
    if record:
        hist = np.stack(history)
        paths = [hist[: n_steps[i] + 1, i, :].copy() for i in range(n)]
    return WalkBatch(pos, reasons, n_steps, paths)


def _step_key(seed: int) -> int:
    return rng.derive_seed(seed, "steps")


def simulate_quenched(env, start, stop: StopRule, seed: int) -> Path:
    """One walk in the fixed environment ``env``; deterministic in (env, seed)."""
    start = np.atleast_2d(np.asarray(start, dtype=np.int64))
    keys = np.array([_step_key(seed)], dtype=np.uint64)
    batch = run_walks(lambda ids, sites: env.kernels(sites), start, keys, stop, record=True)
    return Path(batch.paths[0], seed, STOP_REASONS[batch.reasons[0]])


def _annealed_keys(seeds):
    seeds = np.asarray(seeds, dtype=np.uint64)
    env_seeds = rng.combine(seeds, [rng.tag_word("annealed-env")])
    steps = rng.combine(seeds, [rng.tag_word("steps")])
    return env_seeds, steps


def simulate_annealed(law: EnvironmentLaw, start, stop: StopRule, seed: int) -> Path:
    """One walk in a fresh environment drawn from ``seed``: a draw from the annealed law."""
    batch = annealed_batch(law, np.atleast_2d(start), stop, np.array([seed], dtype=np.uint64),
                           record=True)
    return Path(batch.paths[0], seed, STOP_REASONS[batch.reasons[0]])


def walk_seeds(master_seed: int, indices) -> np.ndarray:
    return rng.derive_seeds(master_seed, indices, "walk")


def annealed_batch(law: EnvironmentLaw, starts, stop: StopRule, seeds,
                   record: bool = False) -> WalkBatch:
    """Walk i runs in its own environment derived from ``seeds[i]``."""
    seeds = np.asarray(seeds, dtype=np.uint64)
    starts = np.atleast_2d(np.asarray(starts, dtype=np.int64))
    if len(starts) == 1 and len(seeds) > 1:
        starts = np.repeat(starts, len(seeds), axis=0)
    env_seeds, step_keys = _annealed_keys(seeds)
    env_keys = law_seeds(law, env_seeds)
    return run_walks(lambda ids, sites: kernels_at(law, env_keys[ids], sites),
                     starts, step_keys, stop, record=record)


def annealed_counts(law: EnvironmentLaw, stop: StopRule, n_walks: int, master_seed: int,
                    start=None, chunk: int = 20000) -> dict:
    """Stop-reason counts over ``n_walks`` annealed walks, chunked by walk index."""
    start = np.zeros((1, law.d), dtype=np.int64) if start is None else np.atleast_2d(start)
    counts = {r: 0 for r in STOP_REASONS}
    for lo in range(0, n_walks, chunk):
        idx = np.arange(lo, min(lo + chunk, n_walks))
        batch = annealed_batch(law, start, stop, walk_seeds(master_seed, idx))
        for r in STOP_REASONS:
            counts[r] += batch.count(r)
    return counts


@dataclass(frozen=True)
class RegenerationRecord:
    direction: Direction
    confirmed_times: tuple
    provisional_time: int | None
    confirmation_margin: float


def regeneration_times(path: Path, l: Direction, M: float | None = None) -> RegenerationRecord:
    """Regeneration times visible in a finite path.

    n >= 1 is a candidate when X_n.l is a strict new maximum and the rest of
    the path never goes below it.  A candidate is confirmed only if the path
    ends at least M above it.  Default M is 2 sqrt(d) times the largest
    observed jump of the running maximum.
    """
    sites = path.sites if isinstance(path, Path) else np.asarray(path)
    proj = sites @ l.vector
    N = len(proj) - 1
    if N < 1:
        return RegenerationRecord(l, (), None, 0.0 if M is None else float(M))
    prev_max = np.maximum.accumulate(proj)[:-1]
    suffix_min = np.minimum.accumulate(proj[::-1])[::-1][1:]
    head = proj[1:]
    fresh = prev_max < head
    cand = np.nonzero(fresh & (suffix_min >= head))[0] + 1
    if M is None:
        jumps = (head - prev_max)[fresh]
        M = 2.0 * math.sqrt(sites.shape[1]) * (float(jumps.max()) if len(jumps) else 0.0)
    ok = proj[N] >= proj[cand] + M
    confirmed = tuple(int(n) for n in cand[ok])
    pending = cand[~ok]
    return RegenerationRecord(l, confirmed, int(pending[0]) if len(pending) else None, float(M))


class DirectionEstimate(NamedTuple):
    direction: np.ndarray
    dispersion: float
    n_skipped: int


def asymptotic_direction(paths) -> DirectionEstimate:
    """Normalized mean of X_N/|X_N| and the mean angle to it.

    Accepts Path objects or an (n, d) array of terminal sites; zero
    terminals are skipped with a warning.
    """
    if isinstance(paths, np.ndarray):
        ends = np.asarray(paths, dtype=float)
    else:
        ends = np.array([p.terminal for p in paths], dtype=float)
    norms = np.linalg.norm(ends, axis=1)
    zero = norms == 0
    n_skipped = int(zero.sum())
    if n_skipped:
        warnings.warn(f"{n_skipped} paths ended at the origin and were skipped")
    units = ends[~zero] / norms[~zero, None]
    if len(units) == 0:
        raise ValueError("no path with a nonzero terminal site")
    mean = units.mean(axis=0)
    v = mean / np.linalg.norm(mean)
    v /= np.linalg.norm(v)
    dispersion = float(np.mean(np.arccos(np.clip(units @ v, -1.0, 1.0))))
    # all-equal paths: arccos(1 - eps) noise
    if dispersion < 1e-7 and np.allclose(units, units[0], atol=1e-15):
        dispersion = 0.0
    return DirectionEstimate(v, dispersion, n_skipped)


def projection_sup(path: Path, l: Direction, v_hat: Direction, u: float,
                   overshoot: float = 0.0) -> tuple:
    """sup over n <= L_u of |pi(X_n)|, pi removing the v_hat component.

    L_u is the last index with X_n.l <= u in the observed path.  The flag is
    True when the path never reached u + overshoot, so the last visit below
    u may lie beyond the observation window.
    """
    sites = path.sites.astype(float)
    proj = sites @ l.vector
    below = np.nonzero(proj <= u)[0]
    censored = not bool(proj.max() >= u + overshoot)
    if len(below) == 0:
        return 0.0, censored
    last = int(below[-1])
    v = v_hat.vector
    seg = sites[: last + 1]
    perp = seg - np.outer(seg @ v, v)
    return float(np.linalg.norm(perp, axis=1).max()), censored
