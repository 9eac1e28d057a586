"""I.i.d. uniformly elliptic environments and their snapshots."""

from __future__ import annotations

import hashlib
import json
import threading
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import gammaincinv

from . import rng

MAX_REJECTIONS = 10 ** 6


class LawError(ValueError):
    """Invalid law parameters or malformed environment data."""


class SnapshotError(LawError):
    pass


@dataclass(frozen=True)
class EnvironmentLaw:
    """Law of a single site kernel.

    kind is one of ``dirichlet`` (alpha, kappa-truncated by rejection),
    ``eps`` (epsilon-biased toward +e1 by delta) or ``drift`` (mass
    1 - (2d-1) kappa on +e1).  Kernels are ordered (+e1, -e1, ..., -ed).
    """

    kind: str
    d: int
    kappa: float
    alpha: tuple = ()
    delta: float = 0.0

    def __post_init__(self):
        if self.d < 2:
            raise LawError("dimension must be at least 2")
        if not 0 < self.kappa <= 1.0 / (2 * self.d):
            raise LawError(f"kappa must lie in (0, 1/(2d)], got {self.kappa}")
        if self.kind == "dirichlet":
            a = tuple(float(x) for x in self.alpha)
            if len(a) != 2 * self.d or min(a) <= 0:
                raise LawError("dirichlet needs 2d positive alpha entries")
            if self.kappa >= 1.0 / (2 * self.d):
                raise LawError("truncation kappa = 1/(2d) leaves no mass")
            object.__setattr__(self, "alpha", a)
        elif self.kind == "eps":
            if min(self._eps_kernel()) < self.kappa:
                raise LawError("epsilon-biased kernel violates ellipticity")
        elif self.kind != "drift":
            raise LawError(f"unknown law kind {self.kind!r}")

    @classmethod
    def dirichlet(cls, alpha, kappa: float) -> "EnvironmentLaw":
        alpha = tuple(alpha)
        return cls("dirichlet", len(alpha) // 2, kappa, alpha=alpha)

    @classmethod
    def symmetric_dirichlet(cls, d: int, kappa: float, concentration: float = 1.0):
        return cls.dirichlet((concentration,) * (2 * d), kappa)

    @classmethod
    def epsilon_biased(cls, d: int, delta: float, kappa: float) -> "EnvironmentLaw":
        return cls("eps", d, kappa, delta=delta)

    @classmethod
    def deterministic_drift(cls, d: int, kappa: float) -> "EnvironmentLaw":
        return cls("drift", d, kappa)

    @classmethod
    def simple_random_walk(cls, d: int) -> "EnvironmentLaw":
        return cls("eps", d, 1.0 / (2 * d), delta=0.0)

    @property
    def tag(self) -> str:
        return self.kind

    @property
    def is_deterministic(self) -> bool:
        return self.kind != "dirichlet"

    def _eps_kernel(self):
        n = 2 * self.d
        rest = 1.0 / n - self.delta / (n - 1)
        return [1.0 / n + self.delta] + [rest] * (n - 1)

    def constant_kernel(self) -> np.ndarray:
        n = 2 * self.d
        if self.kind == "eps":
            return np.array(self._eps_kernel())
        if self.kind == "drift":
            k = np.full(n, self.kappa)
            k[0] = 1.0 - (n - 1) * self.kappa
            return k
        raise LawError("dirichlet law has no constant kernel")

    def to_record(self) -> dict:
        rec = {"kind": self.kind, "d": self.d, "kappa": self.kappa}
        if self.kind == "dirichlet":
            rec["alpha"] = list(self.alpha)
        if self.kind == "eps":
            rec["delta"] = self.delta
        return rec

    @classmethod
    def from_record(cls, rec: dict) -> "EnvironmentLaw":
        return cls(rec["kind"], int(rec["d"]), float(rec["kappa"]),
                   alpha=tuple(rec.get("alpha", ())), delta=float(rec.get("delta", 0.0)))


def kernels_for_keys(law: EnvironmentLaw, keys: np.ndarray) -> np.ndarray:
    """Kernels for an array of per-site hash keys; row i depends only on keys[i]."""
    keys = np.atleast_1d(np.asarray(keys, dtype=np.uint64))
    n = 2 * law.d
    if law.is_deterministic:
        return np.broadcast_to(law.constant_kernel(), (len(keys), n)).copy()
    alpha = np.array(law.alpha)
    out = np.empty((len(keys), n))
    pending = np.arange(len(keys))
    attempt = 0
    comp = np.arange(n, dtype=np.int64)
    unit = np.all(alpha == 1.0)
    while len(pending):
        if attempt >= MAX_REJECTIONS:
            raise LawError("dirichlet truncation exceeded the rejection cap")
        counters = attempt * n + comp[None, :]
        u = rng.uniforms(keys[pending][:, None], counters)
        g = -np.log(u) if unit else gammaincinv(alpha[None, :], u)
        k = g / g.sum(axis=1, keepdims=True)
        ok = k.min(axis=1) >= law.kappa
        out[pending[ok]] = k[ok]
        pending = pending[~ok]
        attempt += 1
    return out


def _law_seed(law: EnvironmentLaw, master_seed: int) -> int:
    return rng.derive_seed(master_seed, "env", law.tag)


def law_seeds(law: EnvironmentLaw, master_seeds) -> np.ndarray:
    """Vectorized per-environment keys, matching ``Environment(law, s)`` for each s."""
    h = rng.combine(np.asarray(master_seeds, dtype=np.uint64), [rng.tag_word("env")])
    return rng.combine(h, [rng.tag_word(law.tag)])


def kernels_at(law: EnvironmentLaw, env_keys, sites) -> np.ndarray:
    """Kernel of environment ``env_keys[i]`` (from :func:`law_seeds`) at ``sites[i]``."""
    sites = np.atleast_2d(np.asarray(sites, dtype=np.int64))
    if law.is_deterministic:
        return kernels_for_keys(law, np.zeros(len(sites), dtype=np.uint64))
    return kernels_for_keys(law, rng.site_keys(env_keys, sites))


def sample_site_kernels(law: EnvironmentLaw, sites, master_seed: int) -> np.ndarray:
    sites = np.atleast_2d(np.asarray(sites, dtype=np.int64))
    if sites.shape[1] != law.d:
        raise LawError("site dimension does not match the law")
    if law.is_deterministic:
        return kernels_for_keys(law, np.zeros(len(sites), dtype=np.uint64))
    keys = rng.site_keys(_law_seed(law, master_seed), sites)
    return kernels_for_keys(law, keys)


def sample_site_kernel(law: EnvironmentLaw, site, master_seed: int) -> np.ndarray:
    """Kernel at one site, a pure function of (law, master_seed, site)."""
    return sample_site_kernels(law, [site], master_seed)[0]


class Environment:
    """Lazy, memoizing, seed-deterministic view of an infinite environment."""

    def __init__(self, law: EnvironmentLaw, master_seed: int):
        self.law = law
        self.master_seed = int(master_seed)
        self._realized: dict = {}
        self._lock = threading.Lock()

    @property
    def d(self) -> int:
        return self.law.d

    @property
    def kappa(self) -> float:
        return self.law.kappa

    def kernel(self, site) -> np.ndarray:
        key = tuple(int(x) for x in site)
        k = self._realized.get(key)
        if k is None:
            fresh = sample_site_kernel(self.law, key, self.master_seed)
            fresh.setflags(write=False)
            with self._lock:
                k = self._realized.setdefault(key, fresh)
        return k

    def kernels(self, sites) -> np.ndarray:
        """Kernels for many sites at once (not memoized; pure anyway)."""
        return sample_site_kernels(self.law, sites, self.master_seed)

    @property
    def realized(self) -> dict:
        return dict(self._realized)


class FixedEnvironment:
    """Environment given by an explicit finite table of kernels."""

    def __init__(self, d: int, table: dict, kappa: float, law: EnvironmentLaw | None = None,
                 master_seed: int | None = None, default=None):
        self._d = int(d)
        self.table = {tuple(int(x) for x in k): np.asarray(v, dtype=float)
                      for k, v in table.items()}
        self.kappa = float(kappa)
        self.law = law
        self.master_seed = master_seed
        self.default = None if default is None else np.asarray(default, dtype=float)

    @property
    def d(self) -> int:
        return self._d

    def kernel(self, site) -> np.ndarray:
        key = tuple(int(x) for x in site)
        k = self.table.get(key)
        if k is None:
            if self.default is None:
                raise KeyError(f"site {key} not in the fixed environment")
            return self.default
        return k

    def kernels(self, sites) -> np.ndarray:
        sites = np.atleast_2d(sites)
        return np.array([self.kernel(s) for s in sites])


def environment_view(law: EnvironmentLaw, master_seed: int) -> Environment:
    return Environment(law, master_seed)


def ellipticity_check(env, region) -> float:
    """Minimum kernel entry over ``region``; raises if below the law's kappa."""
    sites = np.atleast_2d(np.asarray(region, dtype=np.int64))
    m = float(env.kernels(sites).min())
    if m < env.kappa:
        raise AssertionError(f"ellipticity violated: min entry {m} < kappa {env.kappa}")
    return m


# --- snapshots -------------------------------------------------------------

_HEADER = "RWRE-ENV v1"


def _fmt(x: float) -> str:
    return f"{x:.17g}"


def save_environment(env, region, path) -> Path:
    """Write kernels of ``region`` as header plus CSV rows ``x1..xd,p1..p2d``."""
    sites = np.atleast_2d(np.asarray(region, dtype=np.int64))
    order = np.lexsort(sites.T[::-1])
    sites = sites[order]
    kernels = env.kernels(sites)
    law = env.law
    tag = law.tag if law is not None else "table"
    law_rec = law.to_record() if law is not None else {"kind": "table", "d": env.d}
    seed = env.master_seed if env.master_seed is not None else 0
    rows = [",".join([str(int(c)) for c in s] + [_fmt(p) for p in k])
            for s, k in zip(sites, kernels)]
    body = "\n".join(rows) + "\n"
    digest = hashlib.sha256(body.encode("ascii")).hexdigest()
    lo = sites.min(axis=0).tolist()
    hi = sites.max(axis=0).tolist()
    head = [
        f"{_HEADER} d={env.d} law={tag} kappa={_fmt(env.kappa)} seed={seed}",
        "# law-params=" + json.dumps(law_rec, sort_keys=True),
        "# bounds=" + json.dumps({"lo": lo, "hi": hi, "n_sites": len(sites)}),
        f"# sha256={digest}",
    ]
    path = Path(path)
    with open(path, "w", newline="\n") as fh:
        fh.write("\n".join(head) + "\n" + body)
    return path


def load_environment(path, expected_d: int | None = None) -> FixedEnvironment:
    lines = Path(path).read_text().split("\n")
    if not lines or not lines[0].startswith(_HEADER):
        raise SnapshotError("missing RWRE-ENV header")
    fields = dict(tok.split("=", 1) for tok in lines[0][len(_HEADER):].split())
    try:
        d = int(fields["d"])
        kappa = float(fields["kappa"])
        seed = int(fields["seed"])
    except (KeyError, ValueError) as exc:
        raise SnapshotError(f"malformed header: {lines[0]!r}") from exc
    if expected_d is not None and d != expected_d:
        raise SnapshotError(f"dimension mismatch: snapshot d={d}, expected d={expected_d}")
    meta = {}
    i = 1
    while i < len(lines) and lines[i].startswith("#"):
        k, _, v = lines[i][1:].strip().partition("=")
        meta[k] = v
        i += 1
    body_lines = [ln for ln in lines[i:] if ln]
    body = "\n".join(body_lines) + "\n"
    if "sha256" in meta and hashlib.sha256(body.encode("ascii")).hexdigest() != meta["sha256"]:
        raise SnapshotError("checksum failure")
    table = {}
    for ln in body_lines:
        parts = ln.split(",")
        if len(parts) != 3 * d:
            raise SnapshotError(f"row has {len(parts)} fields, expected {3 * d}")
        table[tuple(int(x) for x in parts[:d])] = np.array([float(x) for x in parts[d:]])
    law = None
    if "law-params" in meta:
        rec = json.loads(meta["law-params"])
        if rec.get("kind") != "table":
            law = EnvironmentLaw.from_record(rec)
    return FixedEnvironment(d, table, kappa, law=law, master_seed=seed)
