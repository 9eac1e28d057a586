"""Stateless counter-based randomness.

Every random number used by the package is a pure function of a 64-bit key
and an integer counter, obtained by chaining the splitmix64 finalizer.  This
makes lazily sampled environments independent of query order and lets batches
of walks be split across workers without changing any result.
"""

from __future__ import annotations

import zlib

import numpy as np

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_MASK = (1 << 64) - 1
_INV53 = 2.0 ** -53


def _as_u64(values) -> np.ndarray:
    arr = np.asarray(values)
    if arr.dtype == np.uint64:
        return np.atleast_1d(arr)
    if arr.dtype.kind in "iu":
        return np.atleast_1d(arr.astype(np.int64)).view(np.uint64)
    # python ints beyond int64 range
    flat = [int(v) & _MASK for v in np.atleast_1d(arr).ravel()]
    return np.array(flat, dtype=np.uint64).reshape(np.atleast_1d(arr).shape)


def mix64(z: np.ndarray) -> np.ndarray:
    """splitmix64 finalizer on a uint64 array (wrapping arithmetic)."""
    z = np.array(z, dtype=np.uint64, copy=True)
    with np.errstate(over="ignore"):
        z ^= z >> np.uint64(30)
        z *= _M1
        z ^= z >> np.uint64(27)
        z *= _M2
        z ^= z >> np.uint64(31)
    return z


def combine(h, v) -> np.ndarray:
    """Fold the word(s) ``v`` into the hash state(s) ``h``."""
    h = _as_u64(h)
    v = _as_u64(v)
    with np.errstate(over="ignore"):
        return mix64(h ^ mix64(v + _GOLDEN))


def tag_word(tag: str) -> int:
    return zlib.crc32(tag.encode("utf-8"))


def derive_seed(master_seed: int, *parts) -> int:
    """Derive a child seed from a master seed and a path of ints/strings."""
    h = _as_u64([master_seed])
    for p in parts:
        w = tag_word(p) if isinstance(p, str) else int(p)
        h = combine(h, [w])
    return int(h[0])


def derive_seeds(master_seed: int, indices, *parts) -> np.ndarray:
    """Vectorized ``derive_seed(master_seed, *parts, index)`` over indices."""
    h = _as_u64([master_seed])
    for p in parts:
        w = tag_word(p) if isinstance(p, str) else int(p)
        h = combine(h, [w])
    idx = np.asarray(indices, dtype=np.int64)
    return combine(np.broadcast_to(h, idx.shape), idx)


def site_keys(seeds, sites: np.ndarray) -> np.ndarray:
    """Hash per-row seeds with the integer coordinates of ``sites``."""
    sites = np.asarray(sites, dtype=np.int64)
    if sites.ndim == 1:
        sites = sites[None, :]
    h = np.broadcast_to(_as_u64(seeds), (sites.shape[0],)).copy()
    for j in range(sites.shape[1]):
        h = combine(h, sites[:, j])
    return h


def uniforms(keys, counters) -> np.ndarray:
    """Uniform doubles in the open interval (0, 1), one per (key, counter)."""
    bits = combine(keys, counters)
    return ((bits >> np.uint64(11)).astype(np.float64) + 0.5) * _INV53
