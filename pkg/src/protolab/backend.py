"""Kernel backends: numba-accelerated hot loops with a pure-numpy fallback.

The greedy token-to-patch assignment is the one loop-heavy kernel in the
package (it runs per sample, per prototype, inside training, projection and
dataset scans). Both implementations share the exact same selection order and
tie-breaks, and operate on a precomputed float64 cosine table, so they return
bit-identical results.

Backend selection is controlled by the PROTOLAB_BACKEND environment variable:
  - "numba": require numba, fail if unavailable
  - "numpy": force the pure-numpy path
  - unset or "auto": numba when importable, numpy otherwise
Worker count for parallelizable I/O paths comes from PROTOLAB_WORKERS.
"""
from __future__ import annotations

import os

import numpy as np

from .errors import ConfigurationError

ENV_BACKEND = "PROTOLAB_BACKEND"
ENV_WORKERS = "PROTOLAB_WORKERS"


def _greedy_assign_loops(cos, out):
    # cos: float64 [batch, d_p, t, n_patches]; out: int64 [batch, d_p, t].
    # Round-by-round greedy: pick the best still-free (token, patch) pair.
    # Scanning patches in the outer loop makes the first maximum win ties by
    # lowest patch index, then lowest token index.
    batch, d_p, t, n = cos.shape
    for b in range(batch):
        for i in range(d_p):
            used_tok = np.zeros(t, dtype=np.bool_)
            used_pat = np.zeros(n, dtype=np.bool_)
            for _ in range(t):
                best = -np.inf
                bk = -1
                bj = -1
                for j in range(n):
                    if used_pat[j]:
                        continue
                    for k in range(t):
                        if used_tok[k]:
                            continue
                        v = cos[b, i, k, j]
                        if v > best:
                            best = v
                            bk = k
                            bj = j
                out[b, i, bk] = bj
                used_tok[bk] = True
                used_pat[bj] = True
    return out


def greedy_assign_numpy(cos: np.ndarray) -> np.ndarray:
    """Pure-numpy greedy assignment over a [batch, d_p, t, n] cosine table."""
    batch, d_p, t, n = cos.shape
    out = np.empty((batch, d_p, t), dtype=np.int64)
    for b in range(batch):
        for i in range(d_p):
            # Rows ordered patch-major so np.argmax's first-hit rule matches
            # the (lowest patch, then lowest token) tie-break.
            tab = np.ascontiguousarray(cos[b, i].T)  # [n, t]
            blocked = np.zeros((n, t), dtype=bool)
            for _ in range(t):
                masked = np.where(blocked, -np.inf, tab)
                flat = int(np.argmax(masked))
                j, k = divmod(flat, t)
                out[b, i, k] = j
                blocked[j, :] = True
                blocked[:, k] = True
    return out


HAS_NUMBA = False
greedy_assign_numba = None
try:  # pragma: no cover - exercised indirectly
    import numba

    greedy_assign_numba = numba.njit(cache=True)(_greedy_assign_loops)
    HAS_NUMBA = True
except ImportError:  # pragma: no cover
    pass


def _resolve_backend() -> str:
    choice = os.environ.get(ENV_BACKEND, "auto").strip().lower() or "auto"
    if choice not in ("auto", "numba", "numpy"):
        raise ConfigurationError(f"unknown {ENV_BACKEND} value: {choice!r}")
    if choice == "numpy":
        return "numpy"
    if choice == "numba":
        if not HAS_NUMBA:
            raise ConfigurationError("PROTOLAB_BACKEND=numba but numba is not importable")
        return "numba"
    return "numba" if HAS_NUMBA else "numpy"


_ACTIVE = _resolve_backend()


def active_backend() -> str:
    return _ACTIVE


def worker_count() -> int:
    raw = os.environ.get(ENV_WORKERS, "").strip()
    if not raw:
        return 1
    try:
        value = int(raw)
    except ValueError:
        raise ConfigurationError(f"{ENV_WORKERS} must be an integer, got {raw!r}")
    if value < 1:
        raise ConfigurationError(f"{ENV_WORKERS} must be >= 1, got {value}")
    return value


def greedy_assign(cos: np.ndarray) -> np.ndarray:
    """Assign each prototype's tokens to distinct patches, batch-wise.

    cos is a float64 array [batch, d_p, t, n_patches] of pairwise cosine
    similarities. Returns int64 [batch, d_p, t] patch indices. Pairs are
    assigned in descending cosine order; ties break to the lowest patch
    index, then the lowest token index.
    """
    cos = np.ascontiguousarray(cos, dtype=np.float64)
    if cos.ndim != 4:
        raise ConfigurationError(f"greedy_assign expects a 4-d table, got shape {cos.shape}")
    if _ACTIVE == "numba":
        out = np.empty(cos.shape[:3], dtype=np.int64)
        return greedy_assign_numba(cos, out)
    return greedy_assign_numpy(cos)
