"""Hot loops for the one-sided Jacobi SVD.

Two interchangeable backends run the same rotation schedule:

* ``numba``: scalar loops compiled with ``@njit``.
* ``numpy``: every round of disjoint column pairs is rotated at once with
  vectorized array operations.

The backend is picked per call.  ``SVFIT_BACKEND=numpy`` forces the fallback,
``SVFIT_BACKEND=numba`` requires numba, and anything else (or unset) uses numba
when it imports.  Each backend is deterministic on its own; the two differ only
in floating-point summation order, so their outputs agree to rounding, not
bitwise.
"""
from __future__ import annotations

import math
import os
from functools import lru_cache

import numpy as np

try:
    import numba
except ImportError:  # pragma: no cover - exercised only without numba
    numba = None

BACKEND_ENV = "SVFIT_BACKEND"
BACKENDS = ("numba", "numpy")


def numba_available() -> bool:
    return numba is not None


def active_backend() -> str:
    choice = os.environ.get(BACKEND_ENV, "auto").strip().lower()
    if choice == "numpy":
        return "numpy"
    if choice == "numba":
        if numba is None:
            raise RuntimeError(f"{BACKEND_ENV}=numba but numba is not installed")
        return "numba"
    return "numba" if numba is not None else "numpy"


@lru_cache(maxsize=64)
def round_robin_schedule(n: int) -> np.ndarray:
    """Pair schedule covering every column pair exactly once per sweep.

    Circle-method tournament: ``n_rounds`` rounds of disjoint pairs, returned
    as an int64 array of shape ``(n_rounds, n_even // 2, 2)`` with ``i < j``
    in each pair.  For odd ``n`` a dummy index ``n`` pads the field; pairs
    touching it are skipped by the kernels.
    """
    n_even = n + (n % 2)
    if n_even == 0:
        return np.zeros((0, 0, 2), dtype=np.int64)
    players = list(range(n_even))
    rounds = []
    for _ in range(n_even - 1):
        pairs = []
        for k in range(n_even // 2):
            a, b = players[k], players[n_even - 1 - k]
            pairs.append((min(a, b), max(a, b)))
        rounds.append(pairs)
        players = [players[0], players[-1]] + players[1:-1]
    out = np.array(rounds, dtype=np.int64)
    out.setflags(write=False)
    return out


def _jacobi_numpy(at, vt, schedule, tol, max_sweeps):
    n = at.shape[0]
    for sweep in range(max_sweeps):
        rotated = False
        for rnd in schedule:
            keep = rnd[:, 1] < n
            ii, jj = rnd[keep, 0], rnd[keep, 1]
            if ii.size == 0:
                continue
            ai, aj = at[ii], at[jj]
            alpha = np.einsum("ij,ij->i", ai, ai)
            beta = np.einsum("ij,ij->i", aj, aj)
            gamma = np.einsum("ij,ij->i", ai, aj)
            hit = np.abs(gamma) > tol * np.sqrt(alpha) * np.sqrt(beta)
            if not hit.any():
                continue
            rotated = True
            ii, jj = ii[hit], jj[hit]
            ai, aj = ai[hit], aj[hit]
            zeta = (beta[hit] - alpha[hit]) / (2.0 * gamma[hit])
            t = np.copysign(1.0, zeta) / (np.abs(zeta) + np.hypot(1.0, zeta))
            c = 1.0 / np.sqrt(1.0 + t * t)
            s = c * t
            c, s = c[:, None], s[:, None]
            at[ii] = c * ai - s * aj
            at[jj] = s * ai + c * aj
            vi, vj = vt[ii], vt[jj]
            vt[ii] = c * vi - s * vj
            vt[jj] = s * vi + c * vj
        if not rotated:
            return sweep + 1
    return -1


def _jacobi_loops(at, vt, schedule, tol, max_sweeps):
    n, m = at.shape
    nv = vt.shape[1]
    for sweep in range(max_sweeps):
        rotated = False
        for r in range(schedule.shape[0]):
            for k in range(schedule.shape[1]):
                i = schedule[r, k, 0]
                j = schedule[r, k, 1]
                if j >= n:
                    continue
                alpha = 0.0
                beta = 0.0
                gamma = 0.0
                for p in range(m):
                    x = at[i, p]
                    y = at[j, p]
                    alpha += x * x
                    beta += y * y
                    gamma += x * y
                if abs(gamma) <= tol * math.sqrt(alpha) * math.sqrt(beta):
                    continue
                rotated = True
                zeta = (beta - alpha) / (2.0 * gamma)
                t = math.copysign(1.0, zeta) / (abs(zeta) + math.hypot(1.0, zeta))
                c = 1.0 / math.sqrt(1.0 + t * t)
                s = c * t
                for p in range(m):
                    x = at[i, p]
                    y = at[j, p]
                    at[i, p] = c * x - s * y
                    at[j, p] = s * x + c * y
                for p in range(nv):
                    x = vt[i, p]
                    y = vt[j, p]
                    vt[i, p] = c * x - s * y
                    vt[j, p] = s * x + c * y
        if not rotated:
            return sweep + 1
    return -1


if numba is not None:
    _jacobi_numba = numba.njit(cache=True, nogil=True)(_jacobi_loops)
else:  # pragma: no cover
    _jacobi_numba = None


def jacobi_sweeps(at: np.ndarray, vt: np.ndarray, tol: float, max_sweeps: int,
                  backend: str | None = None) -> int:
    """Orthogonalize the rows of ``at`` in place, accumulating rotations in ``vt``.

    ``at`` holds the columns of the working matrix as rows (n x m, C-order);
    ``vt`` starts as the n x n identity.  Returns the number of sweeps used,
    including the final rotation-free sweep, or -1 when ``max_sweeps`` ran out.
    """
    backend = backend or active_backend()
    schedule = round_robin_schedule(at.shape[0])
    if backend == "numba":
        if _jacobi_numba is None:
            raise RuntimeError("numba backend requested but numba is not installed")
        return int(_jacobi_numba(at, vt, schedule, tol, max_sweeps))
    if backend == "numpy":
        return _jacobi_numpy(at, vt, schedule, tol, max_sweeps)
    raise ValueError(f"unknown backend {backend!r}; expected one of {BACKENDS}")
