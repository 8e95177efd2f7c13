"""Deterministic dense SVD and the subspace bookkeeping built on it.

Matrices are plain 2-D ``float64`` numpy arrays.  :func:`svd` runs one-sided
Jacobi on whichever orientation of the input is tall, so the rotation count
scales with the short side.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConvergenceFailure, InvalidInput, RankOutOfRange
from .kernels import jacobi_sweeps

JACOBI_TOL = 1e-14
MAX_SWEEPS = 60

_EPS = np.finfo(np.float64).eps


def as_matrix(w, name: str = "matrix") -> np.ndarray:
    """Validate and return ``w`` as a finite, non-empty 2-D float64 array."""
    a = np.asarray(w, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] < 1 or a.shape[1] < 1:
        raise InvalidInput(f"{name} must be a non-empty 2-D array, got shape {a.shape}")
    if not np.isfinite(a).all():
        raise InvalidInput(f"{name} contains NaN or Inf")
    return a


@dataclass(frozen=True)
class SvdFactors:
    """Full SVD ``w = u @ diag(sigma) @ vt`` with ``sigma`` descending."""

    u: np.ndarray
    sigma: np.ndarray
    vt: np.ndarray
    sweeps: int = 0

    @property
    def v(self) -> np.ndarray:
        return self.vt.T

    @property
    def shape(self) -> tuple[int, int]:
        return self.u.shape[0], self.vt.shape[0]

    def reconstruct(self) -> np.ndarray:
        d = self.sigma.size
        return (self.u[:, :d] * self.sigma) @ self.vt[:d]


@dataclass(frozen=True)
class FundamentalSubspaces:
    """Column partition of an SVD at ``cut_rank``.

    ``u_r``/``v_r`` span the ranges of W and W^T; when the trailing singular
    values vanish, ``u_e``/``v_e`` span the null spaces of W^T and W.
    """

    cut_rank: int
    u_r: np.ndarray
    sigma_r: np.ndarray
    v_r: np.ndarray
    u_e: np.ndarray
    sigma_e: np.ndarray
    v_e: np.ndarray

    def approx(self) -> np.ndarray:
        return (self.u_r * self.sigma_r) @ self.v_r.T

    def residual(self) -> np.ndarray:
        k = self.sigma_e.size
        return (self.u_e[:, :k] * self.sigma_e) @ self.v_e[:, :k].T


def _complete_basis(q: np.ndarray, filled: np.ndarray) -> np.ndarray:
    """Fill the columns of ``q`` where ``filled`` is False.

    Each gap takes the first canonical vector whose component orthogonal to
    the columns placed so far keeps norm >= 0.5/sqrt(m), orthogonalized by
    two passes of modified Gram-Schmidt.  Some candidate always qualifies,
    since the squared residual norms over all canonical vectors sum to the
    number of missing columns.
    """
    m = q.shape[0]
    basis = [q[:, k].copy() for k in range(q.shape[1]) if filled[k]]
    threshold = 0.5 / np.sqrt(m)
    for k in np.flatnonzero(~filled):
        for cand in range(m):
            r = np.zeros(m)
            r[cand] = 1.0
            for _ in range(2):
                for b in basis:
                    r -= (b @ r) * b
            norm = np.linalg.norm(r)
            if norm >= threshold:
                break
        else:  # pragma: no cover - impossible by the counting argument
            raise ConvergenceFailure("basis completion found no usable canonical vector")
        r /= norm
        q[:, k] = r
        basis.append(r)
    return q


def _fix_signs(u: np.ndarray, v: np.ndarray, d: int) -> None:
    """Make the largest-magnitude entry of each u column non-negative (in place).

    Paired v columns (index < d) follow their u column; unpaired trailing
    columns of either factor are normalized on their own entries.
    """
    for i in range(u.shape[1]):
        col = u[:, i]
        if col[np.argmax(np.abs(col))] < 0:
            u[:, i] = -col
            if i < d:
                v[:, i] = -v[:, i]
    for i in range(d, v.shape[1]):
        col = v[:, i]
        if col[np.argmax(np.abs(col))] < 0:
            v[:, i] = -col


def svd(w, backend: str | None = None) -> SvdFactors:
    """Full singular value decomposition by cyclic one-sided Jacobi.

    Singular values come back descending (stable with respect to the
    post-rotation column order on ties).  Values at or below
    ``max(d1, d2) * eps * sigma_max`` are reported as exact zeros and their
    singular vectors are completed deterministically.  The same input bytes
    always give the same output bytes for a given backend.
    """
    w = as_matrix(w, "w")
    d1, d2 = w.shape
    tall = w if d1 >= d2 else w.T
    m, n = tall.shape
    at = np.array(tall.T, dtype=np.float64, order="C")
    rot = np.eye(n)
    sweeps = jacobi_sweeps(at, rot, JACOBI_TOL, MAX_SWEEPS, backend=backend)
    if sweeps < 0:
        raise ConvergenceFailure(f"Jacobi SVD did not converge in {MAX_SWEEPS} sweeps")

    norms = np.linalg.norm(at, axis=1)
    order = np.argsort(-norms, kind="stable")
    sigma = norms[order]
    cols = at[order]
    small = np.ascontiguousarray(rot[order].T)

    cutoff = max(m, n) * _EPS * sigma[0]
    nonzero = (sigma > cutoff) & (sigma > 0.0)
    sigma = np.where(nonzero, sigma, 0.0)

    big = np.zeros((m, m))
    filled = np.zeros(m, dtype=bool)
    idx = np.flatnonzero(nonzero)
    big[:, idx] = (cols[idx] / sigma[idx, None]).T
    filled[idx] = True
    big = _complete_basis(big, filled)

    if d1 >= d2:
        u, v = big, small
    else:
        u, v = small, big
    _fix_signs(u, v, n)
    # adding 0.0 turns negative zeros into positive ones
    return SvdFactors(u=u + 0.0, sigma=sigma, vt=np.ascontiguousarray(v.T) + 0.0,
                      sweeps=sweeps)


def _check_rank(r: int, limit: int) -> int:
    if isinstance(r, (bool, np.bool_)) or int(r) != r:
        raise RankOutOfRange(f"rank must be an integer, got {r!r}")
    r = int(r)
    if not 1 <= r <= limit:
        raise RankOutOfRange(f"rank {r} outside [1, {limit}]")
    return r


def split_subspaces(f: SvdFactors, r: int) -> FundamentalSubspaces:
    r = _check_rank(r, f.sigma.size)
    return FundamentalSubspaces(
        cut_rank=r,
        u_r=f.u[:, :r].copy(),
        sigma_r=f.sigma[:r].copy(),
        v_r=f.vt[:r].T.copy(),
        u_e=f.u[:, r:].copy(),
        sigma_e=f.sigma[r:].copy(),
        v_e=f.vt[r:].T.copy(),
    )


def rank_r_approx(w, r: int, factors: SvdFactors | None = None) -> np.ndarray:
    """Best rank-``r`` approximation ``U_r diag(sigma_r) V_r^T`` in Frobenius norm."""
    f = factors if factors is not None else svd(w)
    r = _check_rank(r, f.sigma.size)
    return (f.u[:, :r] * f.sigma[:r]) @ f.vt[:r]


def energy_ratio(sigma, r: int) -> tuple[float, float]:
    """Share of nuclear mass and of Frobenius energy held by the top ``r`` values.

    Returns ``(nuclear_ratio, frobenius_ratio)``; an all-zero spectrum
    counts as fully captured.
    """
    s = np.asarray(sigma, dtype=np.float64).ravel()
    if s.size == 0:
        raise InvalidInput("empty spectrum")
    if not np.isfinite(s).all() or (s < 0).any():
        raise InvalidInput("spectrum must be finite and non-negative")
    if (np.diff(s) > 0).any():
        raise InvalidInput("spectrum must be sorted in descending order")
    r = _check_rank(r, s.size)
    if s[0] == 0.0 or r == s.size:
        return 1.0, 1.0
    # scaling by the largest value keeps squares clear of underflow; running
    # sums keep both ratios monotone in r under rounding
    s = s / s[0]
    mass = np.cumsum(s)
    energy = np.cumsum(s * s)
    return float(mass[r - 1] / mass[-1]), float(energy[r - 1] / energy[-1])
