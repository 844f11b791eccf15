"""SIPIC: symmetric incomplete permuted inverse Cholesky preconditioning.

The preconditioner is built from the system matrix alone.  Diagonal scaling
normalizes every basis function to unit energy norm; groups of functions
whose scaled off-diagonal coupling exceeds a threshold ``gamma`` are then
orthonormalized in place by modified Gram-Schmidt, which makes the rows of
the preconditioner (restricted to any group) the inverse Cholesky factor of
the corresponding matrix block.  Rows whose pivot falls below ``eps`` during
orthonormalization correspond to functions that are linearly dependent up to
machine precision and are deleted, leaving a rectangular preconditioner over
the same approximation space.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

EPS_FACTOR = 100.0  # default elimination tolerance = EPS_FACTOR * machine eps


class NotPositiveDefiniteError(ValueError):
    pass


class SipicConstructionError(RuntimeError):
    pass


@dataclass
class SipicPreconditioner:
    """Sparse preconditioner ``S`` (m x n with m <= n) plus build metadata."""

    S: sp.csr_matrix
    gamma: float
    eps: float
    groups: list
    eliminated: list
    retained: np.ndarray
    passes: int
    nnz_original: int
    nnz_preconditioned: int

    @property
    def shape(self):
        return self.S.shape

    @property
    def fillin(self):
        """Relative growth of structural nonzeros of S A S^T over A."""
        return (self.nnz_preconditioned - self.nnz_original) / self.nnz_original

    @property
    def is_diagonal(self):
        return not self.groups and not self.eliminated

    def triangular_order(self):
        """A row/column order under which S is lower triangular, or None.

        Ungrouped rows are diagonal; grouped rows only reference columns
        earlier in their own group, so placing groups contiguously in group
        order yields the permutation.  The check is structural.
        """
        n = self.S.shape[1]
        position = {}
        pos = 0
        grouped = set()
        for g in self.groups:
            for i in g:
                grouped.add(i)
        for i in range(n):
            if i not in grouped:
                position[i] = pos
                pos += 1
        for g in self.groups:
            for i in g:
                position[i] = pos
                pos += 1
        coo = self.S.tocoo()
        for r, c in zip(self.retained[coo.row], coo.col):
            if position[c] > position[r]:
                return None
        return position


def scale(A):
    """Diagonal of the scaling matrix: 1/sqrt of the main diagonal of A."""
    A = sp.csr_matrix(A)
    d = A.diagonal()
    if np.any(d <= 0) or not np.all(np.isfinite(d)):
        raise NotPositiveDefiniteError(
            "system matrix has non-positive diagonal entries"
        )
    return 1.0 / np.sqrt(d)


def identify(M, gamma):
    """Index pairs (a, b), a > b, whose scaled coupling exceeds ``gamma``.

    ``M`` must have a unit diagonal; the comparison is strict.
    """
    if sp.issparse(M):
        coo = M.tocoo()
        mask = (coo.row > coo.col) & (np.abs(coo.data) > gamma)
        return {(int(r), int(c)) for r, c in zip(coo.row[mask], coo.col[mask])}
    M = np.asarray(M)
    rows, cols = np.nonzero(np.abs(np.tril(M, -1)) > gamma)
    return {(int(r), int(c)) for r, c in zip(rows, cols)}


def group(pairs, A):
    """Merge overlapping pairs into disjoint groups, each ordered by
    ascending row nonzero count in ``A`` (ties by index)."""
    parent = {}

    def find(x):
        while parent.get(x, x) != x:
            parent[x] = parent.get(parent[x], parent[x])
            x = parent[x]
        return x

    def union(a, b):
        ra, rb = find(a), find(b)
        if ra != rb:
            parent[ra] = rb

    for a, b in pairs:
        parent.setdefault(a, a)
        parent.setdefault(b, b)
        union(a, b)
    members = {}
    for x in parent:
        members.setdefault(find(x), []).append(x)
    if sp.issparse(A):
        csr = A.tocsr()
        nnz_row = np.diff(csr.indptr)
    else:
        nnz_row = np.count_nonzero(np.asarray(A), axis=1)
    groups = []
    for g in members.values():
        groups.append(tuple(sorted(g, key=lambda i: (nnz_row[i], i))))
    groups.sort(key=lambda g: min(g))
    return groups


def orthonormalize(A_sigma, eps=None):
    """Gram-Schmidt orthonormalization of a dense group block.

    Returns ``(S_sigma, kept, eliminated)`` where ``S_sigma`` holds one row
    per retained function (lower triangular in group order) satisfying
    ``S_sigma A_sigma S_sigma^T = I``, and ``eliminated`` lists the local
    indices whose pivot fell to ``eps`` or below.
    """
    if eps is None:
        eps = EPS_FACTOR * np.finfo(float).eps
    # extended precision guards the cancellation-prone pivots of nearly
    # dependent groups; blocks are tiny so the cost is negligible
    A_sigma = np.asarray(A_sigma, dtype=np.longdouble)
    k = A_sigma.shape[0]
    d = np.diag(A_sigma)
    if np.any(d <= 0):
        raise NotPositiveDefiniteError("group block has non-positive diagonal")
    S = np.diag(1.0 / np.sqrt(d))
    kept, eliminated = [], []
    for i in range(k):
        for j in kept:
            coef = S[i] @ A_sigma @ S[j]
            S[i] -= coef * S[j]
        pivot = S[i] @ A_sigma @ S[i]
        if pivot <= eps:
            eliminated.append(i)
            S[i] = 0.0
        else:
            S[i] /= np.sqrt(pivot)
            kept.append(i)
    return S[kept].astype(float), kept, eliminated


def build_sipic(A, gamma=0.9, eps=None, max_passes=10, log_path=None):
    """Construct the SIPIC preconditioner of a sparse SPD matrix.

    Scaling first; then groups of quasi-linearly-dependent functions are
    orthonormalized, new dependencies surfaced by the orthonormalization are
    regrouped, and the loop repeats until none remain (two passes in
    practice, hard capped at ``max_passes``).  ``log_path`` writes one JSON
    line of diagnostics per processed group.
    """
    A = sp.csr_matrix(A)
    n = A.shape[0]
    if eps is None:
        eps = EPS_FACTOR * np.finfo(float).eps
    d = scale(A)
    nnz_A = A.nnz
    rows = {i: (np.array([i]), np.array([d[i]])) for i in range(n)}
    alive = np.ones(n, dtype=bool)
    log_lines = []

    def current_S():
        keep = [i for i in range(n) if alive[i]]
        indptr = [0]
        indices, data = [], []
        for i in keep:
            cols, vals = rows[i]
            indices.extend(cols.tolist())
            data.extend(vals.tolist())
            indptr.append(len(indices))
        S = sp.csr_matrix(
            (np.array(data), np.array(indices, dtype=int), np.array(indptr)),
            shape=(len(keep), n),
        )
        S.eliminate_zeros()
        return S, np.array(keep, dtype=int)

    def scaled_product():
        S, keep = current_S()
        M = (S @ A @ S.T).tocoo()
        M.eliminate_zeros()
        return M, keep

    M, keep = scaled_product()
    pairs_local = identify(M, gamma)
    J = {(int(keep[a]), int(keep[b])) for a, b in pairs_local}
    I = set(J)
    passes = 0
    while J:
        passes += 1
        if passes > max_passes:
            raise SipicConstructionError(
                f"orthonormalization did not settle within {max_passes} passes"
            )
        for sigma in group(I, A):
            sigma_eff = [i for i in sigma if alive[i]]
            if len(sigma_eff) < 2:
                continue
            block = A[np.ix_(sigma_eff, sigma_eff)].toarray()
            pre_max = _max_offdiag_scaled(block)
            S_sig, kept, elim = orthonormalize(block, eps)
            cols = np.array(sigma_eff, dtype=int)
            for r, loc in enumerate(kept):
                vals = S_sig[r]
                nz = vals != 0.0
                rows[sigma_eff[loc]] = (cols[nz], vals[nz])
            for loc in elim:
                gi = sigma_eff[loc]
                alive[gi] = False
                rows.pop(gi, None)
            if log_path is not None:
                log_lines.append(
                    {
                        "pass": passes,
                        "indices": [int(i) for i in sigma_eff],
                        "pre_max_offdiag": pre_max,
                        "eliminated": [int(sigma_eff[loc]) for loc in elim],
                    }
                )
        M, keep = scaled_product()
        pairs_local = identify(M, gamma)
        J = {(int(keep[a]), int(keep[b])) for a, b in pairs_local} - I
        I |= J

    S, keep = current_S()
    product = (S @ A @ S.T).tocsr()
    product.eliminate_zeros()
    eliminated = [int(i) for i in range(n) if not alive[i]]
    groups = group(I, A) if I else []
    groups = [tuple(i for i in g if alive[i]) for g in groups]
    groups = [g for g in groups if len(g) >= 2]
    if log_path is not None:
        with open(log_path, "w") as fh:
            for line in log_lines:
                fh.write(json.dumps(line) + "\n")
    return SipicPreconditioner(
        S=S,
        gamma=gamma,
        eps=eps,
        groups=groups,
        eliminated=eliminated,
        retained=keep,
        passes=passes,
        nnz_original=nnz_A,
        nnz_preconditioned=product.nnz,
    )


def _max_offdiag_scaled(block):
    d = np.sqrt(np.diag(block))
    scaled = block / np.outer(d, d)
    np.fill_diagonal(scaled, 0.0)
    return float(np.abs(scaled).max()) if scaled.size else 0.0


@dataclass
class PreconditionedSystem:
    """Operator form of ``S A S^T xbar = S b`` with solution recovery
    ``x = S^T xbar``; the explicit product is only formed on request."""

    A: sp.csr_matrix
    b: np.ndarray
    precon: SipicPreconditioner
    rhs: np.ndarray = field(init=False)

    def __post_init__(self):
        if self.A.shape[0] != self.precon.S.shape[1]:
            raise ValueError("preconditioner was not built for this matrix")
        self.rhs = self.precon.S @ self.b

    @property
    def n_reduced(self):
        return self.precon.S.shape[0]

    def matvec(self, xbar):
        S = self.precon.S
        return S @ (self.A @ (S.T @ xbar))

    def recover(self, xbar):
        return self.precon.S.T @ xbar

    def explicit(self):
        M = (self.precon.S @ self.A @ self.precon.S.T).tocsr()
        M.eliminate_zeros()
        return M, self.rhs


def apply_preconditioned(A, b, precon):
    """Wrap a system in its symmetrically preconditioned form."""
    return PreconditionedSystem(A=sp.csr_matrix(A), b=np.asarray(b, dtype=float),
                                precon=precon)


def write_matrix_market(precon, path):
    """Export S in Matrix Market coordinate format."""
    from scipy.io import mmwrite

    mmwrite(str(path), precon.S.tocoo())
