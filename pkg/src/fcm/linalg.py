"""Sparse SPD linear algebra: CG with diagnostics, extremal eigenvalue
estimation by (inverse) power iteration, and condition numbers.

The inverse power method has to apply the inverse of matrices whose
condition numbers reach far beyond machine precision; every solve therefore
runs through a SIPIC-preconditioned CG, and the eigenvalue estimate is taken
from the solve output as (z.v)/(z.z) with z = A^-1 v, which avoids the
absolute noise floor of an explicit residual Rayleigh quotient.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.io import mmread, mmwrite

from . import sipic as _sipic


class SingularSystemError(RuntimeError):
    """The matrix is singular up to machine precision; its smallest
    eigenvalue (and hence its condition number) is not computable."""


def _as_matvec(A):
    if callable(A):
        return A
    if sp.issparse(A):
        Ac = A.tocsr()
        return lambda x: Ac @ x
    Ad = np.asarray(A)
    return lambda x: Ad @ x


@dataclass
class CgReport:
    iterations: int
    residual_norms: np.ndarray
    termination: str  # rel_tol | abs_tol | max_iter
    energy_errors: np.ndarray | None = None


def cg_solve(A, b, rel_tol=1e-10, abs_tol=0.0, max_iter=None, reference=None,
             x0=None):
    """Conjugate gradients for SPD (or consistent semi-definite) systems.

    Records the residual norm per iteration and, when a ``reference``
    solution is supplied, the energy-norm error history.  Hitting
    ``max_iter`` returns the best iterate rather than raising.
    """
    matvec = _as_matvec(A)
    b = np.asarray(b, dtype=float)
    n = b.shape[0]
    if max_iter is None:
        max_iter = 10 * n
    x = np.zeros(n) if x0 is None else np.array(x0, dtype=float)
    r = b - matvec(x) if x0 is not None else b.copy()
    b_norm = float(np.linalg.norm(b))
    residuals = [float(np.linalg.norm(r))]
    energies = []

    def record_energy():
        if reference is not None:
            e = reference - x
            energies.append(math.sqrt(max(float(e @ matvec(e)), 0.0)))

    record_energy()

    def reason(res):
        if b_norm > 0 and res <= rel_tol * b_norm:
            return "rel_tol"
        if res <= abs_tol:
            return "abs_tol"
        return None

    term = reason(residuals[-1])
    if term is not None or b_norm == 0.0:
        return x, CgReport(0, np.array(residuals), term or "rel_tol",
                           np.array(energies) if reference is not None else None)

    p = r.copy()
    rs = float(r @ r)
    term = "max_iter"
    it = 0
    for it in range(1, max_iter + 1):
        Ap = matvec(p)
        pAp = float(p @ Ap)
        if pAp <= 0.0:
            term = "max_iter"  # curvature lost to rounding: stop with best iterate
            it -= 1
            break
        alpha = rs / pAp
        x += alpha * p
        r -= alpha * Ap
        res = float(np.linalg.norm(r))
        residuals.append(res)
        record_energy()
        t = reason(res)
        if t is not None:
            term = t
            break
        rs_new = float(r @ r)
        p = r + (rs_new / rs) * p
        rs = rs_new
    return x, CgReport(
        it,
        np.array(residuals),
        term,
        np.array(energies) if reference is not None else None,
    )


@dataclass
class EigenEstimate:
    value: float
    iterations: int
    converged: bool


def _start_vector(n, seed):
    rng = np.random.default_rng(seed)
    v = np.ones(n) + 1e-3 * rng.standard_normal(n)
    return v / np.linalg.norm(v)


def power_iteration(A, n, rel_tol=1e-6, max_iter=20000, seed=0):
    """Largest eigenvalue of an SPD operator via power iteration, terminated
    when the Rayleigh quotient changes by less than ``rel_tol`` relatively."""
    matvec = _as_matvec(A)
    v = _start_vector(n, seed)
    rho_prev = None
    for it in range(1, max_iter + 1):
        w = matvec(v)
        rho = float(v @ w)
        nw = float(np.linalg.norm(w))
        if nw == 0.0:
            return EigenEstimate(0.0, it, True)
        v = w / nw
        if rho_prev is not None and abs(rho - rho_prev) <= rel_tol * abs(rho):
            return EigenEstimate(rho, it, True)
        rho_prev = rho
    return EigenEstimate(rho_prev if rho_prev is not None else 0.0, max_iter, False)


def smallest_eigenvalue(solve, n, rel_tol=1e-6, max_iter=500, seed=0):
    """Smallest eigenvalue by inverse power iteration.

    ``solve(v)`` must return z with A z = v to a tolerance well below
    ``rel_tol``; the estimate (z.v)/(z.z) equals the Rayleigh quotient of A
    at z for exact solves.
    """
    v = _start_vector(n, seed)
    lam_prev = None
    for it in range(1, max_iter + 1):
        z = solve(v)
        zz = float(z @ z)
        if zz == 0.0 or not np.isfinite(zz):
            raise SingularSystemError("inverse iteration produced a null vector")
        lam = float(z @ v) / zz
        v = z / math.sqrt(zz)
        if lam_prev is not None and abs(lam - lam_prev) <= rel_tol * abs(lam):
            return EigenEstimate(lam, it, True)
        lam_prev = lam
    return EigenEstimate(lam_prev if lam_prev is not None else 0.0, max_iter, False)


def _sipic_solver(A, precon, inner_rel_tol, inner_max_iter, pre_scale=None):
    """Return solve(v) -> A^-1 v (or M^-1 v with M = D A D when ``pre_scale``
    is the scaling diagonal) through SIPIC-preconditioned CG, warm-started
    across calls."""
    S = precon.S
    M = (S @ A @ S.T).tocsr()
    state = {"x0": None}

    def solve(v):
        rhs = S @ (v / pre_scale) if pre_scale is not None else S @ v
        xbar, report = cg_solve(
            M, rhs, rel_tol=inner_rel_tol, max_iter=inner_max_iter,
            x0=state["x0"],
        )
        state["x0"] = xbar.copy()
        z = S.T @ xbar
        if pre_scale is not None:
            z = z / pre_scale
        return z

    return solve


@dataclass
class ConditionEstimate:
    kappa: float
    lam_max: float
    lam_min: float
    converged: bool


def condition_number(A, precon=None, *, gamma=0.9, rel_tol=1e-6,
                     inner_rel_tol=1e-10, inner_max_iter=20000,
                     power_max_iter=20000, seed=0):
    """Spectral condition number of A, or of S A S^T when ``precon`` is given.

    Without a preconditioner the inverse power iteration still solves through
    a SIPIC preconditioner built on the fly; if that construction eliminates
    rows, A is singular up to machine precision and
    :class:`SingularSystemError` is raised instead of returning a number.
    """
    A = sp.csr_matrix(A)
    n = A.shape[0]
    if precon is not None:
        M = (precon.S @ A @ precon.S.T).tocsr()
        m = M.shape[0]
        lam_max = power_iteration(M, m, rel_tol=rel_tol,
                                  max_iter=power_max_iter, seed=seed)
        solve_state = {"x0": None}

        def solve(v):
            x, _ = cg_solve(M, v, rel_tol=inner_rel_tol,
                            max_iter=inner_max_iter, x0=solve_state["x0"])
            solve_state["x0"] = x.copy()
            return x

        lam_min = smallest_eigenvalue(solve, m, rel_tol=rel_tol, seed=seed + 1)
    else:
        helper = _sipic.build_sipic(A, gamma=gamma)
        if helper.eliminated:
            raise SingularSystemError(
                "matrix is singular up to machine precision "
                f"({len(helper.eliminated)} quasi-dependent rows eliminated)"
            )
        lam_max = power_iteration(A, n, rel_tol=rel_tol,
                                  max_iter=power_max_iter, seed=seed)
        solve = _sipic_solver(A, helper, inner_rel_tol, inner_max_iter)
        lam_min = smallest_eigenvalue(solve, n, rel_tol=rel_tol, seed=seed + 1)
    if lam_min.value <= 0 or not np.isfinite(lam_min.value):
        raise SingularSystemError("smallest eigenvalue estimate is not positive")
    return ConditionEstimate(
        kappa=lam_max.value / lam_min.value,
        lam_max=lam_max.value,
        lam_min=lam_min.value,
        converged=lam_max.converged and lam_min.converged,
    )


def condition_number_scaled(A, precon=None, *, gamma=0.9, rel_tol=1e-6,
                            inner_rel_tol=1e-10, inner_max_iter=20000,
                            power_max_iter=20000, seed=0):
    """Condition number of the diagonally scaled matrix D A D.

    Inner solves run through the full SIPIC preconditioner (built when not
    supplied), composed with the inverse scaling.
    """
    A = sp.csr_matrix(A)
    n = A.shape[0]
    d = _sipic.scale(A)
    Dm = sp.diags(d)
    M = (Dm @ A @ Dm).tocsr()
    if precon is None:
        precon = _sipic.build_sipic(A, gamma=gamma)
    if precon.eliminated:
        raise SingularSystemError(
            "matrix is singular up to machine precision; scaled condition "
            "number not computable"
        )
    lam_max = power_iteration(M, n, rel_tol=rel_tol, max_iter=power_max_iter,
                              seed=seed)
    solve = _sipic_solver(A, precon, inner_rel_tol, inner_max_iter, pre_scale=d)
    lam_min = smallest_eigenvalue(solve, n, rel_tol=rel_tol, seed=seed + 1)
    if lam_min.value <= 0 or not np.isfinite(lam_min.value):
        raise SingularSystemError("smallest eigenvalue estimate is not positive")
    return ConditionEstimate(
        kappa=lam_max.value / lam_min.value,
        lam_max=lam_max.value,
        lam_min=lam_min.value,
        converged=lam_max.converged and lam_min.converged,
    )


def check_symmetric(A, tol=1e-12):
    """Max absolute asymmetry relative to the largest entry."""
    A = sp.csr_matrix(A)
    diff = (A - A.T).tocoo()
    scale_ = max(np.abs(A.data).max(), 1e-300) if A.nnz else 1.0
    asym = np.abs(diff.data).max() / scale_ if diff.nnz else 0.0
    return asym <= tol, asym


def write_sparse_matrix(A, path, symmetric=True):
    A = sp.coo_matrix(A)
    mmwrite(str(path), A, symmetry="symmetric" if symmetric else "general")


def read_sparse_matrix(path):
    return sp.csr_matrix(mmread(str(path)))


def write_vector(b, path):
    mmwrite(str(path), np.asarray(b, dtype=float).reshape(-1, 1))


def write_cg_history_csv(report, path):
    """CSV of a CG history: ``iter,residual,energy_error`` per iteration."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["iter", "residual", "energy_error"])
        for k, res in enumerate(report.residual_norms):
            err = ""
            if report.energy_errors is not None and k < len(report.energy_errors):
                err = repr(float(report.energy_errors[k]))
            writer.writerow([k, repr(float(res)), err])
