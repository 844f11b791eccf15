"""Nitsche-stabilized finite cell assembly for Poisson and 2-D elasticity.

The bilinear form splits into a volume part, a symmetric consistency part on
the Dirichlet boundary and a penalty part.  Penalty constants come from a
per-cell generalized eigenvalue problem bounding the boundary normal-gradient
energy by the volume gradient energy; the problem is assembled in centered
monomials (origin at the trimmed cell's center of mass) so that it stays
solvable on cells with tiny volume fractions.  Assembly order is
deterministic: cells ascending, local indices ascending, so repeated runs
produce bit-identical matrices.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp

from . import basis as _basis

_KERNEL_CUT = 1e-14  # relative eigenvalue cutoff when pseudo-inverting V


class AssemblyError(ValueError):
    pass


@dataclass
class StabilizationResult:
    """Trace constants of one trimmed cell.

    ``constants`` is ``(C,)`` for Poisson and ``(C_lambda, C_mu)`` for
    elasticity; ``betas`` holds the penalty values actually used.  ``flagged``
    marks cells where the volume Gram matrix needed a pseudo-inverse.
    """

    cell_index: tuple
    constants: tuple
    betas: tuple
    flagged: bool = False


@dataclass
class FcmSystem:
    """Assembled sparse system with its three bilinear contributions kept
    separate for diagnostics (A = volume + consistency + penalty)."""

    A: sp.csr_matrix
    b: np.ndarray
    volume_part: sp.csr_matrix
    consistency_part: sp.csr_matrix
    penalty_part: sp.csr_matrix
    stabilization: dict
    stab_mode: str
    space: object

    @property
    def n(self):
        return self.A.shape[0]


def _dirichlet_curves(bc):
    return {cid for cid, (kind, _) in bc.items() if kind == "dirichlet"}


def _neumann_curves(bc):
    return {cid for cid, (kind, _) in bc.items() if kind == "neumann"}


def _boundary_mask(cell, curve_ids):
    if cell.bnd_wts.size == 0 or not curve_ids:
        return np.zeros(0, dtype=bool)
    return np.isin(cell.bnd_curves, list(curve_ids))


def monomial_table(p, pts, origin):
    """Values and gradients of the tensor monomials (x-xo)^a (y-yo)^b,
    0 <= a,b <= p, excluding the constant."""
    x = pts[:, 0] - origin[0]
    y = pts[:, 1] - origin[1]
    powx = np.stack([x**a for a in range(p + 1)])
    powy = np.stack([y**b for b in range(p + 1)])
    vals, grads = [], []
    for a in range(p + 1):
        for b in range(p + 1):
            if a == 0 and b == 0:
                continue
            vals.append(powx[a] * powy[b])
            gx = a * powx[a - 1] * powy[b] if a > 0 else np.zeros_like(x)
            gy = b * powx[a] * powy[b - 1] if b > 0 else np.zeros_like(x)
            grads.append(np.stack([gx, gy], axis=1))
    return np.stack(vals), np.stack(grads)


def _gep_max(B, V):
    """Largest eigenvalue of B x = lam V x for symmetric B, V >= 0.

    Exact-kernel rows (identically zero diagonal of V) are dropped, the rest
    is scaled to a unit diagonal, and a Cholesky-based solver is tried first;
    if the scaled V is numerically singular the problem is restricted to its
    numerically nonsingular eigenspace.  Rows with tiny but nonzero diagonal
    must be kept: on strongly anisotropic trimmed cells they carry the
    extreme trace quotients, and the scaling absorbs their magnitude.
    Returns (lam_max, flagged).
    """
    dV = np.diag(V).copy()
    keep = dV > 0.0
    B = B[np.ix_(keep, keep)]
    V = V[np.ix_(keep, keep)]
    if B.size == 0:
        return 0.0, False
    s = 1.0 / np.sqrt(np.diag(V))
    Bs = B * np.outer(s, s)
    Vs = V * np.outer(s, s)
    try:
        w = sla.eigh(Bs, Vs, eigvals_only=True)
        return max(float(w[-1]), 0.0), False
    except (sla.LinAlgError, ValueError):
        pass
    w, U = np.linalg.eigh(Vs)
    mask = w > _KERNEL_CUT * w.max()
    T = U[:, mask] / np.sqrt(w[mask])
    M = T.T @ Bs @ T
    w2 = np.linalg.eigvalsh(M)
    return max(float(w2[-1]), 0.0), True


def local_stabilization(cell, space, problem="poisson", *, dirichlet_curves=None,
                        lame=(1.0, 1.0), beta_multiplier=2.0):
    """Penalty constants for one cell that intersects the Dirichlet boundary.

    Monomials are centered at the trimmed cell's center of mass.  For Poisson
    the penalty is ``beta = beta_multiplier * C``; for elasticity the two
    constants scale as ``beta_lam = beta_multiplier * lam * C_lam`` and
    ``beta_mu = 2 * beta_multiplier * mu * C_mu``.
    """
    mask = (
        np.ones(cell.bnd_wts.size, dtype=bool)
        if dirichlet_curves is None
        else _boundary_mask(cell, dirichlet_curves)
    )
    if cell.vol_wts.size == 0 or not mask.any():
        raise AssemblyError(
            f"cell {cell.index} has no Dirichlet boundary or no volume"
        )
    origin = cell.centroid
    p = space.p
    bw = cell.bnd_wts[mask]
    bn = cell.bnd_normals[mask]
    bvals, bgrads = monomial_table(p, cell.bnd_pts[mask], origin)
    vvals, vgrads = monomial_table(p, cell.vol_pts, origin)

    if problem == "poisson":
        dn = np.einsum("aqd,qd->aq", bgrads, bn)
        B = np.einsum("aq,bq,q->ab", dn, dn, bw)
        V = np.einsum("aqd,bqd,q->ab", vgrads, vgrads, cell.vol_wts)
        C, flagged = _gep_max(B, V)
        beta = beta_multiplier * C
        return StabilizationResult(cell.index, (C,), (beta,), flagged)

    if problem != "elasticity":
        raise ValueError(f"unknown problem {problem!r}")
    lam, mu = lame
    # vector monomial fields e_k * phi_a, enumerated (a, k) with k fastest
    nmono = bvals.shape[0]
    # divergence of e_k*phi is d phi/d x_k
    div_b = np.concatenate([bgrads[:, :, 0], bgrads[:, :, 1]], axis=0)
    div_v = np.concatenate([vgrads[:, :, 0], vgrads[:, :, 1]], axis=0)
    B_lam = np.einsum("aq,bq,q->ab", div_b, div_b, bw)
    V_lam = np.einsum("aq,bq,q->ab", div_v, div_v, cell.vol_wts)
    C_lam, f1 = _gep_max(B_lam, V_lam)

    # n . sym_grad(e_k*phi) is the vector (g.n e_k + n_k g)/2
    def _sym_traction(grads, normals):
        gn = np.einsum("aqd,qd->aq", grads, normals)
        rows = []
        for k in range(2):
            t = 0.5 * (
                np.einsum("aq,qd->aqd", gn, np.eye(2)[k][None, :].repeat(len(normals), 0))
                + np.einsum("q,aqd->aqd", normals[:, k], grads)
            )
            rows.append(t)
        return np.concatenate(rows, axis=0)

    tr = _sym_traction(bgrads, bn)
    B_mu = np.einsum("aqd,bqd,q->ab", tr, tr, bw)

    # |sym_grad|^2 for e_k*phi pairs: (delta_kl g_a.g_b + g_a[l] g_b[k])/2
    gg = np.einsum("aqd,bqd,q->ab", vgrads, vgrads, cell.vol_wts)
    gkl = np.einsum("aql,bqk,q->albk", vgrads, vgrads, cell.vol_wts)
    V_mu = np.zeros((2 * nmono, 2 * nmono))
    for k in range(2):
        for l in range(2):
            blk = 0.5 * gkl[:, l, :, k]
            if k == l:
                blk = blk + 0.5 * gg
            V_mu[k * nmono : (k + 1) * nmono, l * nmono : (l + 1) * nmono] = blk
    C_mu, f2 = _gep_max(B_mu, V_mu)
    beta_lam = beta_multiplier * lam * C_lam
    beta_mu = 2.0 * beta_multiplier * mu * C_mu
    return StabilizationResult(
        cell.index, (C_lam, C_mu), (beta_lam, beta_mu), f1 or f2
    )


def _stabilization_pass(cells, space, bc, problem, lame, beta_multiplier):
    dirichlet = _dirichlet_curves(bc)
    stab = {}
    for cell in cells:
        if _boundary_mask(cell, dirichlet).any():
            stab[cell.index] = local_stabilization(
                cell, space, problem, dirichlet_curves=dirichlet, lame=lame,
                beta_multiplier=beta_multiplier,
            )
    return stab


class _Accumulator:
    def __init__(self, n):
        self.n = n
        self.rows, self.cols, self.vals = [], [], []

    def add(self, dofs, local):
        k = len(dofs)
        self.rows.append(np.repeat(dofs, k))
        self.cols.append(np.tile(dofs, k))
        self.vals.append(local.ravel())

    def matrix(self):
        if not self.rows:
            return sp.csr_matrix((self.n, self.n))
        A = sp.coo_matrix(
            (
                np.concatenate(self.vals),
                (np.concatenate(self.rows), np.concatenate(self.cols)),
            ),
            shape=(self.n, self.n),
        ).tocsr()
        A.sum_duplicates()
        return A


def assemble_poisson(cells, space, bc, f=None, stab_mode="local",
                     beta_multiplier=2.0):
    """Assemble the Poisson system with weak Dirichlet conditions.

    ``bc`` maps curve ids to ``("dirichlet", g)`` or ``("neumann", g)`` with
    ``g(points) -> values`` (``None`` for homogeneous data).  ``stab_mode``
    "global" applies the largest local penalty on the whole Dirichlet
    boundary.
    """
    if space.components != 1:
        raise AssemblyError("poisson assembly needs a scalar space")
    stab = _stabilization_pass(cells, space, bc, "poisson", (1.0, 1.0),
                               beta_multiplier)
    beta_global = max((s.betas[0] for s in stab.values()), default=0.0)
    dirichlet = _dirichlet_curves(bc)
    n = space.n
    acc1, acc2, acc3 = _Accumulator(n), _Accumulator(n), _Accumulator(n)
    b = np.zeros(n)
    for cell in sorted(cells, key=lambda c: (c.index[1], c.index[0])):
        dofs = space.cell_scalar_dofs(cell.index)
        vals, grads = _basis.evaluate(space, cell.index, cell.vol_pts)
        acc1.add(dofs, np.einsum("aqd,bqd,q->ab", grads, grads, cell.vol_wts))
        if f is not None:
            b[dofs] += vals @ (cell.vol_wts * f(cell.vol_pts))
        if cell.bnd_wts.size == 0:
            continue
        if cell.index in stab:
            beta = beta_global if stab_mode == "global" else stab[cell.index].betas[0]
        else:
            beta = 0.0
        for cid, (kind, data) in bc.items():
            m = _boundary_mask(cell, {cid})
            if not m.any():
                continue
            pts = cell.bnd_pts[m]
            w = cell.bnd_wts[m]
            nrm = cell.bnd_normals[m]
            bvals, bgrads = _basis.evaluate(space, cell.index, pts)
            if kind == "neumann":
                if data is not None:
                    b[dofs] += bvals @ (w * data(pts))
                continue
            dn = np.einsum("aqd,qd->aq", bgrads, nrm)
            wv = bvals * w
            acc2.add(dofs, -(wv @ dn.T + dn @ wv.T))
            acc3.add(dofs, beta * (wv @ bvals.T))
            if data is not None:
                g = data(pts)
                b[dofs] += bvals @ (w * beta * g) - dn @ (w * g)
    F1, F2, F3 = acc1.matrix(), acc2.matrix(), acc3.matrix()
    A = (F1 + F2 + F3).tocsr()
    A.sum_duplicates()
    return FcmSystem(A, b, F1, F2, F3, stab, stab_mode, space)


def assemble_elasticity_2d(cells, space, bc, lam=1.0, mu=1.0, stab_mode="local",
                           beta_multiplier=2.0, f=None):
    """Assemble plane-strain linear elasticity with weak Dirichlet conditions.

    Dirichlet data maps ``g(points) -> (n, 2)`` displacements; Neumann data
    maps ``g(points, normals) -> (n, 2)`` tractions.  The penalty splits into
    a normal part scaled by ``beta_lam`` and an isotropic part scaled by
    ``beta_mu``.
    """
    if space.components != 2:
        raise AssemblyError("elasticity assembly needs a two-component space")
    if lam <= 0 or mu <= 0:
        raise AssemblyError("Lame parameters must be positive")
    stab = _stabilization_pass(cells, space, bc, "elasticity", (lam, mu),
                               beta_multiplier)
    beta_lam_g = max((s.betas[0] for s in stab.values()), default=0.0)
    beta_mu_g = max((s.betas[1] for s in stab.values()), default=0.0)
    n = space.n
    acc1, acc2, acc3 = _Accumulator(n), _Accumulator(n), _Accumulator(n)
    b = np.zeros(n)
    eye = np.eye(2)
    for cell in sorted(cells, key=lambda c: (c.index[1], c.index[0])):
        dofs = space.cell_vector_dofs(cell.index)
        nloc = len(dofs) // 2
        vals, g = _basis.evaluate(space, cell.index, cell.vol_pts)
        w = cell.vol_wts
        T1 = np.einsum("aqk,bql,q->akbl", g, g, w)  # div-div cross part
        gg = np.einsum("aqd,bqd,q->ab", g, g, w)
        T3 = np.einsum("aql,bqk,q->akbl", g, g, w)
        K = lam * T1 + mu * T3 + mu * np.einsum("ab,kl->akbl", gg, eye)
        acc1.add(dofs, K.reshape(2 * nloc, 2 * nloc))
        if f is not None:
            load = f(cell.vol_pts)  # (q, 2)
            b[dofs] += np.einsum("aq,q,qk->ak", vals, w, load).reshape(-1)
        if cell.bnd_wts.size == 0:
            continue
        if cell.index in stab:
            if stab_mode == "global":
                beta_lam_c, beta_mu_c = beta_lam_g, beta_mu_g
            else:
                beta_lam_c, beta_mu_c = stab[cell.index].betas
        else:
            beta_lam_c = beta_mu_c = 0.0
        for cid, (kind, data) in bc.items():
            m = _boundary_mask(cell, {cid})
            if not m.any():
                continue
            pts = cell.bnd_pts[m]
            bw = cell.bnd_wts[m]
            nrm = cell.bnd_normals[m]
            bvals, bg = _basis.evaluate(space, cell.index, pts)
            if kind == "neumann":
                if data is not None:
                    t = data(pts, nrm)  # (q, 2)
                    b[dofs] += np.einsum("aq,q,qk->ak", bvals, bw, t).reshape(-1)
                continue
            # traction of the basis field (b, l): lam g[b,q,l] n + mu (g.n e_l + n_l g)
            gn = np.einsum("bqd,qd->bq", bg, nrm)
            Sig = (
                lam * np.einsum("bql,qk->blqk", bg, nrm)
                + mu * np.einsum("bq,lk->blqk", gn, eye)
                + mu * np.einsum("ql,bqk->blqk", nrm, bg)
            )
            T = np.einsum("aq,q,blqk->akbl", bvals, bw, Sig)
            F2loc = -(T + T.transpose(2, 3, 0, 1))
            acc2.add(dofs, F2loc.reshape(2 * nloc, 2 * nloc))
            nn = np.einsum("qk,ql->qkl", nrm, nrm)
            P3 = beta_lam_c * np.einsum("aq,bq,q,qkl->akbl", bvals, bvals, bw, nn)
            P3 = P3 + beta_mu_c * np.einsum(
                "aq,bq,q,kl->akbl", bvals, bvals, bw, eye
            )
            acc3.add(dofs, P3.reshape(2 * nloc, 2 * nloc))
            if data is not None:
                gd = data(pts)  # (q, 2)
                rhs = -np.einsum("qk,alqk,q->al", gd, Sig, bw)
                gdn = np.einsum("qk,qk->q", gd, nrm)
                rhs += beta_lam_c * np.einsum("aq,q,q,ql->al", bvals, bw, gdn, nrm)
                rhs += beta_mu_c * np.einsum("aq,q,ql->al", bvals, bw, gd)
                b[dofs] += rhs.reshape(-1)
    F1, F2, F3 = acc1.matrix(), acc2.matrix(), acc3.matrix()
    A = (F1 + F2 + F3).tocsr()
    A.sum_duplicates()
    return FcmSystem(A, b, F1, F2, F3, stab, stab_mode, space)


# ---------------------------------------------------------------------------
# Infinite plate with a circular hole (plane strain, unit horizontal traction)
# ---------------------------------------------------------------------------

def _plate_terms(lam, mu, R):
    """Displacement components as sums of c * x^a y^b / (x^2+y^2)^k terms."""
    A = (2 * mu + lam) / (4 * (mu + lam))
    B = (mu - lam) * R**2 / (4 * (mu + lam))
    A2 = -lam / (4 * (mu + lam))
    B2 = (mu + 3 * lam) * R**2 / (4 * (mu + lam))
    ux = [(A, 1, 0, 0), (B, 1, 0, 1), (0.75 * R**4, 1, 0, 2),
          (R**2, 3, 0, 2), (-(R**4), 3, 0, 3)]
    uy = [(A2, 0, 1, 0), (B2, 0, 1, 1), (-0.75 * R**4, 0, 1, 2),
          (-(R**2), 0, 3, 2), (R**4, 0, 3, 3)]
    return ux, uy


def _eval_terms(terms, x, y):
    s = x * x + y * y
    val = np.zeros_like(x)
    dx = np.zeros_like(x)
    dy = np.zeros_like(x)
    for c, a, bb, k in terms:
        xa = x**a
        yb = y**bb
        sk = s ** (-k) if k else np.ones_like(s)
        val += c * xa * yb * sk
        ddx = np.zeros_like(x)
        if a:
            ddx += a * x ** (a - 1) * yb * sk
        if k:
            ddx -= 2 * k * x ** (a + 1) * yb * s ** (-k - 1)
        ddy = np.zeros_like(x)
        if bb:
            ddy += bb * xa * y ** (bb - 1) * sk
        if k:
            ddy -= 2 * k * xa * y ** (bb + 1) * s ** (-k - 1)
        dx += c * ddx
        dy += c * ddy
    return val, dx, dy


def plate_solution_fields(pts, lam=1.0, mu=1.0, R=3.0 / (2.0 * math.pi),
                          min_radius_factor=0.5):
    """Displacement, displacement gradient and stress of the plate solution.

    Returns ``(u (n,2), grad_u (n,2,2), sigma (n,2,2))`` with
    ``grad_u[:, i, j] = d u_i / d x_j``.  Points slightly inside the hole are
    tolerated down to ``min_radius_factor * R``: quadrature on the polygonal
    approximation of the hole boundary dips below the exact radius, and data
    is applied on that approximate geometry.
    """
    pts = np.atleast_2d(np.asarray(pts, dtype=float))
    x, y = pts[:, 0], pts[:, 1]
    r2 = x * x + y * y
    if np.any(r2 < (min_radius_factor * R) ** 2):
        raise ValueError("plate solution evaluated too close to the origin")
    tx, ty = _plate_terms(lam, mu, R)
    ux, duxdx, duxdy = _eval_terms(tx, x, y)
    uy, duydx, duydy = _eval_terms(ty, x, y)
    u = np.stack([ux, uy], axis=1) / mu
    grad = np.empty((len(x), 2, 2))
    grad[:, 0, 0] = duxdx / mu
    grad[:, 0, 1] = duxdy / mu
    grad[:, 1, 0] = duydx / mu
    grad[:, 1, 1] = duydy / mu
    eps = 0.5 * (grad + grad.transpose(0, 2, 1))
    tr = eps[:, 0, 0] + eps[:, 1, 1]
    sigma = 2.0 * mu * eps
    sigma[:, 0, 0] += lam * tr
    sigma[:, 1, 1] += lam * tr
    return u, grad, sigma


def exact_plate_solution(x, y, lam=1.0, mu=1.0, R=3.0 / (2.0 * math.pi)):
    """Displacement components and stress tensor at (x, y), defined for
    points outside the hole (r >= R)."""
    x = np.asarray(x, dtype=float)
    pts = np.stack([np.ravel(x), np.ravel(np.asarray(y, dtype=float))], axis=1)
    r2 = pts[:, 0] ** 2 + pts[:, 1] ** 2
    if np.any(r2 < R**2 * (1.0 - 1e-12)):
        raise ValueError("plate solution evaluated inside the hole")
    u, _, sigma = plate_solution_fields(pts, lam, mu, R)
    if x.ndim == 0:
        return float(u[0, 0]), float(u[0, 1]), sigma[0]
    shp = x.shape
    return u[:, 0].reshape(shp), u[:, 1].reshape(shp), sigma.reshape(shp + (2, 2))


# ---------------------------------------------------------------------------
# Error functionals and exports
# ---------------------------------------------------------------------------

def poisson_energy_error(cells, space, coeffs, exact_grad):
    """Squared H1-seminorm of u_h - u over the trimmed domain, square-rooted."""
    total = 0.0
    for cell in cells:
        dofs = space.cell_scalar_dofs(cell.index)
        _, grads = _basis.evaluate(space, cell.index, cell.vol_pts)
        gh = np.einsum("aqd,a->qd", grads, coeffs[dofs])
        ge = exact_grad(cell.vol_pts)
        diff = gh - ge
        total += float(np.einsum("qd,qd,q->", diff, diff, cell.vol_wts))
    return math.sqrt(total)


def elasticity_strain_energy_error(cells, space, coeffs, lam=1.0, mu=1.0,
                                   exact_grad=None):
    """Strain energy of the displacement error, 1/2 int eps(e):sigma(e)."""
    total = 0.0
    for cell in cells:
        dofs = space.cell_scalar_dofs(cell.index)
        _, grads = _basis.evaluate(space, cell.index, cell.vol_pts)
        X = np.stack(
            [coeffs[2 * dofs], coeffs[2 * dofs + 1]], axis=1
        )  # (nloc, 2) components
        gh = np.einsum("aqd,ak->qkd", grads, X)
        if exact_grad is not None:
            gh = gh - exact_grad(cell.vol_pts)
        eps = 0.5 * (gh + gh.transpose(0, 2, 1))
        tr = eps[:, 0, 0] + eps[:, 1, 1]
        dens = 0.5 * (lam * tr**2 + 2.0 * mu * np.einsum("qkd,qkd->q", eps, eps))
        total += float(dens @ cell.vol_wts)
    return total


def write_system_matrix_market(system, prefix):
    """Export A (symmetric coordinate format) and b alongside it."""
    from .linalg import write_sparse_matrix, write_vector

    write_sparse_matrix(system.A, f"{prefix}_A.mtx", symmetric=True)
    write_vector(system.b, f"{prefix}_b.mtx")


def write_cell_csv(system, cells, path):
    """Per-cell trimming and stabilization report: ix,iy,eta,C,beta."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["ix", "iy", "eta", "C", "beta"])
        for cell in cells:
            s = system.stabilization.get(cell.index)
            writer.writerow(
                [
                    cell.index[0],
                    cell.index[1],
                    repr(cell.eta),
                    repr(s.constants[0]) if s else "",
                    repr(s.betas[0]) if s else "",
                ]
            )
