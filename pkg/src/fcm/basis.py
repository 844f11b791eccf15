"""Tensor-product B-spline and Lagrange bases on uniform Cartesian meshes.

B-splines use uniform (non-open) knots on the cell lattice, so every basis
function is a shifted copy of the cardinal B-spline and the space is
C^(p-1) across cell faces.  Lagrange bases use equispaced nodes per cell
with shared face nodes (C^0).  A function receives a global index iff its
support intersects at least one active cell; nothing is renormalized.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

_SUPPORTED_ORDERS = (1, 2, 3, 4)


def bspline_values_1d(p, u):
    """Values/derivatives of the p+1 cardinal B-splines alive on one cell.

    ``u`` is the local cell coordinate in [0, 1].  Column ``j`` belongs to the
    axis function with lattice index ``c - p + j`` on cell ``c`` (ascending).
    Derivatives are per unit of ``u``.
    """
    u = np.asarray(u, dtype=float)
    v = [np.ones_like(u)]
    for k in range(1, p + 1):
        prev = v
        v = []
        for s in range(k + 1):
            t = u + s
            term = np.zeros_like(u)
            if s < k:
                term = term + (t / k) * prev[s]
            if s >= 1:
                term = term + ((k + 1 - t) / k) * prev[s - 1]
            v.append(term)
        if k == p:
            d = []
            for s in range(p + 1):
                term = np.zeros_like(u)
                if s < p:
                    term = term + prev[s]
                if s >= 1:
                    term = term - prev[s - 1]
                d.append(term)
    if p == 0:
        d = [np.zeros_like(u)]
    # column s corresponds to lattice offset c - s; flip to ascending index
    vals = np.stack(v[::-1], axis=1)
    ders = np.stack(d[::-1], axis=1)
    return vals, ders


def lagrange_values_1d(p, u):
    """Values/derivatives of the p+1 equispaced Lagrange polynomials on [0, 1].

    Column ``j`` belongs to the node ``j/p`` (ascending).  Derivatives are per
    unit of ``u``.
    """
    u = np.asarray(u, dtype=float)
    nodes = np.arange(p + 1) / p
    vals = np.empty(u.shape + (p + 1,))
    ders = np.empty_like(vals)
    for j in range(p + 1):
        num = np.ones_like(u)
        for k in range(p + 1):
            if k != j:
                num = num * (u - nodes[k]) / (nodes[j] - nodes[k])
        vals[..., j] = num
        der = np.zeros_like(u)
        for m in range(p + 1):
            if m == j:
                continue
            term = np.ones_like(u) / (nodes[j] - nodes[m])
            for k in range(p + 1):
                if k != j and k != m:
                    term = term * (u - nodes[k]) / (nodes[j] - nodes[k])
            der = der + term
        ders[..., j] = der
    return vals, ders


def functions_per_axis(family, p, n_cells):
    """Number of axis functions supported on a run of ``n_cells`` cells."""
    if family == "bspline":
        return n_cells + p
    if family == "lagrange":
        return p * n_cells + 1
    raise ValueError(f"unknown family {family!r}")


def _axis_ids(family, p, c):
    if family == "bspline":
        return range(c - p, c + 1)
    return range(c * p, c * p + p + 1)


@dataclass
class BasisSpace:
    """Scalar or vector approximation space tied to the active cells.

    ``cell_scalar_dofs`` lists, per cell, the global indices of the supported
    scalar functions in tensor order (y-axis function major, x-axis minor);
    :func:`evaluate` returns local values in the same order.  Vector spaces
    replicate the scalar basis per component with interleaved global dofs
    ``2*s + component``.
    """

    family: str
    p: int
    mesh: object
    components: int
    active_cells: list
    _index_of: dict = field(repr=False)
    n_scalar: int

    @property
    def n(self):
        return self.n_scalar * self.components

    def is_active(self, cell_index):
        return cell_index in self._cell_set

    def __post_init__(self):
        self._cell_set = set(self.active_cells)

    def cell_scalar_dofs(self, cell_index):
        if cell_index not in self._cell_set:
            raise ValueError(f"cell {cell_index} is not active")
        cx, cy = cell_index
        ids = [
            self._index_of[(fx, fy)]
            for fy in _axis_ids(self.family, self.p, cy)
            for fx in _axis_ids(self.family, self.p, cx)
        ]
        return np.array(ids, dtype=int)

    def cell_vector_dofs(self, cell_index):
        s = self.cell_scalar_dofs(cell_index)
        if self.components == 1:
            return s
        out = np.empty(self.components * len(s), dtype=int)
        for c in range(self.components):
            out[c :: self.components] = self.components * s + c
        return out

    def greville_abscissa(self, axis_function_id):
        """Physical 1-D coordinate reproducing linears (Greville point for
        B-splines, the node itself for Lagrange)."""
        h = self.mesh.h
        if self.family == "bspline":
            return h * (axis_function_id + (self.p + 1) / 2.0)
        return h * axis_function_id / self.p

    def scalar_index_pairs(self):
        return dict(self._index_of)


def build_space(mesh, family, p, components=1, *, active_cells):
    """Construct the basis over the active cells of a tessellation.

    ``active_cells`` may be a list of cell indices or of
    :class:`~fcm.geometry.TrimmedCell`.
    """
    if p not in _SUPPORTED_ORDERS:
        raise ValueError(f"order p={p} not supported (use one of {_SUPPORTED_ORDERS})")
    if family not in ("bspline", "lagrange"):
        raise ValueError(f"unknown family {family!r}")
    if components not in (1, 2):
        raise ValueError("components must be 1 or 2")
    indices = [getattr(c, "index", c) for c in active_cells]
    indices = sorted(indices, key=lambda t: (t[1], t[0]))
    lattice = set()
    for cx, cy in indices:
        for fy in _axis_ids(family, p, cy):
            for fx in _axis_ids(family, p, cx):
                lattice.add((fx, fy))
    ordered = sorted(lattice, key=lambda t: (t[1], t[0]))
    index_of = {key: k for k, key in enumerate(ordered)}
    return BasisSpace(
        family=family,
        p=p,
        mesh=mesh,
        components=components,
        active_cells=indices,
        _index_of=index_of,
        n_scalar=len(ordered),
    )


def evaluate(space, cell_index, points):
    """Values and physical gradients of the scalar functions supported on a
    cell, at points inside the cell's closure.

    Returns ``(values, gradients)`` with shapes ``(n_loc, n_pts)`` and
    ``(n_loc, n_pts, 2)``, ordered like ``cell_scalar_dofs``.
    """
    if not space.is_active(cell_index):
        raise ValueError(f"cell {cell_index} is not active")
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    h = space.mesh.h
    cx, cy = cell_index
    ux = np.clip(pts[:, 0] / h - cx, 0.0, 1.0)
    uy = np.clip(pts[:, 1] / h - cy, 0.0, 1.0)
    eval_1d = bspline_values_1d if space.family == "bspline" else lagrange_values_1d
    vx, dx = eval_1d(space.p, ux)
    vy, dy = eval_1d(space.p, uy)
    # tensor products, y-major to match cell_scalar_dofs
    vals = vy.T[:, None, :] * vx.T[None, :, :]
    gx = vy.T[:, None, :] * dx.T[None, :, :] / h
    gy = dy.T[:, None, :] * vx.T[None, :, :] / h
    n_loc = (space.p + 1) ** 2
    n_pts = pts.shape[0]
    vals = vals.reshape(n_loc, n_pts)
    grads = np.stack(
        [gx.reshape(n_loc, n_pts), gy.reshape(n_loc, n_pts)], axis=2
    )
    return vals, grads
