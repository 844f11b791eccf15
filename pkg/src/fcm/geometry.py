"""Implicit 2-D geometry and trimmed-cell quadrature on Cartesian meshes.

The physical domain is described two ways at once: implicitly, through a
vectorized point classifier ``inside()``, and explicitly, through a list of
parametric boundary primitives (line segments and circle arcs).  A uniform
Cartesian background mesh is trimmed to the domain by recursive bisection:
cut cells are subdivided to a fixed depth, the leaf squares are polygonized
against the classifier, and the polygons are fan-triangulated and equipped
with Gauss quadrature.  Boundary quadrature is generated directly from the
primitives as straight chords split at the finest subdivision lattice, so
volume and surface integration see the same piecewise-linear geometry.

Cells, quadrature points and weights are all expressed in physical
coordinates.  Mesh vertices sit on integer multiples of the mesh size, so a
feature placed at the origin is always at a mesh vertex.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

# Resolution of the initial sample scan along a leaf edge when searching for
# classification changes; crossings closer than 1/(EDGE_SAMPLES-1) of an edge
# apart may be missed (they cancel in area up to leaf resolution).
_EDGE_SAMPLES = 9
_BISECT_ITERS = 50


def _rotate(pts, angle):
    """Rotate row vectors by ``angle`` radians (counter-clockwise)."""
    c, s = math.cos(angle), math.sin(angle)
    return np.asarray(pts) @ np.array([[c, s], [-s, c]])


def _perp_right(d):
    """Right-hand perpendicular of a direction vector (outward for CCW walks)."""
    return np.array([d[1], -d[0]])


# ---------------------------------------------------------------------------
# Boundary primitives
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LineSegment:
    """Straight boundary piece with a constant outward unit normal."""

    curve_id: str
    p0: np.ndarray
    p1: np.ndarray
    normal: np.ndarray

    def point(self, t):
        t = np.asarray(t, dtype=float)
        return self.p0 + np.multiply.outer(t, self.p1 - self.p0)

    @property
    def length(self):
        return float(np.linalg.norm(self.p1 - self.p0))

    def parameter_breaks(self, pitch):
        """Parameters in (0, 1) where the segment crosses lattice lines."""
        breaks = []
        d = self.p1 - self.p0
        for axis in range(2):
            if abs(d[axis]) < 1e-14 * max(1.0, abs(pitch)):
                continue  # parallel to this family of lines
            lo, hi = sorted((self.p0[axis], self.p1[axis]))
            m0 = math.floor(lo / pitch) + 1
            m1 = math.ceil(hi / pitch) - 1
            for m in range(m0, m1 + 1):
                t = (m * pitch - self.p0[axis]) / d[axis]
                if 1e-12 < t < 1 - 1e-12:
                    breaks.append(t)
        return sorted(breaks)


@dataclass(frozen=True)
class CircleArc:
    """Arc of a circle, parametrized by angle; ``normal_sign=-1`` flips the
    radial direction (used when the circle bounds a hole in the domain)."""

    curve_id: str
    center: np.ndarray
    radius: float
    t0: float
    t1: float
    normal_sign: float = 1.0

    def point(self, t):
        t = np.asarray(t, dtype=float)
        return self.center + self.radius * np.stack(
            [np.cos(t), np.sin(t)], axis=-1
        )

    def outward_normal(self, t):
        return self.normal_sign * np.array([math.cos(t), math.sin(t)])

    def parameter_breaks(self, pitch):
        """Angles in (t0, t1) where the arc crosses lattice lines.

        The pieces between consecutive crossings are the exact chords of the
        polygonal boundary seen by the volume clipping, so no further
        subdivision may be added here; an arc that crosses no lattice line at
        all (circle smaller than one lattice box) is split into eighths so
        its chords stay non-degenerate.
        """
        cands = set()
        r = self.radius
        for axis, c in enumerate(self.center):
            m0 = math.floor((c - r) / pitch)
            m1 = math.ceil((c + r) / pitch)
            for m in range(m0, m1 + 1):
                u = (m * pitch - c) / r
                if not -1.0 < u < 1.0:
                    continue
                if axis == 0:
                    base = math.acos(u)
                    angles = (base, -base)
                else:
                    base = math.asin(u)
                    angles = (base, math.pi - base)
                for a in angles:
                    # bring into [t0, t1] modulo 2*pi
                    k0 = math.floor((self.t0 - a) / (2 * math.pi))
                    for k in (k0, k0 + 1, k0 + 2):
                        t = a + 2 * math.pi * k
                        if self.t0 + 1e-12 < t < self.t1 - 1e-12:
                            cands.add(t)
        if not cands:
            span = self.t1 - self.t0
            nsub = max(1, math.ceil(span / (math.pi / 4.0)))
            return [self.t0 + span * k / nsub for k in range(1, nsub)]
        return sorted(cands)


# ---------------------------------------------------------------------------
# Domains
# ---------------------------------------------------------------------------

class RotatedRectangle:
    """Axis-parallel rectangle rotated rigidly about its center.

    The open interior is the physical domain; the four edges carry curve ids
    ``edge0`` .. ``edge3`` (counter-clockwise from the bottom edge).
    """

    def __init__(self, center, width, height, angle=0.0, curve_prefix="edge"):
        self.center = np.asarray(center, dtype=float)
        self.width = float(width)
        self.height = float(height)
        self.angle = float(angle)
        w, h = self.width / 2, self.height / 2
        local = np.array([[-w, -h], [w, -h], [w, h], [-w, h]])
        self._corners = _rotate(local, self.angle) + self.center
        self.curves = []
        for k in range(4):
            p0, p1 = self._corners[k], self._corners[(k + 1) % 4]
            d = (p1 - p0) / np.linalg.norm(p1 - p0)
            self.curves.append(
                LineSegment(f"{curve_prefix}{k}", p0, p1, _perp_right(d))
            )

    def inside(self, pts):
        local = _rotate(np.atleast_2d(pts) - self.center, -self.angle)
        return (np.abs(local[:, 0]) < self.width / 2) & (
            np.abs(local[:, 1]) < self.height / 2
        )

    def corner_points(self):
        return self._corners.copy()

    def bbox(self):
        lo = self._corners.min(axis=0)
        hi = self._corners.max(axis=0)
        return lo[0], lo[1], hi[0], hi[1]


class Circle:
    """Circle used either as a hole or a standalone classifier."""

    def __init__(self, center, radius, curve_id="circle"):
        self.center = np.asarray(center, dtype=float)
        self.radius = float(radius)
        self.curve_id = curve_id

    def inside(self, pts):
        d = np.atleast_2d(pts) - self.center
        return d[:, 0] ** 2 + d[:, 1] ** 2 < self.radius**2

    def inside_closed(self, pts):
        d = np.atleast_2d(pts) - self.center
        return d[:, 0] ** 2 + d[:, 1] ** 2 <= self.radius**2


class Difference:
    """Rectangle minus a circular hole, with the boundary curves clipped
    analytically against each other at construction time.

    Edge portions buried in the hole are dropped, the circle is reduced to
    the arcs lying strictly inside the rectangle (with normals flipped so
    they point out of the remaining domain), and edge/circle junctions become
    corner points of the boundary.
    """

    def __init__(self, outer: RotatedRectangle, hole: Circle):
        self.outer = outer
        self.hole = hole
        self.curves = []
        junctions = []
        for seg in outer.curves:
            pieces, cuts = _clip_segment_outside_circle(seg, hole)
            self.curves.extend(pieces)
            junctions.extend(cuts)
        self.curves.extend(_clip_circle_inside_rectangle(hole, outer))
        self._junctions = junctions

    def inside(self, pts):
        return self.outer.inside(pts) & ~self.hole.inside_closed(pts)

    def corner_points(self):
        keep = [
            c
            for c in self.outer.corner_points()
            if not self.hole.inside_closed(c[None, :])[0]
        ]
        pts = list(keep) + self._junctions
        if not pts:
            return np.zeros((0, 2))
        return np.array(pts)

    def bbox(self):
        return self.outer.bbox()


def _segment_circle_roots(seg, circle):
    d = seg.p1 - seg.p0
    f = seg.p0 - circle.center
    a = float(d @ d)
    b = 2.0 * float(f @ d)
    c = float(f @ f) - circle.radius**2
    disc = b * b - 4 * a * c
    if disc <= 0:
        return []
    sq = math.sqrt(disc)
    return sorted(t for t in ((-b - sq) / (2 * a), (-b + sq) / (2 * a)))


def _clip_segment_outside_circle(seg, circle):
    roots = [t for t in _segment_circle_roots(seg, circle) if 1e-12 < t < 1 - 1e-12]
    ts = [0.0] + roots + [1.0]
    pieces, junction_pts = [], []
    for ta, tb in zip(ts[:-1], ts[1:]):
        mid = seg.point(0.5 * (ta + tb))
        if circle.inside_closed(mid[None, :])[0]:
            continue
        pieces.append(
            LineSegment(seg.curve_id, seg.point(ta), seg.point(tb), seg.normal)
        )
    for t in roots:
        junction_pts.append(seg.point(t))
    return pieces, junction_pts


def _clip_circle_inside_rectangle(circle, rect):
    angles = set()
    for seg in rect.curves:
        for t in _segment_circle_roots(seg, circle):
            if -1e-12 < t < 1 + 1e-12:
                p = seg.point(min(max(t, 0.0), 1.0))
                angles.add(math.atan2(p[1] - circle.center[1], p[0] - circle.center[0]))
    if not angles:
        if rect.inside(circle.center[None, :])[0]:
            # hole entirely inside: keep the full circle, normal flipped
            return [
                CircleArc(circle.curve_id, circle.center, circle.radius,
                          0.0, 2 * math.pi, normal_sign=-1.0)
            ]
        return []
    ts = sorted(angles)
    arcs = []
    for k in range(len(ts)):
        a = ts[k]
        b = ts[(k + 1) % len(ts)]
        if k == len(ts) - 1:
            b += 2 * math.pi
        mid = circle.center + circle.radius * np.array(
            [math.cos(0.5 * (a + b)), math.sin(0.5 * (a + b))]
        )
        if rect.inside(mid[None, :])[0]:
            arcs.append(
                CircleArc(circle.curve_id, circle.center, circle.radius,
                          a, b, normal_sign=-1.0)
            )
    return arcs


def square_with_circular_exclusion(theta_deg, h, side=1.0, eta_ref=5e-3):
    """Square of side ``side`` centered at the origin, rotated by ``theta_deg``,
    minus a fixed concentric circular exclusion.

    The exclusion radius is tied to the mesh size so that a cell with a
    volume fraction of roughly ``eta_ref`` occurs at the circle for every
    rotation angle (the circle nearly passes through a diagonal mesh vertex).
    """
    radius = math.sqrt(side**2 / 8.0 - math.sqrt(eta_ref / 2.0) * h)
    rect = RotatedRectangle((0.0, 0.0), side, side, math.radians(theta_deg))
    return Difference(rect, Circle((0.0, 0.0), radius))


def quarter_plate_with_hole(theta_deg=45.0, side=1.0, radius=3.0 / (2.0 * math.pi)):
    """Quarter plate of side ``side`` with a circular hole at its corner,
    rotated about that corner (which sits at the origin, a mesh vertex)."""
    theta = math.radians(theta_deg)
    center = _rotate(np.array([side / 2.0, side / 2.0]), theta)
    rect = RotatedRectangle(center, side, side, theta)
    return Difference(rect, Circle((0.0, 0.0), radius))


# ---------------------------------------------------------------------------
# Mesh and trimmed cells
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CartesianMesh:
    """Uniform Cartesian cell lattice; vertices at integer multiples of h."""

    h: float
    ix_range: tuple[int, int]  # cells ix0 <= ix < ix1
    iy_range: tuple[int, int]

    @classmethod
    def covering(cls, bbox, h):
        xmin, ymin, xmax, ymax = bbox
        pad = 1e-12 * max(1.0, abs(xmax - xmin), abs(ymax - ymin))
        ix0 = math.floor((xmin + pad) / h)
        ix1 = math.ceil((xmax - pad) / h)
        iy0 = math.floor((ymin + pad) / h)
        iy1 = math.ceil((ymax - pad) / h)
        return cls(h=h, ix_range=(ix0, ix1), iy_range=(iy0, iy1))

    @property
    def dim(self):
        return 2

    @property
    def n_cells(self):
        return (self.ix_range[1] - self.ix_range[0]) * (
            self.iy_range[1] - self.iy_range[0]
        )

    def cells(self):
        for iy in range(*self.iy_range):
            for ix in range(*self.ix_range):
                yield (ix, iy)

    def cell_box(self, index):
        ix, iy = index
        return (ix * self.h, iy * self.h, (ix + 1) * self.h, (iy + 1) * self.h)

    def cell_of(self, point):
        ix = math.floor(point[0] / self.h)
        iy = math.floor(point[1] / self.h)
        if self.ix_range[0] <= ix < self.ix_range[1] and self.iy_range[0] <= iy < self.iy_range[1]:
            return (ix, iy)
        return None


@dataclass(frozen=True)
class TrimmedCell:
    """One background cell intersected with the domain.

    Volume quadrature integrates over the trimmed region; boundary quadrature
    sits on chords of the domain boundary owned by this cell, with unit
    normals pointing out of the domain and the originating curve id recorded
    per point.
    """

    index: tuple[int, int]
    box: tuple[float, float, float, float]
    vol_pts: np.ndarray
    vol_wts: np.ndarray
    bnd_pts: np.ndarray
    bnd_wts: np.ndarray
    bnd_normals: np.ndarray
    bnd_curves: np.ndarray
    eta: float
    boundary_measure: float
    cut: bool

    @property
    def volume(self):
        return float(self.vol_wts.sum())

    @property
    def centroid(self):
        w = self.vol_wts.sum()
        return self.vol_pts.T @ self.vol_wts / w


class EmptyDomainError(ValueError):
    pass


def gauss_legendre_01(n):
    """Gauss-Legendre nodes/weights on [0, 1]."""
    x, w = np.polynomial.legendre.leggauss(n)
    return 0.5 * (x + 1.0), 0.5 * w


def _tensor_rule(box, nodes, weights):
    x0, y0, x1, y1 = box
    gx = x0 + (x1 - x0) * nodes
    gy = y0 + (y1 - y0) * nodes
    X, Y = np.meshgrid(gx, gy, indexing="ij")
    pts = np.stack([X.ravel(), Y.ravel()], axis=1)
    W = np.multiply.outer(weights, weights).T.ravel() * (x1 - x0) * (y1 - y0)
    return pts, W


def _duffy_rule(m):
    """Quadrature on the reference triangle (0,0)-(1,0)-(0,1) obtained by
    collapsing an m x m Gauss grid; exact for total degree <= 2m-2."""
    u, wu = gauss_legendre_01(m)
    U, V = np.meshgrid(u, u, indexing="ij")
    WU, WV = np.meshgrid(wu, wu, indexing="ij")
    x = U.ravel()
    y = (V * (1.0 - U)).ravel()
    w = (WU * WV * (1.0 - U)).ravel()
    return np.stack([x, y], axis=1), w


def _probe_points(boxes):
    """3x3 classification probes for an (n, 4) array of boxes."""
    boxes = np.asarray(boxes, dtype=float)
    x = np.stack(
        [boxes[:, 0], 0.5 * (boxes[:, 0] + boxes[:, 2]), boxes[:, 2]], axis=1
    )
    y = np.stack(
        [boxes[:, 1], 0.5 * (boxes[:, 1] + boxes[:, 3]), boxes[:, 3]], axis=1
    )
    px = np.repeat(x[:, None, :], 3, axis=1)  # (n, 3y, 3x)
    py = np.repeat(y[:, :, None], 3, axis=2)
    return np.stack([px, py], axis=-1).reshape(-1, 2)


def _corners_in_box(corner_pts, box, tol=0.0):
    if corner_pts.size == 0:
        return np.zeros((0, 2))
    x0, y0, x1, y1 = box
    t = tol
    m = (
        (corner_pts[:, 0] > x0 + t)
        & (corner_pts[:, 0] < x1 - t)
        & (corner_pts[:, 1] > y0 + t)
        & (corner_pts[:, 1] < y1 - t)
    )
    return corner_pts[m]


def _leaf_edges(boxes):
    """Endpoints of the four CCW edges of each box: arrays (n, 4, 2)."""
    x0, y0, x1, y1 = boxes[:, 0], boxes[:, 1], boxes[:, 2], boxes[:, 3]
    corners = np.stack(
        [
            np.stack([x0, y0], axis=1),
            np.stack([x1, y0], axis=1),
            np.stack([x1, y1], axis=1),
            np.stack([x0, y1], axis=1),
        ],
        axis=1,
    )
    pa = corners
    pb = corners[:, [1, 2, 3, 0], :]
    return pa, pb


def _batched_crossings(domain, pa, pb, flags, tol):
    """Crossing parameters per (leaf, edge) from pre-sampled flags.

    ``pa``/``pb`` have shape (n, 4, 2); ``flags`` is (n, 4, S) from sampling
    ``_EDGE_SAMPLES`` equispaced parameters.  All brackets are bisected in one
    vectorized sweep; returns a dict (leaf, edge) -> sorted parameter list.
    """
    ts = np.linspace(0.0, 1.0, _EDGE_SAMPLES)
    flips = flags[:, :, :-1] != flags[:, :, 1:]
    li, ei, ki = np.nonzero(flips)
    if len(li) == 0:
        return {}
    lo = ts[ki]
    hi = ts[ki + 1]
    flo = flags[li, ei, ki]
    A = pa[li, ei]
    D = pb[li, ei] - A
    span = np.linalg.norm(D, axis=1).max()
    for _ in range(_BISECT_ITERS):
        if span * float((hi - lo).max()) < tol:
            break
        mid = 0.5 * (lo + hi)
        fm = domain.inside(A + mid[:, None] * D)
        take_lo = fm == flo
        lo = np.where(take_lo, mid, lo)
        hi = np.where(take_lo, hi, mid)
    t_cross = 0.5 * (lo + hi)
    out = {}
    # flo True means the walk was inside before the crossing: an exit
    for leaf, edge, t, is_exit in zip(li, ei, t_cross, flo):
        out.setdefault((int(leaf), int(edge)), []).append((float(t), bool(is_exit)))
    for v in out.values():
        v.sort()
    return out


def _assemble_polygon(box, pa_edges, pb_edges, corner_flags, crossings,
                      corner_pts, tol):
    """Polygon of the inside region of one leaf from its edge data.

    Vertices are tagged 'in' (box corner inside the domain), 'enter' or
    'exit' (boundary crossings).  The polygon edge leaving an 'exit' vertex
    is an interior chord of the domain boundary; domain corners captured by
    the box are re-inserted there so that polygonal geometry stays exact.
    """
    verts, tags = [], []
    for k in range(4):
        if corner_flags[k]:
            verts.append(pa_edges[k])
            tags.append("in")
        for t, is_exit in crossings.get(k, ()):
            verts.append(pa_edges[k] + t * (pb_edges[k] - pa_edges[k]))
            tags.append("exit" if is_exit else "enter")
    if len(verts) < 2:
        return None

    def _merge(a, b):
        # crossing tags dominate a coincident 'in' corner; an enter/exit pair
        # collapsing onto one point is a pinch of the region, which stays a
        # regular polygon vertex but offers no chord for corner insertion
        if a == "in":
            return b
        if b == "in":
            return a
        return a if a == b else "in"

    keep_v, keep_t = [], []
    for v, t in zip(verts, tags):
        if keep_v and np.linalg.norm(v - keep_v[-1]) < tol:
            keep_t[-1] = _merge(keep_t[-1], t)
            continue
        keep_v.append(v)
        keep_t.append(t)
    while len(keep_v) > 1 and np.linalg.norm(keep_v[0] - keep_v[-1]) < tol:
        m = _merge(keep_t[-1], keep_t[0])
        keep_v.pop()
        keep_t.pop()
        keep_t[0] = m
    if len(keep_v) < 2:
        return None
    poly = list(keep_v)
    tags = keep_t
    inserts = {}
    for c in _corners_in_box(corner_pts, box, tol=-tol):
        if min(np.linalg.norm(v - c) for v in poly) < tol:
            continue
        best, best_d = None, np.inf
        for i in range(len(poly)):
            if tags[i] != "exit":
                continue
            j = (i + 1) % len(poly)
            d = _point_segment_distance(c, poly[i], poly[j])
            if d < best_d:
                best, best_d = i, d
        if best is not None:
            inserts.setdefault(best, []).append(c)
    for i in sorted(inserts, reverse=True):
        chord = poly[(i + 1) % len(poly)] - poly[i]
        cs = sorted(inserts[i], key=lambda c: float((c - poly[i]) @ chord))
        poly[i + 1 : i + 1] = cs
    if len(poly) < 3:
        return None
    return np.array(poly)


def _point_segment_distance(p, a, b):
    d = b - a
    L2 = float(d @ d)
    if L2 == 0.0:
        return float(np.linalg.norm(p - a))
    t = min(max(float((p - a) @ d) / L2, 0.0), 1.0)
    return float(np.linalg.norm(p - (a + t * d)))


def _polygon_quadrature(poly, duffy_pts, duffy_wts):
    """Fan the polygon from its vertex mean; signed triangle areas keep the
    rule exact for simple polygons."""
    c = poly.mean(axis=0)
    pts_out, wts_out = [], []
    n = len(poly)
    for i in range(n):
        v1 = poly[i]
        v2 = poly[(i + 1) % n]
        e1 = v1 - c
        e2 = v2 - c
        two_area = e1[0] * e2[1] - e1[1] * e2[0]
        if abs(two_area) < 1e-300:
            continue
        pts = c + np.outer(duffy_pts[:, 0], e1) + np.outer(duffy_pts[:, 1], e2)
        pts_out.append(pts)
        wts_out.append(duffy_wts * two_area)
    if not pts_out:
        return np.zeros((0, 2)), np.zeros(0)
    return np.vstack(pts_out), np.concatenate(wts_out)


def _descend(domain, box, depth, corner_pts):
    """Split a cut box recursively; returns (full_boxes, cut_leaf_boxes)."""
    if depth == 0:
        return [], [box]
    x0, y0, x1, y1 = box
    xm, ym = 0.5 * (x0 + x1), 0.5 * (y0 + y1)
    children = np.array(
        [
            (x0, y0, xm, ym),
            (xm, y0, x1, ym),
            (x0, ym, xm, y1),
            (xm, ym, x1, y1),
        ]
    )
    flags = domain.inside(_probe_points(children)).reshape(4, 9)
    full_out, cut_out = [], []
    for child, f in zip(children, flags):
        child = tuple(child)
        has_corner = _corners_in_box(corner_pts, child).size > 0
        if f.all() and not has_corner:
            full_out.append(child)
        elif not f.any() and not has_corner:
            continue
        else:
            fo, co = _descend(domain, child, depth - 1, corner_pts)
            full_out.extend(fo)
            cut_out.extend(co)
    return full_out, cut_out


def _leaf_quadrature(domain, leaf_boxes, corner_pts, duffy, tol):
    """Volume quadrature of all cut leaves, one vectorized boundary search."""
    n = len(leaf_boxes)
    if n == 0:
        return [(np.zeros((0, 2)), np.zeros(0))] * 0
    boxes = np.asarray(leaf_boxes, dtype=float)
    pa, pb = _leaf_edges(boxes)
    ts = np.linspace(0.0, 1.0, _EDGE_SAMPLES)
    samples = pa[:, :, None, :] + ts[None, None, :, None] * (
        pb[:, :, None, :] - pa[:, :, None, :]
    )
    flags = domain.inside(samples.reshape(-1, 2)).reshape(n, 4, _EDGE_SAMPLES)
    crossings = _batched_crossings(domain, pa, pb, flags, tol)
    out = []
    for leaf in range(n):
        per_edge = {
            e: crossings[(leaf, e)] for e in range(4) if (leaf, e) in crossings
        }
        poly = _assemble_polygon(
            tuple(boxes[leaf]),
            pa[leaf],
            pb[leaf],
            flags[leaf, :, 0],
            per_edge,
            corner_pts,
            tol,
        )
        if poly is None:
            out.append((np.zeros((0, 2)), np.zeros(0)))
        else:
            out.append(_polygon_quadrature(poly, *duffy))
    return out


def _boundary_pieces(domain, mesh, pitch, n_gauss):
    """Chord quadrature for every boundary primitive, bucketed per cell."""
    gl_x, gl_w = gauss_legendre_01(n_gauss)
    buckets: dict[tuple[int, int], list] = {}
    h = mesh.h
    for curve in domain.curves:
        if isinstance(curve, LineSegment):
            params = [0.0] + curve.parameter_breaks(pitch) + [1.0]
        else:
            params = [curve.t0] + curve.parameter_breaks(pitch) + [curve.t1]
        ends = curve.point(np.asarray(params))
        for k in range(len(params) - 1):
            pa, pb = ends[k], ends[k + 1]
            chord = pb - pa
            length = float(np.linalg.norm(chord))
            if length < 1e-13 * pitch:
                continue
            if isinstance(curve, LineSegment):
                normal = curve.normal
            else:
                perp = _perp_right(chord / length)
                ref = curve.outward_normal(0.5 * (params[k] + params[k + 1]))
                normal = perp if float(perp @ ref) >= 0 else -perp
            mid = 0.5 * (pa + pb)
            owner = mesh.cell_of(mid - 1e-7 * h * normal)
            if owner is None:
                continue
            pts = pa + np.outer(gl_x, chord)
            wts = gl_w * length
            buckets.setdefault(owner, []).append((pts, wts, normal, curve.curve_id))
    return buckets


def tessellate(domain, mesh, max_depth=2, quad_order=3):
    """Trim the mesh to the domain and build per-cell quadrature.

    ``quad_order`` is the Gauss order per direction on untrimmed regions and
    must be at least p+1 for a basis of order p; triangle and chord rules are
    upscaled so that products of two basis functions are still integrated
    exactly on the tessellated geometry.  Cut cells are bisected ``max_depth``
    times before their leaves are polygonized.  Only cells with a positive
    trimmed volume are returned, ordered by cell index.
    """
    if max_depth < 0:
        raise ValueError("max_depth must be >= 0")
    if quad_order < 1:
        raise ValueError("quad_order must be >= 1")
    h = mesh.h
    pitch = h / 2**max_depth
    sq_rule = gauss_legendre_01(quad_order)
    duffy = _duffy_rule(2 * quad_order - 1)
    corner_pts = domain.corner_points()
    tol = 1e-14 * h
    buckets = _boundary_pieces(domain, mesh, pitch, 2 * quad_order - 1)

    indices = list(mesh.cells())
    boxes = np.array([mesh.cell_box(i) for i in indices])
    flags = domain.inside(_probe_points(boxes)).reshape(len(indices), 9)

    full_cells = []
    cut_cells = []  # (index, full sub-boxes, slice into the global leaf list)
    leaf_boxes = []
    for index, box, f in zip(indices, boxes, flags):
        box = tuple(box)
        has_corner = _corners_in_box(corner_pts, box).size > 0
        if f.all() and not has_corner:
            full_cells.append((index, box))
        elif not f.any() and not has_corner:
            continue
        else:
            fo, co = _descend(domain, box, max_depth, corner_pts)
            start = len(leaf_boxes)
            leaf_boxes.extend(co)
            cut_cells.append((index, fo, slice(start, len(leaf_boxes))))
    leaf_rules = _leaf_quadrature(domain, leaf_boxes, corner_pts, duffy, tol)

    volumes = {}
    for index, box in full_cells:
        volumes[index] = (False, _tensor_rule(box, *sq_rule))
    for index, full_boxes, sl in cut_cells:
        parts = [_tensor_rule(b, *sq_rule) for b in full_boxes]
        parts.extend(leaf_rules[sl])
        pts = np.vstack([p[0] for p in parts]) if parts else np.zeros((0, 2))
        wts = np.concatenate([p[1] for p in parts]) if parts else np.zeros(0)
        volumes[index] = (True, (pts, wts))

    cells = []
    for index in indices:
        if index not in volumes:
            continue
        cut, (vol_pts, vol_wts) = volumes[index]
        eta = float(vol_wts.sum()) / h**2
        if eta <= 1e-16:
            continue
        box = mesh.cell_box(index)
        pieces = buckets.get(index, [])
        if pieces:
            bnd_pts = np.vstack([p[0] for p in pieces])
            bnd_wts = np.concatenate([p[1] for p in pieces])
            bnd_normals = np.vstack(
                [np.tile(p[2], (len(p[1]), 1)) for p in pieces]
            )
            bnd_curves = np.concatenate(
                [np.full(len(p[1]), p[3], dtype=object) for p in pieces]
            )
        else:
            bnd_pts = np.zeros((0, 2))
            bnd_wts = np.zeros(0)
            bnd_normals = np.zeros((0, 2))
            bnd_curves = np.zeros(0, dtype=object)
        cells.append(
            TrimmedCell(
                index=index,
                box=box,
                vol_pts=vol_pts,
                vol_wts=vol_wts,
                bnd_pts=bnd_pts,
                bnd_wts=bnd_wts,
                bnd_normals=bnd_normals,
                bnd_curves=bnd_curves,
                eta=min(eta, 1.0),
                boundary_measure=float(bnd_wts.sum()),
                cut=cut,
            )
        )
    return cells


def min_volume_fraction(cells):
    """Smallest volume fraction and the cell index where it occurs (first
    occurrence on ties)."""
    if not cells:
        raise EmptyDomainError("no active cells: the domain misses the mesh")
    best = min(range(len(cells)), key=lambda k: cells[k].eta)
    return cells[best].eta, cells[best].index


def dump_quadrature_csv(cells, path):
    """Debug dump of all quadrature points as ``x,y,weight,kind`` rows."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["x", "y", "weight", "kind"])
        for cell in cells:
            for p, w in zip(cell.vol_pts, cell.vol_wts):
                writer.writerow([repr(p[0]), repr(p[1]), repr(w), "volume"])
            for p, w in zip(cell.bnd_pts, cell.bnd_wts):
                writer.writerow([repr(p[0]), repr(p[1]), repr(w), "boundary"])
