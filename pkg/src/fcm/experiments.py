"""Scenario drivers: rotating square, plate with hole, manufactured solution.

Each driver sweeps a family of configurations, records condition numbers,
fill-in and solver statistics, and writes delimited output plus log-log
slope fits.  Runs are deterministic for a fixed configuration and seed.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import assembly as _assembly
from . import basis as _basis
from . import geometry as _geometry
from . import linalg as _linalg
from . import sipic as _sipic

ETA_REF = 5e-3  # target minimum volume fraction at the circular exclusion


class SweepError(RuntimeError):
    pass


@dataclass
class ScenarioConfig:
    scenario: str = "rotating_square"
    family: str = "bspline"
    p: int = 2
    h: float = 1.0 / 32.0
    depth: int = 2
    n_angles: int = 100
    angle_range: tuple = (0.0, 45.0)
    gamma: float = 0.9
    eps: float | None = None
    stab_mode: str = "local"
    precon: str = "sipic"  # none | scale | sipic
    rel_tol: float = 1e-6
    rel_tol_sipic: float = 1e-10
    abs_tol: float = 0.0
    max_iter: int = 100_000
    levels: int = 5
    eta_fit_max: float = 1e-4
    seed: int = 0
    solve: bool = False
    export_systems: bool = False
    figures: bool = True
    out_dir: str | None = None
    compute_kappa: tuple = None  # derived from precon when None

    def __post_init__(self):
        if self.h <= 0 or self.gamma < 0 or self.gamma > 1:
            raise ValueError("invalid configuration")
        if self.n_angles < 1 or self.levels < 1 or self.depth < 0:
            raise ValueError("invalid configuration")
        if self.compute_kappa is None:
            order = ("none", "scale", "sipic")
            if self.precon not in order:
                raise ValueError(f"unknown precon {self.precon!r}")
            upto = order.index(self.precon)
            self.compute_kappa = tuple(
                {0: ("orig",), 1: ("orig", "scaled"),
                 2: ("orig", "scaled", "sipic")}[upto]
            )


@dataclass
class SweepRecord:
    angle: float
    eta: float
    kappa_orig: float = math.nan
    kappa_scaled: float = math.nan
    kappa_sipic: float = math.nan
    fillin: float = math.nan
    elims: int = 0
    cg_orig: float = math.nan
    cg_sipic: float = math.nan
    wall_time: float = 0.0

    CSV_FIELDS = ("angle", "eta", "kappa_orig", "kappa_scaled", "kappa_sipic",
                  "fillin", "elims", "cg_orig", "cg_sipic")

    def csv_row(self):
        out = []
        for name in self.CSV_FIELDS:
            v = getattr(self, name)
            if isinstance(v, float):
                out.append("nan" if math.isnan(v) else repr(v))
            else:
                out.append(str(v))
        return out


def fit_loglog_slope(points):
    """Least-squares slope (and its standard error) of log y against log x.

    Needs at least five strictly positive points.
    """
    pts = [(float(x), float(y)) for x, y in points
           if math.isfinite(x) and math.isfinite(y)]
    if any(x <= 0 or y <= 0 for x, y in pts):
        raise ValueError("all points must be positive")
    if len(pts) < 5:
        raise ValueError("need at least 5 points for a slope fit")
    lx = np.log([p[0] for p in pts])
    ly = np.log([p[1] for p in pts])
    lx0 = lx - lx.mean()
    denom = float(lx0 @ lx0)
    if denom == 0.0:
        raise ValueError("degenerate abscissae")
    slope = float(lx0 @ (ly - ly.mean())) / denom
    resid = ly - ly.mean() - slope * lx0
    dof = max(len(pts) - 2, 1)
    stderr = math.sqrt(float(resid @ resid) / dof / denom)
    return slope, stderr


def rotating_square_mesh(h):
    """Mesh fixed across all rotation angles (covers the 45-degree sweep)."""
    half = math.sqrt(2.0) / 2.0
    return _geometry.CartesianMesh.covering((-half, -half, half, half), h)


def _kappa_or_nan(fn, *args, **kw):
    try:
        est = fn(*args, **kw)
        return est.kappa
    except _linalg.SingularSystemError:
        return math.nan


def rotating_square_records(cfg):
    """Sweep the rotating square and return one record per angle."""
    mesh = rotating_square_mesh(cfg.h)
    angles = np.linspace(cfg.angle_range[0], cfg.angle_range[1], cfg.n_angles)
    quad_order = cfg.p + 1
    records = []
    systems = []
    for k, theta in enumerate(angles):
        t0 = time.perf_counter()
        domain = _geometry.square_with_circular_exclusion(
            theta, cfg.h, eta_ref=ETA_REF
        )
        cells = _geometry.tessellate(domain, mesh, cfg.depth, quad_order)
        eta, _ = _geometry.min_volume_fraction(cells)
        space = _basis.build_space(mesh, cfg.family, cfg.p, active_cells=cells)
        bc = {c.curve_id: ("dirichlet", None) for c in domain.curves}
        system = _assembly.assemble_poisson(
            cells, space, bc, stab_mode=cfg.stab_mode
        )
        rec = SweepRecord(angle=float(theta), eta=float(eta))
        seed = cfg.seed + 17 * k
        precon = _sipic.build_sipic(system.A, gamma=cfg.gamma, eps=cfg.eps)
        rec.fillin = precon.fillin
        rec.elims = len(precon.eliminated)
        if "orig" in cfg.compute_kappa:
            rec.kappa_orig = _kappa_or_nan(
                _linalg.condition_number, system.A, gamma=cfg.gamma, seed=seed
            )
        if "scaled" in cfg.compute_kappa:
            rec.kappa_scaled = _kappa_or_nan(
                _linalg.condition_number_scaled, system.A, precon, seed=seed
            )
        if "sipic" in cfg.compute_kappa:
            rec.kappa_sipic = _kappa_or_nan(
                _linalg.condition_number, system.A, precon, seed=seed
            )
        if cfg.solve:
            x_ref = np.ones(system.n)
            rhs = system.A @ x_ref
            _, rep = _linalg.cg_solve(system.A, rhs, rel_tol=cfg.rel_tol,
                                      max_iter=cfg.max_iter)
            rec.cg_orig = rep.iterations
            ps = _sipic.apply_preconditioned(system.A, rhs, precon)
            _, rep = _linalg.cg_solve(ps.matvec, ps.rhs, rel_tol=cfg.rel_tol,
                                      max_iter=cfg.max_iter)
            rec.cg_sipic = rep.iterations
        rec.wall_time = time.perf_counter() - t0
        if (
            math.isfinite(rec.kappa_orig)
            and math.isfinite(rec.kappa_sipic)
            and rec.kappa_sipic > rec.kappa_orig * (1.0 + 1e-3)
        ):
            raise SweepError(
                f"preconditioning worsened conditioning at angle {theta}"
            )
        records.append(rec)
        systems.append(system if cfg.export_systems else None)
    return records, systems


def sweep_slopes(records, cfg):
    """Log-log slopes of the kappa columns against eta over the small-eta
    tail (records with eta below ``cfg.eta_fit_max``)."""
    out = {}
    for col in ("kappa_orig", "kappa_scaled", "kappa_sipic"):
        pts = [
            (r.eta, getattr(r, col))
            for r in records
            if r.eta < cfg.eta_fit_max and math.isfinite(getattr(r, col))
        ]
        try:
            slope, stderr = fit_loglog_slope(pts)
            out[col] = {"slope": slope, "stderr": stderr, "n_points": len(pts)}
        except ValueError:
            out[col] = None
    return out


def write_sweep_csv(records, path):
    import csv as _csv

    with open(path, "w", newline="") as fh:
        writer = _csv.writer(fh)
        writer.writerow(SweepRecord.CSV_FIELDS)
        for rec in records:
            writer.writerow(rec.csv_row())


def run_rotating_square(cfg):
    """Full rotating-square study: sweep, CSV, slope fits, figures."""
    out = Path(cfg.out_dir or ".")
    out.mkdir(parents=True, exist_ok=True)
    records, systems = rotating_square_records(cfg)
    write_sweep_csv(records, out / "sweep.csv")
    slopes = sweep_slopes(records, cfg)
    with open(out / "slopes.json", "w") as fh:
        json.dump(slopes, fh, indent=2)
    if cfg.export_systems:
        for rec, system in zip(records, systems):
            if system is not None:
                _linalg.write_sparse_matrix(
                    system.A, out / f"system_{rec.angle:.4f}.mtx"
                )
                _linalg.write_vector(
                    system.b, out / f"system_{rec.angle:.4f}_b.mtx"
                )
    if cfg.figures:
        from . import reporting

        reporting.render_sweep_figures(records, slopes, out)
    return records, slopes


@dataclass
class PlateLevelRecord:
    level: int
    h: float
    ndof: int
    n_cells: int
    eta: float
    kappa_orig: float = math.nan
    kappa_sipic: float = math.nan
    fillin: float = math.nan
    elims: int = 0
    cg_iters_orig: int = 0
    cg_iters_sipic: int = 0
    energy_error_orig: float = math.nan
    energy_error_sipic: float = math.nan

    CSV_FIELDS = ("level", "h", "ndof", "n_cells", "eta", "kappa_orig",
                  "kappa_sipic", "fillin", "elims", "cg_iters_orig",
                  "cg_iters_sipic", "energy_error_orig", "energy_error_sipic")


def plate_domain_and_mesh(h):
    domain = _geometry.quarter_plate_with_hole()
    lo_x = -math.sqrt(2.0) / 2.0
    hi_x = math.sqrt(2.0) / 2.0
    mesh = _geometry.CartesianMesh.covering(
        (lo_x, 0.0, hi_x, math.sqrt(2.0)), h
    )
    return domain, mesh


def plate_bc(lam=1.0, mu=1.0):
    """Exact-solution data for the quarter plate.

    The two far edges carry the displacement; the two edges that meet at the
    hole take the exact traction (the natural analog of the symmetry planes
    of the full plate), as does the hole boundary, evaluated at the chord
    quadrature points with the chord normals.
    """

    def g_d(pts):
        u, _, _ = _assembly.plate_solution_fields(pts, lam, mu)
        return u

    def g_n(pts, normals):
        _, _, sigma = _assembly.plate_solution_fields(pts, lam, mu)
        return np.einsum("qij,qj->qi", sigma, normals)

    bc = {"edge1": ("dirichlet", g_d), "edge2": ("dirichlet", g_d),
          "edge0": ("neumann", g_n), "edge3": ("neumann", g_n),
          "circle": ("neumann", g_n)}
    return bc


def plate_level(cfg, level, lam=1.0, mu=1.0, histories=False, depth0=None):
    """Assemble and solve one refinement level of the plate study.

    The tessellation depth shrinks with the level so the boundary is
    resolved on the same sub-cell lattice at every level (the polygonal
    geometry is identical across the refinement study).
    """
    h = 1.0 / 2**level
    depth = max((cfg.depth if depth0 is None else depth0) - level, 0)
    quad_order = cfg.p + 1
    domain, mesh = plate_domain_and_mesh(h)
    cells = _geometry.tessellate(domain, mesh, depth, quad_order)
    eta, _ = _geometry.min_volume_fraction(cells)
    space = _basis.build_space(mesh, cfg.family, cfg.p, components=2,
                               active_cells=cells)
    bc = plate_bc(lam, mu)
    system = _assembly.assemble_elasticity_2d(cells, space, bc, lam, mu,
                                              stab_mode=cfg.stab_mode)
    precon = _sipic.build_sipic(system.A, gamma=cfg.gamma, eps=cfg.eps)
    rec = PlateLevelRecord(
        level=level, h=h, ndof=system.n, n_cells=len(cells), eta=float(eta),
        fillin=precon.fillin, elims=len(precon.eliminated),
    )
    seed = cfg.seed + 31 * level
    rec.kappa_orig = _kappa_or_nan(
        _linalg.condition_number, system.A, gamma=cfg.gamma, seed=seed
    )
    rec.kappa_sipic = _kappa_or_nan(
        _linalg.condition_number, system.A, precon, seed=seed
    )
    # error integration on a finer quadrature of the same tessellated geometry
    err_cells = _geometry.tessellate(domain, mesh, depth, cfg.p + 4)

    def exact_grad(pts):
        _, grad, _ = _assembly.plate_solution_fields(pts, lam, mu)
        return grad

    reference = ref_bar = None
    history_orig = history_sipic = None
    ps = _sipic.apply_preconditioned(system.A, system.b, precon)
    if histories:
        ref_bar, _ = _linalg.cg_solve(ps.matvec, ps.rhs, rel_tol=1e-13,
                                      max_iter=cfg.max_iter)
        reference = ps.recover(ref_bar)

    x_orig, rep_orig = _linalg.cg_solve(
        system.A, system.b, rel_tol=cfg.rel_tol, max_iter=cfg.max_iter,
        reference=reference,
    )
    rec.cg_iters_orig = rep_orig.iterations
    rec.energy_error_orig = _assembly.elasticity_strain_energy_error(
        err_cells, space, x_orig, lam, mu, exact_grad
    )
    xbar, rep_sipic = _linalg.cg_solve(
        ps.matvec, ps.rhs, rel_tol=cfg.rel_tol_sipic, max_iter=cfg.max_iter,
        reference=ref_bar,
    )
    x_sipic = ps.recover(xbar)
    rec.cg_iters_sipic = rep_sipic.iterations
    rec.energy_error_sipic = _assembly.elasticity_strain_energy_error(
        err_cells, space, x_sipic, lam, mu, exact_grad
    )
    if histories:
        history_orig, history_sipic = rep_orig, rep_sipic
    return rec, (history_orig, history_sipic)


def plate_kappa_sipic(cfg, level, lam=1.0, mu=1.0):
    """Preconditioned condition number of one plate level, nothing else.

    Cheap enough to extend the conditioning study well past the levels where
    full solves and unpreconditioned condition numbers are affordable; the
    mesh-size scaling of the preconditioned systems only enters its
    asymptotic regime on the finer meshes.
    """
    h = 1.0 / 2**level
    depth = max(cfg.depth - level, 0)
    domain, mesh = plate_domain_and_mesh(h)
    cells = _geometry.tessellate(domain, mesh, depth, cfg.p + 1)
    space = _basis.build_space(mesh, cfg.family, cfg.p, components=2,
                               active_cells=cells)
    system = _assembly.assemble_elasticity_2d(cells, space, plate_bc(lam, mu),
                                              lam, mu, stab_mode=cfg.stab_mode)
    precon = _sipic.build_sipic(system.A, gamma=cfg.gamma, eps=cfg.eps)
    est = _linalg.condition_number(system.A, precon,
                                   seed=cfg.seed + 31 * level)
    return h, est.kappa


def run_plate_hole(cfg, lam=1.0, mu=1.0):
    """Plate-with-hole refinement study over ``cfg.levels`` levels."""
    out = Path(cfg.out_dir or ".")
    out.mkdir(parents=True, exist_ok=True)
    records = []
    histories = None
    for level in range(cfg.levels):
        finest = level == cfg.levels - 1
        rec, hist = plate_level(cfg, level, lam, mu, histories=finest)
        records.append(rec)
        if finest:
            histories = hist
    import csv as _csv

    with open(out / "plate.csv", "w", newline="") as fh:
        writer = _csv.writer(fh)
        writer.writerow(PlateLevelRecord.CSV_FIELDS)
        for rec in records:
            writer.writerow(
                [
                    repr(v) if isinstance(v := getattr(rec, name), float) else str(v)
                    for name in PlateLevelRecord.CSV_FIELDS
                ]
            )
    finest_level = cfg.levels - 1
    if histories is not None:
        if histories[1] is not None:
            _linalg.write_cg_history_csv(
                histories[1], out / f"cg_history_{finest_level}.csv"
            )
        if histories[0] is not None:
            _linalg.write_cg_history_csv(
                histories[0], out / f"cg_history_{finest_level}_original.csv"
            )
    slopes = plate_slopes(records)
    with open(out / "slopes.json", "w") as fh:
        json.dump(slopes, fh, indent=2)
    if cfg.figures:
        from . import reporting

        reporting.render_plate_figures(records, histories, out)
    return records, slopes, histories


def plate_slopes(records):
    out = {}
    pts = [(r.h, r.kappa_sipic) for r in records if math.isfinite(r.kappa_sipic)]
    try:
        slope, stderr = fit_loglog_slope(pts)
        out["kappa_sipic_vs_h"] = {"slope": slope, "stderr": stderr}
    except ValueError:
        out["kappa_sipic_vs_h"] = None
    for col in ("energy_error_sipic", "energy_error_orig"):
        tail = records[-3:]
        rates = []
        for a, b in zip(tail[:-1], tail[1:]):
            ea, eb = getattr(a, col), getattr(b, col)
            if ea > 0 and eb > 0:
                rates.append(math.log(ea / eb) / math.log(a.h / b.h))
        out[col.replace("energy_error", "energy_rate")] = (
            sum(rates) / len(rates) if rates else None
        )
    return out


def run_manufactured(cfg):
    """Poisson convergence study with u = sin(pi x) sin(pi y) on the unit
    square, weak Dirichlet conditions on every edge."""
    out = Path(cfg.out_dir or ".")
    out.mkdir(parents=True, exist_ok=True)
    levels = []
    for level in range(cfg.levels):
        h = 0.25 / 2**level
        domain = _geometry.RotatedRectangle((0.5, 0.5), 1.0, 1.0, 0.0)
        mesh = _geometry.CartesianMesh.covering((0.0, 0.0, 1.0, 1.0), h)
        cells = _geometry.tessellate(domain, mesh, 1, cfg.p + 1)
        space = _basis.build_space(mesh, cfg.family, cfg.p, active_cells=cells)
        bc = {f"edge{k}": ("dirichlet", None) for k in range(4)}

        def f(pts):
            return (
                2.0 * math.pi**2
                * np.sin(math.pi * pts[:, 0])
                * np.sin(math.pi * pts[:, 1])
            )

        system = _assembly.assemble_poisson(cells, space, bc, f=f)
        precon = _sipic.build_sipic(system.A, gamma=cfg.gamma)
        ps = _sipic.apply_preconditioned(system.A, system.b, precon)
        xbar, _ = _linalg.cg_solve(ps.matvec, ps.rhs, rel_tol=1e-12,
                                   max_iter=cfg.max_iter)
        x = ps.recover(xbar)

        def exact_grad(pts):
            gx = (
                math.pi
                * np.cos(math.pi * pts[:, 0])
                * np.sin(math.pi * pts[:, 1])
            )
            gy = (
                math.pi
                * np.sin(math.pi * pts[:, 0])
                * np.cos(math.pi * pts[:, 1])
            )
            return np.stack([gx, gy], axis=1)

        err = _assembly.poisson_energy_error(cells, space, x, exact_grad)
        levels.append({"level": level, "h": h, "ndof": system.n,
                       "energy_error": err})
    import csv as _csv

    with open(out / "manufactured.csv", "w", newline="") as fh:
        writer = _csv.writer(fh)
        writer.writerow(["level", "h", "ndof", "energy_error"])
        for row in levels:
            writer.writerow([row["level"], repr(row["h"]), row["ndof"],
                             repr(row["energy_error"])])
    slope, stderr = fit_loglog_slope(
        [(row["h"], row["energy_error"]) for row in levels]
    ) if len(levels) >= 5 else (
        _pairwise_rate(levels), 0.0
    )
    slopes = {"energy_rate": slope, "stderr": stderr}
    with open(out / "slopes.json", "w") as fh:
        json.dump(slopes, fh, indent=2)
    if cfg.figures:
        from . import reporting

        reporting.render_manufactured_figures(levels, out)
    return levels, slopes


def _pairwise_rate(levels):
    rates = [
        math.log(a["energy_error"] / b["energy_error"])
        / math.log(a["h"] / b["h"])
        for a, b in zip(levels[:-1], levels[1:])
    ]
    return sum(rates) / len(rates)
