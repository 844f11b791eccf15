import json
import math

import numpy as np
import pytest

from fcm import cli
from fcm import experiments as ex


def test_fit_loglog_slope_examples():
    xs = np.linspace(0.5, 4.0, 9)
    slope, err = ex.fit_loglog_slope([(x, x**2) for x in xs])
    assert slope == pytest.approx(2.0, abs=1e-9)
    assert err < 1e-9
    slope, err = ex.fit_loglog_slope([(x, 3.7) for x in xs])
    assert slope == pytest.approx(0.0, abs=1e-12)
    rng = np.random.default_rng(0)
    pts = [(x, 2.3 * x**-4 * (1 + 0.01 * rng.standard_normal())) for x in
           np.logspace(-5, -1, 40)]
    slope, err = ex.fit_loglog_slope(pts)
    assert slope == pytest.approx(-4.0, abs=0.05)
    with pytest.raises(ValueError):
        ex.fit_loglog_slope([(1.0, 1.0), (2.0, 4.0)])
    with pytest.raises(ValueError):
        ex.fit_loglog_slope([(x, -1.0) for x in xs])


def _tiny_cfg(tmp_path, **kw):
    base = dict(scenario="rotating_square", family="bspline", p=1, h=1 / 8,
                n_angles=3, precon="sipic", figures=False, seed=5,
                out_dir=str(tmp_path))
    base.update(kw)
    return ex.ScenarioConfig(**base)


def test_sweep_is_deterministic(tmp_path):
    cfg = _tiny_cfg(tmp_path / "a")
    ex.run_rotating_square(cfg)
    cfg2 = _tiny_cfg(tmp_path / "b")
    ex.run_rotating_square(cfg2)
    a = (tmp_path / "a" / "sweep.csv").read_bytes()
    b = (tmp_path / "b" / "sweep.csv").read_bytes()
    assert a == b


def test_sweep_outputs_and_invariants(tmp_path):
    cfg = _tiny_cfg(tmp_path, figures=True, solve=True)
    records, slopes = ex.run_rotating_square(cfg)
    header = (tmp_path / "sweep.csv").read_text().splitlines()[0]
    assert header == ("angle,eta,kappa_orig,kappa_scaled,kappa_sipic,"
                      "fillin,elims,cg_orig,cg_sipic")
    assert (tmp_path / "slopes.json").exists()
    assert (tmp_path / "kappa_vs_eta.png").exists()
    for rec in records:
        assert 0 < rec.eta <= 6e-3 + 1.0
        if math.isfinite(rec.kappa_orig):
            assert rec.kappa_orig >= 1.0
        if math.isfinite(rec.kappa_orig) and math.isfinite(rec.kappa_sipic):
            assert rec.kappa_sipic <= rec.kappa_orig * (1 + 1e-3)
        assert rec.cg_sipic <= rec.cg_orig


def test_sweep_exports_systems(tmp_path):
    cfg = _tiny_cfg(tmp_path, n_angles=1, export_systems=True)
    ex.run_rotating_square(cfg)
    assert list(tmp_path.glob("system_*.mtx"))


def test_plate_run_outputs(tmp_path):
    cfg = ex.ScenarioConfig(scenario="plate_hole", p=2, levels=3,
                            figures=True, out_dir=str(tmp_path), depth=4,
                            rel_tol=1e-6, rel_tol_sipic=1e-10)
    records, slopes, histories = ex.run_plate_hole(cfg)
    assert (tmp_path / "plate.csv").exists()
    assert (tmp_path / "cg_history_2.csv").exists()
    assert (tmp_path / "cg_history_2_original.csv").exists()
    assert (tmp_path / "energy_convergence.png").exists()
    header = (tmp_path / "plate.csv").read_text().splitlines()[0]
    assert header.startswith("level,h,ndof,n_cells,eta,kappa_orig,kappa_sipic")
    assert len(records) == 3
    assert all(r.energy_error_sipic > 0 for r in records)


def test_manufactured_run(tmp_path):
    cfg = ex.ScenarioConfig(scenario="manufactured", p=1, levels=3,
                            figures=False, out_dir=str(tmp_path))
    levels, slopes = ex.run_manufactured(cfg)
    assert len(levels) == 3
    assert slopes["energy_rate"] > 0.7
    assert (tmp_path / "manufactured.csv").exists()


def test_cli_manufactured_and_assertions(tmp_path):
    rc = cli.main([
        "run", "manufactured", "--order", "1", "--levels", "3",
        "--no-figures", "--assert", "--out", str(tmp_path / "mms"),
    ])
    assert rc == 0
    assert (tmp_path / "mms" / "slopes.json").exists()


def test_cli_rotating_square_tiny(tmp_path, capsys):
    rc = cli.main([
        "run", "rotating_square", "--order", "1", "--h", "0.125",
        "--angles", "3", "--precon", "none", "--no-figures",
        "--out", str(tmp_path / "rs"),
    ])
    assert rc == 0
    out = capsys.readouterr().out
    assert "kappa_orig" in out
    assert (tmp_path / "rs" / "sweep.csv").exists()


def test_cli_parser_rejects_unknown_scenario():
    with pytest.raises(SystemExit):
        cli.build_parser().parse_args(["run", "bogus", "--out", "x"])


def test_config_validation():
    with pytest.raises(ValueError):
        ex.ScenarioConfig(scenario="rotating_square", h=-1.0)
    with pytest.raises(ValueError):
        ex.ScenarioConfig(scenario="rotating_square", n_angles=0)
    with pytest.raises(ValueError):
        ex.ScenarioConfig(scenario="rotating_square", precon="magic")
    cfg = ex.ScenarioConfig(scenario="rotating_square", precon="scale")
    assert cfg.compute_kappa == ("orig", "scaled")
