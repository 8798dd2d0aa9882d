"""Config parsing, initial presets, time loop, reference solver, CLI."""

import numpy as np
import pytest

from msflow import cli
from msflow.config import ConfigError, SimConfig, load_config, \
    parse_config_text
from msflow.driver import (
    build_forcing,
    initial_conditions,
    reference_incompressible,
    run_simulation,
    sweep_epsilon,
)
from msflow.grid import deriv_matrix, div, norm_l2
from msflow.mixture import entropy_vars, mobility_matrix


CONFIG_TEXT = """
# full-coverage sample
mixture.species = 3
mixture.molar_masses = 2.0, 3.0, 1.5
mixture.diffusivities = 0.5 0.7 0.3

grid.dim = 2
grid.nx = 24
grid.ny = 16          # trailing comment
grid.lx = 2.0
grid.ly = 1.0

scheme.t_final = 0.05
scheme.steps = 50
scheme.eps = 1e-3
scheme.lambda = tau
scheme.alpha0 = 1e-4
scheme.flow_tol = 1e-9
scheme.species_tol = 1e-9
scheme.max_picard = 30
scheme.max_outer = 40

init.preset = layered-ternary
init.amplitude = 0.15
init.velocity_amplitude = 0.2

forcing.preset = sin
forcing.fx = 0.2
forcing.fy = -0.1
forcing.omega = 2.0
forcing.spatial = bump

output.dir = results
output.csv = run.csv
output.snapshot_every = 10
seed = 7
"""


# -- config parsing ---------------------------------------------------


def test_parse_full_config_text():
    cfg = parse_config_text(CONFIG_TEXT)
    assert cfg.species == 3
    assert cfg.molar_masses == (2.0, 3.0, 1.5)
    assert cfg.diffusivities == (0.5, 0.7, 0.3)
    assert (cfg.dim, cfg.nx, cfg.ny) == (2, 24, 16)
    assert (cfg.lx, cfg.ly) == (2.0, 1.0)
    assert cfg.t_final == 0.05 and cfg.steps == 50
    assert cfg.eps == 1e-3
    assert cfg.lam == "tau"
    assert cfg.lam_value == cfg.tau == 1e-3
    assert cfg.alpha0 == 1e-4
    assert cfg.flow_tol == 1e-9 and cfg.species_tol == 1e-9
    assert cfg.max_picard == 30 and cfg.max_outer == 40
    assert cfg.preset == "layered-ternary"
    assert cfg.amplitude == 0.15 and cfg.velocity_amplitude == 0.2
    assert cfg.forcing_preset == "sin"
    assert (cfg.fx, cfg.fy, cfg.omega) == (0.2, -0.1, 2.0)
    assert cfg.forcing_spatial == "bump"
    assert cfg.out_dir == "results" and cfg.csv_name == "run.csv"
    assert cfg.snapshot_every == 10
    assert cfg.seed == 7


def test_parse_rejects_unknown_key():
    with pytest.raises(ConfigError, match="unknown config key"):
        parse_config_text("grid.nz = 4\n")


def test_parse_rejects_missing_equals():
    with pytest.raises(ConfigError, match="expected 'key = value'"):
        parse_config_text("grid.nx 32\n")


def test_parse_rejects_bad_value():
    with pytest.raises(ConfigError, match="bad value for grid.nx"):
        parse_config_text("grid.nx = many\n")
    with pytest.raises(ConfigError, match="list of numbers"):
        parse_config_text("mixture.molar_masses = a, b\n")


def test_overrides_win_over_file():
    cfg = parse_config_text("grid.nx = 8\n", overrides=["grid.nx=32"])
    assert cfg.nx == 32
    with pytest.raises(ConfigError, match="override must be key=value"):
        parse_config_text("", overrides=["grid.nx"])


def test_load_config_without_path_gives_defaults():
    cfg = load_config(None)
    assert cfg == SimConfig()


def test_load_config_reads_file(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("grid.dim = 1\ngrid.nx = 12\n")
    cfg = load_config(path, overrides=["scheme.steps=5"])
    assert cfg.nx == 12 and cfg.steps == 5


def test_tau_zero_when_no_steps():
    cfg = SimConfig(steps=0)
    assert cfg.tau == 0.0
    assert SimConfig(lam=0.25).lam_value == 0.25


def test_validate_rejects_bad_settings():
    cases = [
        dict(dim=3),
        dict(steps=-1),
        dict(t_final=0.0, steps=10),
        dict(eps=0.0),
        dict(lam=-1.0),
        dict(species=3, molar_masses=(1.0, 1.0, 1.0),
             diffusivities=(1.0,)),
        dict(species=2, molar_masses=(1.0,)),
    ]
    for kwargs in cases:
        with pytest.raises(ConfigError):
            SimConfig(**kwargs).validate()


def test_build_mixture_places_upper_triangle():
    cfg = SimConfig(species=3, molar_masses=(1.0, 2.0, 3.0),
                    diffusivities=(0.5, 0.7, 0.3))
    spec = cfg.build_mixture()
    d = spec.diffusivities
    assert d[0, 1] == d[1, 0] == 0.5
    assert d[0, 2] == d[2, 0] == 0.7
    assert d[1, 2] == d[2, 1] == 0.3
    assert np.all(np.diag(d) == 0.0)


# -- initial presets --------------------------------------------------


def test_uniform_preset():
    cfg = SimConfig(dim=1, nx=8, preset="uniform", species=2)
    grid = cfg.build_grid()
    flow, rho = initial_conditions(cfg, grid, cfg.build_mixture())
    assert np.all(rho == 0.5)
    assert np.all(flow.u == 0.0) and np.all(flow.p == 0.0)


def test_cosine_binary_preset_closure_and_errors():
    cfg = SimConfig(dim=1, nx=16, preset="cosine-binary", amplitude=0.2)
    grid = cfg.build_grid()
    _, rho = initial_conditions(cfg, grid, cfg.build_mixture())
    np.testing.assert_allclose(rho.sum(axis=0), 1.0, rtol=0, atol=1e-15)
    assert rho.min() > 0.0 and rho.max() < 1.0
    with pytest.raises(ValueError, match="amplitude too large"):
        bad = SimConfig(dim=1, nx=16, preset="cosine-binary", amplitude=0.7)
        initial_conditions(bad, grid, bad.build_mixture())
    with pytest.raises(ValueError, match="needs 2 species"):
        tern = SimConfig(dim=1, nx=16, preset="cosine-binary", species=3,
                         molar_masses=(1.0, 1.0, 1.0),
                         diffusivities=(1.0, 1.0, 1.0))
        initial_conditions(tern, grid, tern.build_mixture())


def test_layered_ternary_preset_mass_weighting():
    cfg = SimConfig(dim=1, nx=16, preset="layered-ternary", species=3,
                    molar_masses=(2.0, 3.0, 1.5),
                    diffusivities=(0.5, 0.7, 0.3), amplitude=0.15)
    grid = cfg.build_grid()
    _, rho = initial_conditions(cfg, grid, cfg.build_mixture())
    np.testing.assert_allclose(rho.sum(axis=0), 1.0, rtol=0, atol=1e-14)
    assert rho.min() > 0.0
    # Mass fractions come from mole fractions x via rho_i ~ M_i x_i, so
    # the middle species with x = 1/2 everywhere is not spatially
    # uniform in rho unless all masses agree.
    assert np.ptp(rho[1]) > 0.0
    with pytest.raises(ValueError, match="needs 3 species"):
        initial_conditions(SimConfig(preset="layered-ternary"), grid,
                           SimConfig(preset="layered-ternary")
                           .build_mixture())


def test_vortex_preset_is_discretely_divergence_free():
    cfg = SimConfig(dim=2, nx=24, ny=24, preset="vortex-2d",
                    amplitude=0.1, velocity_amplitude=0.4)
    grid = cfg.build_grid()
    flow, rho = initial_conditions(cfg, grid, cfg.build_mixture())
    assert norm_l2(grid, div(grid, flow.u, "dirichlet")) <= 1e-13
    assert flow.u.max() > 0.0
    np.testing.assert_allclose(rho.sum(axis=0), 1.0, rtol=0, atol=1e-15)
    with pytest.raises(ValueError, match="needs a 2D grid"):
        g1 = SimConfig(dim=1, nx=8).build_grid()
        initial_conditions(cfg, g1, cfg.build_mixture())


def test_unknown_preset_rejected():
    cfg = SimConfig(preset="swirl")
    with pytest.raises(ValueError, match="unknown initial preset"):
        initial_conditions(cfg, cfg.build_grid(), cfg.build_mixture())


def test_build_forcing_mapping():
    grid1 = SimConfig(dim=1, nx=8).build_grid()
    z = build_forcing(SimConfig(forcing_preset="zero"), grid1)
    assert z.kind == "zero"
    c = build_forcing(SimConfig(forcing_preset="constant", fx=0.3), grid1)
    assert c.kind == "constant" and c.amplitude == (0.3,)
    cfg2 = SimConfig(dim=2, forcing_preset="linear", fx=0.1, fy=0.2)
    lin = build_forcing(cfg2, cfg2.build_grid())
    assert lin.kind == "separable" and lin.time_profile == "linear"
    assert lin.amplitude == (0.1, 0.2)
    cfg3 = SimConfig(dim=2, forcing_preset="sin", omega=3.0)
    s = build_forcing(cfg3, cfg3.build_grid())
    assert s.time_profile == "sin" and s.omega == 3.0
    with pytest.raises(ValueError, match="unknown forcing preset"):
        build_forcing(SimConfig(forcing_preset="gusts"), grid1)


# -- time loop --------------------------------------------------------


@pytest.fixture(scope="module")
def small_2d_config():
    return SimConfig(dim=2, nx=12, ny=12, t_final=3e-3, steps=3, eps=1e-2,
                     preset="vortex-2d", amplitude=0.1,
                     velocity_amplitude=0.3, forcing_preset="constant",
                     fx=0.2, fy=-0.1)


def test_run_simulation_shapes_and_history(small_2d_config):
    res = run_simulation(small_2d_config, keep_history=True)
    assert len(res.ledger.rows) == small_2d_config.steps + 1
    assert res.rho.shape == (1, 12, 12)
    assert res.w.shape == (1, 12, 12)
    assert res.flow.u.shape == (2, 12, 12)
    assert len(res.history["u"]) == small_2d_config.steps
    assert len(res.history["rho"]) == small_2d_config.steps
    for row in res.ledger.rows[1:]:
        assert row["flow_residual"] <= small_2d_config.flow_tol
        assert row["species_residual"] <= small_2d_config.species_tol


def test_run_simulation_zero_steps():
    cfg = SimConfig(dim=1, nx=8, steps=0)
    res = run_simulation(cfg)
    assert len(res.ledger.rows) == 1
    assert res.history is None


def test_reference_1d_keeps_velocity_zero():
    cfg = SimConfig(dim=1, nx=24, t_final=4e-3, steps=4,
                    preset="cosine-binary", amplitude=0.15)
    ref = reference_incompressible(cfg, keep_history=True)
    for u in ref.history["u"]:
        assert np.all(u == 0.0)
    for row in ref.ledger.rows:
        assert row["div_u_l2"] == 0.0


def test_reference_2d_divergence_free_to_roundoff(small_2d_config):
    ref = reference_incompressible(small_2d_config, keep_history=True)
    for row in ref.ledger.rows[1:]:
        assert row["div_u_l2"] <= 1e-10
    assert any(np.abs(u).max() > 0 for u in ref.history["u"])


def test_sweep_requires_two_values(small_2d_config):
    with pytest.raises(ValueError, match="at least two eps"):
        sweep_epsilon(small_2d_config, [1e-2])


def test_sweep_mini_monotone(small_2d_config):
    res = sweep_epsilon(small_2d_config, [1e-1, 1e-3], strict=True)
    assert [r.eps for r in res.rows] == [1e-1, 1e-3]
    assert res.monotone_div and res.monotone_u
    assert res.rows[0].div_norm > res.rows[1].div_norm
    assert res.div_ratio > 1.0
    table = res.table()
    assert table.startswith("eps,div_norm,u_diff,rho_diff\n")
    assert len(table.strip().split("\n")) == 3


def test_asymmetric_ternary_develops_uphill_flux():
    """Cross-coupling drives a species against its own gradient.

    When one pair diffusivity is much smaller than the other two, the
    species whose composition starts nearly flat is dragged along by
    the opposing gradients of its partners, so somewhere its diffusive
    flux points up its own density gradient.  A diagonal Fickian
    closure can never produce a positive flux-gradient product, so
    this is a direct signature of the coupled mobility matrix.
    """
    cfg = SimConfig(dim=1, nx=48, t_final=2e-2, steps=20,
                    preset="layered-ternary", species=3,
                    molar_masses=(2.0, 3.0, 1.5),
                    diffusivities=(0.1, 1.0, 1.0), amplitude=0.15)
    res = run_simulation(cfg, keep_history=True)
    grid, spec = res.grid, res.spec
    dn = deriv_matrix(grid, 0, "neumann")
    best = -np.inf
    for rho in res.history["rho"]:
        pts = np.moveaxis(rho, 0, -1).reshape(-1, 2)
        w = entropy_vars(pts, spec)
        mob = mobility_matrix(pts, spec)
        grad_w = np.stack([dn @ w[:, j] for j in range(2)], axis=-1)
        flux = -np.einsum("cij,cj->ci", mob, grad_w)
        grad_rho = dn @ pts[:, 1]
        best = max(best, float((flux[:, 1] * grad_rho).max()))
    # Measured peak is about 1.7e-2; anything clearly positive would
    # do, the margin just guards against roundoff-level artifacts.
    assert best > 1e-3


# -- CLI --------------------------------------------------------------


def _overrides(pairs):
    out = []
    for key, value in pairs:
        out.extend(["--set", f"{key}={value}"])
    return out


def test_cli_run_writes_outputs(tmp_path, capsys):
    out_dir = tmp_path / "out"
    rc = cli.main(["run"] + _overrides([
        ("grid.dim", 1), ("grid.nx", 16),
        ("scheme.t_final", "2e-3"), ("scheme.steps", 2),
        ("init.preset", "cosine-binary"), ("init.amplitude", "0.1"),
        ("output.dir", str(out_dir)), ("output.snapshot_every", 1),
    ]))
    assert rc == 0
    text = capsys.readouterr().out
    assert "steps completed: 2" in text
    assert (out_dir / "ledger.csv").is_file()
    for name in ("u_000001.txt", "p_000001.txt", "rho_000002.txt"):
        assert (out_dir / name).is_file()


def test_cli_check_passes_on_defaults(capsys):
    rc = cli.main(["check"] + _overrides([
        ("grid.nx", 16), ("scheme.steps", 4), ("scheme.t_final", "4e-3"),
    ]))
    out = capsys.readouterr().out
    assert rc == 0
    assert "0 failure(s)" in out
    assert "FAIL" not in out


def test_cli_compare_ref_runs(tmp_path, capsys):
    rc = cli.main(["compare-ref"] + _overrides([
        ("grid.dim", 2), ("grid.nx", 12), ("grid.ny", 12),
        ("scheme.t_final", "2e-3"), ("scheme.steps", 2),
        ("init.preset", "vortex-2d"), ("init.velocity_amplitude", "0.3"),
        ("forcing.preset", "constant"), ("forcing.fx", "0.2"),
    ]))
    out = capsys.readouterr().out
    assert rc == 0
    assert "relaxed   |div u|" in out
    assert "reference |div u|" in out


def test_cli_sweep_eps(tmp_path, capsys):
    out_dir = tmp_path / "sweep"
    rc = cli.main(["sweep-eps", "--eps", "1e-1,1e-3"] + _overrides([
        ("grid.dim", 2), ("grid.nx", 12), ("grid.ny", 12),
        ("scheme.t_final", "2e-3"), ("scheme.steps", 2),
        ("init.preset", "vortex-2d"), ("init.velocity_amplitude", "0.3"),
        ("forcing.preset", "constant"), ("forcing.fx", "0.2"),
        ("output.dir", str(out_dir)),
    ]))
    out = capsys.readouterr().out
    assert rc == 0
    assert (out_dir / "sweep.csv").is_file()
    assert "monotone decrease: div True  u-distance True" in out


def test_cli_rejects_unknown_key():
    with pytest.raises(ConfigError):
        cli.main(["run", "--set", "grid.nz=4"])
