"""Command-line front end.

Subcommands:

* ``run <config>``: advance the relaxed solver, write ledger CSV and
  snapshots, check global bounds.
* ``sweep-eps <config> --eps 1e-1,1e-2``: relaxation sweep against the
  incompressible reference.
* ``check <config>``: fast invariant suite (algebra, operator
  adjointness, advection identities, a short run with ledger checks).
* ``compare-ref <config>``: one relaxed run against the reference at
  the configured eps.

All subcommands accept repeated ``--set key=value`` overrides using
config-file keys.  Exit code is zero only if every enabled check holds.
"""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import replace

import numpy as np

from . import mixture
from .config import load_config
from .driver import (
    reference_incompressible,
    run_simulation,
    sweep_epsilon,
    _l2l2,
)
from .grid import (
    Grid,
    advect_form,
    div,
    divergence_identity_residual,
    grad,
    inner,
)


def _build_parser():
    parser = argparse.ArgumentParser(
        prog="msflow",
        description="artificial-compressibility mixture flow solver")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, helptext in (
            ("run", "run a simulation and write outputs"),
            ("sweep-eps", "relaxation sweep against the reference"),
            ("check", "fast invariant checks"),
            ("compare-ref", "compare one run against the reference")):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("config", nargs="?", default=None,
                       help="path to a key=value config file "
                            "(defaults apply when omitted)")
        p.add_argument("--set", dest="overrides", action="append",
                       default=[], metavar="KEY=VALUE",
                       help="override a config key (repeatable)")
        if name == "sweep-eps":
            p.add_argument("--eps", required=True,
                           help="comma-separated relaxation values")
    return parser


class _Checker:
    def __init__(self):
        self.failures = 0

    def check(self, ok: bool, label: str, detail: str = "") -> None:
        status = "PASS" if ok else "FAIL"
        suffix = f" ({detail})" if detail else ""
        print(f"{status} {label}{suffix}")
        if not ok:
            self.failures += 1


def _cmd_run(cfg) -> int:
    result = run_simulation(cfg, write_outputs=True)
    last = result.ledger.rows[-1]
    print(f"steps completed: {last['step']}  t = {last['time']:.6g}")
    print(f"energy {last['energy']:.6e}  entropy {last['entropy']:.6e}  "
          f"min density {last['min_density']:.3e}")
    worst_e = max(r["energy_residual"] for r in result.ledger.rows)
    worst_s = max(r["entropy_slack"] for r in result.ledger.rows)
    print(f"max energy-identity residual {worst_e:.3e}  "
          f"max entropy slack {worst_s:+.3e}")
    bounds = result.ledger.check_global_bounds()
    print(f"global bounds: energy margin {bounds.energy_margin:.3e}  "
          f"entropy margin {bounds.entropy_margin:.3e}  "
          f"poincare {bounds.poincare_constant:.6g}")
    print(f"ledger written to "
          f"{os.path.join(cfg.out_dir, cfg.csv_name)}")
    return 0 if bounds.ok else 1


def _cmd_sweep(cfg, eps_text: str) -> int:
    eps_values = [float(tok) for tok in eps_text.split(",") if tok.strip()]
    result = sweep_epsilon(cfg, eps_values, strict=False)
    print(result.table(), end="")
    print(f"div ratio (largest/smallest eps): {result.div_ratio:.3g}")
    os.makedirs(cfg.out_dir, exist_ok=True)
    path = os.path.join(cfg.out_dir, "sweep.csv")
    with open(path, "w") as fh:
        fh.write(result.table())
    print(f"sweep table written to {path}")
    ok = result.monotone_div and result.monotone_u
    print("monotone decrease: "
          f"div {result.monotone_div}  u-distance {result.monotone_u}")
    return 0 if ok else 1


def _cmd_check(cfg) -> int:
    ck = _Checker()
    spec = cfg.build_mixture()
    rng = np.random.default_rng(cfg.seed + 1)
    pts = mixture.sample_simplex(rng, spec.n_species, 200)

    back = mixture.densities_from_entropy(mixture.entropy_vars(pts, spec),
                                          spec)
    ck.check(float(np.abs(back - pts).max()) <= 1e-10,
             "entropy-variable roundtrip",
             f"max err {np.abs(back - pts).max():.2e}")
    for name, m in (("entropy hessian", mixture.entropy_hessian(pts, spec)),
                    ("fraction jacobian",
                     mixture.fraction_jacobian(pts, spec)),
                    ("mobility matrix", mixture.mobility_matrix(pts, spec))):
        sym = float(np.abs(m - np.swapaxes(m, -1, -2)).max())
        eig = float(np.linalg.eigvalsh(0.5 * (
            m + np.swapaxes(m, -1, -2))).min())
        ck.check(sym <= 1e-8 * np.abs(m).max() and eig > 0.0,
                 f"{name} symmetric positive definite",
                 f"min eig {eig:.3e}")
    a0 = mixture.friction_matrix_reduced(pts, spec)
    conds = np.linalg.cond(a0)
    ck.check(bool(np.all(np.isfinite(conds))), "reduced friction invertible",
             f"max cond {conds.max():.3e}")

    grid = Grid.box((16, 16), (1.0, 1.0))
    f = rng.standard_normal(grid.shape)
    v = rng.standard_normal((2,) + grid.shape)
    defect = abs(inner(grid, grad(grid, f, "neumann"), v)
                 + inner(grid, f, div(grid, v, "dirichlet")))
    ck.check(defect <= 1e-13 * max(1.0, float(np.abs(f).max())),
             "summation-by-parts adjointness", f"defect {defect:.2e}")

    u = rng.standard_normal((2,) + grid.shape)
    a = rng.standard_normal((2,) + grid.shape)
    b = rng.standard_normal((2,) + grid.shape)
    anti = abs(advect_form(grid, u, a, b, "dirichlet")
               + advect_form(grid, u, b, a, "dirichlet"))
    selfz = abs(advect_form(grid, u, a, a, "dirichlet"))
    ck.check(anti <= 1e-12 and selfz <= 1e-12,
             "advection form skew identities",
             f"antisym {anti:.2e} self {selfz:.2e}")

    res = []
    for n in (16, 32):
        g2 = Grid.box((n, n), (1.0, 1.0))
        xs = g2.cell_centers()
        sx = np.sin(np.pi * xs[0]) ** 2
        sy = np.sin(np.pi * xs[1]) ** 2
        uu = np.stack([sx * sy, -sx * sy])
        ww = np.stack([0.2 * np.cos(np.pi * xs[0]) * np.cos(np.pi * xs[1])
                       for _ in range(spec.n_reduced)])
        res.append(divergence_identity_residual(g2, uu, ww, spec))
    order = np.log2(res[0] / res[1]) if res[1] > 0 else np.inf
    ck.check(order >= 1.8, "divergence identity refinement",
             f"order {order:.2f}")

    small = replace(cfg, steps=min(cfg.steps, 5))
    result = run_simulation(small)
    rows = result.ledger.rows
    worst_e = max(r["energy_residual"] for r in rows)
    worst_s = max(abs(r["entropy_slack"]) for r in rows)
    ck.check(worst_e <= 100 * cfg.flow_tol, "per-step energy identity",
             f"max residual {worst_e:.2e}")
    ck.check(worst_s <= 100 * cfg.species_tol, "per-step entropy balance",
             f"max slack {worst_s:.2e}")
    drift = max(abs(r[f"mass_{i + 1}"] - rows[0][f"mass_{i + 1}"])
                for r in rows for i in range(spec.n_species))
    ck.check(drift <= 1e-8, "species mass conservation",
             f"max drift {drift:.2e}")
    ck.check(min(r["min_density"] for r in rows) > 0.0
             and result.ledger.clamp_events == 0,
             "density positivity without clamping")
    bounds = result.ledger.check_global_bounds()
    ck.check(bounds.ok, "global energy and entropy bounds",
             f"margins {bounds.energy_margin:.2e} "
             f"{bounds.entropy_margin:.2e}")

    print(f"{ck.failures} failure(s)")
    return 0 if ck.failures == 0 else 1


def _cmd_compare(cfg) -> int:
    ref = reference_incompressible(cfg, keep_history=True)
    res = run_simulation(cfg, keep_history=True)
    tau = cfg.tau
    div_norm = float(np.sqrt(sum(
        tau * row["div_u_l2"] ** 2 for row in res.ledger.rows[1:])))
    ref_div = float(np.sqrt(sum(
        tau * row["div_u_l2"] ** 2 for row in ref.ledger.rows[1:])))
    u_diff = _l2l2(res.grid, tau, res.history["u"], ref.history["u"])
    rho_diff = _l2l2(res.grid, tau, res.history["rho"], ref.history["rho"])
    print(f"eps = {cfg.eps:g}")
    print(f"relaxed   |div u| = {div_norm:.6e}")
    print(f"reference |div u| = {ref_div:.6e}")
    print(f"|u - u_ref|   = {u_diff:.6e}")
    print(f"|rho - rho_ref| = {rho_diff:.6e}")
    return 0


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    cfg = load_config(args.config, args.overrides)
    if args.command == "run":
        return _cmd_run(cfg)
    if args.command == "sweep-eps":
        return _cmd_sweep(cfg, args.eps)
    if args.command == "check":
        return _cmd_check(cfg)
    if args.command == "compare-ref":
        return _cmd_compare(cfg)
    raise AssertionError("unreachable")


if __name__ == "__main__":
    sys.exit(main())
