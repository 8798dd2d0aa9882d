"""Per-step conservation ledger and end-of-run global bound checks.

Every time step records the quadratic energies, the mixing entropy with
both dissipation functionals, species masses, divergence defect and the
residuals of the per-step energy and entropy balances.  The ledger
serializes to CSV with a fixed column order and shortest round-trip
float formatting, so identical runs produce byte-identical files.

Solvers never clamp densities.  The single clamp in the code base lives
here, applies only to displayed values (floor 1e-14) and counts how
often it actually changed a value; the counter is asserted to be zero
by the acceptance suite.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse.linalg as spla

from . import mixture
from .grid import (
    Grid,
    div,
    grad,
    grad_sq_norm,
    inner,
    laplacian_matrix,
    norm_l2,
)

DISPLAY_FLOOR = 1e-14


@dataclass
class GlobalBoundsReport:
    ok: bool
    energy_ok: bool
    entropy_ok: bool
    energy_margin: float
    entropy_margin: float
    first_violation: int | None
    poincare_constant: float


def poincare_constant(grid: Grid, tol: float = 1e-12,
                      max_iter: int = 400) -> float:
    """Numerical Poincare constant for fields vanishing on the boundary.

    Inverse power iteration for the smallest eigenvalue mu of the
    Dirichlet Laplacian; returns 1/sqrt(mu), the constant in
    |v| <= C |grad v| with the face-based gradient norm.
    """
    a = (-laplacian_matrix(grid, "dirichlet")).tocsc()
    lu = spla.splu(a)
    v = np.ones(grid.n_cells)
    v /= np.linalg.norm(v)
    mu_old = np.inf
    for _ in range(max_iter):
        v = lu.solve(v)
        v /= np.linalg.norm(v)
        mu = float(v @ (a @ v))
        if abs(mu - mu_old) <= tol * abs(mu):
            break
        mu_old = mu
    return 1.0 / np.sqrt(mu)


class SimLedger:
    """Accumulates per-step diagnostics for one simulation run."""

    def __init__(self, grid: Grid, spec: mixture.MixtureSpec, tau: float,
                 eps: float, lam: float, tol: float):
        self.grid = grid
        self.spec = spec
        self.tau = tau
        self.eps = eps
        self.lam = lam
        self.tol = tol
        self.rows: list[dict] = []
        self.clamp_events = 0
        self.cum_visc = 0.0
        self.cum_grad_sqrt_x = 0.0
        self.entropy_initial_raw = None

    # -- helpers -------------------------------------------------------

    def _display_floor(self, value: float) -> float:
        """Floor tiny displayed densities; solvers never see this."""
        if value < DISPLAY_FLOOR:
            self.clamp_events += 1
            return DISPLAY_FLOOR
        return value

    def _mixture_columns(self, rho: np.ndarray):
        n = self.spec.n_reduced
        rho_pts = np.moveaxis(rho, 0, -1).reshape(-1, n)
        vol = self.grid.cell_volume
        entropy = vol * float(np.sum(mixture.entropy_density(rho_pts,
                                                             self.spec)))
        x, _ = mixture.molar_fractions(rho_pts, self.spec)
        sqrt_x = np.moveaxis(
            np.sqrt(x).reshape(self.grid.shape + (n + 1,)), -1, 0)
        gsq = 0.0
        for comp in sqrt_x:
            g = grad(self.grid, comp, "neumann")
            gsq += inner(self.grid, g, g)
        rho_full_pts = np.concatenate(
            [rho_pts, 1.0 - rho_pts.sum(axis=-1, keepdims=True)], axis=-1)
        masses = vol * rho_full_pts.sum(axis=0)
        min_density = float(rho_full_pts.min())
        closure = float(np.abs(rho_full_pts.sum(axis=-1) - 1.0).max())
        return entropy, gsq, masses, min_density, closure

    # -- recording -----------------------------------------------------

    def record_initial(self, flow_state, rho: np.ndarray,
                       entropy_raw: float | None = None) -> None:
        entropy, gsq, masses, min_density, closure = self._mixture_columns(rho)
        self.entropy_initial_raw = (
            entropy if entropy_raw is None else entropy_raw)
        e_kin = inner(self.grid, flow_state.u, flow_state.u)
        e_p = self.eps * inner(self.grid, flow_state.p, flow_state.p)
        row = dict(
            step=0, time=0.0, energy=e_kin, pressure_energy=e_p,
            visc_dissipation=0.0, entropy=entropy,
            w_dissipation=0.0, grad_sqrt_x_sq=gsq,
            div_u_l2=norm_l2(self.grid, div(self.grid, flow_state.u)),
            min_density=self._display_floor(min_density),
            closure_defect=closure,
            energy_residual=0.0, pressure_eq_residual=0.0,
            entropy_slack=0.0, control_term=0.0, advective_flux=0.0,
            lambda_h2_sq=0.0, f_l2_sq=0.0,
            flow_iters=0, species_iters=0,
            flow_residual=0.0, species_residual=0.0,
            cum_visc_dissipation=0.0, cum_grad_sqrt_x=0.0,
        )
        for i, m in enumerate(masses):
            row[f"mass_{i + 1}"] = m
        self.rows.append(row)

    def record_step(self, k: int, flow_state, flow_report, f_avg,
                    rho: np.ndarray, species_report) -> None:
        entropy, gsq, masses, min_density, closure = self._mixture_columns(rho)
        visc = 2.0 * self.tau * grad_sq_norm(self.grid, flow_state.u)
        self.cum_visc += 0.5 * visc          # accumulates tau |grad u|^2
        self.cum_grad_sqrt_x += self.tau * gsq
        row = dict(
            step=k, time=k * self.tau,
            energy=inner(self.grid, flow_state.u, flow_state.u),
            pressure_energy=self.eps * inner(self.grid, flow_state.p,
                                             flow_state.p),
            visc_dissipation=visc, entropy=entropy,
            w_dissipation=species_report.dissipation,
            grad_sqrt_x_sq=gsq,
            div_u_l2=flow_report.div_u_l2,
            min_density=self._display_floor(min_density),
            closure_defect=closure,
            energy_residual=flow_report.energy_identity_residual,
            pressure_eq_residual=flow_report.pressure_eq_residual,
            entropy_slack=species_report.entropy_balance_slack,
            control_term=species_report.control_term,
            advective_flux=species_report.advective_entropy_flux,
            lambda_h2_sq=species_report.h2_sq_norm,
            f_l2_sq=inner(self.grid, f_avg, f_avg),
            flow_iters=flow_report.picard_iterations,
            species_iters=species_report.iterations,
            flow_residual=flow_report.final_residual,
            species_residual=species_report.final_residual,
            cum_visc_dissipation=self.cum_visc,
            cum_grad_sqrt_x=self.cum_grad_sqrt_x,
        )
        for i, m in enumerate(masses):
            row[f"mass_{i + 1}"] = m
        self.rows.append(row)

    # -- output --------------------------------------------------------

    def columns(self) -> list:
        n1 = self.spec.n_species
        cols = [
            "step", "time", "energy", "pressure_energy", "visc_dissipation",
            "entropy", "w_dissipation", "grad_sqrt_x_sq", "div_u_l2",
        ]
        cols += [f"mass_{i + 1}" for i in range(n1)]
        cols += [
            "min_density", "closure_defect", "energy_residual",
            "pressure_eq_residual", "entropy_slack", "control_term",
            "advective_flux", "lambda_h2_sq", "f_l2_sq", "flow_iters",
            "species_iters", "flow_residual", "species_residual",
            "cum_visc_dissipation", "cum_grad_sqrt_x",
        ]
        return cols

    def write_csv(self, path) -> None:
        cols = self.columns()
        lines = [",".join(cols)]
        for row in self.rows:
            cells = []
            for c in cols:
                v = row[c]
                cells.append(str(v) if isinstance(v, int) else repr(float(v)))
            lines.append(",".join(cells))
        with open(path, "w") as fh:
            fh.write("\n".join(lines) + "\n")

    # -- global bounds -------------------------------------------------

    def check_global_bounds(self) -> GlobalBoundsReport:
        """Check telescoped energy and entropy bounds over the whole run.

        Energy:  |u^k|^2 + eps |p^k|^2 + sum_j tau |grad u^j|^2
                 <= initial + C_p^2 sum_j tau |f^j|^2 + slack,
        with C_p the numerically estimated Poincare constant.  Entropy:
        H(rho^k) + dissipation sums <= H(rho^0) + 1 + advective sums
        + slack.  Slack grows with the recorded residuals.
        """
        if not self.rows:
            raise ValueError("ledger is empty")
        cp = poincare_constant(self.grid)
        e0 = self.rows[0]["energy"] + self.rows[0]["pressure_energy"]
        h_base = self.entropy_initial_raw + 1.0
        force_sum = 0.0
        visc_sum = 0.0
        diss_sum = 0.0
        adv_sum = 0.0
        slack = 0.0
        energy_margin = np.inf
        entropy_margin = np.inf
        first_violation = None
        energy_ok = True
        entropy_ok = True
        for row in self.rows[1:]:
            k = row["step"]
            force_sum += self.tau * cp * cp * row["f_l2_sq"]
            visc_sum += 0.5 * row["visc_dissipation"]
            diss_sum += self.tau * row["w_dissipation"]
            diss_sum += self.lam * self.tau * row["lambda_h2_sq"]
            adv_sum += self.tau * row["advective_flux"]
            slack += 100.0 * self.tol + row["energy_residual"] + abs(
                row["entropy_slack"])
            e_here = row["energy"] + row["pressure_energy"] + visc_sum
            e_bound = e0 + force_sum + slack
            margin = e_bound - e_here
            energy_margin = min(energy_margin, margin)
            if margin < 0 and energy_ok:
                energy_ok = False
                first_violation = first_violation or k
            h_here = row["entropy"] + diss_sum
            h_bound = h_base + adv_sum + slack
            margin = h_bound - h_here
            entropy_margin = min(entropy_margin, margin)
            if margin < 0 and entropy_ok:
                entropy_ok = False
                first_violation = first_violation or k
        return GlobalBoundsReport(
            ok=energy_ok and entropy_ok,
            energy_ok=energy_ok, entropy_ok=entropy_ok,
            energy_margin=float(energy_margin),
            entropy_margin=float(entropy_margin),
            first_violation=first_violation,
            poincare_constant=cp,
        )
