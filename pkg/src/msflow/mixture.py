"""Pointwise algebra for an isothermal multicomponent mixture.

An incompressible mixture of N+1 species is described by the reduced vector
of partial mass densities rho = (rho_1, ..., rho_N).  The last component is
eliminated through the closure

    rho_{N+1} = 1 - sum_i rho_i,

so admissible states live in the open unit simplex.  All quantities below
are algebraic functions of rho at a single point; every routine is
vectorized over arbitrary leading axes so the same code serves scalar
probes and whole grids.

Notation used throughout this module:

    M_i     molar mass of species i (positive, arbitrary units)
    D_ij    symmetric binary diffusivities, i != j
    c       total molar concentration, c = sum_k rho_k / M_k
    x_i     molar fraction, x_i = rho_i / (c M_i), sums to one
    h       mixing entropy density, h = c * sum_i x_i log x_i
    w_i     entropy variable, w_i = log(x_i)/M_i - log(x_{N+1})/M_{N+1}

The map rho -> w is a bijection from the open simplex onto R^N.  Its
inverse is computed by a damped Newton iteration and is what guarantees
positivity of densities in the time steppers: any w yields an interior
state, so no clamping is ever applied inside solvers.

Matrix-valued coefficients:

    A   full (N+1)x(N+1) friction matrix of the diffusive coupling;
        singular, with A rho_full = 0.
    A0  reduced NxN matrix after eliminating species N+1; invertible.
    G   Jacobian dw/dx' of entropy variables with respect to reduced
        molar fractions; symmetric positive definite.
    H   Jacobian dw/drho (Hessian of the entropy density h); symmetric
        positive definite.
    B   A0^{-1} G^{-1}, the mobility matrix multiplying grad w in the
        species flux; symmetric positive definite.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import xlogy


class MixtureDomainError(ValueError):
    """Raised when a density vector leaves the open unit simplex."""


class InversionError(RuntimeError):
    """Raised when the entropy-variable inversion fails to converge."""

    def __init__(self, iterations: int, residual: float):
        self.iterations = iterations
        self.residual = residual
        super().__init__(
            f"entropy inversion did not converge: residual {residual:.3e} "
            f"after {iterations} iterations"
        )


@dataclass(frozen=True)
class MixtureSpec:
    """Static description of the mixture: molar masses and diffusivities.

    Parameters
    ----------
    molar_masses : array_like, shape (N+1,)
        Positive molar masses, last entry is the eliminated species.
    diffusivities : array_like, shape (N+1, N+1)
        Symmetric matrix of binary diffusivities with positive
        off-diagonal entries.  Diagonal entries are ignored.
    """

    molar_masses: np.ndarray
    diffusivities: np.ndarray
    n_reduced: int = field(init=False)

    def __post_init__(self):
        m = np.asarray(self.molar_masses, dtype=float)
        d = np.asarray(self.diffusivities, dtype=float)
        if m.ndim != 1 or m.size < 2:
            raise ValueError("molar_masses must be a vector of length >= 2")
        if np.any(m <= 0.0):
            raise ValueError("molar masses must be positive")
        n1 = m.size
        if d.shape != (n1, n1):
            raise ValueError(
                f"diffusivities must have shape ({n1}, {n1}), got {d.shape}"
            )
        if not np.allclose(d, d.T, rtol=1e-13, atol=0.0):
            raise ValueError("diffusivity matrix must be symmetric")
        off = d[~np.eye(n1, dtype=bool)]
        if np.any(off <= 0.0):
            raise ValueError("off-diagonal diffusivities must be positive")
        d = d.copy()
        np.fill_diagonal(d, 0.0)
        object.__setattr__(self, "molar_masses", m)
        object.__setattr__(self, "diffusivities", d)
        object.__setattr__(self, "n_reduced", n1 - 1)

    @property
    def n_species(self) -> int:
        """Total number of species, N+1."""
        return self.molar_masses.size


def _check_reduced(rho: np.ndarray, n_reduced: int) -> np.ndarray:
    rho = np.asarray(rho, dtype=float)
    if rho.shape[-1] != n_reduced:
        raise MixtureDomainError(
            f"expected {n_reduced} reduced densities, got {rho.shape[-1]}"
        )
    if np.any(rho <= 0.0) or np.any(rho.sum(axis=-1) >= 1.0):
        raise MixtureDomainError("density vector outside the open unit simplex")
    return rho


def full_densities(rho: np.ndarray, spec: MixtureSpec) -> np.ndarray:
    """Append the eliminated species: rho_{N+1} = 1 - sum rho_i."""
    rho = _check_reduced(rho, spec.n_reduced)
    last = 1.0 - rho.sum(axis=-1, keepdims=True)
    return np.concatenate([rho, last], axis=-1)


def molar_fractions(rho: np.ndarray, spec: MixtureSpec):
    """Molar fractions and total concentration from reduced densities.

    Returns
    -------
    x : ndarray, shape (..., N+1)
        Molar fractions, positive and summing to one.
    c : ndarray, shape (...)
        Total concentration c = sum_k rho_k / M_k.
    """
    rho_full = full_densities(rho, spec)
    per_mole = rho_full / spec.molar_masses
    c = per_mole.sum(axis=-1)
    x = per_mole / c[..., None]
    return x, c


def entropy_density(rho: np.ndarray, spec: MixtureSpec,
                    allow_boundary: bool = False) -> np.ndarray:
    """Mixing entropy density h(rho) = c * sum_i x_i log x_i.

    With ``allow_boundary`` the input may touch the closed simplex
    (zero components, used for raw initial data before lifting); the
    integrand follows the convention x log x -> 0 as x -> 0.
    """
    if allow_boundary:
        rho = np.asarray(rho, dtype=float)
        last = 1.0 - rho.sum(axis=-1, keepdims=True)
        rho_full = np.concatenate([rho, last], axis=-1)
        if np.any(rho_full < -1e-13):
            raise MixtureDomainError("densities must be nonnegative")
        rho_full = np.maximum(rho_full, 0.0)
        per_mole = rho_full / spec.molar_masses
        c = per_mole.sum(axis=-1)
        x = per_mole / c[..., None]
        return c * xlogy(x, x).sum(axis=-1)
    x, c = molar_fractions(rho, spec)
    return c * (x * np.log(x)).sum(axis=-1)


def entropy_vars(rho: np.ndarray, spec: MixtureSpec) -> np.ndarray:
    """Entropy variables w_i = log(x_i)/M_i - log(x_{N+1})/M_{N+1}."""
    x, _ = molar_fractions(rho, spec)
    m = spec.molar_masses
    logx = np.log(x)
    return logx[..., :-1] / m[:-1] - (logx[..., -1:] / m[-1])


def _friction_coefficients(rho: np.ndarray, spec: MixtureSpec):
    """Pairwise coefficients d_ij = 1 / (c^2 M_i M_j D_ij), zero diagonal."""
    x, c = molar_fractions(rho, spec)
    m = spec.molar_masses
    n1 = spec.n_species
    mm = np.outer(m, m)
    denom = spec.diffusivities * mm
    d = np.zeros(rho.shape[:-1] + (n1, n1))
    offmask = ~np.eye(n1, dtype=bool)
    inv_c2 = 1.0 / (c * c)
    d[..., offmask] = inv_c2[..., None] / denom[offmask]
    return d


def friction_matrix_full(rho: np.ndarray, spec: MixtureSpec) -> np.ndarray:
    """Full singular friction matrix A, shape (..., N+1, N+1).

    Off-diagonal A_ij = -d_ij rho_i, diagonal A_ii = sum_{k != i} d_ik rho_k.
    The full density vector spans its null space: A rho_full = 0.
    """
    rho_full = full_densities(rho, spec)
    d = _friction_coefficients(rho, spec)
    a = -d * rho_full[..., :, None]
    diag = (d * rho_full[..., None, :]).sum(axis=-1)
    idx = np.arange(spec.n_species)
    a[..., idx, idx] = diag
    return a


def friction_matrix_reduced(rho: np.ndarray, spec: MixtureSpec) -> np.ndarray:
    """Reduced NxN friction matrix A0 after eliminating species N+1.

    A0_ij = -(d_ij - d_{i,N+1}) rho_i for i != j, and
    A0_ii = sum_{k != i, k <= N} (d_ik - d_{i,N+1}) rho_k + d_{i,N+1}.
    Invertible on the open simplex.
    """
    n = spec.n_reduced
    rho = _check_reduced(rho, n)
    d = _friction_coefficients(rho, spec)
    dn = d[..., :n, n]
    drel = d[..., :n, :n] - dn[..., :, None]
    a0 = -drel * rho[..., :, None]
    idx = np.arange(n)
    offsum = (drel * rho[..., None, :]).sum(axis=-1) - (
        drel[..., idx, idx] * rho
    )
    a0[..., idx, idx] = offsum + dn
    return a0


def fraction_jacobian(rho: np.ndarray, spec: MixtureSpec) -> np.ndarray:
    """Jacobian dw/dx' of entropy variables in reduced molar fractions.

    G_ij = c (1/rho_{N+1} + delta_ij / rho_i); symmetric positive definite.
    """
    n = spec.n_reduced
    rho = _check_reduced(rho, n)
    rho_full = full_densities(rho, spec)
    _, c = molar_fractions(rho, spec)
    g = np.broadcast_to(
        (c / rho_full[..., -1])[..., None, None], rho.shape[:-1] + (n, n)
    ).copy()
    idx = np.arange(n)
    g[..., idx, idx] += c[..., None] / rho
    return g


def entropy_hessian(rho: np.ndarray, spec: MixtureSpec) -> np.ndarray:
    """Hessian of the entropy density, H = dw/drho; symmetric PD.

    H_ij = delta_ij / (M_i rho_i) + 1 / (M_{N+1} rho_{N+1})
           - (1/c) (1/M_i - 1/M_{N+1}) (1/M_j - 1/M_{N+1}).
    """
    n = spec.n_reduced
    rho = _check_reduced(rho, n)
    rho_full = full_densities(rho, spec)
    _, c = molar_fractions(rho, spec)
    m = spec.molar_masses
    dm = 1.0 / m[:n] - 1.0 / m[-1]
    h = (1.0 / (m[-1] * rho_full[..., -1]))[..., None, None] - (
        np.outer(dm, dm) / c[..., None, None]
    )
    h = np.broadcast_to(h, rho.shape[:-1] + (n, n)).copy()
    idx = np.arange(n)
    h[..., idx, idx] += 1.0 / (m[:n] * rho)
    return h


def mobility_matrix(rho: np.ndarray, spec: MixtureSpec) -> np.ndarray:
    """Mobility matrix B = A0^{-1} G^{-1} of the entropy-variable flux.

    Computed by two linear solves rather than explicit inversion.  The
    product is symmetric positive definite up to roundoff; the result is
    symmetrized after an asymmetry check.
    """
    a0 = friction_matrix_reduced(rho, spec)
    g = fraction_jacobian(rho, spec)
    n = spec.n_reduced
    eye = np.broadcast_to(np.eye(n), g.shape)
    g_inv = np.linalg.solve(g, eye)
    b = np.linalg.solve(a0, g_inv)
    bt = np.swapaxes(b, -1, -2)
    scale = np.abs(b).max()
    asym = np.abs(b - bt).max()
    if asym > 1e-8 * scale:
        raise FloatingPointError(
            f"mobility matrix lost symmetry: rel asymmetry {asym / scale:.3e}"
        )
    return 0.5 * (b + bt)


def densities_from_entropy(w: np.ndarray, spec: MixtureSpec,
                           rho_init: np.ndarray | None = None,
                           tol: float = 1e-12,
                           max_iter: int = 100) -> np.ndarray:
    """Invert the entropy-variable map: find rho with w(rho) = w.

    Damped Newton iteration on the reduced densities using the analytic
    Jacobian H.  Steps are clipped so iterates stay inside the simplex
    with margin 1e-14, and the step is halved (Armijo on the convex
    potential h(rho) - w.rho) whenever it fails to decrease it.  The
    returned state is strictly interior, which is how the time steppers
    obtain positivity without any clamping.

    Targets whose solution has a component close to the resolution of
    double precision stop at the nearest representable density; such a
    state is accepted if its entropy-variable residual is below the
    quantization floor eps / min_component, otherwise
    ``InversionError`` is raised (e.g. for targets that would need a
    component below the interior margin).

    Parameters
    ----------
    w : array_like, shape (..., N)
        Target entropy variables, any real values.
    rho_init : optional warm-start densities of the same shape.
    tol : convergence tolerance on max |w(rho) - w|.
    max_iter : iterations before raising ``InversionError``.
    """
    w = np.asarray(w, dtype=float)
    n = spec.n_reduced
    if w.shape[-1] != n:
        raise MixtureDomainError(
            f"expected {n} entropy variables, got {w.shape[-1]}"
        )
    margin = 1e-14
    flat_w = w.reshape(-1, n)
    npts = flat_w.shape[0]
    if rho_init is None:
        rho = np.full((npts, n), 1.0 / (n + 1))
    else:
        rho = np.asarray(rho_init, dtype=float).reshape(-1, n).copy()

    def merit(r):
        # Convex potential whose gradient is w(rho) - w_target.
        return entropy_density(r, spec) - (flat_w * r).sum(axis=-1)

    iters = 0
    for it in range(max_iter):
        iters = it
        g = entropy_vars(rho, spec) - flat_w
        if np.abs(g).max() <= tol:
            return rho.reshape(w.shape)
        hess = entropy_hessian(rho, spec)
        step = -np.linalg.solve(hess, g[..., None])[..., 0]
        # Largest multiple of the step keeping every component and the
        # eliminated remainder at least `margin` away from zero.
        t_max = np.full(npts, np.inf)
        neg = step < 0.0
        with np.errstate(divide="ignore", invalid="ignore"):
            ratios = np.where(neg, (rho - margin) / np.where(neg, -step, 1.0),
                              np.inf)
        t_max = np.minimum(t_max, ratios.min(axis=-1))
        ssum = step.sum(axis=-1)
        room = (1.0 - margin) - rho.sum(axis=-1)
        grow = ssum > 0.0
        t_max = np.where(grow, np.minimum(t_max, room / np.where(
            grow, ssum, 1.0)), t_max)
        # Fraction-to-the-boundary: never land on the clip margin itself,
        # otherwise the Hessian blows up and the iteration crawls.
        t = np.minimum(1.0, 0.9 * t_max)
        t = np.maximum(t, 0.0)
        # Backtrack (Armijo on the potential), but only where the
        # predicted decrease stands above the merit's roundoff floor;
        # below that the comparison is noise and the plain clipped
        # Newton step is the right move.
        phi0 = merit(rho)
        slope = (g * step).sum(axis=-1)
        noise = 64.0 * np.finfo(float).eps * (1.0 + np.abs(phi0))
        for _ in range(60):
            cand = rho + t[:, None] * step
            ok = (t * -slope <= noise) | (merit(cand)
                                          <= phi0 + 1e-4 * t * slope)
            if ok.all():
                break
            t = np.where(ok, t, 0.5 * t)
        new = rho + t[:, None] * step
        if np.array_equal(new, rho):
            # Bitwise fixed point: no representable state does better.
            break
        rho = new
    # Stagnated (or ran out of iterations).  A target whose solution has
    # a component of size r can only be matched to ~eps/r in entropy
    # space: that is the quantization of w(rho) across one ulp of rho.
    # Accept residuals below that floor; anything larger is a genuine
    # failure (e.g. a component that would have to sit below the
    # interior margin).
    row_res = np.abs(entropy_vars(rho, spec) - flat_w).max(axis=-1)
    rmin = np.maximum(np.minimum(rho.min(axis=-1), 1.0 - rho.sum(axis=-1)),
                      margin)
    mass_floor = min(float(np.min(spec.molar_masses)), 1.0)
    rep_limit = 8.0 * np.finfo(float).eps / (rmin * mass_floor)
    if np.all(row_res <= np.maximum(tol, rep_limit)):
        return rho.reshape(w.shape)
    raise InversionError(iters + 1, float(row_res.max()))


def lift_initial(rho_full: np.ndarray, alpha0: float) -> np.ndarray:
    """Push initial data from the closed simplex strictly inside it.

    Each component of the full density vector is mapped to
    (rho_i + 2 alpha0) / (1 + 2 alpha0 (N+1)); the result sums to one
    and every component is at least alpha0.  Requires
    0 < alpha0 < 1 / (2 (N+1)).
    """
    rho_full = np.asarray(rho_full, dtype=float)
    n1 = rho_full.shape[-1]
    if not 0.0 < alpha0 < 1.0 / (2.0 * n1):
        raise ValueError(
            f"alpha0 must lie in (0, {1.0 / (2.0 * n1):.4g}), got {alpha0}"
        )
    if np.any(rho_full < 0.0):
        raise MixtureDomainError("initial densities must be nonnegative")
    sums = rho_full.sum(axis=-1)
    if not np.allclose(sums, 1.0, rtol=0.0, atol=1e-12):
        raise MixtureDomainError("initial densities must sum to one")
    return (rho_full + 2.0 * alpha0) / (1.0 + 2.0 * alpha0 * n1)


def sample_simplex(rng: np.random.Generator, n_species: int, n_points: int,
                   margin: float = 1e-3) -> np.ndarray:
    """Seeded uniform sampling of reduced densities on the open simplex.

    Uses exponential spacings (a flat Dirichlet draw) and rejects points
    closer than ``margin`` to the boundary.  Returns shape (n_points, N).
    """
    out = np.empty((n_points, n_species - 1))
    got = 0
    while got < n_points:
        e = rng.exponential(size=(2 * (n_points - got) + 8, n_species))
        q = e / e.sum(axis=-1, keepdims=True)
        keep = q.min(axis=-1) > margin
        q = q[keep][: n_points - got]
        out[got:got + q.shape[0]] = q[:, :-1]
        got += q.shape[0]
    return out
