"""Cell-centered finite differences on uniform 1D/2D boxes.

Fields live at cell centers x_i = (i + 1/2) h.  Two ghost-cell
conventions define how stencils see the boundary:

* ``"neumann"``: even reflection (ghost equals the first interior
  value), used for densities, entropy variables and pressure;
* ``"dirichlet"``: odd reflection (ghost equals minus the first
  interior value), used for velocity components, which vanish on the
  boundary.

With these conventions the central first-derivative operators satisfy
an exact summation-by-parts identity,

    <grad f, v> = -<f, div v>,

for any scalar f (even ghosts) and vector v (odd ghosts), where <.,.>
is the midpoint quadrature inner product.  The identity is what makes
the discrete energy and entropy balances close to roundoff; it is
asserted in the test suite rather than assumed.

The advective trilinear form is implemented in its skew-symmetric
form,

    advect_form(u, v, w) = 0.5 (<(u.grad) v, w> - <(u.grad) w, v>),

so advect_form(u, v, v) = 0 holds exactly for any discrete fields.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

_ADJOINT_BC = {"dirichlet": "neumann", "neumann": "dirichlet"}


class GridError(ValueError):
    """Raised for malformed grids or mismatched field shapes."""


@dataclass(frozen=True)
class Grid:
    """Uniform cell-centered grid on a box [0, L1] x ... with 1 or 2 axes.

    Parameters
    ----------
    shape : tuple of int
        Cells per axis, at least 4 each.
    spacing : tuple of float
        Cell width per axis.
    """

    shape: tuple
    spacing: tuple

    def __post_init__(self):
        shape = tuple(int(n) for n in self.shape)
        spacing = tuple(float(h) for h in self.spacing)
        if len(shape) not in (1, 2):
            raise GridError("grid must be one- or two-dimensional")
        if len(spacing) != len(shape):
            raise GridError("spacing must match the number of axes")
        if any(n < 4 for n in shape):
            raise GridError("need at least 4 cells per axis")
        if any(h <= 0 for h in spacing):
            raise GridError("spacing must be positive")
        object.__setattr__(self, "shape", shape)
        object.__setattr__(self, "spacing", spacing)

    @classmethod
    def box(cls, shape, lengths) -> "Grid":
        """Grid covering a box of the given side lengths."""
        shape = tuple(int(n) for n in np.atleast_1d(shape))
        lengths = tuple(float(v) for v in np.atleast_1d(lengths))
        return cls(shape, tuple(l / n for l, n in zip(lengths, shape)))

    @property
    def dim(self) -> int:
        return len(self.shape)

    @property
    def n_cells(self) -> int:
        return int(np.prod(self.shape))

    @property
    def cell_volume(self) -> float:
        """Volume of one cell (the midpoint quadrature weight)."""
        return float(np.prod(self.spacing))

    @property
    def lengths(self) -> tuple:
        return tuple(n * h for n, h in zip(self.shape, self.spacing))

    def axis_centers(self, axis: int) -> np.ndarray:
        n, h = self.shape[axis], self.spacing[axis]
        return (np.arange(n) + 0.5) * h

    def cell_centers(self) -> np.ndarray:
        """Coordinates of cell centers, shape (dim, *shape)."""
        axes = [self.axis_centers(a) for a in range(self.dim)]
        return np.stack(np.meshgrid(*axes, indexing="ij"))


# Sparse operator matrices are cached per grid; Grid is hashable.
_matrix_cache: dict = {}


def _central_1d(n: int, h: float, bc: str) -> sp.csr_matrix:
    main = np.zeros(n)
    lower = np.full(n - 1, -1.0)
    upper = np.full(n - 1, 1.0)
    m = sp.diags([lower, main, upper], [-1, 0, 1], format="lil")
    if bc == "neumann":
        m[0, 0] = -1.0
        m[n - 1, n - 1] = 1.0
    elif bc == "dirichlet":
        m[0, 0] = 1.0
        m[n - 1, n - 1] = -1.0
    else:
        raise GridError(f"unknown boundary tag {bc!r}")
    return (m / (2.0 * h)).tocsr()


def _second_1d(n: int, h: float, bc: str) -> sp.csr_matrix:
    main = np.full(n, -2.0)
    off = np.full(n - 1, 1.0)
    m = sp.diags([off, main, off], [-1, 0, 1], format="lil")
    if bc == "neumann":
        m[0, 0] = -1.0
        m[n - 1, n - 1] = -1.0
    elif bc == "dirichlet":
        m[0, 0] = -3.0
        m[n - 1, n - 1] = -3.0
    else:
        raise GridError(f"unknown boundary tag {bc!r}")
    return (m / (h * h)).tocsr()


def _lift(grid: Grid, mat_1d: sp.csr_matrix, axis: int) -> sp.csr_matrix:
    if grid.dim == 1:
        return mat_1d.tocsr()
    if axis == 0:
        return sp.kron(mat_1d, sp.identity(grid.shape[1]), format="csr")
    return sp.kron(sp.identity(grid.shape[0]), mat_1d, format="csr")


def deriv_matrix(grid: Grid, axis: int, bc: str) -> sp.csr_matrix:
    """Central first-derivative matrix along ``axis`` on flattened fields."""
    key = (grid, "d1", axis, bc)
    if key not in _matrix_cache:
        m = _central_1d(grid.shape[axis], grid.spacing[axis], bc)
        _matrix_cache[key] = _lift(grid, m, axis)
    return _matrix_cache[key]


def second_deriv_matrix(grid: Grid, axis: int, bc: str) -> sp.csr_matrix:
    key = (grid, "d2", axis, bc)
    if key not in _matrix_cache:
        m = _second_1d(grid.shape[axis], grid.spacing[axis], bc)
        _matrix_cache[key] = _lift(grid, m, axis)
    return _matrix_cache[key]


def laplacian_matrix(grid: Grid, bc: str) -> sp.csr_matrix:
    key = (grid, "lap", bc)
    if key not in _matrix_cache:
        m = second_deriv_matrix(grid, 0, bc).copy()
        for a in range(1, grid.dim):
            m = m + second_deriv_matrix(grid, a, bc)
        _matrix_cache[key] = m.tocsr()
    return _matrix_cache[key]


def _check_field(grid: Grid, f: np.ndarray, kind: str) -> np.ndarray:
    f = np.asarray(f, dtype=float)
    if kind == "scalar":
        if f.shape != grid.shape:
            raise GridError(f"scalar field shape {f.shape} != {grid.shape}")
    elif kind == "vector":
        if f.shape != (grid.dim,) + grid.shape:
            raise GridError(
                f"vector field shape {f.shape} != {(grid.dim,) + grid.shape}"
            )
    elif kind == "components":
        if f.ndim == grid.dim:
            f = f[None]
        if f.shape[1:] != grid.shape:
            raise GridError(
                f"component field shape {f.shape} does not match {grid.shape}"
            )
    return f


def _apply(grid: Grid, mat: sp.csr_matrix, f: np.ndarray) -> np.ndarray:
    return (mat @ f.reshape(-1)).reshape(grid.shape)


def grad(grid: Grid, f: np.ndarray, bc: str) -> np.ndarray:
    """Central-difference gradient of a scalar field, shape (dim, *shape)."""
    f = _check_field(grid, f, "scalar")
    return np.stack(
        [_apply(grid, deriv_matrix(grid, a, bc), f) for a in range(grid.dim)]
    )


def div(grid: Grid, v: np.ndarray, bc: str = "dirichlet") -> np.ndarray:
    """Divergence of a vector field (default: velocity ghost rule)."""
    v = _check_field(grid, v, "vector")
    out = _apply(grid, deriv_matrix(grid, 0, bc), v[0])
    for a in range(1, grid.dim):
        out = out + _apply(grid, deriv_matrix(grid, a, bc), v[a])
    return out


def laplacian(grid: Grid, f: np.ndarray, bc: str) -> np.ndarray:
    f = _check_field(grid, f, "scalar")
    return _apply(grid, laplacian_matrix(grid, bc), f)


def integrate(grid: Grid, f: np.ndarray) -> float:
    """Midpoint quadrature of a field over the box."""
    return grid.cell_volume * float(np.sum(f))


def inner(grid: Grid, a: np.ndarray, b: np.ndarray) -> float:
    """Quadrature inner product; sums over all matching components."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise GridError(f"inner product shape mismatch {a.shape} vs {b.shape}")
    return grid.cell_volume * float(np.vdot(a, b))


def norm_l2(grid: Grid, a: np.ndarray) -> float:
    return float(np.sqrt(max(inner(grid, a, a), 0.0)))


def norm_h1(grid: Grid, f: np.ndarray, bc: str) -> float:
    """Discrete H1 norm of a component field with the module gradient."""
    f = _check_field(grid, f, "components")
    total = inner(grid, f, f)
    for comp in f:
        g = grad(grid, comp, bc)
        total += inner(grid, g, g)
    return float(np.sqrt(total))


def advect(grid: Grid, u: np.ndarray, v: np.ndarray, bc: str) -> np.ndarray:
    """Convective derivative (u.grad) v, componentwise in v.

    ``bc`` is the ghost rule of the advected field v.
    """
    u = _check_field(grid, u, "vector")
    v = _check_field(grid, v, "components")
    out = np.zeros_like(v)
    for a in range(grid.dim):
        d = deriv_matrix(grid, a, bc)
        for k in range(v.shape[0]):
            out[k] += u[a] * _apply(grid, d, v[k])
    return out


def advect_form(grid: Grid, u: np.ndarray, v: np.ndarray, w: np.ndarray,
                bc: str) -> float:
    """Skew-symmetric advection form 0.5(<(u.g)v, w> - <(u.g)w, v>).

    v and w must have the same component count and share the ghost rule
    ``bc`` ("dirichlet" for velocity arguments, "neumann" for species).
    Exactly antisymmetric in (v, w); advect_form(u, v, v) = 0 to roundoff.
    """
    v = _check_field(grid, v, "components")
    w = _check_field(grid, w, "components")
    if v.shape != w.shape:
        raise GridError("advect_form arguments must have matching shapes")
    a1 = inner(grid, advect(grid, u, v, bc), w)
    a2 = inner(grid, advect(grid, u, w, bc), v)
    return 0.5 * (a1 - a2)


def advection_matrix(grid: Grid, u: np.ndarray, bc: str) -> sp.csr_matrix:
    """Matrix of the skew advection operator on flattened scalar fields.

    Represents v -> 0.5 [ (u.grad) v + div(u v) ] with the ghost rule of
    the advected field ``bc`` and its adjoint rule on the conservative
    part; the result is exactly skew-adjoint in the quadrature inner
    product.  Applied per component by the steppers.
    """
    u = _check_field(grid, u, "vector")
    adj = _ADJOINT_BC[bc]
    mats = []
    for a in range(grid.dim):
        ua = sp.diags(u[a].reshape(-1))
        d_own = deriv_matrix(grid, a, bc)
        d_adj = deriv_matrix(grid, a, adj)
        mats.append(0.5 * (ua @ d_own + d_adj @ ua))
    out = mats[0]
    for m in mats[1:]:
        out = out + m
    return out.tocsr()


def grad_sq_norm(grid: Grid, u: np.ndarray) -> float:
    """Face-based squared gradient norm of a Dirichlet field.

    Defined so that <-laplacian u, u> equals this sum exactly, which is
    the form entering the discrete energy balance.  Sum of squares, so
    never negative.
    """
    u = _check_field(grid, u, "components")
    total = 0.0
    vol = grid.cell_volume
    for comp in u:
        for a in range(grid.dim):
            h = grid.spacing[a]
            moved = np.moveaxis(comp, a, 0)
            diffs = np.diff(moved, axis=0)
            s = np.sum(diffs * diffs)
            s += 2.0 * np.sum(moved[0] * moved[0])
            s += 2.0 * np.sum(moved[-1] * moved[-1])
            total += s * vol / (h * h)
    return float(total)


def divergence_identity_residual(grid: Grid, u: np.ndarray, w: np.ndarray,
                                 spec) -> float:
    """Defect of the advective entropy-flux identity at given (u, w).

    For densities rho recovered from entropy variables w, the continuum
    identity

        advect_form(u, rho, w) + 0.5 <div u, rho . w>
            = -<div u, log(x_{N+1})> / M_{N+1}

    holds exactly; discretely the defect is second order in h.  Returns
    its absolute value.
    """
    from . import mixture

    w = _check_field(grid, w, "components")
    w_pts = np.moveaxis(w, 0, -1)
    rho_pts = mixture.densities_from_entropy(w_pts, spec)
    rho = np.moveaxis(rho_pts, -1, 0)
    x, _ = mixture.molar_fractions(rho_pts, spec)
    log_x_last = np.log(x[..., -1])
    divu = div(grid, u, "dirichlet")
    lhs = advect_form(grid, u, rho, w, "neumann")
    lhs += 0.5 * inner(grid, divu, np.sum(rho * w, axis=0))
    rhs = -inner(grid, divu, log_x_last) / spec.molar_masses[-1]
    return abs(lhs - rhs)


def write_snapshot(path, grid: Grid, name: str, time: float,
                   data: np.ndarray) -> None:
    """Write a field to a plain-text snapshot, bit-exact on reread.

    Values are printed with shortest round-trip decimal representation,
    one cell per line (components space-separated, row-major cells).
    """
    data = _check_field(grid, data, "components")
    ncomp = data.shape[0]
    flat = data.reshape(ncomp, -1).T
    lines = [
        "# msflow snapshot",
        f"# field {name}",
        f"# time {float(time)!r}",
        f"# dim {grid.dim}",
        "# shape " + " ".join(str(n) for n in grid.shape),
        "# spacing " + " ".join(repr(float(h)) for h in grid.spacing),
        f"# components {ncomp}",
    ]
    lines.extend(" ".join(repr(float(v)) for v in row) for row in flat)
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def read_snapshot(path):
    """Read a snapshot written by :func:`write_snapshot`.

    Returns (grid, name, time, data) with data shaped (components, *shape).
    """
    header = {}
    values = []
    with open(path) as fh:
        first = fh.readline().strip()
        if first != "# msflow snapshot":
            raise GridError(f"{path}: not a snapshot file")
        for line in fh:
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                key, _, val = line[1:].strip().partition(" ")
                header[key] = val
            else:
                values.append([float(tok) for tok in line.split()])
    shape = tuple(int(t) for t in header["shape"].split())
    spacing = tuple(float(t) for t in header["spacing"].split())
    grid = Grid(shape, spacing)
    ncomp = int(header["components"])
    data = np.array(values, dtype=float).T.reshape((ncomp,) + shape)
    return grid, header["field"], float(header["time"]), data
