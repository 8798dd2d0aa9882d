"""Pointwise mixture algebra: frozen oracles and seeded properties.

Oracle values were computed by hand from the defining formulas (total
concentration, molar fractions, entropy density, friction matrices)
for tiny mixtures where everything reduces to closed form; property
tests draw random interior states and random mixture descriptions with
fixed seeds.
"""

import numpy as np
import pytest

from msflow import mixture
from msflow.mixture import (
    InversionError,
    MixtureDomainError,
    MixtureSpec,
    densities_from_entropy,
    entropy_density,
    entropy_vars,
    full_densities,
    lift_initial,
    friction_matrix_full,
    friction_matrix_reduced,
    mobility_matrix,
    fraction_jacobian,
    entropy_hessian,
    molar_fractions,
    sample_simplex,
)

from conftest import random_spec


# ---------------------------------------------------------------------
# Spec construction and validation
# ---------------------------------------------------------------------

def test_spec_normalizes_inputs(stiff_binary_spec):
    assert stiff_binary_spec.n_species == 2
    assert stiff_binary_spec.n_reduced == 1
    # Diagonal of the diffusivity matrix is irrelevant and zeroed.
    assert stiff_binary_spec.diffusivities[0, 0] == 0.0


def test_spec_rejects_bad_masses():
    d = np.array([[0.0, 1.0], [1.0, 0.0]])
    with pytest.raises(ValueError, match="positive"):
        MixtureSpec(np.array([1.0, -1.0]), d)
    with pytest.raises(ValueError, match="length >= 2"):
        MixtureSpec(np.array([1.0]), np.zeros((1, 1)))


def test_spec_rejects_bad_diffusivities():
    m = np.array([1.0, 1.0])
    with pytest.raises(ValueError, match="shape"):
        MixtureSpec(m, np.zeros((3, 3)))
    with pytest.raises(ValueError, match="symmetric"):
        MixtureSpec(m, np.array([[0.0, 1.0], [2.0, 0.0]]))
    with pytest.raises(ValueError, match="positive"):
        MixtureSpec(m, np.array([[0.0, -1.0], [-1.0, 0.0]]))


# ---------------------------------------------------------------------
# Closed-form oracles
# ---------------------------------------------------------------------

def test_molar_fraction_oracle(stiff_binary_spec):
    # rho' = [0.5], masses (2, 1): c = 0.5/2 + 0.5/1 = 0.75,
    # x = (0.25, 0.5)/0.75 = (1/3, 2/3).
    x, c = molar_fractions(np.array([0.5]), stiff_binary_spec)
    assert c == pytest.approx(0.75, abs=1e-15)
    np.testing.assert_allclose(x, [1.0 / 3.0, 2.0 / 3.0], atol=1e-15)


def test_entropy_variable_oracle(stiff_binary_spec):
    # w = log(1/3)/2 - log(2/3)/1, computed independently.
    w = entropy_vars(np.array([0.5]), stiff_binary_spec)
    assert w[0] == pytest.approx(-0.14384103622589045, abs=1e-15)


def test_entropy_density_oracles(binary_spec):
    h = entropy_density(np.array([0.25]), binary_spec)
    assert h == pytest.approx(-0.5623351446188083, abs=1e-15)
    h = entropy_density(np.array([0.5]), binary_spec)
    assert h == pytest.approx(-np.log(2.0), abs=1e-15)
    tern = MixtureSpec(np.ones(3), np.ones((3, 3)) - np.eye(3))
    h = entropy_density(np.array([1.0, 1.0]) / 3.0, tern)
    assert h == pytest.approx(-np.log(3.0), abs=1e-14)


def test_entropy_density_boundary_convention(binary_spec):
    # x log x -> 0: a pure species has zero mixing entropy.
    h = entropy_density(np.array([0.0]), binary_spec, allow_boundary=True)
    assert h == 0.0
    h = entropy_density(np.array([1.0]), binary_spec, allow_boundary=True)
    assert h == 0.0
    with pytest.raises(MixtureDomainError):
        entropy_density(np.array([-0.1]), binary_spec, allow_boundary=True)


def test_full_friction_matrix_oracle(binary_spec):
    # Equal masses, D12 = 1, rho' = [0.5]: c = 1, d12 = 1, so
    # A = [[0.5, -0.5], [-0.5, 0.5]].
    a = friction_matrix_full(np.array([0.5]), binary_spec)
    np.testing.assert_allclose(a, [[0.5, -0.5], [-0.5, 0.5]], atol=1e-15)


def test_reduced_friction_matrix_oracle(binary_spec):
    # Equal-mass binary: c = 1 for every state, so A0 = 1/D12 = 1
    # independently of rho.
    for r in (0.25, 0.5, 0.9):
        a0 = friction_matrix_reduced(np.array([r]), binary_spec)
        assert a0[0, 0] == pytest.approx(1.0, abs=1e-14)


def test_fraction_jacobian_oracle(binary_spec):
    # G = c (1/rho_2 + 1/rho_1) = 4 at rho' = [0.5].
    g = fraction_jacobian(np.array([0.5]), binary_spec)
    assert g[0, 0] == pytest.approx(4.0, abs=1e-14)


def test_entropy_hessian_oracle(binary_spec):
    # H = 1/rho_1 + 1/rho_2 = 4 + 4/3 at rho' = [0.25] (mass terms
    # cancel for equal masses).
    h = entropy_hessian(np.array([0.25]), binary_spec)
    assert h[0, 0] == pytest.approx(16.0 / 3.0, rel=1e-14)


def test_mobility_matrix_binary_closed_form():
    # Equal-mass binary with diffusivity D: B = D rho_1 rho_2.
    dval = 1.7
    spec = MixtureSpec(np.ones(2), dval * (np.ones((2, 2)) - np.eye(2)))
    for r in (0.2, 0.5, 0.75):
        b = mobility_matrix(np.array([r]), spec)
        assert b[0, 0] == pytest.approx(dval * r * (1.0 - r), rel=1e-12)


def test_lift_oracle():
    out = lift_initial(np.array([0.0, 1.0]), 0.1)
    np.testing.assert_allclose(out, [1.0 / 7.0, 6.0 / 7.0], atol=1e-15)
    assert out.sum() == pytest.approx(1.0, abs=1e-15)


def test_lift_validation():
    with pytest.raises(ValueError, match="alpha0"):
        lift_initial(np.array([0.5, 0.5]), 0.3)
    with pytest.raises(ValueError, match="alpha0"):
        lift_initial(np.array([0.5, 0.5]), 0.0)
    with pytest.raises(MixtureDomainError, match="nonnegative"):
        lift_initial(np.array([-0.1, 1.1]), 1e-3)
    with pytest.raises(MixtureDomainError, match="sum to one"):
        lift_initial(np.array([0.5, 0.4]), 1e-3)


def test_lift_floor_and_sum():
    rng = np.random.default_rng(7)
    raw = rng.dirichlet(np.ones(4), size=50)
    raw[0, 2] = 0.0
    raw[0] /= raw[0].sum()
    alpha = 1e-3
    lifted = lift_initial(raw, alpha)
    assert np.allclose(lifted.sum(axis=-1), 1.0, atol=1e-14)
    assert lifted.min() >= alpha


# ---------------------------------------------------------------------
# Domain checking
# ---------------------------------------------------------------------

def test_domain_errors(binary_spec):
    with pytest.raises(MixtureDomainError):
        molar_fractions(np.array([0.0]), binary_spec)
    with pytest.raises(MixtureDomainError):
        molar_fractions(np.array([1.0]), binary_spec)
    with pytest.raises(MixtureDomainError):
        molar_fractions(np.array([0.3, 0.3]), binary_spec)
    with pytest.raises(MixtureDomainError):
        densities_from_entropy(np.array([0.0, 0.0]), binary_spec)


def test_closure_sums_to_one(ternary_spec):
    rng = np.random.default_rng(11)
    pts = sample_simplex(rng, 3, 64)
    rho_full = full_densities(pts, ternary_spec)
    np.testing.assert_allclose(rho_full.sum(axis=-1), 1.0, atol=1e-15)
    assert rho_full.shape == (64, 3)


# ---------------------------------------------------------------------
# Seeded property tests
# ---------------------------------------------------------------------

@pytest.mark.parametrize("n_species", [2, 3, 4])
def test_full_matrix_null_space(n_species):
    rng = np.random.default_rng(100 + n_species)
    spec = random_spec(rng, n_species)
    pts = sample_simplex(rng, n_species, 50)
    a = friction_matrix_full(pts, spec)
    rho_full = full_densities(pts, spec)
    resid = np.einsum("cij,cj->ci", a, rho_full)
    assert np.abs(resid).max() <= 1e-13 * np.abs(a).max()


@pytest.mark.parametrize("n_species", [2, 3, 4])
def test_coefficient_matrices_spd(n_species):
    rng = np.random.default_rng(200 + n_species)
    spec = random_spec(rng, n_species)
    pts = sample_simplex(rng, n_species, 50)
    for builder in (entropy_hessian, fraction_jacobian, mobility_matrix):
        m = builder(pts, spec)
        asym = np.abs(m - np.swapaxes(m, -1, -2)).max()
        assert asym <= 1e-10 * np.abs(m).max()
        eigs = np.linalg.eigvalsh(m)
        assert eigs.min() > 0.0
    a0 = friction_matrix_reduced(pts, spec)
    assert np.isfinite(np.linalg.cond(a0)).all()


@pytest.mark.parametrize("n_species", [2, 3, 4])
def test_jacobian_consistency(n_species):
    # H must be the Jacobian of w with respect to the reduced
    # densities; central finite differences, relative 1e-6.
    rng = np.random.default_rng(300 + n_species)
    spec = random_spec(rng, n_species)
    pts = sample_simplex(rng, n_species, 20, margin=5e-2)
    h = entropy_hessian(pts, spec)
    n = n_species - 1
    fd = np.empty_like(h)
    delta = 1e-7
    for j in range(n):
        e = np.zeros(n)
        e[j] = delta
        fd[..., j] = (entropy_vars(pts + e, spec)
                      - entropy_vars(pts - e, spec)) / (2.0 * delta)
    # dw_i/drho_j lands in column j; H is symmetric so the
    # orientation does not matter for the comparison.
    assert np.abs(fd - h).max() <= 1e-6 * np.abs(h).max()


@pytest.mark.parametrize("n_species", [2, 3, 4])
def test_entropy_roundtrip(n_species):
    rng = np.random.default_rng(400 + n_species)
    spec = random_spec(rng, n_species)
    pts = sample_simplex(rng, n_species, 200)
    back = densities_from_entropy(entropy_vars(pts, spec), spec)
    assert np.abs(back - pts).max() <= 1e-10


def test_roundtrip_near_boundary(binary_spec):
    # States down to 1e-9 from the simplex boundary invert to machine
    # precision.
    r = np.array([[1e-9], [1.0 - 1e-9], [0.5]])
    w = entropy_vars(r, binary_spec)
    back = densities_from_entropy(w, binary_spec)
    assert np.abs((back - r) / r).max() <= 1e-8


def test_inversion_binary_closed_form(binary_spec):
    # Equal-mass binary: w = log(rho_1 / rho_2), so the inverse is the
    # logistic function.
    for wval, expect in ((0.3, 0.574442516811659),
                        (-2.0, 0.11920292202211755)):
        rho = densities_from_entropy(np.array([wval]), binary_spec)
        assert rho[0] == pytest.approx(expect, rel=1e-13)


def test_inversion_warm_start(ternary_spec):
    rng = np.random.default_rng(17)
    pts = sample_simplex(rng, 3, 30)
    w = entropy_vars(pts, ternary_spec)
    jittered = np.clip(pts + 1e-3 * rng.standard_normal(pts.shape),
                       1e-3, None)
    back = densities_from_entropy(w, ternary_spec, rho_init=jittered)
    assert np.abs(back - pts).max() <= 1e-10


def test_inversion_raises_outside_representable_range(binary_spec):
    # A target this extreme would need a component below the interior
    # margin of the iteration; failing loudly is the contract.
    with pytest.raises(InversionError):
        densities_from_entropy(np.array([40.0]), binary_spec)
    with pytest.raises(InversionError):
        densities_from_entropy(np.array([-40.0]), binary_spec)


def test_inversion_extreme_but_feasible(binary_spec):
    # |w| = 30 puts a component near 1e-13; the iteration must still
    # land on the nearest representable state.
    for wval in (30.0, -30.0):
        rho = densities_from_entropy(np.array([wval]), binary_spec)
        w_back = entropy_vars(rho, binary_spec)
        # Residual bounded by the quantization of w across one ulp of
        # the small component.
        small = min(rho[0], 1.0 - rho[0])
        assert abs(w_back[0] - wval) <= 8.0 * np.finfo(float).eps / small


def test_inversion_shape_check(binary_spec):
    with pytest.raises(MixtureDomainError):
        densities_from_entropy(np.zeros((4, 2)), binary_spec)


def test_sample_simplex_properties():
    rng = np.random.default_rng(5)
    pts = sample_simplex(rng, 4, 500, margin=1e-2)
    assert pts.shape == (500, 3)
    full = np.concatenate([pts, 1.0 - pts.sum(-1, keepdims=True)], axis=-1)
    assert full.min() > 1e-2
    rng2 = np.random.default_rng(5)
    again = sample_simplex(rng2, 4, 500, margin=1e-2)
    np.testing.assert_array_equal(pts, again)
