import numpy as np
import pytest

from deform_families import canonical_cylinder
from fem_assembly import PhysicsParams, assemble
from laplace_eigen import (
    default_length_scale, length_scale_threshold, load_or_solve_basis,
    reorthonormalize_eigenspaces, solve_basis, solve_eigenpairs,
)
from mesh_io import total_volume
from recon_errors import ConfigError


@pytest.fixture(scope='module')
def full_basis(small_bent):
    params = PhysicsParams()
    fem = assemble(small_bent, params)
    return fem, solve_basis(fem, params, n_eig=small_bent.n_vertices)


class TestEigenpairs:
    def test_zero_mode_is_constant(self, small_bent, full_basis):
        _, basis = full_basis
        vol = total_volume(small_bent)
        assert basis.eigenvalues[0] == 0.0
        assert np.allclose(basis.eigvecs[:, 0], 1.0 / np.sqrt(vol), rtol=1e-8)
        assert np.all(basis.eigenvalues[1:] > 0)
        assert np.all(np.diff(basis.eigenvalues) >= 0)

    def test_m_orthonormal(self, full_basis):
        fem, basis = full_basis
        P = basis.eigvecs
        assert np.allclose(P.T @ (fem.M @ P), np.eye(P.shape[1]), atol=1e-10)
        scale = basis.eigenvalues.max()
        assert np.allclose(P.T @ (fem.S @ P), np.diag(basis.eigenvalues), atol=1e-8 * scale)

    @pytest.mark.parametrize("method", ['dense', 'sparse'])
    def test_residuals_meet_absolute_tolerance(self, bent_cylinder, method):
        params = PhysicsParams(D0=3.0)
        fem = assemble(bent_cylinder, params)
        lam, vecs = solve_eigenpairs(fem, n_eig=30, method=method)
        r = fem.S @ vecs - (fem.M @ vecs) * lam[None, :]
        assert np.all(np.linalg.norm(r, axis=0) / np.linalg.norm(vecs, axis=0) < 1e-8)

    def test_first_nonzero_mode_of_long_cylinder(self):
        mesh = canonical_cylinder(0.2, 10.0, 100)
        params = PhysicsParams()
        lam, _ = solve_eigenpairs(assemble(mesh, params), n_eig=3)
        assert lam[1] == pytest.approx(params.D0 * (np.pi / 10.0) ** 2, rel=0.05)

    def test_sparse_matches_dense(self, small_bent):
        fem = assemble(small_bent, PhysicsParams())
        dense, _ = solve_eigenpairs(fem, n_eig=6, method='dense')
        sparse, vecs = solve_eigenpairs(fem, n_eig=6, method='sparse')
        assert np.allclose(sparse, dense, rtol=1e-8, atol=1e-10)
        assert np.allclose(vecs.T @ (fem.M @ vecs), np.eye(6), atol=1e-10)

    def test_more_modes_keep_the_first(self, small_bent):
        fem = assemble(small_bent, PhysicsParams())
        few, _ = solve_eigenpairs(fem, n_eig=5)
        many, _ = solve_eigenpairs(fem, n_eig=10)
        assert np.allclose(many[:5], few, rtol=1e-10, atol=1e-12)

    def test_n_eig_out_of_range(self, small_bent):
        fem = assemble(small_bent, PhysicsParams())
        with pytest.raises(ConfigError):
            solve_eigenpairs(fem, n_eig=small_bent.n_vertices + 1)

    def test_unknown_method(self, small_bent):
        fem = assemble(small_bent, PhysicsParams())
        with pytest.raises(ConfigError):
            solve_eigenpairs(fem, n_eig=3, method='magic')


class TestProjectedOperators:
    def test_moments(self, small_bent, full_basis):
        _, basis = full_basis
        root = np.sqrt(total_volume(small_bent))
        assert basis.moments[0] == pytest.approx(root, rel=1e-10)
        assert np.allclose(basis.moments[1:], 0.0, atol=1e-10 * root)

    def test_operators_symmetric(self, full_basis):
        _, basis = full_basis
        for A in (basis.Ax, basis.Ay, basis.Az):
            assert np.allclose(A, A.T, atol=1e-14)
        assert np.allclose(basis.A((0.0, 0.0, 1.0)), basis.Az)

    def test_translation_shifts_by_identity(self, small_bent):
        params = PhysicsParams()
        a = solve_basis(assemble(small_bent, params), params, n_eig=8)
        moved = small_bent.with_vertices(small_bent.vertices + [0.0, 0.0, 4.0])
        b = solve_basis(assemble(moved, params), params, n_eig=8)
        assert np.allclose(b.eigenvalues, a.eigenvalues, rtol=1e-10, atol=1e-12)
        # eigenvector signs may differ, so compare magnitudes off the diagonal
        shifted = b.Az - 4.0 * np.eye(8)
        assert np.allclose(np.diag(shifted), np.diag(a.Az), atol=1e-8)
        assert np.allclose(np.abs(shifted), np.abs(a.Az), atol=1e-8)

    def test_relaxation_block(self, small_bent):
        params = PhysicsParams(T2=50.0)
        basis = solve_basis(assemble(small_bent, params), params, n_eig=6)
        assert np.allclose(basis.T, np.eye(6) / 50.0, atol=1e-12)


class TestTruncation:
    def test_default_length_scale(self, cylinder):
        assert default_length_scale(cylinder) == pytest.approx(1.0)

    def test_threshold(self, physics):
        assert length_scale_threshold(physics, 1.0) == pytest.approx(2.0 * np.pi ** 2)
        with pytest.raises(ConfigError):
            length_scale_threshold(physics, 0.0)

    def test_length_scale_selection(self, cylinder, physics):
        fem = assemble(cylinder, physics)
        basis = solve_basis(fem, physics, length_scale=1.0)
        assert basis.n_eig >= 2
        assert basis.eigenvalues.max() <= length_scale_threshold(physics, 1.0)

    def test_cap(self, cylinder, physics):
        fem = assemble(cylinder, physics)
        basis = solve_basis(fem, physics, length_scale=0.3, max_modes=10)
        assert basis.n_eig == 10

    def test_exactly_one_truncation(self, small_bent, physics):
        fem = assemble(small_bent, physics)
        with pytest.raises(ConfigError):
            solve_basis(fem, physics)
        with pytest.raises(ConfigError):
            solve_basis(fem, physics, n_eig=4, length_scale=1.0)


class TestCacheAndRotation:
    def test_cache_round_trip(self, tmp_path, small_bent, physics):
        fem = assemble(small_bent, physics)
        first = load_or_solve_basis(small_bent, fem, physics, n_eig=6, cache_dir=tmp_path)
        assert len(list(tmp_path.glob('basis_*.npz'))) == 1
        second = load_or_solve_basis(small_bent, fem, physics, n_eig=6, cache_dir=tmp_path)
        assert np.array_equal(first.eigvecs, second.eigvecs)
        assert np.array_equal(first.Az, second.Az)

    def test_reorthonormalized_basis_stays_valid(self, full_basis):
        fem, basis = full_basis
        rotated = reorthonormalize_eigenspaces(fem, basis, np.random.default_rng(3))
        P = rotated.eigvecs
        assert np.array_equal(rotated.eigenvalues, basis.eigenvalues)
        assert np.allclose(P.T @ (fem.M @ P), np.eye(P.shape[1]), atol=1e-10)
