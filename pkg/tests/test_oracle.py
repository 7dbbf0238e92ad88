import numpy as np
import pytest
import scipy.sparse as sp

from resonflow.atommodel import fiber_hamiltonian, free_fiber_diagonal
from resonflow.oracle import (dense_spectrum, eigen_near, ground_state_energy, perturbation_fit,
                              resonance_at, resonance_by_dilation)

from conftest import small_problem


def test_dense_spectrum_diagonal_and_hermitian(rng):
    d = np.array([3.0, -1.0 + 0.5j, 2.0, -1.0 - 0.5j])
    vals, _ = dense_spectrum(np.diag(d))
    assert np.array_equal(vals, np.array([-1.0 - 0.5j, -1.0 + 0.5j, 2.0, 3.0]))
    A = rng.normal(size=(20, 20)) + 1j * rng.normal(size=(20, 20))
    vals, vecs = dense_spectrum(A + A.conj().T)
    assert np.max(np.abs(vals.imag)) < 1e-12
    assert np.all(np.diff(vals.real) >= 0)
    with pytest.raises(ValueError, match="dense cap"):
        dense_spectrum(np.eye(5), cap=4)


def test_dense_spectrum_free_closed_form():
    grid, basis, atom, params = small_problem(lambda0=0.0)
    vals, _ = dense_spectrum(fiber_hamiltonian(grid, basis, atom, params))
    closed = free_fiber_diagonal(basis, atom, params.p, params.theta)
    closed = closed[np.lexsort((closed.imag, closed.real))]
    assert np.allclose(vals, closed, atol=1e-12)


def test_eigen_near_dense_and_sparse_agree():
    grid, basis, atom, params = small_problem(lambda0=0.01)
    H = fiber_hamiltonian(grid, basis, atom, params)
    z_dense, _, _, _ = eigen_near(H, 1.0, k=4)
    n = H.shape[0]
    # pad with decoupled far-away states to push past the dense threshold
    big = sp.block_diag([H, sp.diags(np.linspace(50, 60, 700 - n + 300))]).tocsr()
    z_sparse, vec, _, _ = eigen_near(big, 1.0, k=4)
    assert abs(z_dense - z_sparse) < 1e-11
    assert np.linalg.norm(big @ vec - z_sparse * vec) < 1e-9


def test_hermitian_real_spectrum():
    grid, basis, atom, params = small_problem(lambda0=0.02)
    H = fiber_hamiltonian(grid, basis, atom, params.with_(theta=0j))
    vals, _ = dense_spectrum(H)
    assert np.max(np.abs(vals.imag)) < 1e-11


def test_conjugation_symmetry():
    grid, basis, atom, params = small_problem(lambda0=0.02)
    a = dense_spectrum(fiber_hamiltonian(grid, basis, atom, params))[0]
    b = dense_spectrum(fiber_hamiltonian(grid, basis, atom, params.with_(theta=-params.theta)))[0]
    assert np.allclose(np.sort_complex(a), np.sort_complex(b.conj()), atol=1e-10)


def test_ground_state_zero_coupling():
    grid, basis, atom, params = small_problem(lambda0=0.0, i0=1)
    gs = ground_state_energy(grid, basis, atom, params)
    assert gs["E"] == 0.0
    assert np.isclose(gs["gap"], min(atom.delta0, np.min(np.diag(
        fiber_hamiltonian(grid, basis, atom, params.with_(theta=0j)).toarray())[1:basis.dim]).real))
    with pytest.raises(ValueError, match="real total momentum"):
        ground_state_energy(grid, basis, atom, params.with_(p=params.p + 0.01j))


def test_ground_state_dispersion_symmetry():
    grid, basis, atom, params = small_problem(lambda0=0.02, i0=1)
    e = np.array([0.0, 0.0, 1.0])
    plus = ground_state_energy(grid, basis, atom, params.with_(p=0.3 * e))
    minus = ground_state_energy(grid, basis, atom, params.with_(p=-0.3 * e))
    zero = ground_state_energy(grid, basis, atom, params.with_(p=0 * e))
    # the octahedral direction rule is symmetric under k -> -k
    assert abs(plus["E"] - minus["E"]) < 1e-12
    # the fiber energy moves by at most |p| |P_f| + O(lambda^2) at this coupling
    assert abs(plus["E"] - zero["E"]) < 0.3 * 0.02 ** 2
    assert zero["E"] < 0 and zero["nondegenerate"]


def test_dilation_zero_coupling_exact():
    grid, basis, atom, params = small_problem(lambda0=0.0)
    res = resonance_by_dilation(grid, basis, atom, params)
    assert res.z_res == 1.0 and np.all(res.values == 1.0) and res.noise == 0


def test_dilation_width_negative():
    grid, basis, atom, params = small_problem(lambda0=0.01)
    res = resonance_by_dilation(grid, basis, atom, params)
    assert res.z_res.imag < 0
    assert res.plateau_index in range(1, len(res.varthetas) - 1)
    assert np.all(res.overlaps > 0.5)
    assert res.noise < 1e-3 and abs(res.z_res - resonance_at(grid, basis, atom, params)) <= res.noise


def test_perturbation_fit_zero_intercept():
    grid, basis, atom, params = small_problem(lambda0=0.0)
    fit = perturbation_fit(grid, basis, atom, params, [0.0, 1e-3, 2e-3, 4e-3])
    assert fit.z[0] == 1.0
    # what the quadratic term leaves over is of fourth order on a finite basis
    assert np.all(fit.residuals < 1e-2 * fit.lambdas[1:] ** 2)
    assert fit.residual_exponent > 2.4
    assert fit.a_fit.imag < 0 and fit.rel_error is None
