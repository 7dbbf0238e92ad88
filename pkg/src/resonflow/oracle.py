"""Brute-force validation by direct diagonalization of the dilated fiber Hamiltonian."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .atommodel import AtomSpec, ProblemParams, fiber_hamiltonian, vacuum_index
from .fockspace import FockBasis, ModeGrid

DENSE_CAP = 4000


def dense_spectrum(H, cap: int = DENSE_CAP) -> tuple[np.ndarray, np.ndarray]:
    """All eigenvalues and right eigenvectors, sorted by real part (then imaginary part)."""
    A = H.toarray() if sp.issparse(H) else np.asarray(H)
    if A.shape[0] > cap:
        raise ValueError(f"dimension {A.shape[0]} exceeds the dense cap {cap}")
    if np.allclose(A, A.conj().T, atol=0, rtol=0):
        vals, vecs = np.linalg.eigh(A)
        return vals.astype(complex), vecs
    vals, vecs = sla.eig(A)
    order = np.lexsort((vals.imag, vals.real))
    return vals[order], vecs[:, order]


def _shift_invert(H: sp.spmatrix, sigma: complex, k: int):
    n = H.shape[0]
    k = min(k, n - 2)
    eye = sp.identity(n, format="csc")
    try:
        lu = spla.splu((H - sigma * eye).tocsc())
    except RuntimeError:
        # the shift hit an eigenvalue exactly; move it off by a relative 1e-9
        sigma = sigma + 1e-9 * max(1.0, abs(sigma)) * (1 + 1j)
        lu = spla.splu((H - sigma * eye).tocsc())
    op = spla.LinearOperator((n, n), matvec=lu.solve, dtype=complex)
    v0 = np.full(n, 1.0 / np.sqrt(n), complex)
    mu, vecs = spla.eigs(op, k=k, which="LM", tol=1e-14, v0=v0)
    return sigma + 1.0 / mu, vecs


def eigen_near(H, sigma: complex, target: np.ndarray | None = None, k: int = 8):
    """Eigenvalues closest to sigma; with ``target``, the one of largest overlap with it.

    Returns (value, vector, all values found, overlaps).
    """
    n = H.shape[0]
    if n <= 600:
        vals, vecs = dense_spectrum(H)
        near = np.argsort(np.abs(vals - sigma))[:k]
        vals, vecs = vals[near], vecs[:, near]
    else:
        vals, vecs = _shift_invert(sp.csr_matrix(H), sigma, k)
    vecs = vecs / np.linalg.norm(vecs, axis=0)
    if target is None:
        ov = np.zeros(len(vals))
        i = int(np.argmin(np.abs(vals - sigma)))
    else:
        ov = np.abs(target.conj() @ vecs)
        i = int(np.argmax(ov))
    return complex(vals[i]), vecs[:, i], vals, ov


def ground_state_energy(grid: ModeGrid, basis: FockBasis, atom: AtomSpec, params: ProblemParams,
                        gap_tol: float = 1e-6) -> dict:
    """Lowest eigenvalue of the undilated H(p) and its gap to the next eigenvalue."""
    if params.theta != 0:
        params = params.with_(theta=0.0)
    if np.any(np.abs(params.p.imag) > 0):
        raise ValueError("ground state energy needs a real total momentum")
    H = fiber_hamiltonian(grid, basis, atom, params)
    n = H.shape[0]
    if n <= 2000:
        vals = np.linalg.eigvalsh(H.toarray())[:2]
    else:
        vals = np.sort(spla.eigsh(H, k=2, which="SA", tol=1e-13, return_eigenvectors=False))
    gap = float(vals[1] - vals[0])
    return {"E": float(vals[0]), "gap": gap, "nondegenerate": bool(gap > gap_tol)}


@dataclass
class DilationResult:
    z_res: complex
    plateau_index: int
    noise: float
    varthetas: np.ndarray
    values: np.ndarray
    overlaps: np.ndarray
    derivative: np.ndarray = field(default_factory=lambda: np.zeros(0))


def resonance_by_dilation(grid: ModeGrid, basis: FockBasis, atom: AtomSpec, params: ProblemParams,
                          varthetas=None, k: int = 8) -> DilationResult:
    """Track the eigenvalue of H_theta(p) attached to psi_{i0} (x) Omega over a vartheta sweep.

    Eigenvalues are picked by maximal overlap with the unperturbed state.  The
    reported value sits where the discrete derivative |dz/dvartheta| is smallest;
    the noise is the spread of the tracked values around it.
    """
    if varthetas is None:
        v0 = params.vartheta if params.vartheta > 0 else np.pi / 8
        varthetas = v0 * np.array([0.6, 0.8, 1.0, 1.2, 1.4])
    varthetas = np.sort(np.asarray(varthetas, float))
    E = atom.energies[params.i0 - 1]
    target = np.zeros(atom.N * basis.dim, complex)
    target[vacuum_index(basis, params.i0)] = 1.0
    vals, ovs = [], []
    for vt in varthetas:
        H = fiber_hamiltonian(grid, basis, atom, params.with_(theta=1j * vt))
        z, _, _, ov = eigen_near(H, E, target, k)
        vals.append(z)
        ovs.append(float(np.max(ov)))
    vals = np.array(vals)
    if len(vals) == 1:
        return DilationResult(complex(vals[0]), 0, 0.0, varthetas, vals, np.array(ovs))
    deriv = np.abs(np.gradient(vals, varthetas))
    inner = np.arange(1, len(vals) - 1) if len(vals) > 2 else np.arange(len(vals))
    i = int(inner[np.argmin(deriv[inner])])
    noise = float(np.max(np.abs(vals - vals[i])))
    floor = float(np.median(deriv)) if np.median(deriv) > 0 else 0.0
    if min(ovs) < 0.5:
        raise RuntimeError("no plateau found: the tracked eigenvector lost its overlap with the "
                           "unperturbed state; enlarge the basis")
    if floor > 0 and deriv[i] > 10 * floor:
        raise RuntimeError("no plateau found: enlarge the basis")
    return DilationResult(complex(vals[i]), i, noise, varthetas, vals, np.array(ovs), deriv)


def resonance_at(grid: ModeGrid, basis: FockBasis, atom: AtomSpec, params: ProblemParams, k: int = 8) -> complex:
    """Tracked eigenvalue at the parameter's own theta."""
    E = atom.energies[params.i0 - 1]
    target = np.zeros(atom.N * basis.dim, complex)
    target[vacuum_index(basis, params.i0)] = 1.0
    z, _, _, _ = eigen_near(fiber_hamiltonian(grid, basis, atom, params), E, target, k)
    return z


@dataclass
class PerturbationFit:
    lambdas: np.ndarray
    z: np.ndarray
    a_fit: complex
    a_ref: complex | None
    rel_error: float | None
    residual_exponent: float
    residuals: np.ndarray


def perturbation_fit(grid: ModeGrid, basis: FockBasis, atom: AtomSpec, params: ProblemParams,
                     lambda_list, a_ref: complex | None = None) -> PerturbationFit:
    """Fit z(lambda) = E_{i0} + a lambda^2 + higher order over the given couplings.

    a is the intercept of (z - E)/lambda^2 against lambda^2.  The residual
    exponent is the log-log slope of |z - E - a_ref lambda^2| (a_fit when no
    reference is given).
    """
    lams = np.sort(np.asarray(lambda_list, float))
    E = atom.energies[params.i0 - 1]
    zs = np.array([E if lam == 0 else resonance_at(grid, basis, atom, params.with_(lambda0=lam)) for lam in lams])
    pos = lams > 0
    x = lams[pos] ** 2
    y = (zs[pos] - E) / x
    if pos.sum() >= 2:
        A = np.vstack([np.ones_like(x), x]).T
        coef, *_ = np.linalg.lstsq(A, y, rcond=None)
        a_fit = complex(coef[0])
    else:
        a_fit = complex(y[0])
    a_use = a_fit if a_ref is None else a_ref
    res = np.abs(zs[pos] - E - a_use * x)
    good = res > 0
    if good.sum() >= 2:
        slope = np.polyfit(np.log(lams[pos][good]), np.log(res[good]), 1)[0]
    else:
        slope = np.inf
    rel = None if a_ref is None else float(abs(a_fit - a_ref) / abs(a_ref))
    return PerturbationFit(lams, zs, a_fit, a_ref, rel, float(slope), res)
