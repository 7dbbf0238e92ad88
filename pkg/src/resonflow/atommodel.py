"""Atomic data and the dilated fiber Hamiltonian on C^N (x) Fock.

Levels are indexed naturally: psi_j is the j-th unit vector and carries the
energy E_j, with E_1 < ... < E_N.  Composite indices are atom-major,
``a * basis.dim + s``.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
import scipy.sparse as sp

from .fockspace import FockBasis, ModeGrid


@dataclass(frozen=True, eq=False)
class AtomSpec:
    energies: np.ndarray
    dipoles: np.ndarray  # shape (3, N, N)

    def __post_init__(self):
        e = np.asarray(self.energies, float).ravel()
        d = np.asarray(self.dipoles, complex)
        object.__setattr__(self, "energies", e)
        object.__setattr__(self, "dipoles", d)
        if len(e) < 1:
            raise ValueError("need at least one level")
        if np.any(np.diff(e) <= 0):
            raise ValueError("energies must be strictly increasing")
        if d.shape != (3, len(e), len(e)):
            raise ValueError(f"dipoles must have shape (3, {len(e)}, {len(e)})")
        for i in range(3):
            if not np.allclose(d[i], d[i].conj().T, atol=1e-12):
                raise ValueError(f"d^{i + 1} is not hermitian")
            norm = np.linalg.norm(d[i], 2)
            if norm > 1 + 1e-10:
                raise ValueError(f"||d^{i + 1}|| = {norm:.6g} exceeds 1")

    @property
    def N(self) -> int:
        return len(self.energies)

    @property
    def delta0(self) -> float:
        if self.N < 2:
            return np.inf
        return float(np.min(np.diff(self.energies)))

    def coupling(self, eps: np.ndarray) -> np.ndarray:
        """eps . d for each row of eps, shape (M, N, N)."""
        return np.einsum("mc,cab->mab", eps, self.dipoles)


def two_level_atom(gap: float = 1.0, coupling: str = "sigma_x") -> AtomSpec:
    """E = (0, gap) with d^1 = d^2 = d^3 = sigma_x, sigma_z or zero."""
    mats = {
        "sigma_x": np.array([[0, 1], [1, 0]], complex),
        "sigma_z": np.array([[1, 0], [0, -1]], complex),
        "zero": np.zeros((2, 2), complex),
    }
    d = mats[coupling]
    return AtomSpec(np.array([0.0, gap]), np.stack([d, d, d]))


@dataclass(frozen=True, eq=False)
class ProblemParams:
    lambda0: float
    theta: complex
    p: np.ndarray
    p_star: np.ndarray
    rho0: float
    eps: float = 0.5
    i0: int = 1
    mu: float = field(init=False)

    def __post_init__(self):
        p = np.asarray(self.p, complex).ravel()
        ps = np.asarray(self.p_star, float).ravel()
        object.__setattr__(self, "p", p)
        object.__setattr__(self, "p_star", ps)
        object.__setattr__(self, "theta", complex(self.theta))
        if p.shape != (3,) or ps.shape != (3,):
            raise ValueError("p and p_star must be 3-vectors")
        if self.lambda0 < 0:
            raise ValueError("lambda0 must be nonnegative")
        if not np.linalg.norm(ps) < 1:
            raise ValueError("|p_star| must be < 1")
        if not 0 < self.rho0 < 1:
            raise ValueError("rho0 must lie in (0, 1)")
        if not 0 < self.eps < 1:
            raise ValueError("eps must lie in (0, 1)")
        if self.i0 < 1:
            raise ValueError("i0 is 1-based")
        object.__setattr__(self, "mu", (1.0 - float(np.linalg.norm(ps))) / 2.0)

    @property
    def vartheta(self) -> float:
        return self.theta.imag

    def with_(self, **changes) -> "ProblemParams":
        return replace(self, **changes)


def default_params(atom: AtomSpec, lambda0: float, vartheta: float = np.pi / 8, p=None,
                   p_star=(0.0, 0.0, 0.5), i0: int | None = None, rho0: float | None = None,
                   eps: float = 0.5) -> ProblemParams:
    """Parameter bundle with the default initial scale rho0 = 0.5 min(1, delta0)."""
    if rho0 is None:
        rho0 = 0.5 * min(1.0, atom.delta0)
    if p is None:
        p = p_star
    if i0 is None:
        i0 = atom.N
    return ProblemParams(lambda0, 1j * vartheta, np.asarray(p, complex), np.asarray(p_star, float),
                         rho0, eps, i0)


def domain_check(params: ProblemParams, atom: AtomSpec | None = None, sigma: float = 1.0) -> dict:
    """Membership p in U_theta[p*] and the hypothesis margins of the first Feshbach step.

    Diagnostics only; nothing is enforced here.
    """
    mu = params.mu
    vt = params.vartheta
    dist = float(np.linalg.norm(params.p - params.p_star))
    im_p = float(np.linalg.norm(params.p.imag))
    im_bound = 0.5 * mu * np.tan(vt)
    out = {
        "mu": mu,
        "dist_p_pstar": dist,
        "im_p": im_p,
        "im_p_bound": im_bound,
        "vartheta_ok": bool(0 < vt < np.pi / 4 and params.theta.real == 0),
    }
    out["in_domain"] = bool(dist < mu and im_p < im_bound and out["vartheta_ok"])
    if atom is not None:
        out["delta0"] = atom.delta0
        out["rho0_margin"] = min(1.0, atom.delta0) - params.rho0
        # lambda0 has to be small against sigma^{-3/2} rho0^{1/2} mu sin(vartheta)
        scale = sigma ** -1.5 * np.sqrt(params.rho0) * mu * np.sin(vt)
        out["coupling_scale"] = scale
        out["coupling_ratio"] = params.lambda0 / scale if scale > 0 else np.inf
        out["coupling_margin"] = 1.0 - out["coupling_ratio"]
    return out


def free_diagonal(basis: FockBasis, p: np.ndarray, theta: complex) -> np.ndarray:
    """Field part e^{-theta}(H_f - p.P_f) + e^{-2 theta} P_f^2 / 2 on each Fock state."""
    et = np.exp(-theta)
    pf = basis.p_f
    return et * (basis.h_f - pf @ np.asarray(p, complex)) + et * et * np.sum(pf * pf, axis=1) / 2.0


def interaction_fock_blocks(grid: ModeGrid, basis: FockBasis, atom: AtomSpec, theta: complex):
    """Per-mode atom matrices and Fock transition lists of the dilated interaction.

    Returns (src, dst, coeff) with coeff of shape (len(src), N, N): the matrix
    element <a, dst| H_I |b, src> of the annihilation part is coeff[t, a, b];
    the creation part has <a, src| H_I |b, dst> = -coeff[t, a, b].
    """
    if basis.grid is not grid:
        raise ValueError("basis was built on a different grid")
    src, dst, mode, amp = basis.removal_table
    g = 1j * np.exp(-2 * theta) * grid.weight * np.sqrt(grid.absk) * grid.cutoff(theta)
    cpl = atom.coupling(grid.eps)
    coeff = (g[mode] * amp)[:, None, None] * cpl[mode]
    return src, dst, coeff


def dilated_interaction(grid: ModeGrid, basis: FockBasis, atom: AtomSpec, theta: complex) -> sp.csr_matrix:
    """H_{I,theta} as a sparse matrix on C^N (x) Fock."""
    src, dst, coeff = interaction_fock_blocks(grid, basis, atom, theta)
    D, N = basis.dim, atom.N
    rows, cols, vals = [], [], []
    for a in range(N):
        for b in range(N):
            c = coeff[:, a, b]
            nz = c != 0
            if not np.any(nz):
                continue
            rows += [a * D + dst[nz], a * D + src[nz]]
            cols += [b * D + src[nz], b * D + dst[nz]]
            vals += [c[nz], -c[nz]]
    if not rows:
        return sp.csr_matrix((N * D, N * D), dtype=complex)
    return sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                         shape=(N * D, N * D))


def free_fiber_diagonal(basis: FockBasis, atom: AtomSpec, p, theta: complex) -> np.ndarray:
    f = free_diagonal(basis, p, theta)
    return np.concatenate([e + f for e in atom.energies])


def free_fiber_hamiltonian(grid: ModeGrid, basis: FockBasis, atom: AtomSpec, params: ProblemParams) -> sp.csr_matrix:
    """H_{theta,0}(p): diagonal on C^N (x) Fock."""
    if basis.grid is not grid:
        raise ValueError("basis was built on a different grid")
    return sp.diags(free_fiber_diagonal(basis, atom, params.p, params.theta)).tocsr()


def fiber_hamiltonian(grid: ModeGrid, basis: FockBasis, atom: AtomSpec, params: ProblemParams) -> sp.csr_matrix:
    """H_theta(p) = H_{theta,0}(p) + lambda0 H_{I,theta}."""
    h0 = free_fiber_hamiltonian(grid, basis, atom, params)
    if params.lambda0 == 0:
        return h0
    return (h0 + params.lambda0 * dilated_interaction(grid, basis, atom, params.theta)).tocsr()


def vacuum_index(basis: FockBasis, level: int) -> int:
    """Composite index of psi_level (x) Omega, level 1-based."""
    return (level - 1) * basis.dim


def relative_form_bound(grid: ModeGrid, basis: FockBasis, atom: AtomSpec, theta: complex, rho: float) -> float:
    """||(H_f + rho)^{-1/2} H_I (H_f + rho)^{-1/2}|| on the truncated space."""
    hi = dilated_interaction(grid, basis, atom, theta)
    s = np.tile(1.0 / np.sqrt(basis.h_f + rho), atom.N)
    m = sp.diags(s) @ hi @ sp.diags(s)
    m = m.toarray()
    return float(np.linalg.norm(m, 2))
