"""Second-order level shift, the residue formula for its imaginary part, and the
leading-order Feshbach operator.

With c = 1 - p.khat and Delta_j = E_{i0} - E_j the decay pole of channel j in
direction khat sits at r_j = -c + sqrt(c^2 + 2 Delta_j), and

    Im z_od = pi sum_{j < i0} sum_{khat, helicity} w_dir r_j^3 exp(-r_j^2 / sigma^2)
              |<psi_j| eps.d |psi_{i0}>|^2 / sqrt(2 Delta_j + c^2).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .atommodel import AtomSpec, ProblemParams, free_diagonal
from .fockspace import FockBasis, ModeGrid, chi_pair, direction_rule, polarizations, sub_basis
from .rgflow import FlowModel, FlowOptions


@dataclass
class LevelShift:
    z_d: complex
    z_od: complex
    im_zod_residue: float
    pole_radii: list = field(default_factory=list)
    z_d_rotated: complex | None = None


def _shift_integrand(grid: ModeGrid, atom: AtomSpec, p, theta: complex, i0: int, with_od: bool = True):
    """Per-mode contributions (diagonal part, off-diagonal part) of w w01 R w10 at z = E_{i0}."""
    a = i0 - 1
    et = np.exp(-theta)
    k = grid.k
    free = et * (grid.absk - k @ np.asarray(p, complex)) + et * et * np.sum(k * k, axis=1) / 2.0
    amp = grid.weight * et ** 4 * grid.cutoff(theta) ** 2 * grid.absk
    cpl = atom.coupling(grid.eps)  # (M, N, N)
    mel2 = np.abs(cpl[:, :, a]) ** 2  # |<psi_j| eps.d |psi_i0>|^2
    gaps = atom.energies - atom.energies[a]
    den = gaps[None, :] + free[:, None]
    diag = amp * mel2[:, a] / free
    others = np.delete(np.arange(atom.N), a)
    if len(others) == 0 or not with_od:
        return diag, np.zeros_like(diag)
    if np.any(np.abs(den[:, others]) < 1e-10):
        raise ValueError("resolvent denominator within 1e-10 of zero at a grid node; shift the grid")
    od = amp * np.sum(mel2[:, others] / den[:, others], axis=1)
    return diag, od


def pole_radius(delta: float, c) -> np.ndarray:
    """Positive root of r^2/2 + c r - delta = 0."""
    c = np.asarray(c, float)
    return -c + np.sqrt(c * c + 2.0 * delta)


def im_zod_residue(atom: AtomSpec, params: ProblemParams, directions=None, dir_weights=None,
                   sigma: float = 1.0) -> float:
    """Im z_od from the residues of the decay poles, angular sum on the given direction rule."""
    if directions is None:
        directions, dir_weights = direction_rule(6)
    directions = np.asarray(directions, float)
    dir_weights = np.asarray(dir_weights, float)
    a = params.i0 - 1
    if a == 0:
        return 0.0
    p = np.asarray(params.p).real
    c = 1.0 - directions @ p
    e1, e2 = polarizations(directions)
    total = 0.0
    for j in range(a):
        delta = atom.energies[a] - atom.energies[j]
        r = pole_radius(delta, c)
        jac = np.sqrt(2.0 * delta + c * c)
        for eps in (e1, e2):
            mel2 = np.abs(atom.coupling(eps)[:, j, a]) ** 2
            total += np.sum(dir_weights * r ** 3 * np.exp(-r ** 2 / sigma ** 2) * mel2 / jac)
    return float(np.pi * total)


def pole_radii(atom: AtomSpec, params: ProblemParams, directions=None) -> list:
    if directions is None:
        directions, _ = direction_rule(6)
    p = np.asarray(params.p).real
    c = 1.0 - np.asarray(directions) @ p
    a = params.i0 - 1
    return [pole_radius(atom.energies[a] - atom.energies[j], c) for j in range(a)]


def grid_directions(grid: ModeGrid) -> tuple[np.ndarray, np.ndarray]:
    """Distinct unit directions of a product grid with their angular weights."""
    khat = grid.k / grid.absk[:, None]
    keys = np.round(khat, 12)
    uniq, idx = np.unique(keys, axis=0, return_index=True)
    idx = np.sort(idx)
    dirs = khat[idx]
    # angular weight = mode weight / (radial weight r^2), identical across shells of a product grid
    n_dir = len(dirs)
    try:
        d_ref, w_ref = direction_rule(n_dir)
    except ValueError:
        return dirs, np.full(n_dir, 4 * np.pi / n_dir)
    w = np.array([w_ref[np.argmin(np.linalg.norm(d_ref - d, axis=1))] for d in dirs])
    return dirs, w


def zd_zod(grid: ModeGrid, atom: AtomSpec, params: ProblemParams) -> LevelShift:
    """z_d and z_od by quadrature on the (rotated) mode grid.

    z_od is evaluated at the parameter's theta, where the decay poles are off
    the rotated radial contour.  z_d has no pole on the positive axis and is
    independent of theta, so it is evaluated at theta = 0, which makes it real
    by construction; the rotated value is kept for comparison.
    """
    theta = params.theta
    diag, od = _shift_integrand(grid, atom, params.p, theta, params.i0)
    z_od = complex(np.sum(od))
    z_d_rot = complex(np.sum(diag))
    diag0, _ = _shift_integrand(grid, atom, np.asarray(params.p).real, 0.0, params.i0, with_od=False)
    z_d = complex(np.sum(diag0))
    dirs, wd = grid_directions(grid)
    res = im_zod_residue(atom, params, dirs, wd, grid.uv_sigma)
    return LevelShift(z_d, z_od, res, pole_radii(atom, params, dirs), z_d_rot)


def fgr_condition(atom: AtomSpec, params: ProblemParams, directions=None, dir_weights=None,
                  sigma: float = 1.0, threshold: float = 1e-12) -> tuple[float, bool]:
    """Golden-rule decay integral (Im z_od / pi by the residue reduction) and whether it is positive."""
    value = im_zod_residue(atom, params, directions, dir_weights, sigma) / np.pi
    return value, bool(value > threshold)


def _sin2_mu2_delta(atom: AtomSpec, params: ProblemParams, sigma: float) -> float:
    s = np.sin(params.vartheta) if params.vartheta > 0 else 1.0
    return sigma ** 4.5 / (s * s * params.mu ** 2 * min(1.0, atom.delta0 ** 2))


def remainder_budget(atom: AtomSpec, params: ProblemParams, C: float, sigma: float = 1.0) -> float:
    """C lambda^{2 + 3/5} sigma^{9/2} / (sin^2 vartheta mu^2 min(1, delta0^2))."""
    return float(C * params.lambda0 ** 2.6 * _sin2_mu2_delta(atom, params, sigma))


def leading_params(params: ProblemParams) -> ProblemParams:
    """The parameters with rho0 = lambda^{4/5}, the scale of the one-step analysis."""
    if params.lambda0 == 0:
        return params
    return params.with_(rho0=min(params.lambda0 ** 0.8, 0.999))


def leading_feshbach(grid: ModeGrid, basis: FockBasis, atom: AtomSpec, params: ProblemParams,
                     shift: LevelShift | None = None, C: float = 1.0, sigma: float | None = None):
    """Diagonal normal operator H_L on {H_f <= rho0} and the remainder budget.

    H_L = E_{i0} - lambda^2 (Re z_od + z_d) chi^2 - i lambda^2 Im z_od chi^2
          + e^{-theta} H_f + e^{-2 theta} P_f^2 / 2 - e^{-theta} p.P_f,
    with rho0 = lambda^{4/5} and chi = chi_{rho0}(H_f).  Returns (H_L, budget, info).
    """
    sigma = grid.uv_sigma if sigma is None else sigma
    lp = leading_params(params)
    sub = sub_basis(basis, lp.rho0)
    E = float(atom.energies[params.i0 - 1])
    if shift is None:
        shift = zd_zod(grid, atom, params)
    lam2 = params.lambda0 ** 2
    chi, _ = chi_pair(basis.h_f[sub], lp.rho0)
    free = free_diagonal(basis, params.p, params.theta)[sub]
    z_re = shift.z_od.real + shift.z_d.real
    diag = E - lam2 * z_re * chi ** 2 - 1j * lam2 * shift.z_od.imag * chi ** 2 + free
    budget = remainder_budget(atom, params, C, sigma) if params.lambda0 > 0 else 0.0
    small = params.lambda0 ** 0.6 * _sin2_mu2_delta(atom, params, sigma) ** -1 if params.lambda0 > 0 else 0.0
    info = {"rho0": lp.rho0, "dim": len(sub), "sub": sub, "margin_ratio": float(small), "C": C,
            "shift": shift}
    return np.diag(diag), budget, info


def remainder_norm(grid: ModeGrid, basis: FockBasis, atom: AtomSpec, params: ProblemParams,
                   z: complex | None = None, shift: LevelShift | None = None, l_max: int | None = None) -> dict:
    """Size of Rem = H^(0)(z) - (H_L - z) at rho0 = lambda^{4/5}.

    ``vacuum`` is |<Omega| Rem Omega>|; ``operator`` is the spectral norm.  On a
    truncated Fock basis the dressed one-photon states miss most of their own
    self-energy (their two-photon intermediate states are cut by the basis), so
    the operator norm carries a truncation term of size lambda^2 |z_od| that the
    vacuum entry does not.
    """
    lp = leading_params(params)
    z = float(atom.energies[params.i0 - 1]) if z is None else z
    model = FlowModel(grid, basis, atom, lp, FlowOptions(l_max=l_max, m_max=None))
    H0 = model.first_matrix(z, mask=False)
    HL, _, _ = leading_feshbach(grid, basis, atom, params, shift)
    rem = H0 - (HL - z * np.eye(len(HL)))
    return {"vacuum": float(abs(rem[0, 0])), "operator": float(np.linalg.norm(rem, 2))}


def calibrate_remainder_constant(grid: ModeGrid, basis: FockBasis, atom: AtomSpec, params: ProblemParams,
                                 lambdas=(3e-3, 1e-2, 3e-2)) -> dict:
    """Empirical constant C of the remainder budget: max over lambda of |<Omega| Rem Omega>| / budget(C = 1).

    The value is a fit to this discretization, not a proven constant.  The
    operator-norm ratios are reported alongside.
    """
    ratios, op_ratios, norms = [], [], []
    for lam in lambdas:
        p = params.with_(lambda0=float(lam))
        shift = zd_zod(grid, atom, p)
        r = remainder_norm(grid, basis, atom, p, shift=shift)
        unit = remainder_budget(atom, p, 1.0, grid.uv_sigma)
        norms.append(r)
        ratios.append(r["vacuum"] / unit)
        op_ratios.append(r["operator"] / unit)
    return {"C": float(max(ratios)), "lambdas": list(map(float, lambdas)), "norms": norms,
            "ratios": ratios, "operator_ratios": op_ratios, "status": "fitted"}


@dataclass
class WidthCertificate:
    degenerate: bool
    fgr_value: float
    fgr_holds: bool
    threshold: float | None = None
    invertible: bool | None = None
    min_singular: float | None = None
    resolvent_bound_ok: bool | None = None
    im_z_inf: float | None = None
    width_negative: bool | None = None
    deviation: float | None = None
    budget: float | None = None
    margin: float | None = None
    C: float | None = None
    notes: list = field(default_factory=list)


def width_certificate(grid: ModeGrid, basis: FockBasis, atom: AtomSpec, params: ProblemParams,
                      C: float | None = None, im_z_inf: float | None = None, n_samples: int = 9) -> WidthCertificate:
    """Numerical check of the width argument of the one-step analysis.

    For Im z above lambda^2 [C lambda^{3/5} sigma^{9/2} / (sin^2 vartheta mu^2 min(1, delta0^2)) - Im z_od]
    the first Feshbach operator at rho0 = lambda^{4/5} must be invertible; if that
    threshold is negative the resonance has Im z < 0.  C defaults to the fitted value.
    """
    value, holds = fgr_condition(atom, params, *grid_directions(grid), sigma=grid.uv_sigma)
    if params.lambda0 == 0:
        return WidthCertificate(True, value, holds, notes=["lambda0 = 0: no width"])
    if not holds:
        return WidthCertificate(True, value, holds, notes=["golden-rule condition fails: no width predicted"])

    if C is None:
        C = calibrate_remainder_constant(grid, basis, atom, params)["C"]
    shift = zd_zod(grid, atom, params)
    lam2 = params.lambda0 ** 2
    budget = remainder_budget(atom, params, C, grid.uv_sigma)
    threshold = budget - lam2 * shift.im_zod_residue
    cert = WidthCertificate(False, value, holds, threshold=float(threshold), C=float(C), budget=float(budget),
                            margin=float(-threshold))
    lp = leading_params(params)
    model = FlowModel(grid, basis, atom, lp, FlowOptions(l_max=None, m_max=None))
    HL, _, _ = leading_feshbach(grid, basis, atom, params, shift)
    E = float(atom.energies[params.i0 - 1])
    # sample points with Im z just above the threshold, across the first disk
    r0 = params.mu * np.sin(params.vartheta) * lp.rho0 / 32
    im = threshold + 0.5 * abs(threshold)
    zs = E + np.linspace(-r0, r0, n_samples) + 1j * im
    smin = np.inf
    res_ok = True
    for z in zs:
        s = np.linalg.svd(model.first_matrix(z, mask=False), compute_uv=False)
        smin = min(smin, float(s[-1] / s[0]))
        d = HL - z * np.eye(len(HL))
        inv_norm = 1.0 / np.min(np.abs(np.diag(d)))
        bound = 1.0 / abs(z.imag + lam2 * shift.z_od.imag)
        res_ok &= bool(inv_norm <= bound * (1 + 1e-12))
    cert.min_singular = smin
    cert.invertible = bool(smin > 1e-12)
    cert.resolvent_bound_ok = res_ok
    if threshold >= 0:
        cert.notes.append("remainder budget exceeds lambda^2 Im z_od: no sign conclusion")
    if im_z_inf is not None:
        cert.im_z_inf = float(im_z_inf)
        cert.width_negative = bool(im_z_inf < 0)
        cert.deviation = float(abs(im_z_inf + lam2 * shift.im_zod_residue))
    return cert
