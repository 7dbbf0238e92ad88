"""Iterated smooth Feshbach decimation and the zeros z^(j) of the vacuum values.

The flow works on matrices.  For a spectral parameter z the chain

    H^(0)(z) = <psi_{i0}| F_{P_{i0} x chi_{rho_0}}(H_theta - z, H_theta0 - z) |psi_{i0}>  on {H_f <= rho_0},
    H^(j+1)(z) = F_{chi_{rho_{j+1}}}(H^(j)(z), T^(j)(z))                                    on {H_f <= rho_{j+1}},

is evaluated from scratch, T^(j) being the diagonal part of H^(j) (its (0,0)
Wick kernel plus the vacuum value).  After each Feshbach map the output is
reduced to Wick orders m + n <= M_max, which on the occupation basis is a fixed
entry mask.  E^(j)(z) = <Omega| H^(j)(z) Omega> and z^(j) is its zero near z^(j-1).
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .atommodel import AtomSpec, ProblemParams, dilated_interaction, fiber_hamiltonian, free_fiber_diagonal, vacuum_index
from .fockspace import FockBasis, ModeGrid, chi_pair, cosine_profile, sub_basis
from .kernels import (KernelFamily, assemble_monomial, decimate_matrix, decompose, evaluate_family, monomial_bound,
                      operator_norm, wick_table)
from .oracle import eigen_near


@dataclass(frozen=True)
class ScaleSchedule:
    """rho_j = rho_0^{(2 - eps)^j} and r_j = mu s rho_j / 32 with s = sin(vartheta).

    At vartheta = 0 (the ground state on the real axis) s is replaced by 1.
    """

    rho0: float
    eps: float
    mu: float
    s: float

    @classmethod
    def from_params(cls, params: ProblemParams) -> "ScaleSchedule":
        s = math.sin(params.vartheta) if params.vartheta > 0 else 1.0
        return cls(params.rho0, params.eps, params.mu, s)

    def rho(self, j: int) -> float:
        return self.rho0 ** ((2.0 - self.eps) ** j)

    def r(self, j: int) -> float:
        return self.mu * self.s * self.rho(j) / 32.0

    def rhos(self, n: int) -> list[float]:
        return [self.rho(j) for j in range(n)]

    def tail(self, j: int, terms: int = 60) -> float:
        """sum_{k > j} r_k / 2."""
        return float(sum(self.r(k) for k in range(j + 1, j + 1 + terms)) / 2.0)


@dataclass
class FlowOptions:
    l_max: int | None = 4  # Neumann depth, None for exact solves
    m_max: int | None = 2
    j_max: int = 12
    min_steps: int = 0
    tol_z: float | None = None
    n_contour: int = 16
    max_newton: int = 50
    profile: object = cosine_profile
    keep_families: bool = False


class FlowModel:
    """Matrices of one fiber problem and the evaluation of the Feshbach chain."""

    def __init__(self, grid: ModeGrid, basis: FockBasis, atom: AtomSpec, params: ProblemParams,
                 options: FlowOptions | None = None):
        if params.i0 > atom.N:
            raise ValueError(f"i0={params.i0} exceeds the number of levels {atom.N}")
        self.grid, self.basis, self.atom, self.params = grid, basis, atom, params
        self.opt = options or FlowOptions()
        self.schedule = ScaleSchedule.from_params(params)
        self.E0 = float(atom.energies[params.i0 - 1])
        self.tol_z = self.opt.tol_z or 1e-12 * max(1.0, abs(self.E0))
        D, N = basis.dim, atom.N
        self.D = D
        self.d_free = free_fiber_diagonal(basis, atom, params.p, params.theta)
        self.W = (params.lambda0 * dilated_interaction(grid, basis, atom, params.theta)).tocsr()
        # scales that still carry states besides the vacuum, plus the first vacuum-only scale
        self.subs = []
        j = 0
        while True:
            sub = sub_basis(basis, self.schedule.rho(j))
            self.subs.append(sub)
            if len(sub) == 1 or j > 60:
                break
            j += 1
        self.n_scales = len(self.subs)
        a0 = params.i0 - 1
        self.cols = a0 * D + self.subs[0]
        chi, _ = chi_pair(basis.h_f, params.rho0, self.opt.profile)
        p = np.zeros(N * D)
        p[a0 * D:(a0 + 1) * D] = chi
        self.p = p
        self.pbar = np.sqrt(np.clip(1.0 - p * p, 0.0, 1.0))
        self.bar = np.nonzero(self.pbar > 0)[0]
        Wc = self.W[:, self.cols]
        self.W_bar_cols = (Wc[self.bar] @ sp.diags(p[self.cols])).tocsr()
        self.W_cols_bar = (sp.diags(p[self.cols]) @ self.W[self.cols][:, self.bar]).tocsr()
        self.W_bar_bar = self.W[self.bar][:, self.bar].tocsr()
        self._W_bar_cols_dense = self.W_bar_cols.toarray()
        pc = p[self.cols]
        self.PWP = pc[:, None] * self.W[self.cols][:, self.cols].toarray() * pc[None, :]
        self.masks = [wick_table(basis, self.schedule.rho(j)).mask(self.opt.m_max) if len(self.subs[j]) > 1 else None
                      for j in range(self.n_scales)]

    # -- chain -------------------------------------------------------------

    def first_matrix(self, z: complex, exact: bool | None = None, mask: bool = True) -> np.ndarray:
        t = self.d_free - z
        pb = self.pbar[self.bar]
        F = self.PWP.copy()
        F[np.arange(len(self.cols)), np.arange(len(self.cols))] += t[self.cols]
        if self.W.nnz:
            exact = self.opt.l_max is None if exact is None else exact
            if exact:
                Hb = (sp.diags(t[self.bar]) + sp.diags(pb) @ self.W_bar_bar @ sp.diags(pb)).tocsc()
                Y = spla.splu(Hb).solve((pb[:, None] * self._W_bar_cols_dense).astype(complex))
                F -= self.W_cols_bar @ (pb[:, None] * Y)
            else:
                R = pb ** 2 / t[self.bar]
                Y = R[:, None] * self._W_bar_cols_dense
                acc = Y.copy()
                for L in range(3, self.opt.l_max + 1):
                    Y = R[:, None] * (self.W_bar_bar @ Y)
                    acc += (-1) ** L * Y
                F -= self.W_cols_bar @ acc
        if mask and self.masks[0] is not None:
            F *= self.masks[0]
        return F

    def step_matrix(self, H: np.ndarray, j: int, mask: bool = True, diagnostics: bool = False):
        """H^(j+1) from H^(j); returns (matrix, report)."""
        h_in = self.basis.h_f[self.subs[j]]
        l_max = self.opt.l_max
        F, rep = decimate_matrix(H, h_in, self.schedule.rho(j + 1), l_max=l_max, profile=self.opt.profile,
                                 mu=self.params.mu, mask=self.masks[j + 1] if mask else None,
                                 ratio=diagnostics)
        return F, rep

    def chain(self, z: complex, j: int) -> list[np.ndarray]:
        out = [self.first_matrix(z)]
        for k in range(j):
            out.append(self.step_matrix(out[-1], k)[0])
        return out

    def matrix(self, z: complex, j: int) -> np.ndarray:
        H = self.first_matrix(z)
        for k in range(j):
            H = self.step_matrix(H, k)[0]
        return H

    def energy(self, z: complex, j: int) -> complex:
        return complex(self.matrix(z, j)[0, 0])

    def can_step(self, j: int) -> bool:
        return j + 1 < self.n_scales


# -- zero finding ------------------------------------------------------------


@dataclass
class ZeroReport:
    z: complex
    center: complex
    radius: float
    winding: float
    phase_winding: int
    d_energy_center: complex
    d_energy_root: complex
    newton_iterations: int
    residual: float


def contour_data(f, center: complex, radius: float, n: int = 16):
    """Samples of f on the circle, the winding number by the trapezoid rule for f'/f
    (f' from the discrete Fourier series), the phase winding and f'(center)."""
    w = np.exp(2j * np.pi * np.arange(n) / n)
    zs = center + radius * w
    vals = np.array([f(z) for z in zs])
    coef = np.fft.fft(vals) / n  # a_k radius^k
    k = np.arange(n)
    dvals = np.array([np.sum(k[1:] * coef[1:] * w[i] ** (k[1:] - 1)) for i in range(n)]) / radius
    if np.any(vals == 0):
        return vals, np.nan, 0, coef[1] / radius
    winding = np.mean(dvals / vals * radius * w)
    ph = np.angle(np.roll(vals, -1) / vals)
    phase = int(round(np.sum(ph) / (2 * np.pi)))
    return vals, complex(winding), phase, complex(coef[1] / radius)


def find_zero(f, center: complex, radius: float, tol: float, n_contour: int = 16, max_iter: int = 50) -> ZeroReport:
    """Zero of a holomorphic f inside D(center, radius), certified by a winding count of one."""
    vals, winding, phase, d0 = contour_data(f, center, radius, n_contour)
    if not (abs(winding - 1) < 0.25 and phase == 1):
        raise RuntimeError(f"winding number {winding.real:.3f} (phase count {phase}) on |z - {center:.12g}| = "
                           f"{radius:.3e}: expected exactly one zero")
    z = complex(center)
    fz = f(z)
    d = d0
    it = 0
    while abs(fz) >= tol:
        if it >= max_iter:
            raise RuntimeError(f"Newton did not converge in {max_iter} iterations (|E| = {abs(fz):.3e})")
        if d == 0:
            raise RuntimeError("vanishing derivative in Newton iteration")
        z_new = z - fz / d
        f_new = f(z_new)
        if z_new != z:
            d = (f_new - fz) / (z_new - z)
        z, fz = z_new, f_new
        it += 1
    if abs(z - center) >= radius:
        raise RuntimeError(f"zero {z:.12g} left the search disk of radius {radius:.3e}")
    return ZeroReport(z, complex(center), radius, float(winding.real), phase, complex(d0), complex(d), it, float(abs(fz)))


# -- flow --------------------------------------------------------------------


@dataclass
class StepRecord:
    j: int
    rho: float
    r: float
    z: complex
    dz: float
    dz_ok: bool
    winding: float
    d_energy_center: complex
    d_energy_ok: bool
    newton_iterations: int
    w_ge1: float
    e_bound_max: float
    e_bound_limit: float
    e_bound_ok: bool
    nesting_ok: bool
    lower_bound: float
    drift: float | None
    dropped_mass: float
    neumann_ratio: float | None
    neumann_tail: float | None
    resolvent_margin: float | None
    half_norms: dict
    kernel_bound_violations: int
    kernel_bound_checked: int
    growth: float
    dim: int


@dataclass
class FlowRecord:
    steps: list = field(default_factory=list)
    z_inf: complex | None = None
    enclosure: float | None = None
    status: str = "running"
    error: str | None = None
    eigvec_residual: float | None = None
    eigvec_distance: float | None = None
    residual_history: list = field(default_factory=list)
    families: dict = field(default_factory=dict)

    @property
    def zs(self) -> np.ndarray:
        return np.array([s.z for s in self.steps])

    def to_dict(self) -> dict:
        def enc(x):
            if isinstance(x, complex):
                return {"re": x.real, "im": x.imag}
            if isinstance(x, dict):
                return {str(k): enc(v) for k, v in x.items()}
            if isinstance(x, (list, tuple)):
                return [enc(v) for v in x]
            if isinstance(x, (np.floating, np.integer, np.bool_)):
                x = x.item()
            if isinstance(x, float) and not math.isfinite(x):
                return str(x)
            return x
        d = {
            "status": self.status, "error": self.error, "z_inf": enc(self.z_inf), "enclosure": self.enclosure,
            "eigvec_residual": self.eigvec_residual, "eigvec_distance": self.eigvec_distance,
            "residual_history": enc(self.residual_history),
            "steps": [enc(asdict(s)) for s in self.steps],
        }
        return d

    @classmethod
    def from_dict(cls, d: dict, upto: int | None = None) -> "FlowRecord":
        """Rebuild the step list of a stored record (for resuming), optionally keeping steps j < upto."""
        def dec(x):
            if isinstance(x, dict) and set(x) == {"re", "im"}:
                return complex(x["re"], x["im"])
            if x in ("inf", "-inf", "nan"):
                return float(x)
            return x
        steps = []
        for s in d.get("steps", []):
            if upto is not None and s["j"] >= upto:
                break
            steps.append(StepRecord(**{k: dec(v) for k, v in s.items()}))
        return cls(steps=steps)


def _step_diagnostics(model: FlowModel, j: int, z: complex, H: np.ndarray, H_prev: np.ndarray | None) -> dict:
    basis = model.basis
    rho = model.schedule.rho(j)
    sub = model.subs[j]
    diag = np.diag(H)
    E = complex(diag[0])
    off = H - np.diag(diag)
    w_ge1 = operator_norm(off)
    hf = basis.h_f[sub]
    nz = hf > 0
    lower = float(np.min(np.abs(diag[nz] - E) / hf[nz])) if np.any(nz) else np.inf
    drift = None
    if H_prev is not None:
        k = len(sub)
        drift = float(np.max(np.abs(diag - np.diag(H_prev)[:k])))
    # kernel content of the stored (masked) matrix and of the unmasked one
    fam, _ = decompose(basis, rho, H, m_max=None)
    halfs, viol, checked, growth = {}, 0, 0, 0.0
    mu_s = model.params.mu * model.schedule.s
    for (m, n), k in fam.kernels.items():
        if m + n == 0 or len(k) == 0:
            continue
        b = monomial_bound(basis, k, rho)
        halfs[f"{m},{n}"] = b["half_norm"]
        if b["half_norm"] == 0:
            continue
        norm = operator_norm(assemble_monomial(basis, k, rho))
        checked += 1
        if norm > b["bound"] * (1 + 1e-10):
            viol += 1
        if j > 0:
            c = (b["half_norm"] * rho ** (m + n - 1) / mu_s) ** (1.0 / (j * (m + n)))
            growth = max(growth, c)
    return {"w_ge1": w_ge1, "lower_bound": lower, "drift": drift, "half_norms": halfs,
            "kernel_bound_violations": viol, "kernel_bound_checked": checked, "growth": growth, "family": fam}


def run_flow(grid: ModeGrid, basis: FockBasis, atom: AtomSpec, params: ProblemParams,
             options: FlowOptions | None = None, resume: FlowRecord | None = None,
             model: FlowModel | None = None, reconstruct: bool = True) -> FlowRecord:
    """Alternate zero finding and decimation until the interaction part vanishes or j_max.

    Errors abort the run; the partial record is returned with ``status='error'``.
    """
    model = model or FlowModel(grid, basis, atom, params, options)
    opt = model.opt
    sch = model.schedule
    rec = resume if resume is not None else FlowRecord()
    rec.status, rec.error = "running", None
    start = len(rec.steps)
    z_prev = rec.steps[-1].z if rec.steps else complex(model.E0)
    H_prev_at = None
    try:
        for j in range(start, opt.j_max + 1):
            r = sch.r(j)
            f = lambda z, j=j: model.energy(z, j)
            zr = find_zero(f, z_prev, 2.0 * r / 3.0, model.tol_z, opt.n_contour, opt.max_newton)
            z = zr.z
            chain = model.chain(z, j)
            H = chain[-1]
            diag = _step_diagnostics(model, j, z, H, chain[-2] if j > 0 else None)
            # vacuum value on the next disk, sampled at four points
            r_next = sch.r(j + 1)
            pts = z + (2.0 * r_next / 3.0) * np.exp(0.5j * np.pi * np.arange(4))
            e_max = max(abs(model.energy(q, j)) for q in pts)
            e_lim = model.params.mu * sch.rho(j + 1) / 16.0
            dz = abs(z - z_prev)
            d_lim = 0.25 if j == 0 else 0.5
            neu = tail = res_margin = None
            dropped = 0.0
            if model.can_step(j):
                F_un, rep = model.step_matrix(H, j, mask=False, diagnostics=True)
                neu, tail = rep.get("neumann_ratio"), rep.get("neumann_tail")
                res_margin = rep.get("min_resolvent_denominator")
                if res_margin is not None:
                    res_margin = res_margin - model.params.mu * sch.rho(j + 1) / 2
                _, dropped = decompose(basis, sch.rho(j + 1), F_un, m_max=opt.m_max)
            step = StepRecord(
                j=j, rho=sch.rho(j), r=r, z=complex(z), dz=float(dz), dz_ok=bool(dz < r / 2),
                winding=zr.winding, d_energy_center=zr.d_energy_center,
                d_energy_ok=bool(abs(zr.d_energy_center + 1) <= d_lim), newton_iterations=zr.newton_iterations,
                w_ge1=diag["w_ge1"], e_bound_max=float(e_max), e_bound_limit=float(e_lim),
                e_bound_ok=bool(e_max <= e_lim), nesting_ok=bool(dz + r_next <= r),
                lower_bound=diag["lower_bound"], drift=diag["drift"], dropped_mass=float(dropped),
                neumann_ratio=neu, neumann_tail=tail, resolvent_margin=res_margin,
                half_norms=diag["half_norms"], kernel_bound_violations=diag["kernel_bound_violations"],
                kernel_bound_checked=diag["kernel_bound_checked"], growth=diag["growth"], dim=len(model.subs[j]))
            rec.steps.append(step)
            if opt.keep_families:
                fam = diag["family"]
                rec.families[j] = fam
            z_prev = z
            scale = max(1.0, float(np.max(np.abs(np.diag(H)))))
            done = diag["w_ge1"] <= 1e-15 * scale and j + 1 >= opt.min_steps
            if done or not model.can_step(j):
                break
        rec.z_inf = complex(z_prev)
        rec.enclosure = sch.tail(len(rec.steps) - 1)
        rec.status = "converged"
        if reconstruct:
            psi, res, dist, hist = reconstruct_eigenvector(model, rec)
            rec.eigvec_residual, rec.eigvec_distance, rec.residual_history = res, dist, hist
    except (RuntimeError, ValueError, np.linalg.LinAlgError) as exc:
        rec.status = "error"
        rec.error = f"step {len(rec.steps)}: {exc}"
        if rec.steps:
            rec.z_inf = complex(rec.steps[-1].z)
    return rec


# -- eigenvector -------------------------------------------------------------


def _q_step(model: FlowModel, H: np.ndarray, j: int, phi: np.ndarray) -> np.ndarray:
    """Q_{chi_{rho_{j+1}}}(H^(j), T^(j)) phi with phi given on {H_f <= rho_{j+1}}."""
    h_in = model.basis.h_f[model.subs[j]]
    chi, chib = chi_pair(h_in, model.schedule.rho(j + 1), model.opt.profile)
    out = np.nonzero(h_in <= model.schedule.rho(j + 1) * (1 + 1e-14))[0]
    bar = np.nonzero(chib > 0)[0]
    v = np.zeros(len(h_in), complex)
    v[out] = chi[out] * phi
    if len(bar) == 0:
        return v
    t = np.diag(H)
    W = H - np.diag(t)
    Hb = np.diag(t[bar]) + chib[bar][:, None] * W[np.ix_(bar, bar)] * chib[bar][None, :]
    rhs = chib[bar] * (W[bar] @ v)
    y = np.linalg.solve(Hb, rhs)
    v[bar] -= chib[bar] * y
    return v


def _q_first(model: FlowModel, z: complex, phi: np.ndarray) -> np.ndarray:
    """Q_{P_{i0} x chi_{rho_0}}(H_theta - z, H_theta0 - z) applied to psi_{i0} x phi."""
    n = model.atom.N * model.D
    v = np.zeros(n, complex)
    v[model.cols] = model.p[model.cols] * phi
    bar = model.bar
    if len(bar) == 0 or model.W.nnz == 0:
        return v
    pb = model.pbar[bar]
    t = model.d_free - z
    Hb = (sp.diags(t[bar]) + sp.diags(pb) @ model.W_bar_bar @ sp.diags(pb)).tocsc()
    rhs = pb * (model.W[bar] @ v)
    y = spla.splu(Hb).solve(rhs.astype(complex))
    v[bar] -= pb * y
    return v


def reconstruct_eigenvector(model: FlowModel, rec: FlowRecord):
    """Psi = Q_0 Q_1 ... Q_J (psi_{i0} x Omega) at z_inf.

    Returns (Psi, relative residual of (H_theta - z_inf) Psi, ||Psi - psi_{i0} x Omega||,
    residual history over truncation depth).
    """
    z = rec.z_inf
    J = len(rec.steps) - 1
    chain = model.chain(z, J)
    H_full = fiber_hamiltonian(model.grid, model.basis, model.atom, model.params)
    ref = np.zeros(model.atom.N * model.D, complex)
    ref[vacuum_index(model.basis, model.params.i0)] = 1.0
    hist = []
    psi = None
    for depth in range(J + 1):
        phi = np.zeros(len(model.subs[depth]), complex)
        phi[0] = 1.0
        for j in range(depth - 1, -1, -1):
            phi = _q_step(model, chain[j], j, phi)
        v = _q_first(model, z, phi)
        res = float(np.linalg.norm(H_full @ v - z * v) / np.linalg.norm(v))
        hist.append(res)
        psi = v
    dist = float(np.linalg.norm(psi - ref))
    return psi, hist[-1], dist, hist


def nondegeneracy_check(grid: ModeGrid, basis: FockBasis, atom: AtomSpec, params: ProblemParams,
                        rec: FlowRecord, radius: float | None = None) -> dict:
    """Number of eigenvalues of H_theta(p) within the enclosure radius of z_inf."""
    if atom.N > 1 and atom.delta0 <= 0:
        return {"run": False, "reason": "degenerate atom"}
    rad = rec.enclosure if radius is None else radius
    rad = max(rad, 1e-12 * max(1.0, abs(rec.z_inf)))
    H = fiber_hamiltonian(grid, basis, atom, params)
    _, _, vals, _ = eigen_near(H, rec.z_inf, None, k=6)
    count = int(np.sum(np.abs(vals - rec.z_inf) <= rad))
    return {"run": True, "count": count, "radius": rad, "nearest": vals[np.argsort(np.abs(vals - rec.z_inf))[:3]].tolist(),
            "ok": count == 1}


# -- kernel-level API --------------------------------------------------------


def first_decimation(model: FlowModel, z: complex) -> KernelFamily:
    """H^(0)(z) as a kernel family at scale rho_0."""
    fam, _ = decompose(model.basis, model.params.rho0, model.first_matrix(z), m_max=model.opt.m_max)
    return fam


@dataclass
class RGState:
    j: int
    family: KernelFamily
    z_prev: complex
    diagnostics: dict = field(default_factory=dict)


def decimation_step(model: FlowModel, state: RGState, z: complex) -> RGState:
    """One decimation of a stored family: H^(j+1) = F_{chi_{rho_{j+1}}}(H^(j), T^(j)) in kernel form."""
    j = state.j
    if not model.can_step(j):
        raise ValueError(f"no states left below rho_{j + 1}")
    H = evaluate_family(model.basis, state.family)
    F, rep = model.step_matrix(H, j, diagnostics=True)
    fam, dropped = decompose(model.basis, model.schedule.rho(j + 1), F, m_max=model.opt.m_max)
    rep["dropped_mass"] = dropped
    return RGState(j + 1, fam, z, rep)
